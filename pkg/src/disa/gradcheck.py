"""Central finite-difference checks for every primitive and every composite loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4

Fn = Callable[[list[Tensor]], Tensor]


@dataclass
class GradcheckRow:
    name: str
    cases: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def analytic_gradient(fn: Fn, arrays: list[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(fn(leaves))
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]


def numerical_gradient(fn: Fn, arrays: list[np.ndarray], step: float = STEP) -> list[np.ndarray]:
    """Central differences, one coordinate at a time, evaluated without graph recording."""
    grads = []
    with T.no_grad():
        for k, base in enumerate(arrays):
            g = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                args = [a.copy() for a in arrays]
                args[k][idx] = base[idx] + step
                up = float(fn([Tensor(a) for a in args]).data)
                args[k][idx] = base[idx] - step
                down = float(fn([Tensor(a) for a in args]).data)
                g[idx] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-8))


def _weighted(op: Callable[..., Tensor], out_shape_probe: Callable[[list[np.ndarray]], tuple], rng):
    """Reduce a tensor-valued primitive to a scalar with fixed random weights."""
    def make(arrays):
        w = rng.normal(size=out_shape_probe(arrays))
        return lambda ts: T.sum_(T.mul(op(*ts), w))
    return make


def _probe(op):
    def shape(arrays):
        with T.no_grad():
            return op(*[Tensor(a) for a in arrays]).shape
    return shape


def _primitive_cases() -> dict[str, tuple[Callable, Callable]]:
    """name -> (input generator, tensor op)."""
    def pos(rng, *shape):
        return rng.uniform(0.5, 2.0, shape)

    def away(rng, *shape):
        x = rng.uniform(0.2, 2.0, shape)
        return x * rng.choice([-1.0, 1.0], shape)

    return {
        "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], T.add),
        "sub": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))], T.sub),
        "mul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))], T.mul),
        "scale": (lambda r: [r.normal(size=(5,))], lambda a: T.scale(a, -2.5)),
        "matmul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], T.matmul),
        "matmul-batched": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3))], T.matmul),
        "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: T.transpose(a, (1, 0, 2))),
        "reshape": (lambda r: [r.normal(size=(2, 6))], lambda a: T.reshape(a, (3, 4))),
        "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: T.concat([a, b], axis=1)),
        "slice": (lambda r: [r.normal(size=(3, 5))], lambda a: a[1:, ::2]),
        "mean": (lambda r: [r.normal(size=(3, 4))], lambda a: T.mean(a, axis=1)),
        "sum": (lambda r: [r.normal(size=(3, 4))], lambda a: T.sum_(a, axis=0, keepdims=True)),
        "exp": (lambda r: [r.normal(size=(4,))], T.exp),
        "log": (lambda r: [pos(r, 4)], T.log),
        "sqrt": (lambda r: [pos(r, 4)], T.sqrt),
        "power": (lambda r: [pos(r, 4)], lambda a: T.power(a, -0.5)),
        "gelu": (lambda r: [r.normal(size=(6,)) * 2], T.gelu),
        "layer_norm": (lambda r: [r.normal(size=(2, 6))], T.layer_norm),
        "embedding": (lambda r: [r.normal(size=(5, 3))], lambda a: T.embedding(a, [[0, 4], [4, 2]])),
        "softmax": (lambda r: [r.normal(size=(2, 5))], lambda a: T.softmax(a, axis=-1, temperature=0.7)),
        "abs": (lambda r: [away(r, 5)], T.abs_),
        "clamp_min": (lambda r: [away(r, 5)], lambda a: T.clamp_min(a, 0.0)),
    }


def _tagged(value: Tensor, view: str, image: str = "full") -> L.Feature:
    return L.Feature(value, view, image)


def _loss_cases() -> dict[str, tuple[Callable, Fn]]:
    """name -> (input generator, scalar loss over tensors)."""
    tau = 0.5

    def simplex(r, n):
        p = r.uniform(0.1, 1.0, n)
        return np.log(p)                  # logits; the loss softmaxes them

    def cos_kl(ts):
        p = T.softmax(ts[0])
        q = T.softmax(ts[1])
        return T.kl_divergence(p, q)

    def ce(ts):
        q = L.score_vector(_tagged(ts[0], "prompted"), _tagged(ts[1], "prompted", "text"))
        return L.ce_loss(q, [1, 3], tau)

    def cir(ts):
        a = L.score_vector(_tagged(ts[0], "prompted", "masked"), _tagged(ts[3], "frozen", "text"))
        b = L.score_vector(_tagged(ts[2], "frozen"), _tagged(ts[1], "prompted", "text"))
        return L.cir_loss(a, b, tau)

    def sr(ts):
        a = L.score_vector(_tagged(ts[0], "prompted"), _tagged(ts[1], "prompted", "text"))
        b = L.score_vector(_tagged(ts[2], "frozen"), _tagged(ts[3], "frozen", "text"))
        return L.sr_loss(a, b, tau)

    def total(ts):
        f, g, fo, go = ts
        q_pp = L.score_vector(_tagged(f, "prompted"), _tagged(g, "prompted", "text"))
        q_oo = L.score_vector(_tagged(fo, "frozen"), _tagged(go, "frozen", "text"))
        q_po = L.score_vector(_tagged(f, "prompted", "masked"), _tagged(go, "frozen", "text"))
        q_op = L.score_vector(_tagged(fo, "frozen"), _tagged(g, "prompted", "text"))
        rep = L.total_loss(L.ce_loss(q_pp, [0, 2], tau), L.sr_loss(q_pp, q_oo, tau),
                           L.cir_loss(q_po, q_op, tau), L.dir_loss(f, fo), 12.0)
        return rep.objective

    feats = lambda r: [r.normal(size=(2, 6)), r.normal(size=(4, 6)), r.normal(size=(2, 6)), r.normal(size=(4, 6))]
    return {
        "cosine_similarity": (lambda r: [r.normal(size=(6,)), r.normal(size=(6,))],
                              lambda ts: T.cosine_similarity(ts[0], ts[1])),
        "kl_divergence": (lambda r: [simplex(r, 8), simplex(r, 8)], cos_kl),
        "ce_loss": (lambda r: [r.normal(size=(2, 6)), r.normal(size=(4, 6))], ce),
        "cir_loss": (feats, cir),
        "sr_loss": (feats, sr),
        "dir_loss": (lambda r: [r.normal(size=(3, 6)), r.normal(size=(3, 6))], lambda ts: L.dir_loss(ts[0], ts[1])),
        "align_norm": (lambda r: [r.normal(size=(3, 6)), r.normal(size=(3, 6))],
                       lambda ts: L.alignment_variant_loss(ts[0], ts[1], "norm")),
        "align_mse": (lambda r: [r.normal(size=(3, 6)), r.normal(size=(3, 6))],
                      lambda ts: L.alignment_variant_loss(ts[0], ts[1], "mse")),
        "total_loss": (feats, total),
    }


def check(name: str, gen: Callable, fn_factory: Callable, cases: int, rng: np.random.Generator) -> GradcheckRow:
    start = time.perf_counter()
    worst = 0.0
    for _ in range(cases):
        arrays = gen(rng)
        fn = fn_factory(arrays)
        worst = max(worst, relative_error(analytic_gradient(fn, arrays), numerical_gradient(fn, arrays)))
    return GradcheckRow(name, cases, worst, time.perf_counter() - start)


def encoder_prompt_check(cases: int, rng: np.random.Generator) -> GradcheckRow:
    """Directional derivative of the full training objective w.r.t. all prompt tokens of a tiny encoder."""
    from .encoders import DualEncoder, EncoderConfig, PromptBank
    from .data import all_class_names

    start = time.perf_counter()
    cfg = EncoderConfig(d=8, layers=2, heads=2)
    enc = DualEncoder(cfg, seed=1)
    names = dict((c, n) for c, n, _ in all_class_names()[:3])
    enc.register_classes(names)
    enc.freeze()
    classes = sorted(names)
    worst = 0.0
    for _ in range(cases):
        bank = PromptBank.init(enc, 2, 2, depth=2, rng=rng, std=0.5)
        images = rng.uniform(0, 1, (2, cfg.patches, cfg.patch_dim))
        keep = np.ones((2, cfg.patches), bool)
        keep[:, :3] = False
        params = bank.parameters()

        def loss():
            f = enc.encode_images(images, bank)
            fm = enc.encode_images(images, bank, keep)
            g = enc.encode_texts(classes, bank)
            return T.add(T.sum_(T.mul(T.cosine_matrix(f, g), 1.3)), T.sum_(T.cosine_matrix(fm, g)))

        T.backward(loss())
        direction = [rng.normal(size=p.shape) for p in params]
        analytic = sum(float((p.grad * u).sum()) for p, u in zip(params, direction))
        base = [p.data.copy() for p in params]
        values = []
        with T.no_grad():
            for sign in (1.0, -1.0):
                for p, b, u in zip(params, base, direction):
                    p.data = b + sign * STEP * u
                values.append(float(loss().data))
        for p, b in zip(params, base):
            p.data = b
        numeric = (values[0] - values[1]) / (2 * STEP)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    return GradcheckRow("encoder_prompts", cases, worst, time.perf_counter() - start)


def gradcheck(cases: int = 100, seed: int = 0, encoder_cases: int = 10) -> list[GradcheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, (gen, op) in _primitive_cases().items():
        rows.append(check(name, gen, _weighted(op, _probe(op), rng), cases, rng))
    for name, (gen, fn) in _loss_cases().items():
        rows.append(check(name, gen, lambda arrays, fn=fn: fn, cases, rng))
    if encoder_cases:
        rows.append(encoder_prompt_check(encoder_cases, rng))
    return rows


def format_table(rows: list[GradcheckRow]) -> str:
    lines = [f"{'check':<20} {'cases':>5} {'max_rel_err':>12} {'status':>6}"]
    for r in rows:
        lines.append(f"{r.name:<20} {r.cases:>5} {r.max_rel_error:>12.3e} {'ok' if r.passed else 'FAIL':>6}")
    return "\n".join(lines)

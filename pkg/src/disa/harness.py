"""Backbone pretraining, prompt training, evaluation and the protocol drivers."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, astuple, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import losses as L
from . import saliency as S
from . import tensor as T
from .config import ExperimentConfig
from .encoders import DualEncoder, PromptBank
from .tensor import Tensor

log = logging.getLogger(__name__)

CLASS_NAMES = {cid: name for cid, name, _ in D.all_class_names()}

ABLATION_ROWS = (
    ("ivlp", dict(enable_cir=False, enable_masking=False, enable_sr=False, enable_dir=False)),
    ("cir", dict(enable_cir=True, enable_masking=False, enable_sr=False, enable_dir=False)),
    ("cir+mask", dict(enable_cir=True, enable_masking=True, enable_sr=False, enable_dir=False)),
    ("cir+mask+sr", dict(enable_cir=True, enable_masking=True, enable_sr=True, enable_dir=False)),
    ("cir+mask+sr+dir-sample", dict(enable_cir=True, enable_masking=True, enable_sr=True, enable_dir=True,
                                    dir_target="sample")),
    ("disa", dict(enable_cir=True, enable_masking=True, enable_sr=True, enable_dir=True,
                  dir_target="prototype")),
)
CSV_COLUMNS = ("protocol", "dataset", "condition", "seed", "k_shot", "lambda", "depth", "switches",
               "base_acc", "novel_acc", "hm", "ce", "sr", "cir", "dir")


class PretrainError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    """2ab/(a+b); zero when either accuracy is zero."""
    for v in (base_acc, novel_acc):
        if v < 0 or v > 100:
            raise ValueError(f"accuracy {v} outside [0, 100]")
    if base_acc == 0 or novel_acc == 0:
        return 0.0
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def build_encoder(config: ExperimentConfig, seed: int) -> DualEncoder:
    enc = DualEncoder(config.encoder, seed=seed)
    enc.register_classes(CLASS_NAMES)
    return enc


# evaluation


def predict(bank: PromptBank | None, encoder: DualEncoder, images: np.ndarray, class_ids,
            chunk: int = 256) -> np.ndarray:
    """Index into ``class_ids`` of the best-matching class text for every image."""
    with T.no_grad():
        g = encoder.encode_texts(class_ids, bank).data
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
        preds = []
        for start in range(0, len(images), chunk):
            f = encoder.encode_images(images[start:start + chunk], bank).data
            f = f / np.linalg.norm(f, axis=1, keepdims=True)
            preds.append(np.argmax(f @ g.T, axis=1))
    return np.concatenate(preds)


def evaluate(bank: PromptBank | None, encoder: DualEncoder, eval_set: D.Dataset, class_ids=None) -> float:
    """Fraction of full (unmasked) images whose nearest class text is the true class."""
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    class_ids = list(eval_set.class_ids if class_ids is None else class_ids)
    pred = predict(bank, encoder, eval_set.images, class_ids)
    truth = np.asarray(class_ids)[pred]
    return float(np.mean(truth == eval_set.labels))


# backbone pretraining

_BACKBONES: dict[tuple, dict[str, np.ndarray]] = {}


def pretrain_corpus(config: ExperimentConfig) -> tuple[D.Dataset, D.Dataset]:
    """(train, held-out) images of the pretraining classes, disjoint from every downstream pool."""
    pc = config.pretrain
    ids = D.class_pools()["pretrain"]
    ds = D.generate_corpus(len(ids), pc.samples_per_class, D.RenderConfig(noise=config.data.noise),
                           seed=pc.seed, class_ids=ids, name="pretrain")
    split = D.whole_split(ds, pc.seed, test_per_class=pc.heldout_per_class)
    train_idx = np.asarray([i for c in ds.class_ids for i in split.train_pool[c]])
    return ds.subset(train_idx), D.test_set(ds, split, ds.class_ids)


def pretrain_backbone(config: ExperimentConfig, steps: int | None = None, seed: int | None = None,
                      require_floor: bool = True) -> DualEncoder:
    """Symmetric image/text contrastive training on the pretraining classes, then freeze."""
    pc = config.pretrain
    steps = pc.steps if steps is None else steps
    seed = pc.seed if seed is None else seed
    key = (config.encoder, astuple(pc), config.data.noise, steps, seed)
    enc = build_encoder(config, seed)
    if key in _BACKBONES:
        enc.load_state_dict(_BACKBONES[key])
        enc.freeze()
        return enc
    train, heldout = pretrain_corpus(config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    classes = np.asarray(train.class_ids)
    by_class = {c: np.flatnonzero(train.labels == c) for c in classes}
    opt = Adam(enc.parameters(), pc.lr)
    tau = config.loss.tau
    n = min(pc.batch_classes, len(classes))
    for step in range(steps):
        picked = np.sort(rng.choice(classes, size=n, replace=False))
        idx = [int(rng.choice(by_class[c])) for c in picked]
        keep = None
        if pc.max_drop > 0 and rng.random() < pc.drop_prob:
            n_drop = int(rng.integers(1, pc.max_drop + 1))
            V = config.encoder.patches
            keep = np.ones((n, V), dtype=bool)
            for r in range(n):
                keep[r, rng.choice(V, size=n_drop, replace=False)] = False
        f = enc.encode_images(train.images[idx], None, keep)
        g = enc.encode_texts(picked)
        logits = T.cosine_matrix(f, g)
        target = np.arange(n)
        loss = T.scale(T.add(T.mean(T.log_softmax_nll(logits, target, tau)),
                             T.mean(T.log_softmax_nll(T.transpose(logits), target, tau))), 0.5)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"pretraining diverged at step {step}")
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.4f", step, float(loss.data))
    enc.freeze()
    acc = evaluate(None, enc, heldout)
    floor = pc.floor_multiple / len(classes)
    log.info("pretrained backbone: held-out zero-shot accuracy %.3f (floor %.3f)", acc, floor)
    if require_floor and acc <= floor:
        raise PretrainError(f"pretraining reached zero-shot accuracy {acc:.3f}, floor is {floor:.3f}")
    _BACKBONES[key] = enc.state_dict()
    return enc


def load_backbone(config: ExperimentConfig, path: str) -> DualEncoder:
    enc = build_encoder(config, config.pretrain.seed)
    enc.load_state_dict(ckpt.group(ckpt.read_checkpoint(path), "backbone"))
    enc.freeze()
    return enc


# prompt training


@dataclass
class TrainResult:
    bank: PromptBank
    trace: list[dict]                 # per-epoch mean loss components
    steps: int
    saliency_rows: list[tuple] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.trace[-1] if self.trace else {"ce": 0.0, "sr": 0.0, "cir": 0.0, "dir": 0.0, "total": 0.0}


def _frozen_pass(encoder: DualEncoder, images: np.ndarray, chunk: int = 256):
    feats, keys = [], []
    tr = None
    with T.no_grad():
        for start in range(0, len(images), chunk):
            f, tr = encoder.encode_images(images[start:start + chunk], trace=True)
            feats.append(f.data)
            keys.append(tr.patch_keys)
    tr.patch_keys = np.concatenate(keys)
    tr.layer_tokens = []
    return np.concatenate(feats), tr


def train_prompts(config: ExperimentConfig, encoder: DualEncoder, train_set: D.Dataset,
                  prototypes: L.PrototypeTable | None = None, seed: int = 0, depth: int | None = None,
                  epochs: int | None = None, dump_saliency: bool = False) -> TrainResult:
    """SGD on the prompt bank only, with the loss components selected by ``config.loss``."""
    lc, oc = config.loss, config.optim
    if not encoder.frozen:
        raise ValueError("train_prompts needs a frozen backbone")
    epochs = oc.epochs if epochs is None else epochs
    depth = depth or config.prompt.depth or min(config.encoder.layers, 9)
    streams = np.random.SeedSequence([seed, 202]).spawn(3)
    init_rng, order_rng, mask_rng = (np.random.default_rng(s) for s in streams)
    bank = PromptBank.init(encoder, config.prompt.n_visual, config.prompt.n_textual,
                           min(depth, config.encoder.layers), init_rng, config.prompt.init_std)
    classes = train_set.class_ids
    row = {c: i for i, c in enumerate(classes)}
    y = np.asarray([row[int(c)] for c in train_set.labels])
    f_o, trace = _frozen_pass(encoder, train_set.images)
    g_o = encoder.frozen_class_matrix(classes)
    alpha = S.score_batch(trace, g_o[y]) if (lc.enable_cir and lc.enable_masking) or dump_saliency else None
    if lc.enable_dir and lc.dir_target == "prototype":
        if prototypes is None:
            prototypes = L.compute_prototypes(f_o, train_set.labels, classes)
        proto = prototypes.lookup(train_set.labels)
    go = L.Feature(Tensor(g_o), "frozen", "text")
    opt = SGD(bank.parameters(), oc.lr, oc.momentum)
    zero = Tensor(0.0)
    history, dump = [], []
    step = 0
    V = config.encoder.patches
    for epoch in range(epochs):
        perm = order_rng.permutation(len(y))
        sums = dict.fromkeys(("ce", "sr", "cir", "dir", "total"), 0.0)
        n_batches = 0
        for start in range(0, len(perm), oc.batch_size):
            idx = perm[start:start + oc.batch_size]
            x = train_set.images[idx]
            g_p = L.Feature(encoder.encode_texts(classes, bank), "prompted", "text")
            f_p = L.Feature(encoder.encode_images(x, bank), "prompted")
            fo = L.Feature(Tensor(f_o[idx]), "frozen")
            q_pp = L.score_vector(f_p, g_p)
            ce = L.ce_loss(q_pp, y[idx], lc.tau)
            sr = L.sr_loss(q_pp, L.score_vector(fo, go), lc.tau) if lc.enable_sr else zero
            if lc.enable_cir:
                if lc.enable_masking:
                    plans = [S.select_mask(alpha[i], lc.gamma, lc.mask_fraction_within, mask_rng) for i in idx]
                    keep = np.stack([S.to_keep_mask(p, V) for p in plans])
                    masked = encoder.encode_images(x, bank, keep) if not keep.all() else f_p.value
                    if dump_saliency:
                        dump.extend((step, int(i), alpha[i], p.masked_set) for i, p in zip(idx, plans))
                else:
                    masked = f_p.value
                q_po = L.score_vector(L.Feature(masked, "prompted", "masked"), go)
                cir = L.cir_loss(q_po, L.score_vector(fo, g_p), lc.tau)
            else:
                cir = zero
            if lc.enable_dir:
                target = proto[idx] if lc.dir_target == "prototype" else f_o[idx]
                dirl = L.alignment_variant_loss(f_p, target, lc.dir_variant)
            else:
                dirl = zero
            report = L.total_loss(ce, sr, cir, dirl, lc.lambda_)
            if not math.isfinite(report.total):
                raise DivergenceError(f"non-finite total loss at step {step} (epoch {epoch})")
            T.backward(report.objective)
            opt.step()
            opt.zero_grad()
            for k in sums:
                sums[k] += getattr(report, k)
            n_batches += 1
            step += 1
        history.append({"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}})
    return TrainResult(bank, history, step, dump)


# protocols


@dataclass(frozen=True)
class Job:
    kind: str
    condition: str
    seed: int
    config: ExperimentConfig
    k_shot: int
    epochs: int
    depth: int
    dataset: str = "corpus-A"


def switches(config: ExperimentConfig) -> str:
    lc = config.loss
    parts = ["ce"]
    if lc.enable_cir:
        parts.append("cir")
    if lc.enable_cir and lc.enable_masking:
        parts.append("mask")
    if lc.enable_sr:
        parts.append("sr")
    if lc.enable_dir:
        parts.append(f"dir:{lc.dir_target}:{lc.dir_variant}")
    return "+".join(parts)


def default_depth(config: ExperimentConfig, kind: str) -> int:
    if config.prompt.depth:
        return min(config.prompt.depth, config.encoder.layers)
    cap = 3 if kind in ("cross-dataset", "domain-generalization") else 9
    return min(config.encoder.layers, cap)


def scaled_depth(depth: int, layers: int, reference: int = 12) -> int:
    return max(1, min(layers, int(math.floor(depth * layers / reference + 0.5))))


def downstream_corpus(config: ExperimentConfig, seed: int, pool: str = "corpus-A", **render) -> D.Dataset:
    ids = D.class_pools()[pool]
    rc = D.RenderConfig(noise=config.data.noise, **render)
    return D.generate_corpus(config.data.n_classes, config.data.samples_per_class, rc, seed, ids, pool)


_TARGET_RENDERS = {"corpus-B": dict(background=0.3), "corpus-C": dict(background=0.1, texture_frequency=1.5)}


def _backbone_for(config: ExperimentConfig) -> DualEncoder:
    if getattr(config.run, "backbone", ""):
        return load_backbone(config, config.run.backbone)
    return pretrain_backbone(config)


def run_job(job: Job) -> dict:
    """One training run plus its evaluations; returns CSV rows and the loss trace."""
    cfg = job.config
    encoder = _backbone_for(cfg)
    corpus = downstream_corpus(cfg, job.seed, job.dataset)
    base_row = {"protocol": cfg.run.protocol, "condition": job.condition, "seed": job.seed,
                "k_shot": job.k_shot, "lambda": cfg.loss.lambda_, "depth": job.depth, "switches": switches(cfg)}
    dt = cfg.data
    if job.kind == "base-to-novel":
        split = D.split_base_novel(corpus, dt.base_fraction, job.seed, dt.test_per_class, job.k_shot)
    else:
        split = D.whole_split(corpus, job.seed, dt.test_per_class, job.k_shot)
    train = D.sample_k_shot(corpus, split, job.k_shot, job.seed)
    result = train_prompts(cfg, encoder, train, seed=job.seed, depth=job.depth, epochs=job.epochs,
                           dump_saliency=cfg.run.dump_saliency)
    losses = {k: result.final[k] for k in ("ce", "sr", "cir", "dir")}
    rows = []
    if job.kind == "base-to-novel":
        base = 100 * evaluate(result.bank, encoder, D.test_set(corpus, split, split.base_classes))
        novel = 100 * evaluate(result.bank, encoder, D.test_set(corpus, split, split.novel_classes))
        rows.append({**base_row, "dataset": job.dataset, "base_acc": base, "novel_acc": novel,
                     "hm": harmonic_mean(base, novel), **losses})
    else:
        source_test = D.test_set(corpus, split, split.base_classes)
        targets = [(job.dataset, source_test)]
        if job.kind == "cross-dataset":
            for pool, render in _TARGET_RENDERS.items():
                other = downstream_corpus(cfg, job.seed, pool, **render)
                osplit = D.whole_split(other, job.seed, dt.test_per_class, job.k_shot)
                targets.append((pool, D.test_set(other, osplit, osplit.base_classes)))
        elif job.kind == "domain-generalization":
            for kind in D.SHIFT_KINDS:
                shifted = D.domain_shift(source_test, kind, dt.shift_magnitude, job.seed)
                targets.append((f"{job.dataset}/{kind}", shifted))
        for name, ds in targets:
            acc = 100 * evaluate(result.bank, encoder, ds)
            rows.append({**base_row, "dataset": name, "base_acc": acc, "novel_acc": None, "hm": None, **losses})
    trace_key = f"{job.condition}/seed{job.seed}/k{job.k_shot}"
    return {"rows": rows, "trace": {trace_key: result.trace}, "saliency": result.saliency_rows,
            "bank": result.bank.state_dict()}


def plan_jobs(config: ExperimentConfig) -> list[Job]:
    proto = config.run.protocol
    dt, oc = config.data, config.optim
    jobs = []
    for seed in config.run.seeds:
        if proto in ("base-to-novel", "cross-dataset", "domain-generalization"):
            jobs.append(Job(proto, switches(config), seed, config, dt.k_shot, oc.epochs,
                            default_depth(config, proto)))
        elif proto == "few-shot":
            for k in dt.few_shot_ks:
                jobs.append(Job("few-shot", f"k={k}", seed, config, k, oc.few_shot_epochs,
                                default_depth(config, proto)))
        elif proto == "ablation":
            for name, sw in ABLATION_ROWS:
                cfg = config.replace(**{f"loss.{k}": v for k, v in sw.items()})
                jobs.append(Job("base-to-novel", name, seed, cfg, dt.k_shot, oc.epochs,
                                default_depth(cfg, "base-to-novel")))
        elif proto == "lambda-sweep":
            for lam in config.sweep.lambdas:
                cfg = config.replace(**{"loss.lambda": float(lam)})
                jobs.append(Job("base-to-novel", f"lambda={lam:g}", seed, cfg, dt.k_shot, oc.epochs,
                                default_depth(cfg, "base-to-novel")))
        elif proto == "depth-sweep":
            for ref in config.sweep.depths:
                d = scaled_depth(ref, config.encoder.layers, config.sweep.reference_layers)
                jobs.append(Job("base-to-novel", f"layers1-{ref}", seed, config, dt.k_shot, oc.epochs, d))
        else:
            raise ValueError(f"unknown protocol {proto!r}")
    return jobs


@dataclass
class EvalReport:
    protocol: str
    config_digest: str
    rows: list[dict]
    summary: list[dict]
    traces: dict[str, list[dict]]
    wall_clock: float = 0.0
    saliency: list[tuple] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"protocol": self.protocol, "config_digest": self.config_digest, "rows": self.rows,
                "summary": self.summary, "traces": self.traces, "wall_clock_seconds": self.wall_clock}


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and spread across seeds for every (dataset, condition, k, lambda, depth) group."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["condition"], r["k_shot"], r["lambda"], r["depth"]), []).append(r)
    out = []
    for (dataset, condition, k, lam, depth), rs in groups.items():
        entry = {"protocol": rs[0]["protocol"], "dataset": dataset, "condition": condition, "k_shot": k,
                 "lambda": lam, "depth": depth, "switches": rs[0]["switches"], "seeds": [r["seed"] for r in rs]}
        for col in ("base_acc", "novel_acc", "hm"):
            vals = [r[col] for r in rs if r[col] is not None]
            if vals:
                entry[f"{col}_mean"] = float(np.mean(vals))
                entry[f"{col}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(entry)
    return out


def run_protocol(config: ExperimentConfig, parallel: int = 1) -> EvalReport:
    config.validate()
    start = time.perf_counter()
    jobs = plan_jobs(config)
    log.info("%s: %d runs", config.run.protocol, len(jobs))
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            log.info("run %d/%d: %s seed=%d k=%d depth=%d", i + 1, len(jobs), job.condition, job.seed,
                     job.k_shot, job.depth)
            results.append(run_job(job))
    rows, traces, sal = [], {}, []
    for res in results:
        rows.extend(res["rows"])
        traces.update(res["trace"])
        sal.extend(res["saliency"])
    return EvalReport(config.run.protocol, config.digest(), rows, summarize(rows), traces,
                      time.perf_counter() - start, sal)

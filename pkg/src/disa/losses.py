"""Prompt-learning objective: cross-entropy plus the frozen-teacher regularizers.

Features carry a small provenance record (which view produced them and
whether the image went through the masking path) so each loss can refuse
inputs from the wrong pathway.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_TAU = 0.07
ALIGNMENT_VARIANTS = ("norm", "mse", "direction")


class ProvenanceError(ValueError):
    pass


@dataclass(frozen=True)
class Feature:
    value: Tensor
    view: str              # "prompted" or "frozen"
    image: str = "full"    # "full" or "masked" for image features, "text" for text features

    def __post_init__(self):
        if self.view not in ("prompted", "frozen"):
            raise ValueError(f"unknown view {self.view!r}")


@dataclass(frozen=True)
class ScoreVector:
    sims: Tensor           # (N_c,) or (B, N_c) cosine similarities
    tag: str | None = None  # two letters, image view then text view: p = prompted, o = frozen
    image: str | None = None


@dataclass
class PrototypeTable:
    class_ids: list[int]
    means: np.ndarray       # (N, d)
    counts: list[int]

    def lookup(self, labels) -> np.ndarray:
        row = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return self.means[[row[int(y)] for y in np.atleast_1d(labels)]]
        except KeyError as exc:
            raise KeyError(f"no prototype for class {exc.args[0]}") from None


@dataclass
class LossReport:
    ce: float
    sr: float
    cir: float
    dir: float
    total: float
    lam: float
    objective: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {"ce": self.ce, "sr": self.sr, "cir": self.cir, "dir": self.dir,
                "total": self.total, "lambda": self.lam}


def _letter(view: str) -> str:
    return "p" if view == "prompted" else "o"


def _unwrap(x):
    return x.value if isinstance(x, Feature) else T.as_tensor(x)


def score_vector(image_feature, class_text_matrix) -> ScoreVector:
    """Cosine similarity of image feature(s) against every class text row."""
    img, txt = _unwrap(image_feature), _unwrap(class_text_matrix)
    if txt.ndim != 2 or txt.shape[1] != img.shape[-1]:
        raise T.ShapeError(f"score_vector: text matrix {txt.shape} does not match feature {img.shape}")
    tag = image = None
    if isinstance(image_feature, Feature) and isinstance(class_text_matrix, Feature):
        tag = _letter(image_feature.view) + _letter(class_text_matrix.view)
        image = image_feature.image
    return ScoreVector(T.cosine_matrix(img, txt), tag, image)


def _require(q: ScoreVector, tag: str, image: str, loss: str) -> None:
    if q.tag is not None and (q.tag != tag or q.image != image):
        raise ProvenanceError(f"{loss}: expected {tag} scores from the {image} image, got {q.tag} from {q.image}")


def _batch_mean(x: Tensor) -> Tensor:
    return T.mean(x) if x.ndim else x


def ce_loss(q_pp: ScoreVector, y, tau: float = DEFAULT_TAU) -> Tensor:
    """Negative log-likelihood of the true class under softmax(q/τ), averaged over the batch."""
    _require(q_pp, "pp", "full", "ce_loss")
    n_c = q_pp.sims.shape[-1]
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= n_c):
        raise ValueError(f"ce_loss: class index {y.tolist()} outside [0, {n_c})")
    return _batch_mean(T.log_softmax_nll(q_pp.sims, y, tau))


def _kl_scores(a: ScoreVector, b: ScoreVector, tau: float, loss: str) -> Tensor:
    if a.sims.shape != b.sims.shape:
        raise T.ShapeError(f"{loss}: length mismatch {a.sims.shape} and {b.sims.shape}")
    p = T.softmax(a.sims, axis=-1, temperature=tau)
    q = T.softmax(b.sims, axis=-1, temperature=tau)
    return _batch_mean(T.kl_divergence(p, q))


def cir_loss(q_po_masked: ScoreVector, q_op: ScoreVector, tau: float = DEFAULT_TAU) -> Tensor:
    """KL(masked prompted image x frozen text || frozen image x prompted text); both sides trainable."""
    _require(q_po_masked, "po", "masked", "cir_loss")
    _require(q_op, "op", "full", "cir_loss")
    return _kl_scores(q_po_masked, q_op, tau, "cir_loss")


def sr_loss(q_pp: ScoreVector, q_oo: ScoreVector, tau: float = DEFAULT_TAU) -> Tensor:
    """KL(prompted scores || frozen scores) on the full image."""
    _require(q_pp, "pp", "full", "sr_loss")
    _require(q_oo, "oo", "full", "sr_loss")
    return _kl_scores(q_pp, q_oo, tau, "sr_loss")


def compute_prototypes(features, labels, classes=None) -> PrototypeTable:
    """Per-class mean of frozen full-image features."""
    if isinstance(features, Feature):
        if features.view != "frozen" or features.image != "full":
            raise ProvenanceError("prototypes must come from frozen features of full images")
        features = features.value
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ids = sorted(set(labels.tolist())) if classes is None else [int(c) for c in classes]
    means, counts = [], []
    for cid in ids:
        rows = feats[labels == cid]
        if len(rows) == 0:
            raise ValueError(f"class {cid} has no samples to build a prototype from")
        means.append(rows.mean(axis=0))
        counts.append(len(rows))
    table = np.stack(means)
    if not np.all(np.isfinite(table)):
        raise ValueError("non-finite prototype")
    table.setflags(write=False)
    return PrototypeTable(ids, table, counts)


def _check_nonzero(m: np.ndarray, what: str) -> None:
    if np.any(np.linalg.norm(np.atleast_2d(m), axis=-1) == 0):
        raise T.DomainError(f"{what}: zero-norm prototype (degenerate class geometry)")


def dir_loss(f_p, m) -> Tensor:
    """|1 - cos(f_p, m)|, batch-averaged; blind to the magnitude of either vector."""
    if isinstance(f_p, Feature) and (f_p.view != "prompted" or f_p.image != "full"):
        raise ProvenanceError("dir_loss expects the prompted feature of the full image")
    f = _unwrap(f_p)
    m_arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    _check_nonzero(m_arr, "dir_loss")
    mt = m if isinstance(m, Tensor) else Tensor(m_arr)
    return _batch_mean(T.abs_(T.sub(1.0, T.cosine_similarity(f, mt))))


def alignment_variant_loss(f_p, m, variant: str) -> Tensor:
    """Norm-only, whole-feature MSE, or direction-only alignment to a prototype."""
    if variant not in ALIGNMENT_VARIANTS:
        raise ValueError(f"unknown alignment variant {variant!r}; expected one of {ALIGNMENT_VARIANTS}")
    if variant == "direction":
        return dir_loss(f_p, m)
    f = _unwrap(f_p)
    mt = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=np.float64))
    _check_nonzero(mt.data, "alignment_variant_loss")
    if variant == "norm":
        nf = T.sqrt(T.sum_(T.mul(f, f), axis=-1))
        nm = T.sqrt(T.sum_(T.mul(mt, mt), axis=-1))
        return _batch_mean(T.abs_(T.sub(nf, nm)))
    diff = T.sub(f, mt)
    return _batch_mean(T.mean(T.mul(diff, diff), axis=-1))


def total_loss(ce, sr, cir, dir, lam: float = 12.0) -> LossReport:
    """ce + sr + cir + λ·dir, keeping every component for reporting."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    parts = [T.as_tensor(x) for x in (ce, sr, cir, dir)]
    objective = T.add(T.add(T.add(parts[0], parts[1]), parts[2]), T.scale(parts[3], lam))
    vals = [float(p.data) for p in parts]
    return LossReport(*vals, float(objective.data), float(lam), objective)

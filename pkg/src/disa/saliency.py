"""Patch importance from frozen text-to-image attention, and the masking policy built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoders import TokenTrace
from .tensor import LAYER_NORM_EPS, Tensor


@dataclass
class SaliencyScores:
    alpha: np.ndarray          # (V,) non-negative, sums to 1
    source_class: int | None = None


@dataclass
class MaskPlan:
    candidate_set: list[int]
    masked_set: list[int]
    gamma: float = 0.5
    mask_fraction_within: float = 0.5


def _plain(x, what: str) -> np.ndarray:
    if isinstance(x, Tensor):
        if x.requires_grad:
            raise ValueError(f"{what} must be a frozen quantity; got a tensor that requires grad")
        x = x.data
    return np.asarray(x, dtype=np.float64)


def attention_scores(patch_keys: np.ndarray, text_query: np.ndarray, heads: int) -> np.ndarray:
    """Head-averaged softmax over patches of query·key/√C.

    patch_keys: (B, V, d) projected keys; text_query: (B, d) projected queries.
    """
    B, V, d = patch_keys.shape
    C = d // heads
    k = patch_keys.reshape(B, V, heads, C)
    q = text_query.reshape(B, heads, C)
    logits = np.einsum("bhc,bvhc->bhv", q, k) / math.sqrt(C)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return (e / e.sum(axis=-1, keepdims=True)).mean(axis=1)


def text_query(trace: TokenTrace, text: np.ndarray) -> np.ndarray:
    """Query projection of a text feature as if it were a final-layer image token."""
    if trace.to_tokens is not None:
        text = text @ trace.to_tokens
        mu = text.mean(axis=-1, keepdims=True)
        text = (text - mu) / np.sqrt(text.var(axis=-1, keepdims=True) + LAYER_NORM_EPS)
        text = text * trace.norm_gain + trace.norm_bias
    return text @ trace.query_weight + trace.query_bias


def score_batch(trace: TokenTrace, text_cls) -> np.ndarray:
    """(B, V) saliency for a batch traced through the frozen, unmasked image tower."""
    if trace.prompted or trace.masked:
        raise ValueError("saliency scores need a trace from the frozen full-image pass")
    text = np.atleast_2d(_plain(text_cls, "text feature"))
    if text.shape[0] != trace.patch_keys.shape[0] or text.shape[1] != trace.query_weight.shape[0]:
        raise ValueError(f"text feature shape {text.shape} does not match trace keys {trace.patch_keys.shape}")
    return attention_scores(trace.patch_keys, text_query(trace, text), trace.heads)


def score_tokens(image_trace: TokenTrace, text_cls, source_class: int | None = None) -> SaliencyScores:
    return SaliencyScores(score_batch(image_trace, text_cls)[0], source_class)


def select_mask(scores: SaliencyScores | np.ndarray, gamma: float = 0.5, mask_fraction_within: float = 0.5,
                rng: np.random.Generator | None = None) -> MaskPlan:
    """Candidates are the floor(γV) least salient patches (ties by index); mask a random share of them."""
    if not 0 <= gamma <= 1 or not 0 <= mask_fraction_within <= 1:
        raise ValueError(f"gamma and mask fraction must lie in [0, 1], got {gamma}, {mask_fraction_within}")
    alpha = scores.alpha if isinstance(scores, SaliencyScores) else np.asarray(scores)
    V = len(alpha)
    n_cand = int(math.floor(gamma * V + 1e-9))
    order = np.lexsort((np.arange(V), alpha))
    candidates = sorted(int(i) for i in order[:n_cand])
    n_mask = int(math.floor(mask_fraction_within * n_cand + 0.5))
    if n_mask == 0:
        masked = []
    else:
        rng = rng if rng is not None else np.random.default_rng()
        masked = sorted(int(i) for i in rng.choice(candidates, size=n_mask, replace=False))
    return MaskPlan(candidates, masked, gamma, mask_fraction_within)


def to_keep_mask(plan: MaskPlan, V: int) -> np.ndarray:
    keep = np.ones(V, dtype=bool)
    for i in plan.masked_set:
        if not 0 <= i < V:
            raise IndexError(f"masked index {i} outside [0, {V})")
        keep[i] = False
    return keep

"""Mini dual encoder (patch transformer + text transformer) with deep prompts.

Both towers run in batch: images as (B, V, patch_dim) arrays, class texts as
one padded-free batch of equal-length token sequences.  The frozen view is
the promptless forward pass; the prompted view adds a ``PromptBank``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import PATCH_DIM, TEMPLATE, vocabulary_words
from .tensor import Tensor

SOS, EOS = "<sos>", "<eos>"
_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    layers: int = 4
    heads: int = 4
    patches: int = 16
    patch_dim: int = PATCH_DIM
    text_ctx: int = 16
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.patches < 4:
            raise ValueError("at least 4 patches required")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


class Vocabulary:
    """Whitespace tokenizer over a fixed word list; ids follow the sorted word order."""

    def __init__(self, words):
        self.tokens = [SOS, EOS] + sorted(set(words))
        self.ids = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.ids[w] for w in text.split()]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} is not in the toy vocabulary") from None

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(vocabulary_words())


@dataclass
class TokenTrace:
    layer_tokens: list[np.ndarray]      # input tokens of every layer, (B, n, d)
    patch_keys: np.ndarray              # final-layer key projections of patch tokens, (B, V, d)
    query_weight: np.ndarray            # final-layer query projection (d, d)
    query_bias: np.ndarray
    heads: int
    prompted: bool
    masked: bool
    to_tokens: np.ndarray | None = None  # joint space -> final-layer token space (pinv of visual projection)
    norm_gain: np.ndarray | None = None  # final-layer pre-attention norm
    norm_bias: np.ndarray | None = None

    def for_sample(self, i: int) -> "TokenTrace":
        return TokenTrace([t[i:i + 1] for t in self.layer_tokens], self.patch_keys[i:i + 1],
                          self.query_weight, self.query_bias, self.heads, self.prompted, self.masked,
                          self.to_tokens, self.norm_gain, self.norm_bias)


@dataclass
class PromptBank:
    visual: list[Tensor]      # one (V_p, d) block per prompted layer
    textual: list[Tensor]     # one (T_p, d) block per prompted layer
    depth: int = field(init=False)

    def __post_init__(self):
        if len(self.visual) != len(self.textual):
            raise ValueError("visual and textual prompt depths differ")
        self.depth = len(self.visual)

    @classmethod
    def init(cls, encoder: "DualEncoder", n_visual: int = 4, n_textual: int = 4, depth: int = 1,
             rng: np.random.Generator | None = None, std: float = 0.02) -> "PromptBank":
        """Gaussian prompts; the first textual block starts from the template word embeddings."""
        cfg = encoder.config
        if not 1 <= depth <= cfg.layers:
            raise ValueError(f"prompted depth {depth} outside [1, {cfg.layers}]")
        rng = rng or np.random.default_rng(0)
        visual = [Tensor(rng.normal(0.0, std, (n_visual, cfg.d)), requires_grad=True) for _ in range(depth)]
        textual = [Tensor(rng.normal(0.0, std, (n_textual, cfg.d)), requires_grad=True) for _ in range(depth)]
        words = encoder.vocab.encode(TEMPLATE)
        init = encoder.params["txt.tok"].data[words]
        n = min(n_textual, len(words))
        textual[0].data[:n] = init[:n]
        return cls(visual, textual)

    def parameters(self) -> list[Tensor]:
        return self.visual + self.textual

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (v, t) in enumerate(zip(self.visual, self.textual)):
            out[f"visual.{i}"] = v.data.copy()
            out[f"textual.{i}"] = t.data.copy()
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "PromptBank":
        depth = sum(1 for k in state if k.startswith("visual."))
        return cls([Tensor(state[f"visual.{i}"], requires_grad=True) for i in range(depth)],
                   [Tensor(state[f"textual.{i}"], requires_grad=True) for i in range(depth)])


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), g), b)


def _tile(x: Tensor, batch: int) -> Tensor:
    """Broadcast a (n, d) block to (batch, n, d)."""
    return T.add(np.zeros((batch,) + x.shape), x)


class DualEncoder:
    def __init__(self, config: EncoderConfig | None = None, vocab: Vocabulary | None = None, seed: int = 0):
        self.config = config or EncoderConfig()
        self.vocab = vocab or Vocabulary.default()
        self.class_names: dict[int, str] = {}
        self.frozen = False
        self._text_cache: dict[tuple, np.ndarray] = {}
        self.params = self._init_params(np.random.default_rng(np.random.SeedSequence([seed, 3])))

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.config
        d, h, std = c.d, c.d * c.mlp_ratio, c.init_std
        shapes = {
            "img.patch_w": (c.patch_dim, d), "img.patch_b": (d,), "img.cls": (d,),
            "img.pos": (c.patches + 1, d), "img.lnp_g": (d,), "img.lnp_b": (d,), "img.proj": (d, d),
            "txt.tok": (len(self.vocab), d), "txt.pos": (c.text_ctx, d),
            "txt.lnf_g": (d,), "txt.lnf_b": (d,), "txt.proj": (d, d),
        }
        for tower in ("img", "txt"):
            for layer in range(c.layers):
                p = f"{tower}.{layer}."
                shapes.update({p + "ln1_g": (d,), p + "ln1_b": (d,), p + "ln2_g": (d,), p + "ln2_b": (d,),
                               p + "wq": (d, d), p + "bq": (d,), p + "wk": (d, d), p + "bk": (d,),
                               p + "wv": (d, d), p + "bv": (d,), p + "wo": (d, d), p + "bo": (d,),
                               p + "w1": (d, h), p + "b1": (h,), p + "w2": (h, d), p + "b2": (d,)})
        params = {}
        for name in sorted(shapes):
            shape = shapes[name]
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                arr = np.ones(shape)
            elif leaf.startswith("b") or leaf.endswith("_b"):
                arr = np.zeros(shape)
            elif leaf in ("tok", "cls", "pos", "proj"):
                arr = rng.normal(0.0, 1.0 / np.sqrt(d) if leaf == "proj" else std * 5, shape)
            else:
                arr = rng.normal(0.0, std, shape)
            params[name] = Tensor(arr, requires_grad=True)
        return params

    # parameter management

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        self._text_cache.clear()

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def checksum(self) -> str:
        return T.parameters_checksum(p.data for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data.copy() for k in sorted(self.params)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ValueError(f"checkpoint lacks backbone blocks: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"block {k}: shape {state[k].shape} != expected {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        self._text_cache.clear()

    def register_classes(self, names: dict[int, str]) -> None:
        for cid, name in names.items():
            self.vocab.encode(name)
            self.class_names[int(cid)] = name

    # towers

    def _block(self, x: Tensor, prefix: str) -> tuple[Tensor, Tensor]:
        P, c = self.params, self.config
        B, n, d = x.shape
        H, C = c.heads, c.head_dim
        h = _affine_ln(x, P[prefix + "ln1_g"], P[prefix + "ln1_b"])

        def heads(w, b):
            y = T.add(T.matmul(h, P[prefix + w]), P[prefix + b])
            return T.transpose(T.reshape(y, (B, n, H, C)), (0, 2, 1, 3))

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(C)), axis=-1)
        o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, n, d))
        x = T.add(x, T.add(T.matmul(o, P[prefix + "wo"]), P[prefix + "bo"]))
        m = _affine_ln(x, P[prefix + "ln2_g"], P[prefix + "ln2_b"])
        m = T.gelu(T.add(T.matmul(m, P[prefix + "w1"]), P[prefix + "b1"]))
        x = T.add(x, T.add(T.matmul(m, P[prefix + "w2"]), P[prefix + "b2"]))
        return x, h

    def _run_layers(self, x: Tensor, tower: str, prompts: list[Tensor] | None, slot: int,
                    record: list | None = None) -> tuple[Tensor, Tensor]:
        """Deep prompting: layer l < depth swaps in its own prompt block at ``slot``.

        ``slot`` is the insertion index; a negative value appends after the core tokens.
        """
        B = x.shape[0]
        n_core = x.shape[1]
        n_prompt = prompts[0].shape[0] if prompts else 0
        h = None
        for layer in range(self.config.layers):
            if prompts and layer < len(prompts):
                block = _tile(prompts[layer], B)
                if slot < 0:
                    core = x if layer == 0 else x[:, :n_core]
                    x = T.concat([core, block], axis=1)
                else:
                    head = x[:, :slot]
                    tail = x[:, slot:] if layer == 0 else x[:, slot + n_prompt:]
                    x = T.concat([head, block, tail], axis=1)
            if record is not None:
                record.append(x.data)
            x, h = self._block(x, f"{tower}.{layer}.")
        return x, h

    def encode_images(self, images: np.ndarray, prompts: PromptBank | None = None,
                      keep_mask: np.ndarray | None = None, trace: bool = False):
        """Batched image tower: (B, V, patch_dim) -> features (B, d) [, TokenTrace]."""
        c, P = self.config, self.params
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3 or images.shape[1:] != (c.patches, c.patch_dim):
            raise T.ShapeError(f"encode_image: expected (B, {c.patches}, {c.patch_dim}) patches, got {images.shape}")
        B = images.shape[0]
        x = T.add(T.add(T.matmul(Tensor(images), P["img.patch_w"]), P["img.patch_b"]), P["img.pos"][1:])
        if keep_mask is not None:
            keep = np.asarray(keep_mask, dtype=bool).reshape(B, -1)
            if keep.shape[1] != c.patches:
                raise ValueError(f"keep_mask has {keep.shape[1]} entries for {c.patches} patches")
            counts = keep.sum(axis=1)
            if np.any(counts == 0):
                raise ValueError("keep_mask drops every patch")
            if np.any(counts != counts[0]):
                raise ValueError("keep_mask rows must retain the same number of patches within a batch")
            if not keep.all():
                flat = (np.arange(B)[:, None] * c.patches + np.nonzero(keep)[1].reshape(B, -1)).reshape(-1)
                x = T.reshape(T.embedding(T.reshape(x, (B * c.patches, c.d)), flat), (B, int(counts[0]), c.d))
        cls = _tile(T.reshape(T.add(P["img.cls"], P["img.pos"][0]), (1, c.d)), B)
        x = T.concat([cls, x], axis=1)
        record = [] if trace else None
        x, h = self._run_layers(x, "img", prompts.visual if prompts else None, -1, record)
        out = T.matmul(_affine_ln(x[:, 0], P["img.lnp_g"], P["img.lnp_b"]), P["img.proj"])
        if not trace:
            return out
        last = f"img.{c.layers - 1}."
        n_patch = record[-1].shape[1] - 1 - (prompts.visual[0].shape[0] if prompts else 0)
        keys = h.data[:, 1:1 + n_patch] @ P[last + "wk"].data + P[last + "bk"].data
        masked = keep_mask is not None and not np.asarray(keep_mask, dtype=bool).all()
        tr = TokenTrace(record, keys, P[last + "wq"].data, P[last + "bq"].data, c.heads,
                        prompted=prompts is not None, masked=masked,
                        to_tokens=np.linalg.pinv(P["img.proj"].data),
                        norm_gain=P[last + "ln1_g"].data, norm_bias=P[last + "ln1_b"].data)
        return out, tr

    def encode_image(self, image: np.ndarray, prompts: PromptBank | None = None,
                     keep_mask: np.ndarray | None = None, trace: bool = False):
        image = np.asarray(image, dtype=np.float64)
        keep = None if keep_mask is None else np.asarray(keep_mask, dtype=bool)[None]
        if keep is not None and keep.shape[1] != self.config.patches:
            raise ValueError(f"keep_mask has {keep.shape[1]} entries for {self.config.patches} patches")
        res = self.encode_images(image[None], prompts, keep, trace)
        if trace:
            return res[0][0], res[1]
        return res[0]

    def _token_ids(self, class_id: int) -> list[int]:
        if class_id not in self.class_names:
            raise KeyError(f"unknown class id {class_id}")
        v = self.vocab
        return [v.ids[SOS]] + v.encode(TEMPLATE) + v.encode(self.class_names[class_id]) + [v.ids[EOS]]

    def encode_texts(self, class_ids, prompts: PromptBank | None = None) -> Tensor:
        """Text features (N, d) read at the EOS position; classes are grouped by token length."""
        class_ids = [int(c) for c in class_ids]
        seqs = [self._token_ids(c) for c in class_ids]
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(seqs):
            groups.setdefault(len(s), []).append(i)
        parts, order = [], []
        for n, rows in sorted(groups.items()):
            ids = np.asarray([seqs[i] for i in rows])
            parts.append(self._text_tower(ids, prompts))
            order.extend(rows)
        out = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
        if order != list(range(len(order))):
            out = T.embedding(out, np.argsort(order))
        return out

    def _text_tower(self, ids: np.ndarray, prompts: PromptBank | None) -> Tensor:
        c, P = self.config, self.params
        B, n = ids.shape
        if n > c.text_ctx:
            raise T.ShapeError(f"text sequence of {n} tokens exceeds context {c.text_ctx}")
        x = T.add(T.embedding(P["txt.tok"], ids), P["txt.pos"][:n])
        x, _ = self._run_layers(x, "txt", prompts.textual if prompts else None, 1)
        return T.matmul(_affine_ln(x[:, -1], P["txt.lnf_g"], P["txt.lnf_b"]), P["txt.proj"])

    def encode_text(self, class_id: int, prompts: PromptBank | None = None) -> Tensor:
        return T.reshape(self.encode_texts([class_id], prompts), (self.config.d,))

    def frozen_class_matrix(self, classes) -> np.ndarray:
        """Promptless text features, one row per class; cached once the backbone is frozen."""
        key = tuple(int(c) for c in classes)
        if not key:
            raise ValueError("empty class list")
        if self.frozen and key in self._text_cache:
            return self._text_cache[key]
        with T.no_grad():
            mat = self.encode_texts(key).data
        if self.frozen:
            mat.setflags(write=False)
            self._text_cache[key] = mat
        return mat

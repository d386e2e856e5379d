"""Procedural image-text corpora rendered directly in patch space.

Class names are compositions of colour, texture and shape words, so classes
held out of training still share vocabulary with the ones seen in training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.25),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.15),
    "purple": (0.60, 0.20, 0.75),
    "orange": (0.95, 0.55, 0.10),
}
TEXTURES = ("plain", "striped", "dotted", "checkered")
SHAPES = ("square", "circle", "triangle", "cross")
TEMPLATE = "a photo of a"
SHIFT_KINDS = ("hue-rotation", "noise-boost", "texture-swap", "blur")

GRID = 4          # patches per side
PATCH = 4         # pixels per patch side
SIDE = GRID * PATCH
CHANNELS = 3
PATCH_DIM = PATCH * PATCH * CHANNELS


@dataclass(frozen=True)
class ToyClass:
    id: int
    name: str
    shape: str
    color: tuple[float, float, float]
    texture: str
    frequency: float
    noise: float


@dataclass(frozen=True)
class RenderConfig:
    noise: float = 0.05
    background: float = 0.2
    background_jitter: float = 0.05
    position_jitter: int = 2
    size_jitter: float = 0.15
    texture_frequency: float = 1.0


@dataclass
class Dataset:
    name: str
    images: np.ndarray            # (N, V, patch_dim), values in [0, 1]
    labels: np.ndarray            # (N,)
    classes: dict[int, ToyClass]
    domain_tag: str = "source"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.classes)

    def subset(self, index: np.ndarray, class_ids=None) -> "Dataset":
        keep = self.classes if class_ids is None else {c: self.classes[c] for c in class_ids}
        return Dataset(self.name, self.images[index], self.labels[index], keep, self.domain_tag)


@dataclass
class SplitSpec:
    base_classes: list[int]
    novel_classes: list[int]
    train_pool: dict[int, list[int]] = field(default_factory=dict)   # class -> sample indices
    test_index: dict[int, list[int]] = field(default_factory=dict)
    k_shot: int = 16
    seed: int = 0

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel classes overlap")
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")


def all_class_names() -> list[tuple[int, str, tuple[str, str, str]]]:
    """Every colour/texture/shape combination with its stable grid id."""
    out = []
    for ci, color in enumerate(COLORS):
        for ti, texture in enumerate(TEXTURES):
            for si, shape in enumerate(SHAPES):
                cid = (ci * len(TEXTURES) + ti) * len(SHAPES) + si
                out.append((cid, f"{color} {texture} {shape}", (color, texture, shape)))
    return out


def vocabulary_words() -> list[str]:
    words = set(TEMPLATE.split())
    for _, name, _ in all_class_names():
        words.update(name.split())
    return sorted(words)


def class_pools(n_downstream: int = 3, per_pool: int = 20) -> dict[str, list[int]]:
    """Disjoint class-id pools: one for backbone pretraining, the rest for downstream corpora."""
    combos = all_class_names()
    pretrain = [cid for cid, _, _ in combos if _grid_coords(cid) % 3 == 0]
    rest = [cid for cid, _, _ in combos if _grid_coords(cid) % 3 != 0]
    order = np.random.default_rng(1234).permutation(len(rest))
    rest = [rest[i] for i in order]
    if n_downstream * per_pool > len(rest):
        raise ValueError(f"attribute grid has only {len(rest)} downstream classes")
    pools = {"pretrain": pretrain}
    for i in range(n_downstream):
        pools[f"corpus-{chr(ord('A') + i)}"] = rest[i * per_pool:(i + 1) * per_pool]
    return pools


def _grid_coords(cid: int) -> int:
    s = cid % len(SHAPES)
    t = (cid // len(SHAPES)) % len(TEXTURES)
    c = cid // (len(SHAPES) * len(TEXTURES))
    return c + t + s


def make_class(cid: int, render: RenderConfig) -> ToyClass:
    names = {c: (n, parts) for c, n, parts in all_class_names()}
    if cid not in names:
        raise ValueError(f"unknown class id {cid}")
    name, (color, texture, shape) = names[cid]
    freq = render.texture_frequency * (1.0 + 0.5 * TEXTURES.index(texture))
    return ToyClass(cid, name, shape, COLORS[color], texture, freq, render.noise)


def _shape_mask(kind: str, rng: np.random.Generator, render: RenderConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)
    j = render.position_jitter
    cy = SIDE / 2 - 0.5 + rng.integers(-j, j + 1)
    cx = SIDE / 2 - 0.5 + rng.integers(-j, j + 1)
    r = 5.0 * (1.0 + rng.uniform(-render.size_jitter, render.size_jitter))
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        w = r / 2.5
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(f"unknown shape kind {kind!r}")


def _texture(kind: str, freq: float) -> np.ndarray:
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)
    if kind == "plain":
        return np.ones((SIDE, SIDE))
    if kind == "striped":
        return 0.5 + 0.5 * np.sign(np.sin(xx * freq * np.pi / 2))
    if kind == "dotted":
        return ((np.sin(xx * freq * np.pi / 2) > 0.3) & (np.sin(yy * freq * np.pi / 2) > 0.3)).astype(float)
    if kind == "checkered":
        return ((np.floor(xx * freq / 2) + np.floor(yy * freq / 2)) % 2).astype(float)
    raise ValueError(f"unknown texture {kind!r}")


def render_image(cls: ToyClass, rng: np.random.Generator, render: RenderConfig) -> np.ndarray:
    """One (SIDE, SIDE, 3) picture of ``cls`` with per-sample jitter."""
    mask = _shape_mask(cls.shape, rng, render)
    pattern = 0.55 + 0.45 * _texture(cls.texture, cls.frequency)
    bg = render.background + rng.uniform(-render.background_jitter, render.background_jitter)
    img = np.full((SIDE, SIDE, CHANNELS), bg)
    img[mask] = np.asarray(cls.color) * pattern[mask][:, None]
    img += rng.normal(0.0, cls.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def to_patches(img: np.ndarray) -> np.ndarray:
    """(SIDE, SIDE, C) -> (GRID*GRID, PATCH*PATCH*C), row-major patch order."""
    g = img.reshape(GRID, PATCH, GRID, PATCH, CHANNELS).transpose(0, 2, 1, 3, 4)
    return g.reshape(GRID * GRID, PATCH_DIM)


def from_patches(patches: np.ndarray) -> np.ndarray:
    g = patches.reshape(GRID, GRID, PATCH, PATCH, CHANNELS).transpose(0, 2, 1, 3, 4)
    return g.reshape(SIDE, SIDE, CHANNELS)


def generate_corpus(n_classes: int, samples_per_class: int, render_config: RenderConfig | None = None,
                    seed: int = 0, class_ids=None, name: str = "corpus") -> Dataset:
    """Deterministic corpus of ``n_classes`` drawn from ``class_ids`` (default: the whole grid)."""
    render = render_config or RenderConfig()
    if n_classes < 4:
        raise ValueError(f"n_classes must be >= 4, got {n_classes}")
    pool = list(class_ids) if class_ids is not None else [c for c, _, _ in all_class_names()]
    if n_classes > len(pool):
        raise ValueError(f"attribute grid offers {len(pool)} classes, {n_classes} requested")
    chosen = pool[:n_classes]
    classes = {cid: make_class(cid, render) for cid in chosen}
    images = np.empty((n_classes * samples_per_class, GRID * GRID, PATCH_DIM))
    labels = np.empty(n_classes * samples_per_class, dtype=np.int64)
    seeds = np.random.SeedSequence([seed, 7]).spawn(n_classes)
    for k, cid in enumerate(chosen):
        rng = np.random.default_rng(seeds[k])
        for s in range(samples_per_class):
            images[k * samples_per_class + s] = to_patches(render_image(classes[cid], rng, render))
            labels[k * samples_per_class + s] = cid
    return Dataset(name, images, labels, classes)


def split_base_novel(dataset: Dataset, base_fraction: float, seed: int,
                     test_per_class: int = 20, k_shot: int = 16) -> SplitSpec:
    if not 0 < base_fraction < 1:
        raise ValueError(f"base_fraction must lie in (0, 1), got {base_fraction}")
    ids = dataset.class_ids
    n_base = int(round(base_fraction * len(ids)))
    if n_base == 0 or n_base == len(ids):
        raise ValueError(f"base_fraction {base_fraction} leaves an empty base or novel set over {len(ids)} classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    order = [ids[i] for i in rng.permutation(len(ids))]
    spec = SplitSpec(sorted(order[:n_base]), sorted(order[n_base:]), k_shot=k_shot, seed=seed)
    _fill_pools(dataset, spec, test_per_class, rng)
    return spec


def whole_split(dataset: Dataset, seed: int, test_per_class: int = 20, k_shot: int = 16) -> SplitSpec:
    """Every class is a training class; used by the cross-dataset, domain and few-shot protocols."""
    spec = SplitSpec(dataset.class_ids, [], k_shot=k_shot, seed=seed)
    _fill_pools(dataset, spec, test_per_class, np.random.default_rng(np.random.SeedSequence([seed, 11])))
    return spec


def _fill_pools(dataset: Dataset, spec: SplitSpec, test_per_class: int, rng: np.random.Generator) -> None:
    for cid in dataset.class_ids:
        idx = np.flatnonzero(dataset.labels == cid)
        idx = idx[rng.permutation(len(idx))]
        n_test = min(test_per_class, len(idx))
        spec.test_index[cid] = sorted(int(i) for i in idx[:n_test])
        spec.train_pool[cid] = sorted(int(i) for i in idx[n_test:])


def sample_k_shot(dataset: Dataset, split: SplitSpec, k: int, seed: int) -> Dataset:
    """Exactly ``k`` training samples per base class, without replacement."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    picked = []
    for cid in split.base_classes:
        pool = split.train_pool.get(cid, [])
        if len(pool) < k:
            raise ValueError(f"class {cid} ({dataset.classes[cid].name}) has {len(pool)} training samples, {k} requested")
        picked.extend(sorted(pool[i] for i in rng.choice(len(pool), size=k, replace=False)))
    return dataset.subset(np.asarray(picked, dtype=np.int64), split.base_classes)


def test_set(dataset: Dataset, split: SplitSpec, class_ids) -> Dataset:
    index = [i for cid in class_ids for i in split.test_index[cid]]
    return dataset.subset(np.asarray(index, dtype=np.int64), class_ids)


def _hue_matrix(angle: float) -> np.ndarray:
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def domain_shift(dataset: Dataset, shift_kind: str, magnitude: float, seed: int = 0) -> Dataset:
    """Same classes and labels under a perturbed rendering regime."""
    if shift_kind not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {shift_kind!r}; expected one of {SHIFT_KINDS}")
    out = dataset.images.copy()
    tag = f"{shift_kind}@{magnitude:g}"
    if magnitude == 0:
        return Dataset(dataset.name, out, dataset.labels.copy(), dict(dataset.classes), tag)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    pix = out.reshape(len(out), -1, CHANNELS)
    if shift_kind == "hue-rotation":
        pix = pix @ _hue_matrix(magnitude * np.pi).T
    elif shift_kind == "noise-boost":
        pix = pix + rng.normal(0.0, magnitude, pix.shape)
    elif shift_kind == "texture-swap":
        yy, xx = np.mgrid[0:SIDE, 0:SIDE]
        checker = to_patches(np.repeat((((xx + yy) % 2).astype(float))[..., None], CHANNELS, axis=2))
        pix = (out * (1.0 - magnitude * checker)).reshape(len(out), -1, CHANNELS)
    elif shift_kind == "blur":
        blurred = np.stack([to_patches(_box_blur(from_patches(im))) for im in out])
        pix = ((1.0 - magnitude) * out + magnitude * blurred).reshape(len(out), -1, CHANNELS)
    out = np.clip(pix, 0.0, 1.0).reshape(dataset.images.shape)
    return Dataset(dataset.name, out, dataset.labels.copy(), dict(dataset.classes), tag)


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = sum(padded[dy:dy + SIDE, dx:dx + SIDE] for dy in range(3) for dx in range(3))
    return acc / 9.0


# cache files


def config_digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def cached_corpus(path: Path, n_classes: int, samples_per_class: int, render: RenderConfig,
                  seed: int, class_ids, name: str) -> Dataset:
    """Load a corpus from ``path`` unless its header digest is stale; regenerate and rewrite otherwise."""
    path = Path(path)
    digest = config_digest({"n": n_classes, "spc": samples_per_class, "render": asdict(render),
                            "ids": list(class_ids), "name": name})
    if path.exists():
        with np.load(path, allow_pickle=False) as z:
            if int(z["seed"]) == seed and str(z["digest"]) == digest:
                render_classes = {cid: make_class(cid, render) for cid in z["class_ids"].tolist()}
                return Dataset(name, z["images"], z["labels"], render_classes)
    ds = generate_corpus(n_classes, samples_per_class, render, seed, class_ids, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, seed=seed, digest=digest, class_ids=np.asarray(ds.class_ids),
                 images=ds.images, labels=ds.labels)
    return ds


def write_class_list(dataset: Dataset, path: Path) -> None:
    lines = [f"{cid}\t{dataset.classes[cid].name}" for cid in dataset.class_ids]
    Path(path).write_text("\n".join(lines) + "\n")

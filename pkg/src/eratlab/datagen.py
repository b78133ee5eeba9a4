"""Synthetic datasets with hidden ground truth, and weak/strong augmentation.

Dataset file format (UTF-8 text):

    eratlab-dataset v1
    n=<N> d=<d> k=<K> image=<side>x<side>|none
    <given> <true> <feature_0> ... <feature_{d-1}>     (one line per sample)

Labels are class indices (one-hot on load); features are ``float.hex`` so a
write/read cycle is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DATASET_MAGIC = "eratlab-dataset v1"


class TruthAccessError(RuntimeError):
    """Ground-truth labels were read from a dataset that hides them."""


@dataclass
class Dataset:
    features: np.ndarray
    given_labels: np.ndarray
    _true_labels: np.ndarray | None
    num_classes: int
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.given_labels = np.asarray(self.given_labels, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be N x d, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.given_labels.shape != (n, self.num_classes):
            raise ValueError(f"given_labels shape {self.given_labels.shape} != ({n}, {self.num_classes})")
        if self._true_labels is not None and np.shape(self._true_labels) != (n, self.num_classes):
            raise ValueError("true_labels shape does not match given_labels")
        if np.any(self.features < 0) or np.any(self.features > 1):
            raise ValueError("features must lie in [0, 1]")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def true_labels(self) -> np.ndarray:
        if self._true_labels is None:
            raise TruthAccessError("ground-truth labels are hidden for this dataset")
        return self._true_labels

    @property
    def has_truth(self) -> bool:
        return self._true_labels is not None

    @property
    def given_classes(self) -> np.ndarray:
        return self.given_labels.argmax(axis=1)

    @property
    def true_classes(self) -> np.ndarray:
        return self.true_labels.argmax(axis=1)

    def hide_truth(self) -> Dataset:
        return replace(self, _true_labels=None)

    def with_features(self, features) -> Dataset:
        return replace(self, features=np.asarray(features, dtype=np.float64))

    def with_given(self, given_labels) -> Dataset:
        return replace(self, given_labels=np.asarray(given_labels, dtype=np.float64))

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        truth = None if self._true_labels is None else self._true_labels[idx]
        return replace(self, features=self.features[idx], given_labels=self.given_labels[idx], _true_labels=truth)

    def class_counts(self, which: str = "given") -> np.ndarray:
        classes = self.given_classes if which == "given" else self.true_classes
        return np.bincount(classes, minlength=self.num_classes)


def _one_hot(classes: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((classes.size, k))
    out[np.arange(classes.size), classes] = 1.0
    return out


def _make(features: np.ndarray, classes: np.ndarray, k: int, image_shape=None) -> Dataset:
    labels = _one_hot(classes, k)
    return Dataset(features, labels, labels.copy(), k, image_shape)


def _check_counts(k: int, per_class: int) -> None:
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    if per_class < 1:
        raise ValueError(f"need at least 1 sample per class, got {per_class}")


def make_blobs(k: int, per_class: int, d: int, spread: float, seed: int, center_range=(0.25, 0.75)) -> Dataset:
    """Isotropic Gaussian clusters clipped to the unit cube, grouped by class."""
    _check_counts(k, per_class)
    if d < 1 or spread < 0:
        raise ValueError(f"invalid blob geometry d={d} spread={spread}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(*center_range, size=(k, d))
    classes = np.repeat(np.arange(k), per_class)
    x = centers[classes] + spread * rng.standard_normal((classes.size, d))
    return _make(np.clip(x, 0.0, 1.0), classes, k)


def grid_templates(k: int, side: int, seed: int) -> np.ndarray:
    """K left-right mirror-symmetric patterns in {0.2, 0.8}, so a flip keeps the class."""
    rng = np.random.default_rng(seed)
    half = (side + 1) // 2
    left = rng.integers(0, 2, size=(k, side, half)).astype(np.float64)
    full = np.concatenate([left, left[:, :, : side // 2][:, :, ::-1]], axis=2)
    return 0.2 + 0.6 * full


def make_grid_images(k: int, per_class: int, side: int, seed: int, noise: float = 0.15) -> Dataset:
    """Template images plus Gaussian pixel noise, flattened to side*side features."""
    _check_counts(k, per_class)
    if side < 5:
        raise ValueError(f"image side must be at least 5, got {side}")
    templates = grid_templates(k, side, seed)
    rng = np.random.default_rng(seed + 1)
    classes = np.repeat(np.arange(k), per_class)
    x = templates[classes].reshape(classes.size, -1) + noise * rng.standard_normal((classes.size, side * side))
    return _make(np.clip(x, 0.0, 1.0), classes, k, (side, side))


def train_test_split(ds: Dataset, train_per_class: int) -> tuple[Dataset, Dataset]:
    """Stratified split taking the first ``train_per_class`` rows of each class."""
    classes = ds.given_classes
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        rows = np.flatnonzero(classes == c)
        train_idx.append(rows[:train_per_class])
        test_idx.append(rows[train_per_class:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugOp:
    name: str
    prob: float
    magnitude: float = 0.0


WEAK_OPS = (AugOp("flip", 0.5), AugOp("erase", 0.5, 0.15))
STRONG_OPS = (
    AugOp("flip", 0.5),
    AugOp("erase", 0.4, 0.3),
    AugOp("jitter", 0.4, 0.1),
    AugOp("scale", 0.4, 0.2),
    AugOp("translate", 0.4, 2.0),
    AugOp("contrast", 0.4, 0.4),
)


@dataclass
class AugmentationPolicy:
    """A set of ops, each applied independently per sample with its own probability.

    Weak: horizontal flip + small random erasing. Strong: flip followed by an
    independent draw over a pool of larger erasing, additive jitter, feature
    scaling, translation and contrast remapping. Spatial ops (flip, translate)
    need ``image_shape`` and are skipped for flat feature vectors; erasing then
    zeroes a contiguous run of features.
    """

    kind: str
    image_shape: tuple[int, int] | None = None
    seed: int = 0
    ops: tuple[AugOp, ...] = ()
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("weak", "strong", "none"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if not self.ops:
            self.ops = {"weak": WEAK_OPS, "strong": STRONG_OPS, "none": ()}[self.kind]
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return augment(self, x)


def _apply_mask(x: np.ndarray, coin: np.ndarray) -> np.ndarray:
    return coin.reshape(-1, *([1] * (x.ndim - 1)))


def flip(x: np.ndarray, coin: np.ndarray) -> np.ndarray:
    """Horizontal flip of (N, H, W) images where ``coin`` is True."""
    return np.where(_apply_mask(x, coin), x[:, :, ::-1], x)


def erase(x: np.ndarray, top: np.ndarray, left: np.ndarray, height: np.ndarray, width: np.ndarray) -> np.ndarray:
    """Zero an axis-aligned rectangle per image (N, H, W); zero area is the identity."""
    rows = np.arange(x.shape[1])[None, :]
    cols = np.arange(x.shape[2])[None, :]
    rmask = (rows >= top[:, None]) & (rows < (top + height)[:, None])
    cmask = (cols >= left[:, None]) & (cols < (left + width)[:, None])
    mask = rmask[:, :, None] & cmask[:, None, :]
    return np.where(mask, 0.0, x)


def _random_erase(x, rng, coin, max_area):
    n, h, w = x.shape
    area = rng.uniform(0.02, max_area, size=n) * h * w
    if h == 1:
        height = np.ones(n, dtype=np.int64)
        width = np.clip(np.round(area), 1, w).astype(np.int64)
    else:
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=n))
        height = np.clip(np.round(np.sqrt(area * aspect)), 1, h).astype(np.int64)
        width = np.clip(np.round(np.sqrt(area / aspect)), 1, w).astype(np.int64)
    top = rng.integers(0, h - height + 1)
    left = rng.integers(0, w - width + 1)
    height = np.where(coin, height, 0)
    return erase(x, top, left, height, width)


def _translate(x, rng, coin, max_shift):
    n, h, w = x.shape
    m = int(max_shift)
    dy = rng.integers(-m, m + 1, size=n)
    dx = rng.integers(-m, m + 1, size=n)
    padded = np.pad(x, ((0, 0), (m, m), (m, m)))
    out = np.empty_like(x)
    for i in range(n):
        if coin[i]:
            out[i] = padded[i, m + dy[i] : m + dy[i] + h, m + dx[i] : m + dx[i] + w]
        else:
            out[i] = x[i]
    return out


def augment(policy: AugmentationPolicy, x: np.ndarray) -> np.ndarray:
    """Apply ``policy`` to a batch (N, d) or a single sample (d,); output stays in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None] if single else x
    n, d = batch.shape
    spatial = policy.image_shape is not None
    shape = policy.image_shape if spatial else (1, d)
    out = batch.reshape(n, *shape).copy()
    rng = policy.rng
    for op in policy.ops:
        coin = rng.random(n) < op.prob
        if op.name == "flip":
            if spatial and shape[1] > 1:
                out = flip(out, coin)
        elif op.name == "erase":
            out = _random_erase(out, rng, coin, op.magnitude)
        elif op.name == "jitter":
            noise = rng.uniform(-op.magnitude, op.magnitude, size=out.shape)
            out = np.clip(out + noise * _apply_mask(out, coin), 0.0, 1.0)
        elif op.name == "scale":
            if spatial:
                factor = rng.uniform(1 - op.magnitude, 1 + op.magnitude, size=(n, 1, 1))
            else:
                factor = rng.uniform(1 - op.magnitude, 1 + op.magnitude, size=out.shape)
            out = np.where(_apply_mask(out, coin), np.clip(out * factor, 0.0, 1.0), out)
        elif op.name == "translate":
            if spatial:
                out = _translate(out, rng, coin, op.magnitude)
        elif op.name == "contrast":
            c = rng.uniform(1 - op.magnitude, 1 + op.magnitude, size=(n, 1, 1))
            m = out.mean(axis=(1, 2), keepdims=True)
            out = np.where(_apply_mask(out, coin), np.clip(m + c * (out - m), 0.0, 1.0), out)
        else:
            raise ValueError(f"unknown augmentation op {op.name!r}")
    out = out.reshape(n, d)
    return out[0] if single else out


# ---------------------------------------------------------------- file format


def save_dataset(ds: Dataset, path) -> None:
    image = "x".join(str(s) for s in ds.image_shape) if ds.image_shape else "none"
    truth = ds.true_classes if ds.has_truth else np.full(len(ds), -1)
    lines = [DATASET_MAGIC, f"n={len(ds)} d={ds.dim} k={ds.num_classes} image={image}"]
    for g, t, row in zip(ds.given_classes, truth, ds.features):
        lines.append(f"{g} {t} " + " ".join(float(v).hex() for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != DATASET_MAGIC:
        raise ValueError(f"{path}: not an eratlab dataset file (bad header)")
    meta = dict(item.split("=") for item in lines[1].split())
    n, d, k = int(meta["n"]), int(meta["d"]), int(meta["k"])
    image = None if meta["image"] == "none" else tuple(int(s) for s in meta["image"].split("x"))
    given = np.empty(n, dtype=np.int64)
    truth = np.empty(n, dtype=np.int64)
    features = np.empty((n, d))
    for i, line in enumerate(lines[2 : 2 + n]):
        parts = line.split()
        if len(parts) != d + 2:
            raise ValueError(f"{path}:{i + 3}: expected {d + 2} fields, got {len(parts)}")
        given[i], truth[i] = int(parts[0]), int(parts[1])
        features[i] = [float.fromhex(v) for v in parts[2:]]
    true_labels = None if np.all(truth < 0) else _one_hot(truth, k)
    return Dataset(features, _one_hot(given, k), true_labels, k, image)

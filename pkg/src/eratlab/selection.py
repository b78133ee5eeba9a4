"""Score-based sample selection with class rebalancing.

Per epoch: score every sample by how far the prediction sits from its given
label, keep the samples at or under the mean score as the raw labeled set,
then re-split that budget across classes with rates driven by how well the
model fits each class on last epoch's labeled set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model, check_one_hot, predict_proba

RATE_FLOOR = 1e-6
EMPTY_CLASS_SCORE = 1.0


@dataclass(frozen=True)
class SelectionConfig:
    eta: float = 0.1
    rebalance: bool = True
    score_fn: str = "sqdist"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.score_fn not in ("sqdist", "ce"):
            raise ValueError(f"score_fn must be 'sqdist' or 'ce', got {self.score_fn!r}")


@dataclass
class DatasetSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray

    def __post_init__(self):
        self.labeled = np.asarray(self.labeled, dtype=np.int64)
        self.unlabeled = np.asarray(self.unlabeled, dtype=np.int64)


@dataclass
class SelectionState:
    scores: np.ndarray
    threshold: float
    raw_labeled: np.ndarray
    class_scores: np.ndarray
    sampling_rates: np.ndarray
    class_quotas: np.ndarray
    previous_labeled: np.ndarray


def score(model: Model, x, y, kind: str = "sqdist") -> np.ndarray:
    """Per-sample ||P(x) - y||^2 (in [0, 2]); ``kind="ce"`` gives -log P(x)[y] instead."""
    y = check_one_hot(y)
    p = predict_proba(model, x)
    if kind == "ce":
        return -np.log(np.maximum((p * y).sum(axis=1), 1e-300))
    return ((p - y) ** 2).sum(axis=1)


def threshold_partition(scores) -> tuple[np.ndarray, np.ndarray, float]:
    """Labeled iff score <= mean score."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("threshold_partition needs at least one score")
    mu = float(scores.mean())
    keep = scores <= mu
    return np.flatnonzero(keep), np.flatnonzero(~keep), mu


def class_scores(scores, given_classes, previous_labeled, num_classes: int) -> np.ndarray:
    """Mean score of last epoch's labeled samples in each given class (1.0 if a class is empty)."""
    scores = np.asarray(scores, dtype=np.float64)
    prev = np.asarray(previous_labeled, dtype=np.int64)
    cls = np.asarray(given_classes)[prev]
    sums = np.bincount(cls, weights=scores[prev], minlength=num_classes)
    counts = np.bincount(cls, minlength=num_classes)
    out = np.full(num_classes, EMPTY_CLASS_SCORE)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz]
    return out


def sampling_rates(class_score, eta: float) -> np.ndarray:
    """R_k proportional to max(1 - S_k, 1e-6) ** eta."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    base = np.maximum(1.0 - np.asarray(class_score, dtype=np.float64), RATE_FLOOR) ** eta
    return base / base.sum()


def class_quotas(total: int, rates) -> np.ndarray:
    """floor(total * R_k), leftover slots to the largest fractional parts (lower class index on ties)."""
    rates = np.asarray(rates, dtype=np.float64)
    exact = total * rates
    quotas = np.floor(exact).astype(np.int64)
    leftover = int(total - quotas.sum())
    if leftover > 0:
        frac = exact - quotas
        order = np.lexsort((np.arange(rates.size), -frac))
        quotas[order[:leftover]] += 1
    return quotas


def rebalanced_select(scores, given_classes, raw_labeled_size: int, rates) -> tuple[DatasetSplit, np.ndarray]:
    """Per class, the d_k smallest scores go to the labeled set (whole class if d_k exceeds it)."""
    scores = np.asarray(scores, dtype=np.float64)
    given_classes = np.asarray(given_classes)
    quotas = class_quotas(raw_labeled_size, rates)
    picked = []
    for k, q in enumerate(quotas):
        members = np.flatnonzero(given_classes == k)
        order = members[np.argsort(scores[members], kind="stable")]
        picked.append(order[:q])
    labeled = np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)
    mask = np.zeros(scores.size, dtype=bool)
    mask[labeled] = True
    return DatasetSplit(labeled, np.flatnonzero(~mask)), quotas


def select(scores, given_classes, previous_labeled, config: SelectionConfig, num_classes: int):
    """One full selection round; returns (DatasetSplit, SelectionState)."""
    raw_l, raw_u, mu = threshold_partition(scores)
    s_k = class_scores(scores, given_classes, previous_labeled, num_classes)
    r_k = sampling_rates(s_k, config.eta)
    if config.rebalance:
        split, quotas = rebalanced_select(scores, given_classes, raw_l.size, r_k)
    else:
        split = DatasetSplit(raw_l, raw_u)
        quotas = np.bincount(np.asarray(given_classes)[raw_l], minlength=num_classes)
    state = SelectionState(
        scores=np.asarray(scores, dtype=np.float64),
        threshold=mu,
        raw_labeled=raw_l,
        class_scores=s_k,
        sampling_rates=r_k,
        class_quotas=quotas,
        previous_labeled=np.asarray(previous_labeled, dtype=np.int64),
    )
    return split, state


def count_entropy(counts) -> float:
    """Shannon entropy (nats) of a count vector viewed as a distribution."""
    c = np.asarray(counts, dtype=np.float64)
    p = c[c > 0] / c.sum()
    return float(-(p * np.log(p)).sum()) + 0.0  # + 0.0 turns -0.0 into 0.0


def selection_audit(split: DatasetSplit, state: SelectionState, given_classes, num_classes: int, true_classes=None) -> dict:
    given_classes = np.asarray(given_classes)
    counts = np.bincount(given_classes[split.labeled], minlength=num_classes)
    audit = {
        "mu": state.threshold,
        "raw_labeled": int(state.raw_labeled.size),
        "class_scores": state.class_scores.tolist(),
        "sampling_rates": state.sampling_rates.tolist(),
        "class_quotas": np.asarray(state.class_quotas).tolist(),
        "labeled_counts": counts.tolist(),
        "labeled_entropy": count_entropy(counts),
        "precision": None,
        "recall": None,
    }
    if true_classes is not None:
        clean = np.asarray(true_classes) == given_classes
        n_sel = split.labeled.size
        hits = int(clean[split.labeled].sum())
        audit["precision"] = hits / n_sel if n_sel else 0.0
        audit["recall"] = hits / int(clean.sum()) if clean.any() else 0.0
    return audit

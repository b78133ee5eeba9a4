"""Label-noise models and data-poisoning attacks applied to clean datasets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .datagen import Dataset
from .model import SGD, Model, build_model, cross_entropy, one_hot, predict
from .pgd import AttackBudget, norms, pgd_attack, targeted_loss
from . import tensor as T

logger = logging.getLogger(__name__)

NOISE_KINDS = ("none", "inst", "symm", "asymm")
POISON_FAMILIES = ("none", "up", "ap", "uap", "uhp", "urp", "sample_errmax")
CLASSWISE = ("uap", "uhp", "urp")
NEEDS_VICTIM = ("up", "ap", "uap", "uhp", "sample_errmax")


@dataclass(frozen=True)
class NoiseSpec:
    """``sink_class`` (inst only) routes every flip to one class when possible."""

    kind: str = "none"
    rate: float = 0.0
    seed: int = 0
    sink_class: int | None = None
    rate_std: float = 0.1

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        limit_ok = self.rate <= 1.0 if self.kind == "asymm" else self.rate < 1.0
        if not (self.rate >= 0.0 and limit_ok):
            raise ValueError(f"noise rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class PoisonSpec:
    family: str = "none"
    budget: AttackBudget = field(default_factory=lambda: AttackBudget("linf", 8 / 255))
    target_class: int | None = None
    seed: int = 0
    rounds: int = 3
    victim_epochs: int = 1
    lr: float = 0.05

    def __post_init__(self):
        if self.family not in POISON_FAMILIES:
            raise ValueError(f"poison family must be one of {POISON_FAMILIES}, got {self.family!r}")
        if self.family in ("ap", "uap") and self.target_class is None:
            object.__setattr__(self, "target_class", 0)


class MissingVictimError(ValueError):
    pass


# ---------------------------------------------------------------- labels


def corrupt_labels(ds: Dataset, spec: NoiseSpec) -> Dataset:
    """Return a copy of ``ds`` with ``given_labels`` corrupted; features untouched."""
    k = ds.num_classes
    given = ds.given_classes
    if spec.kind == "none" or spec.rate == 0.0:
        return ds.with_given(ds.given_labels.copy())
    rng = np.random.default_rng(spec.seed)
    n = len(ds)
    if spec.kind == "symm":
        flip = rng.random(n) < spec.rate
        dest = (given + rng.integers(1, k, size=n)) % k
    elif spec.kind == "asymm":
        flip = rng.random(n) < spec.rate
        dest = (given + 1) % k
    else:
        sd = spec.rate_std
        lo, hi = (0.0 - spec.rate) / sd, (1.0 - spec.rate) / sd
        flip_prob = truncnorm.rvs(lo, hi, loc=spec.rate, scale=sd, size=n, random_state=rng)
        flip = rng.random(n) < flip_prob
        projection = rng.standard_normal((ds.dim, k))
        affinity = ds.features @ projection
        affinity[np.arange(n), given] = -np.inf
        if spec.sink_class is not None:
            if not 0 <= spec.sink_class < k:
                raise ValueError(f"sink_class {spec.sink_class} out of range for {k} classes")
            affinity[given != spec.sink_class, spec.sink_class] = np.inf
        dest = affinity.argmax(axis=1)
    new = np.where(flip, dest, given)
    return ds.with_given(one_hot(new, k))


def flip_audit(clean: Dataset, noisy: Dataset) -> dict:
    before, after = clean.given_classes, noisy.given_classes
    flipped = before != after
    k = clean.num_classes
    return {
        "flipped": int(flipped.sum()),
        "flip_fraction": float(flipped.mean()),
        "flips_from_class": np.bincount(before[flipped], minlength=k).tolist(),
        "flips_to_class": np.bincount(after[flipped], minlength=k).tolist(),
        "given_counts": np.bincount(after, minlength=k).tolist(),
    }


# ---------------------------------------------------------------- poisons


def _fit_epochs(model: Model, x, y, epochs: int, lr: float, rng, batch_size: int = 64) -> None:
    opt = SGD(model.params, lr=lr)
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = cross_entropy(predict(model, x[idx]), y[idx])
            opt.step(T.grad(loss, model.params))


def fit_victim(ds: Dataset, arch: str, epochs: int, seed: int = 0, lr: float = 0.05) -> Model:
    """A fresh model trained briefly with plain CE on the given labels; the surrogate for poison crafting."""
    victim = build_model(arch, seed=seed)
    _fit_epochs(victim, ds.features, ds.given_labels, epochs, lr, np.random.default_rng(seed))
    return victim


def _batched(loss_builder, x, y, budget, batch_size=256, init=None):
    out = np.empty_like(x)
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        init_b = None if init is None else init[sl]
        out[sl] = pgd_attack(loss_builder(y[sl]), x[sl], budget, init=init_b).delta
    return out


def random_direction(rng: np.random.Generator, shape, norm: str, epsilon: float) -> np.ndarray:
    """A random vector with norm exactly ``epsilon``."""
    if norm == "linf":
        return epsilon * rng.choice([-1.0, 1.0], size=shape)
    v = rng.standard_normal(shape)
    return epsilon * v / np.linalg.norm(v)


def poison_data(ds: Dataset, spec: PoisonSpec, victim: Model | None = None, return_info: bool = False):
    """Replace features with clip(x + delta, 0, 1); labels are untouched.

    Sample-wise families: up, ap, sample_errmax. Class-wise (one delta per
    class, shared by its members): uap, uhp, urp. ``up`` alternates brief
    victim training with error-minimizing PGD for ``spec.rounds`` rounds.
    """
    budget = spec.budget
    x = ds.features
    y = ds.given_labels
    classes = ds.given_classes
    k = ds.num_classes
    rng = np.random.default_rng(spec.seed)
    if spec.family in NEEDS_VICTIM and victim is None:
        raise MissingVictimError(f"poison family {spec.family!r} needs a victim model")
    if spec.target_class is not None and not 0 <= spec.target_class < k:
        raise ValueError(f"target_class {spec.target_class} out of range for {k} classes")
    class_deltas = None

    if spec.family == "none" or budget.epsilon == 0:
        delta = np.zeros_like(x)
    elif spec.family == "urp":
        class_deltas = np.stack([random_direction(rng, x.shape[1], budget.norm, budget.epsilon) for _ in range(k)])
        delta = class_deltas[classes]
    elif spec.family in ("uap", "uhp"):
        class_deltas = np.zeros((k, x.shape[1]))
        for c in range(k):
            rows = classes == c
            if not rows.any():
                continue
            target = one_hot(np.full(rows.sum(), spec.target_class), k) if spec.family == "uap" else y[rows]
            pert = pgd_attack(targeted_loss(victim, target), x[rows], budget, shared=True)
            class_deltas[c] = pert.raw[0]
        delta = class_deltas[classes]
    elif spec.family == "ap":
        target = one_hot(np.full(len(x), spec.target_class), k)
        delta = _batched(lambda t: targeted_loss(victim, t), x, target, budget)
    elif spec.family == "sample_errmax":
        delta = _batched(lambda t: targeted_loss(victim, t, sign=-1.0), x, y, budget)
    elif spec.family == "up":
        surrogate = victim.copy()
        delta = np.zeros_like(x)
        for _ in range(int(spec.rounds)):
            _fit_epochs(surrogate, np.clip(x + delta, 0, 1), y, spec.victim_epochs, spec.lr, rng)
            delta = _batched(lambda t: targeted_loss(surrogate, t), x, y, budget, init=delta)
    else:
        raise ValueError(f"unknown poison family {spec.family!r}")

    poisoned = np.clip(x + delta, 0.0, 1.0)
    out = ds.with_features(poisoned)
    if not return_info:
        return out
    info = {"family": spec.family, "budget": budget.label(), "class_deltas": class_deltas}
    info.update(perturbation_audit(ds, out, budget))
    return out, info


def sample_errmax_poison(ds: Dataset, budget: AttackBudget, victim: Model, seed: int = 0) -> Dataset:
    """Per-sample error-maximizing PGD poison (stand-in for a learned generator)."""
    return poison_data(ds, PoisonSpec("sample_errmax", budget, seed=seed), victim)


def perturbation_audit(clean: Dataset, poisoned: Dataset, budget: AttackBudget) -> dict:
    diff = poisoned.features - clean.features
    norm_vals = norms(diff, budget.norm)
    max_norm = float(norm_vals.max()) if len(norm_vals) else 0.0
    return {
        "max_linf": float(np.abs(diff).max()) if diff.size else 0.0,
        "max_l2": float(norms(diff, "l2").max()) if len(diff) else 0.0,
        "max_norm": max_norm,
        "norm": budget.norm,
        "epsilon": budget.epsilon,
        "within_budget": bool(max_norm <= budget.epsilon + 1e-9),
        "labels_unchanged": bool(np.array_equal(clean.given_labels, poisoned.given_labels)),
    }

"""Projected gradient descent over l-inf and l2 balls.

``pgd_attack`` *minimizes* the supplied loss. Attacks that want to maximize
something pass its negation; ``perturbation_loss`` is already negated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Model, cross_entropy, frozen, predict, squared_distance
from .tensor import ShapeError, Tensor

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackBudget:
    norm: str
    epsilon: float
    step_size: float | None = None
    steps: int = 7

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 4)
        if self.epsilon > 0 and not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if int(self.steps) < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def label(self) -> str:
        return f"{self.norm}:{self.epsilon:g}"


@dataclass
class Perturbation:
    """``delta`` is the final, box-clipped offset; ``raw`` is the iterate before the box clip."""

    delta: np.ndarray
    budget: AttackBudget
    raw: np.ndarray | None = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x + self.delta, 0.0, 1.0)

    def norms(self) -> np.ndarray:
        return norms(self.delta, self.budget.norm)


def norms(delta: np.ndarray, norm: str) -> np.ndarray:
    """Per-row norm over all non-batch axes."""
    flat = np.asarray(delta).reshape(np.shape(delta)[0], -1) if np.ndim(delta) > 1 else np.atleast_2d(delta)
    if norm == "linf":
        return np.abs(flat).max(axis=1)
    return np.sqrt((flat * flat).sum(axis=1))


def project(delta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Euclidean projection of each row onto the ``norm`` ball of radius ``epsilon``."""
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    n = norms(delta, "l2")
    scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
    return delta * scale.reshape(-1, *([1] * (delta.ndim - 1)))


def pgd_step(delta: np.ndarray, g: np.ndarray, budget: AttackBudget) -> np.ndarray:
    """One descent step then projection. Rows with an all-zero gradient are left where they are."""
    if budget.norm == "linf":
        step = np.sign(g)
    else:
        gn = norms(g, "l2").reshape(-1, *([1] * (g.ndim - 1)))
        step = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
    return project(delta - budget.step_size * step, budget.norm, budget.epsilon)


def pgd_attack(loss_fn, x, budget: AttackBudget, y=None, shared: bool = False, init=None) -> Perturbation:
    """Minimize ``loss_fn(x + delta[, y])`` over the budget's ball, starting at delta = 0.

    ``shared=True`` optimizes a single delta broadcast over the batch (class-wise
    perturbations); the norm then applies to that one vector. After the last
    step the perturbed input is clipped to [0, 1] and ``delta`` is recomputed as
    ``x_adv - x``, which can only shrink it.
    """
    x = np.asarray(x, dtype=np.float64)
    dshape = (1, *x.shape[1:]) if shared else x.shape
    delta = np.zeros(dshape) if init is None else np.array(np.broadcast_to(init, dshape), dtype=np.float64)
    if budget.epsilon > 0:
        delta = project(delta, budget.norm, budget.epsilon)
        for _ in range(int(budget.steps)):
            xp = Tensor(x + delta, requires_grad=True)
            loss = loss_fn(xp) if y is None else loss_fn(xp, y)
            (g,) = T.grad(loss, [xp])
            if shared:
                g = g.sum(axis=0, keepdims=True)
            delta = pgd_step(delta, g, budget)
    else:
        delta = np.zeros(dshape)
    x_adv = np.clip(x + delta, 0.0, 1.0)
    return Perturbation(x_adv - x, budget, raw=delta)


def perturbation_loss(model: Model, x, x_perturbed, y) -> Tensor:
    """Negated semantic-shift objective, mean over the batch.

    -( ||P(x + delta) - P(x)||^2 + CE(P(x + delta), y) ). The clean prediction
    is a constant; gradients flow only through ``x_perturbed``.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xp = x_perturbed if isinstance(x_perturbed, Tensor) else Tensor(x_perturbed)
    if xp.shape != x.shape:
        raise ShapeError(f"perturbation_loss: shapes {x.shape} and {xp.shape} differ")
    with frozen(model):
        clean = predict(model, x).probs.data
        pred = predict(model, xp)
        shift = T.mean(squared_distance(pred.probs, clean))
        ce = cross_entropy(pred, y)
    return T.neg(T.add(shift, ce))


def generate_adversarial(model: Model, x, y, budget: AttackBudget) -> np.ndarray:
    """Adversarial inputs for training: PGD on ``perturbation_loss`` against a frozen model."""
    x = np.asarray(x, dtype=np.float64)
    pert = pgd_attack(lambda xp, yy: perturbation_loss(model, x, xp, yy), x, budget, y=y)
    return pert.apply(x)


def targeted_loss(model: Model, target, sign: float = 1.0):
    """``sign * CE(P(x), target)`` as a loss_fn for ``pgd_attack``."""

    def loss_fn(xp: Tensor) -> Tensor:
        with frozen(model):
            ce = cross_entropy(predict(model, xp), target)
        return ce if sign > 0 else T.neg(ce)

    return loss_fn


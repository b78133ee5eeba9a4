"""Warmup, per-epoch selection, hybrid adversarial views and the semi-supervised objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .datagen import AugmentationPolicy, Dataset
from .model import SGD, Model, build_model, cross_entropy, frozen, one_hot, predict, predict_proba, squared_distance
from .pgd import AttackBudget, generate_adversarial
from .selection import DatasetSplit, SelectionConfig, score, select, selection_audit
from .tensor import Tensor

logger = logging.getLogger(__name__)


def default_budgets() -> tuple[AttackBudget, ...]:
    return (AttackBudget("linf", 8 / 255), AttackBudget("l2", 0.5))


@dataclass
class TrainConfig:
    arch: str | None = None
    batch_size: int = 64
    warmup_epochs: int = 5
    total_epochs: int = 40
    lr: float = 0.05
    lr_decay: float = 0.1
    lr_decay_at: float = 0.6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta: float = 0.1
    lambda_scale: float = 25.0
    lambda_ramp: float = 16.0
    defense_budgets: tuple[AttackBudget, ...] = field(default_factory=default_budgets)
    seed: int = 0
    # ablation switches; each turns off exactly one mechanism
    selection: bool = True
    rebalance: bool = True
    uniform: bool = True
    score_fn: str = "sqdist"
    strong_aug: bool = True
    adversarial: bool = True

    def __post_init__(self):
        self.defense_budgets = tuple(self.defense_budgets)
        if self.warmup_epochs < 0 or self.total_epochs < self.warmup_epochs:
            raise ValueError(f"need 0 <= warmup_epochs <= total_epochs, got {self.warmup_epochs}, {self.total_epochs}")
        if self.adversarial and not self.defense_budgets:
            raise ValueError("at least one defense budget is required")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")

    def lr_at(self, epoch: int) -> float:
        decay_epoch = round(self.lr_decay_at * self.total_epochs)
        return self.lr * (self.lr_decay if epoch >= decay_epoch else 1.0)


@dataclass
class EpochReport:
    epoch: int
    phase: str
    loss_l: float
    loss_u: float
    loss_s: float
    lam: float
    test_acc: float | None
    draw_counts: list[int]
    poison_calls: int
    selection: dict | None = None


class TrainingDivergedError(RuntimeError):
    pass


def lambda_schedule(t_e: float, scale: float = 25.0, ramp: float = 16.0) -> float:
    """scale * clip(t_e / ramp, 0, 1)."""
    if ramp <= 0:
        return float(scale)
    return float(scale) * min(max(t_e / ramp, 0.0), 1.0)


def accuracy(model: Model, ds: Dataset, batch_size: int = 512) -> float:
    """Percent correct against ground truth."""
    truth = ds.true_classes
    hits = 0
    for start in range(0, len(ds), batch_size):
        p = predict_proba(model, ds.features[start : start + batch_size])
        hits += int((p.argmax(axis=1) == truth[start : start + batch_size]).sum())
    return 100.0 * hits / len(ds)


def draw_budget(budgets, rng: np.random.Generator) -> int:
    if not budgets:
        raise ValueError("empty defense budget registry")
    return int(rng.integers(len(budgets)))


def uniform_poison_batch(model: Model, x_l, y_l, x_u, pseudo_u, budgets, rng: np.random.Generator):
    """Draw one budget uniformly and perturb both batches against ``perturbation_loss``.

    The unlabeled batch uses ``pseudo_u`` (one-hot) in place of labels. Returns
    (x_l_adv, x_u_adv, index of the drawn budget).
    """
    i = draw_budget(budgets, rng)
    budget = budgets[i]
    x_l_adv = generate_adversarial(model, x_l, y_l, budget) if len(x_l) else x_l
    x_u_adv = generate_adversarial(model, x_u, pseudo_u, budget) if x_u is not None and len(x_u) else x_u
    return x_l_adv, x_u_adv, i


def supervised_loss(model: Model, x_strong, y, adv_views=()) -> Tensor:
    """Batch mean of CE(T_s(x)) + CE(x_adv) + CE(T_s(x_adv)).

    ``adv_views`` is a sequence of (x_adv, T_s(x_adv)) pairs; with more than
    one pair (all budgets at once) their terms are averaged.
    """
    if len(y) == 0:
        logger.warning("empty labeled batch; supervised loss set to 0")
        return Tensor(0.0)
    loss = cross_entropy(predict(model, x_strong), y)
    adv_views = list(adv_views)
    for x_adv, x_adv_strong in adv_views:
        term = T.add(cross_entropy(predict(model, x_adv), y), cross_entropy(predict(model, x_adv_strong), y))
        loss = T.add(loss, term if len(adv_views) == 1 else T.mul(term, 1.0 / len(adv_views)))
    return loss


def anchor_probs(model: Model, x_weak) -> np.ndarray:
    """Frozen-parameter prediction on the weak view; carries no graph."""
    with frozen(model):
        return predict(model, x_weak).probs.data.copy()


def unsupervised_loss(model: Model, x_weak, x_strong, adv_views=(), anchor=None, anchor_model: Model | None = None) -> Tensor:
    """Batch mean of squared distances from each view's prediction to the frozen weak-view anchor.

    The anchor is P(T_w(x)) under frozen parameters (``anchor_model`` if given,
    else ``model``), or a precomputed ``anchor`` array; nothing flows back through it.
    """
    if x_weak is None or len(x_weak) == 0:
        return Tensor(0.0)
    if anchor is None:
        anchor = anchor_probs(anchor_model if anchor_model is not None else model, x_weak)
    loss = T.mean(squared_distance(predict(model, x_strong).probs, anchor))
    adv_views = list(adv_views)
    for x_adv, x_adv_strong in adv_views:
        a = T.mean(squared_distance(predict(model, x_adv).probs, anchor))
        b = T.mean(squared_distance(predict(model, x_adv_strong).probs, anchor))
        term = T.add(a, b)
        loss = T.add(loss, term if len(adv_views) == 1 else T.mul(term, 1.0 / len(adv_views)))
    return loss


class Trainer:
    """Owns the model, optimizer and the RNG streams for one training run.

    Stream layout (independent, so disabling one mechanism leaves the others'
    draws unchanged): shuffle, attack-type draws, weak aug, strong aug.
    """

    def __init__(self, config: TrainConfig, train_ds: Dataset, test_ds: Dataset | None = None, model: Model | None = None):
        self.config = config
        # training path sees no ground truth; the copy below feeds the audit only
        self.ds = train_ds.hide_truth()
        self._audit_truth = train_ds.true_classes if train_ds.has_truth else None
        self.test_ds = test_ds
        k = train_ds.num_classes
        if model is None:
            arch = config.arch or f"mlp {train_ds.dim},64,64,{k}"
            model = build_model(arch, seed=config.seed)
        self.model = model
        self.num_classes = k
        self.opt = SGD(model.params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
        ss = np.random.SeedSequence(config.seed)
        s_shuffle, s_attack, s_weak, s_strong = ss.spawn(4)
        self.rng_shuffle = np.random.default_rng(s_shuffle)
        self.rng_attack = np.random.default_rng(s_attack)
        image = train_ds.image_shape
        self.weak = AugmentationPolicy("weak", image, seed=int(s_weak.generate_state(1)[0]))
        kind = "strong" if config.strong_aug else "none"
        self.strong = AugmentationPolicy(kind, image, seed=int(s_strong.generate_state(1)[0]))
        self.selection_config = SelectionConfig(config.eta, config.rebalance, config.score_fn)
        self.previous_labeled = np.arange(len(train_ds))
        self.epoch = 0
        self.reports: list[EpochReport] = []

    # -- helpers

    def _set_lr(self) -> None:
        self.opt.lr = self.config.lr_at(self.epoch)

    def _step(self, loss: Tensor, diag: dict) -> None:
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss at epoch {self.epoch}: {diag}")
        self.opt.step(T.grad(loss, self.model.params))

    def _adv_views(self, x_l, y_l, x_u, pseudo_u, draws: list[int]):
        """Adversarial views for both batches; a list of (x_l_adv, x_u_adv) pairs."""
        budgets = self.config.defense_budgets
        if not self.config.adversarial:
            return []
        if self.config.uniform:
            x_la, x_ua, i = uniform_poison_batch(self.model, x_l, y_l, x_u, pseudo_u, budgets, self.rng_attack)
            draws[i] += 1
            return [(x_la, x_ua)]
        views = []
        for i, b in enumerate(budgets):
            x_la = generate_adversarial(self.model, x_l, y_l, b)
            x_ua = generate_adversarial(self.model, x_u, pseudo_u, b) if x_u is not None else None
            draws[i] += 1
            views.append((x_la, x_ua))
        return views

    def _report(self, phase, ll, lu, ls, lam, draws, calls, audit=None) -> EpochReport:
        acc = accuracy(self.model, self.test_ds) if self.test_ds is not None else None
        rep = EpochReport(self.epoch, phase, float(ll), float(lu), float(ls), float(lam), acc, list(draws), calls, audit)
        self.reports.append(rep)
        logger.info("epoch %d %s L_s=%.4f acc=%s", self.epoch, phase, ls, acc)
        return rep

    # -- phases

    def warmup_epoch(self) -> EpochReport:
        """CE on the strong view of clean and adversarial inputs, all given labels trusted."""
        cfg = self.config
        self._set_lr()
        x, y = self.ds.features, self.ds.given_labels
        order = self.rng_shuffle.permutation(len(x))
        draws = [0] * len(cfg.defense_budgets)
        total, batches = 0.0, 0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            views = self._adv_views(xb, yb, None, None, draws)
            loss = cross_entropy(predict(self.model, self.strong(xb)), yb)
            for x_adv, _ in views:
                term = cross_entropy(predict(self.model, self.strong(x_adv)), yb)
                loss = T.add(loss, T.mul(term, 1.0 / len(views)))
            self._step(loss, {"phase": "warmup", "batch": batches})
            total += loss.item()
            batches += 1
        rep = self._report("warmup", total / batches, 0.0, total / batches, 0.0, draws, sum(draws))
        self.epoch += 1
        return rep

    def select_split(self) -> tuple[DatasetSplit, dict | None]:
        n = len(self.ds)
        if not self.config.selection:
            return DatasetSplit(np.arange(n), np.empty(0, dtype=np.int64)), None
        scores = score(self.model, self.ds.features, self.ds.given_labels, self.config.score_fn)
        classes = self.ds.given_classes
        split, state = select(scores, classes, self.previous_labeled, self.selection_config, self.num_classes)
        self.previous_labeled = split.labeled
        audit = selection_audit(split, state, classes, self.num_classes, self._audit_truth)
        return split, audit

    def formal_epoch(self) -> EpochReport:
        cfg = self.config
        self._set_lr()
        split, audit = self.select_split()
        x, y = self.ds.features, self.ds.given_labels
        m = cfg.batch_size
        lab = self.rng_shuffle.permutation(split.labeled)
        unl = self.rng_shuffle.permutation(split.unlabeled)
        iters = max(1, math.ceil(lab.size / m))
        draws = [0] * len(cfg.defense_budgets)
        sums = np.zeros(3)
        lam = 0.0
        for it in range(iters):
            li = lab[it * m : (it + 1) * m]
            x_l, y_l = x[li], y[li]
            x_u = None
            if unl.size:
                ui = unl[(it * m + np.arange(m)) % unl.size]
                x_u = x[ui]
                x_u_weak = self.weak(x_u)
                anchor = anchor_probs(self.model, x_u_weak)
                pseudo = one_hot(anchor.argmax(axis=1), self.num_classes)
            else:
                pseudo = None
            views = self._adv_views(x_l, y_l, x_u, pseudo, draws)
            strong = self.strong
            loss_l = supervised_loss(self.model, strong(x_l), y_l, [(a, strong(a)) for a, _ in views])
            if x_u is not None:
                u_views = [(b, strong(b)) for _, b in views]
                loss_u = unsupervised_loss(self.model, x_u_weak, strong(x_u), u_views, anchor=anchor)
            else:
                loss_u = Tensor(0.0)

            t_e = (self.epoch - cfg.warmup_epochs) + it / iters
            lam = lambda_schedule(t_e, cfg.lambda_scale, cfg.lambda_ramp)
            loss_s = T.add(loss_l, T.mul(loss_u, lam))
            self._step(loss_s, {"phase": "formal", "iter": it, "L_l": loss_l.item(), "L_u": loss_u.item(), "lambda": lam})
            sums += (loss_l.item(), loss_u.item(), loss_s.item())
        mean = sums / iters
        rep = self._report("formal", *mean, lam, draws, sum(draws), audit)
        self.epoch += 1
        return rep

    def fit(self) -> list[EpochReport]:
        cfg = self.config
        while self.epoch < cfg.warmup_epochs:
            self.warmup_epoch()
        while self.epoch < cfg.total_epochs:
            self.formal_epoch()
        return self.reports


def train(config: TrainConfig, train_ds: Dataset, test_ds: Dataset | None = None, model: Model | None = None):
    """Full defense run; returns (model, reports)."""
    trainer = Trainer(config, train_ds, test_ds, model)
    reports = trainer.fit()
    return trainer.model, reports


def train_ce(config: TrainConfig, train_ds: Dataset, test_ds: Dataset | None = None, model: Model | None = None):
    """Plain cross-entropy baseline on raw inputs with every given label trusted."""
    trainer = Trainer(config, train_ds, test_ds, model)
    x, y = trainer.ds.features, trainer.ds.given_labels
    for epoch in range(config.total_epochs):
        trainer.epoch = epoch
        trainer._set_lr()
        order = trainer.rng_shuffle.permutation(len(x))
        total, batches = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = cross_entropy(predict(trainer.model, x[idx]), y[idx])
            trainer._step(loss, {"phase": "ce", "batch": batches})
            total += loss.item()
            batches += 1
        trainer._report("ce", total / batches, 0.0, total / batches, 0.0, [], 0)
    return trainer.model, trainer.reports

import numpy as np
import pytest
from scipy import stats

from eratlab import tensor as T
from eratlab.datagen import TruthAccessError, make_blobs, train_test_split
from eratlab.model import MLP, one_hot
from eratlab.pgd import AttackBudget, norms
from eratlab.trainer import (
    TrainConfig,
    Trainer,
    TrainingDivergedError,
    anchor_probs,
    draw_budget,
    lambda_schedule,
    supervised_loss,
    train,
    train_ce,
    uniform_poison_batch,
    unsupervised_loss,
)
from gradcheck import numeric_grad

BUDGETS = (AttackBudget("linf", 0.05), AttackBudget("l2", 0.15))


class UniformModel(MLP):
    """All-zero weights: uniform predictions on every input."""

    def __init__(self, d, k):
        super().__init__([d, k])
        for p in self.params:
            p.data[:] = 0.0


@pytest.fixture(scope="module")
def small():
    train_ds, test_ds = train_test_split(make_blobs(4, 80, 16, 0.1, seed=0), 40)
    return train_ds, test_ds


def small_config(**kw):
    base = dict(total_epochs=4, warmup_epochs=2, batch_size=32, defense_budgets=BUDGETS, lambda_scale=2.0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("t_e,expected", [(0, 0.0), (8, 12.5), (16, 25.0), (100, 25.0)])
def test_lambda_examples(t_e, expected):
    assert lambda_schedule(t_e, 25, 16) == expected


def test_lambda_nondecreasing_and_bounded():
    values = [lambda_schedule(t, 25, 16) for t in np.linspace(0, 40, 401)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert max(values) == 25


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=5, total_epochs=4)
    with pytest.raises(ValueError):
        TrainConfig(defense_budgets=())
    cfg = TrainConfig(total_epochs=10)
    assert cfg.lr_at(5) == 0.05 and cfg.lr_at(6) == pytest.approx(0.005)


def test_supervised_loss_uniform_three_terms():
    model = UniformModel(3, 10)
    x = np.full((1, 3), 0.5)
    y = one_hot([4], 10)
    assert supervised_loss(model, x, y, [(x, x)]).item() == pytest.approx(3 * np.log(10))
    assert supervised_loss(model, x, y).item() == pytest.approx(np.log(10))


def test_supervised_loss_perfect_predictions_is_zero():
    model = MLP([2, 2])
    model.params[0].data[:] = 0.0
    model.params[1].data = np.array([60.0, -60.0])
    x = np.zeros((3, 2))
    assert supervised_loss(model, x, one_hot([0, 0, 0], 2), [(x, x)]).item() < 1e-40


def test_empty_batches_give_zero(caplog):
    model = UniformModel(3, 2)
    assert supervised_loss(model, np.zeros((0, 3)), np.zeros((0, 2))).item() == 0.0
    assert "empty labeled batch" in caplog.text
    assert unsupervised_loss(model, np.zeros((0, 3)), np.zeros((0, 3))).item() == 0.0


def test_unsupervised_loss_maximal_distance_term():
    model = MLP([1, 2])
    model.params[0].data[:] = 0.0
    model.params[1].data = np.array([80.0, -80.0])  # p = [1, 0]
    x = np.zeros((1, 1))
    assert unsupervised_loss(model, x, x, anchor=np.array([[0.0, 1.0]])).item() == pytest.approx(2.0)
    assert unsupervised_loss(model, x, x, [(x, x)]).item() == pytest.approx(0.0, abs=1e-30)


def test_unsupervised_anchor_branch_has_zero_gradient():
    rng = np.random.default_rng(0)
    model, anchor_model = MLP([4, 6, 3], seed=1), MLP([4, 6, 3], seed=2)
    x_w, x_s = rng.uniform(size=(5, 4)), rng.uniform(size=(5, 4))
    base = unsupervised_loss(model, x_w, x_s, anchor_model=anchor_model).item()
    anchor_model.params[0].data = anchor_model.params[0].data + 0.3
    assert unsupervised_loss(model, x_w, x_s, anchor_model=anchor_model).item() != base
    # same model on both branches: the gradient must equal the one with the anchor as a constant
    grads = T.grad(unsupervised_loss(anchor_model, x_w, x_s, anchor_model=anchor_model), anchor_model.params)
    const = unsupervised_loss(anchor_model, x_w, x_s, anchor=anchor_probs(anchor_model, x_w))
    for g, h in zip(grads, T.grad(const, anchor_model.params)):
        assert np.max(np.abs(g - h)) < 1e-10


def test_unsupervised_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    model = MLP([3, 5, 3], seed=4)
    x_w, x_s, x_a = (rng.uniform(size=(4, 3)) for _ in range(3))
    anchor = anchor_probs(model, x_w)
    w = model.params[0]

    def f(values):
        saved = w.data
        w.data = values
        out = unsupervised_loss(model, x_w, x_s, [(x_a, x_s)], anchor=anchor).item()
        w.data = saved
        return out

    analytic = T.grad(unsupervised_loss(model, x_w, x_s, [(x_a, x_s)], anchor=anchor), [w])[0]
    np.testing.assert_allclose(analytic, numeric_grad(f, w.data.copy()), rtol=1e-5, atol=1e-8)


def test_single_budget_registry_always_drawn():
    rng = np.random.default_rng(0)
    assert {draw_budget(BUDGETS[:1], rng) for _ in range(50)} == {0}
    with pytest.raises(ValueError):
        draw_budget((), rng)


def test_draw_frequencies_concentrate():
    rng = np.random.default_rng(7)
    counts = np.bincount([draw_budget(BUDGETS, rng) for _ in range(10_000)], minlength=2)
    assert np.all(np.abs(counts - 5000) <= 300)
    assert stats.chisquare(counts).pvalue > 0.01


def test_uniform_poison_batch_respects_budgets():
    rng = np.random.default_rng(2)
    model = MLP([16, 8, 4], seed=0)
    x_l, x_u = rng.uniform(size=(6, 16)), rng.uniform(size=(6, 16))
    y = one_hot(rng.integers(0, 4, 6), 4)
    for _ in range(10):
        a, b, i = uniform_poison_batch(model, x_l, y, x_u, y, BUDGETS, rng)
        for orig, adv in ((x_l, a), (x_u, b)):
            assert np.all(norms(adv - orig, BUDGETS[i].norm) <= BUDGETS[i].epsilon + 1e-9)
            assert adv.min() >= 0 and adv.max() <= 1


def test_zero_learning_rate_leaves_parameters_unchanged(small):
    trainer = Trainer(small_config(lr=0.0, weight_decay=0.0), *small)
    before = trainer.model.get_state()
    trainer.warmup_epoch()
    for a, b in zip(before, trainer.model.get_state()):
        np.testing.assert_array_equal(a, b)


def test_warmup_is_deterministic(small):
    states = []
    for _ in range(2):
        trainer = Trainer(small_config(), *small)
        trainer.warmup_epoch()
        states.append(trainer.model.get_state())
    for a, b in zip(*states):
        np.testing.assert_array_equal(a, b)


def test_warmup_loss_decreases_on_clean_blobs(small):
    _, reports = train(small_config(total_epochs=5, warmup_epochs=5), *small)
    assert reports[-1].loss_l < reports[0].loss_l


def test_pure_warmup_run(small):
    _, reports = train(small_config(total_epochs=2, warmup_epochs=2), *small)
    assert [r.phase for r in reports] == ["warmup", "warmup"]


def test_reports_are_consistent(small):
    _, reports = train(small_config(), *small)
    assert len(reports) == 4
    for r in reports:
        assert sum(r.draw_counts) == r.poison_calls
        assert r.loss_l >= 0 and r.loss_u >= 0
    formal = [r for r in reports if r.phase == "formal"]
    assert formal[0].selection is not None and 0 <= formal[0].selection["precision"] <= 1


def test_objective_is_exact_combination(small, monkeypatch):
    seen = []
    original = Trainer._step

    def spy(self, loss, diag):
        if diag.get("phase") == "formal":
            seen.append((loss.item(), diag["L_l"], diag["L_u"], diag["lambda"]))
        original(self, loss, diag)

    monkeypatch.setattr(Trainer, "_step", spy)
    train(small_config(total_epochs=3, warmup_epochs=2, batch_size=64), *small)
    assert seen
    for ls, ll, lu, lam in seen:
        assert ls == ll + lam * lu


def test_training_never_reads_truth(small, monkeypatch):
    train_ds, test_ds = small
    trainer = Trainer(small_config(), train_ds, test_ds)
    assert not trainer.ds.has_truth
    with pytest.raises(TruthAccessError):
        trainer.ds.true_labels
    trainer.fit()


def test_full_runs_are_bit_identical(small):
    a = [vars(r) for r in train(small_config(), *small)[1]]
    b = [vars(r) for r in train(small_config(), *small)[1]]
    assert a == b


def test_divergence_raises(small):
    with pytest.raises(TrainingDivergedError):
        train_ce(small_config(lr=1e6, total_epochs=3), *small)


def test_ce_baseline_learns_clean_blobs(small):
    _, reports = train_ce(small_config(total_epochs=10), *small)
    assert reports[-1].test_acc > 90

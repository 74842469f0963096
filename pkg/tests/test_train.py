import math

import numpy as np
import pytest

from ignoreattn import ops
from ignoreattn.attention import AttentionMode
from ignoreattn.data import AugmentConfig, LabeledImages, SyntheticSpec, split_train_val, synth_generate
from ignoreattn.errors import NumericError
from ignoreattn.models import Model, ModelConfig, Stage
from ignoreattn.nn import Parameter
from ignoreattn.train import (PAPER_SCHEDULE, TrainConfig, TrainState, cross_entropy, evaluate, fit,
                              lr_at, sgd_step, topk_error)

import oracles

TINY = ModelConfig(stages=(Stage(1, 8, 1), Stage(1, 8, 2)), attention=AttentionMode.parse("se-ign2"),
                   num_classes=2, input_shape=(3, 16, 16), stem_channels=8)
NO_AUG = AugmentConfig(pad=0, hflip_prob=0.0)


def test_paper_schedule():
    assert lr_at(PAPER_SCHEDULE, 0) == 0.1
    assert lr_at(PAPER_SCHEDULE, 59) == 0.1
    assert lr_at(PAPER_SCHEDULE, 60) == pytest.approx(0.02, rel=1e-15)
    assert lr_at(PAPER_SCHEDULE, 160) == pytest.approx(0.0008, rel=1e-15)
    assert lr_at(TrainConfig(), 14) == 0.1 and lr_at(TrainConfig(), 23) == pytest.approx(0.004)
    with pytest.raises(ValueError):
        lr_at(PAPER_SCHEDULE, -1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(milestones=(5, 5))
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=-0.1)


def _param(v, decay=True, g=None):
    p = Parameter(np.array(v, dtype=float), "p", decay=decay)
    if g is not None:
        p.grad = np.array(g, dtype=float)
    return p


def test_plain_sgd():
    p = _param([1.0, 2.0], g=[0.5, -1.0])
    sgd_step([p], TrainState(), 0.1, 0.0, 0.0)
    assert p.value.tolist() == [1.0 - 0.05, 2.0 + 0.1]


def test_two_momentum_steps_closed_form():
    lr, m, g = 0.1, 0.9, 0.7
    p = _param([0.0], g=[g])
    st = TrainState()
    sgd_step([p], st, lr, m, 0.0)
    sgd_step([p], st, lr, m, 0.0)
    assert p.value[0] == pytest.approx(-lr * g * (2 + m), rel=1e-15)


def test_decay_only_is_geometric():
    lr, wd = 0.1, 0.01
    p = _param([3.0], g=[0.0])
    for k in range(1, 6):
        sgd_step([p], TrainState(), lr, 0.0, wd)
        assert p.value[0] == pytest.approx(3.0 * (1 - lr * wd) ** k, rel=1e-14)
    q = _param([3.0], decay=False, g=[0.0])
    sgd_step([q], TrainState(), lr, 0.0, wd)
    assert q.value[0] == 3.0


def test_non_finite_gradient_aborts():
    p = _param([1.0], g=[np.nan])
    with pytest.raises(NumericError, match="p"):
        sgd_step([p], TrainState(), 0.1, 0.9, 0.0)
    assert p.value[0] == 1.0


def test_cross_entropy_examples(rng):
    assert cross_entropy(np.zeros((4, 10)), [0, 3, 9, 2]).value == pytest.approx(math.log(10), abs=1e-15)
    big = np.array([[1000.0, 0.0, 0.0]])
    assert cross_entropy(big, [0]).value == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), [3])


def test_cross_entropy_gradient(rng):
    from ignoreattn.autograd import Variable, numeric_grad
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)
    v = Variable(z, requires_grad=True)
    cross_entropy(v, y).backward()
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    expect = (p - np.eye(4)[y]) / 5
    np.testing.assert_allclose(v.grad, expect, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(v.grad, numeric_grad(lambda a: cross_entropy(a, y), z), rtol=1e-6, atol=1e-10)


def test_topk_examples(rng):
    logits = np.eye(4)
    assert topk_error(logits, [0, 1, 2, 3], 1) == 0.0
    r = rng.normal(size=(3, 6))
    assert topk_error(r, [5, 0, 2], 6) == 0.0
    for k in range(1, 7):
        assert abs(topk_error(r, [5, 0, 2], k) - oracles.topk_error(r, [5, 0, 2], k)) < 1e-10
    with pytest.raises(ValueError):
        topk_error(r, [0, 0, 0], 7)
    with pytest.raises(ValueError):
        topk_error(r, [0, 0, 0], 0)


def test_topk_ties_favor_lower_index():
    logits = np.array([[1.0, 1.0, 0.0]])
    assert topk_error(logits, [0], 1) == 0.0
    assert topk_error(logits, [1], 1) == 100.0


def _tiny_data(n=40, seed=0):
    spec = SyntheticSpec(n=n, hw=16, border=2, jitter=1, seed=seed)
    return split_train_val(synth_generate(spec), n // 4, 0)


def test_lr_zero_leaves_parameters_unchanged():
    train, val = _tiny_data()
    model = Model(TINY, 0)
    before = {k: v.copy() for k, v in model.state_dict().items() if "running" not in k}
    hist = fit(model, train, val, TrainConfig(lr0=0.0, epochs=2, batch_size=8, milestones=()), NO_AUG)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert len(hist.records) == 2


def test_history_contract_and_determinism():
    train, val = _tiny_data()
    cfg = TrainConfig(lr0=0.05, epochs=3, batch_size=10, milestones=(2,))
    h1 = fit(Model(TINY, 1), train, val, cfg, AugmentConfig(pad=2))
    h2 = fit(Model(TINY, 1), train, val, cfg, AugmentConfig(pad=2))
    assert len(h1.records) == 3 and [r.epoch for r in h1.records] == [0, 1, 2]
    assert h1.records == h2.records
    assert [r.lr for r in h1.records] == [0.05, 0.05, 0.01]
    best = min(r.val_top1 for r in h1.records)
    assert h1.best.val_top1 == best
    assert h1.best_epoch == min(i for i, r in enumerate(h1.records) if r.val_top1 == best)


def test_best_state_reproduces_best_metric():
    train, val = _tiny_data()
    model = Model(TINY, 2)
    h = fit(model, train, val, TrainConfig(lr0=0.05, epochs=3, batch_size=10, milestones=()), NO_AUG)
    model.load_state_dict(h.best_state)
    m = evaluate(model, val, train.norm_stats())
    assert m["top1"] == h.best.val_top1 and m["loss"] == h.best.val_loss


def test_single_sample_overfit():
    spec = SyntheticSpec(n=1, hw=16, border=2, jitter=1, seed=3)
    one = synth_generate(spec)
    model = Model(TINY, 0)
    cfg = TrainConfig(lr0=0.05, epochs=200, batch_size=1, milestones=(), weight_decay=0.0)
    losses = []
    fit(model, one, one, cfg, NO_AUG, on_epoch=lambda rec, *_: losses.append(rec.train_loss))
    assert min(losses) < 0.01


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_stops_with_history():
    train, val = _tiny_data()
    cfg = TrainConfig(lr0=0.05, epochs=5, batch_size=10, milestones=())
    model = Model(TINY, 0)

    def poison(rec, model, state):
        if rec.epoch == 1:
            model.head.weight.value = np.full(model.head.weight.shape, np.inf)
    h = fit(model, train, val, cfg, NO_AUG, on_epoch=poison)
    assert h.diverged and len(h.records) == 2


def test_evaluate_does_not_mutate(rng):
    train, val = _tiny_data()
    model = Model(TINY, 0)
    before = model.state_dict()
    m1 = evaluate(model, val, None)
    m2 = evaluate(model, val, None)
    assert m1 == m2
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())

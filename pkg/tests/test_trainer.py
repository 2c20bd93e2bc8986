from dataclasses import replace

import numpy as np
import pytest

from ramlab import nn
from ramlab.errors import ConfigError, TrainingDiverged
from ramlab.experiment import RunSpec, SeedContext, experiment_from_dict, init_model
from ramlab.objectives import Emdr2, PDist, RceExact, RcePG, RceTopK
from ramlab.ram import score_matrix
from ramlab.synthgen import TaskSpec, generate, oracle_recall
from ramlab.trainer import (AdamMoments, Paradigm, TrainConfig, _batches, adamw_step, empirical_risk,
                            lr_at, pretrain_retriever, sampled_risk, train)


@pytest.fixture(scope="module")
def task():
    return generate(TaskSpec())


@pytest.fixture(scope="module")
def small_task():
    return generate(TaskSpec(n_train=256, n_test=128, store_size=16))


def scalar(v):
    return nn.MlpParams([np.array([[v]])], [np.zeros(1)])


# -- schedule --------------------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig(steps=2000, warmup_steps=100, peak_lr=1e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == 1e-3
    assert lr_at(1999, cfg) == pytest.approx(1e-3 / 1900, rel=1e-15)
    assert lr_at(50, cfg) == pytest.approx(5e-4, rel=1e-15)
    assert lr_at(0, replace(cfg, warmup_steps=0)) == 1e-3


# -- AdamW -----------------------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_identity():
    p = nn.mlp_init(3, 2, 4, 2, seed=0)
    new, _ = adamw_step(p, p.zeros_like(), AdamMoments.zeros(p), 1, 0.1, 0.0)
    assert np.array_equal(new.flat(), p.flat())


def test_adamw_moves_against_constant_gradient():
    p = nn.mlp_init(3, 2, 4, 2, seed=1)
    g = p.with_flat(np.random.default_rng(0).normal(size=p.size))
    mom, cur = AdamMoments.zeros(p), p
    for t in range(1, 30):
        cur, mom = adamw_step(cur, g, mom, t, 1e-2, 0.0)
    assert np.array_equal(np.sign(cur.flat() - p.flat()), -np.sign(g.flat()))


def test_adamw_three_step_reference():
    # hand calculation: beta1 0.9, beta2 0.999, eps 1e-8, lr 0.1, decay 0.01, p0 = 1
    expected = [0.8990000019999999, 0.8635404181145107, 0.8247377004155809]
    p, mom = scalar(1.0), AdamMoments.zeros(scalar(1.0))
    for t, (g, want) in enumerate(zip([0.5, -0.2, 0.1], expected), start=1):
        p, mom = adamw_step(p, scalar(g), mom, t, 0.1, 0.01)
        assert p.weights[0][0, 0] == pytest.approx(want, abs=1e-15)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_adamw_non_finite_gradient(bad):
    with pytest.raises(TrainingDiverged) as info:
        adamw_step(scalar(1.0), scalar(bad), AdamMoments.zeros(scalar(1.0)), 7, 0.1, 0.0)
    assert info.value.step == 7


# -- training loop -----------------------------------------------------------------------------

def quick(paradigm, objective=None, steps=60, **kw):
    return TrainConfig(paradigm=paradigm, objective=objective or RceTopK(k=4, refresh_every=20),
                       steps=steps, warmup_steps=10, eval_every=20, **kw)


def test_zero_steps_returns_start(small_task):
    m0 = init_model(small_task, "small", "small", 0)
    model, trace = train(m0, small_task.store, small_task.train, small_task.test, quick(Paradigm.JOINT, steps=0))
    assert np.array_equal(model.retriever.flat(), m0.retriever.flat())
    assert np.array_equal(model.predictor.flat(), m0.predictor.flat())
    assert trace.records == [] and trace.step_losses == []


@pytest.mark.parametrize("paradigm,frozen", [(Paradigm.FIXED_RETRIEVER, "retriever"),
                                             (Paradigm.FIXED_PREDICTOR, "predictor")])
def test_frozen_block_is_bitwise_unchanged(small_task, paradigm, frozen):
    m0 = init_model(small_task, "small", "small", 0)
    model, _ = train(m0, small_task.store, small_task.train, small_task.test, quick(paradigm))
    assert np.array_equal(getattr(model, frozen).flat(), getattr(m0, frozen).flat())
    moving = "predictor" if frozen == "retriever" else "retriever"
    assert not np.array_equal(getattr(model, moving).flat(), getattr(m0, moving).flat())


@pytest.mark.parametrize("objective", [RceTopK(k=4, refresh_every=20), RcePG(k=2), PDist(k=4), Emdr2(k=4)])
def test_training_is_deterministic(small_task, objective):
    m0 = init_model(small_task, "small", "small", 3)
    cfg = quick(Paradigm.JOINT, objective, seed=5)
    a, ta = train(m0, small_task.store, small_task.train, small_task.test, cfg, small_task.test_oracle)
    b, tb = train(m0, small_task.store, small_task.train, small_task.test, cfg, small_task.test_oracle)
    assert np.array_equal(a.retriever.flat(), b.retriever.flat())
    assert np.array_equal(a.predictor.flat(), b.predictor.flat())
    assert list(ta.rows()) == list(tb.rows())


def test_trace_cadence(small_task):
    m0 = init_model(small_task, "small", "small", 0)
    _, trace = train(m0, small_task.store, small_task.train, small_task.test, quick(Paradigm.JOINT, steps=50))
    assert [r.step for r in trace.records] == [20, 40, 50]
    assert len(trace.step_losses) == 50


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_step(small_task):
    m0 = init_model(small_task, "small", "small", 0)
    m0 = replace(m0, predictor=m0.predictor.with_flat(m0.predictor.flat() * 1e200))
    with pytest.raises(TrainingDiverged) as info:
        train(m0, small_task.store, small_task.train, small_task.test,
              quick(Paradigm.JOINT, RceExact(), peak_lr=1e200))
    assert isinstance(info.value.step, int)


def test_config_validation():
    for bad in (dict(steps=-1), dict(peak_lr=0.0), dict(steps=10, warmup_steps=10), dict(batch_size=0),
                dict(grad_clip=0.0), dict(objective=RceTopK(k=0))):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_batches_cover_every_row_each_epoch():
    gen = _batches(10, 4, np.random.default_rng(0))
    seen = np.concatenate([next(gen) for _ in range(5)])  # 20 rows = two epochs
    assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:]) == list(range(10))


# -- pretraining and risk --------------------------------------------------------------------------

def test_pretraining_improves_recall(small_task):
    m0 = init_model(small_task, "small", "small", 0)
    xs = np.random.default_rng(1).uniform(-1, 1, (2048, small_task.spec.d_x))
    targets = small_task.oracle_evidence(xs)
    m1 = pretrain_retriever(m0, small_task.store, xs, targets, steps=300)
    before = oracle_recall(small_task, score_matrix(m0, small_task.store, small_task.test.xs).argmax(axis=1))
    after = oracle_recall(small_task, score_matrix(m1, small_task.store, small_task.test.xs).argmax(axis=1))
    assert after > before + 0.2
    assert np.array_equal(m1.predictor.flat(), m0.predictor.flat())


def test_sampled_risk_within_three_standard_errors(small_task):
    m0 = init_model(small_task, "base", "base", 2)
    exact = empirical_risk(m0, small_task.store, small_task.train)
    mean, se = sampled_risk(m0, small_task.store, small_task.train, seed=4)
    assert abs(mean - exact) <= 3 * se


# -- behaviour on the default task ---------------------------------------------------------------------

def test_joint_beats_no_retriever(task):
    ctx = SeedContext(experiment_from_dict({"schema": 1, "run": {}}), 0, task=task)
    joint = ctx.run(RunSpec(paradigm=Paradigm.JOINT, objective=RceTopK()))
    alone = ctx.run(RunSpec(paradigm=Paradigm.NO_RETRIEVER, objective=RceTopK()))
    assert not joint.error and not alone.error
    assert joint.accuracy > alone.accuracy


@pytest.mark.parametrize("objective", [RceExact(), RceTopK(), Emdr2(), PDist(), RcePG()],
                         ids=lambda o: o.name)
def test_smoothed_loss_decreases(task, objective):
    cfg = TrainConfig(objective=objective)
    passed = 0
    for seed in range(3):
        m0 = init_model(task, "base", "base", seed)
        _, trace = train(m0, task.store, task.train, task.test, replace(cfg, seed=seed))
        losses = np.array(trace.step_losses)
        w = cfg.warmup_steps
        passed += losses[-50:].mean() < losses[w - 50:w].mean()
    assert passed >= 2

import math

import numpy as np
import pytest

from reprowave.optim import Adam, NonFiniteGradientError, PlateauScheduler


def test_first_step_hand_oracle():
    # t=1: m=(1-b1)g, v=(1-b2)g^2, mhat=g, vhat=g^2
    # update = lr * g / (|g| + eps)
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -0.2, 0.0])}
    opt = Adam(p, lr=0.1)
    opt.step(p, g)
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-12)
    assert opt.t == 1


def test_two_steps_match_reference_recurrence():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=(3, 4))}
    ref = p["w"].copy()
    opt = Adam(p, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in (1, 2):
        g = rng.normal(size=(3, 4))
        opt.step(p, {"w": g.copy()})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-13)


def test_updates_are_in_place():
    arr = np.ones(4)
    p = {"w": arr}
    Adam(p, lr=0.1).step(p, {"w": np.ones(4)})
    assert p["w"] is arr
    assert not np.array_equal(arr, np.ones(4))


def test_converges_on_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    opt = Adam(p, lr=0.05)
    for _ in range(2000):
        opt.step(p, {"w": 2.0 * p["w"]})  # d/dw of w^2
    assert np.abs(p["w"]).max() < 1e-3


def test_rejects_non_finite_gradients():
    p = {"w": np.ones(2)}
    opt = Adam(p, lr=0.1)
    with pytest.raises(NonFiniteGradientError):
        opt.step(p, {"w": np.array([1.0, math.nan])})
    with pytest.raises(NonFiniteGradientError):
        opt.step(p, {"w": np.array([math.inf, 1.0])})
    with pytest.raises(ValueError):
        Adam(p, lr=0.0)


def test_state_round_trip_bitwise():
    rng = np.random.default_rng(1)
    p = {"a": rng.normal(size=3), "b": rng.normal(size=(2, 2))}
    opt = Adam(p, lr=0.02)
    for _ in range(5):
        opt.step(p, {k: rng.normal(size=v.shape) for k, v in p.items()})

    arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
    scalars = {"adam_t": opt.t, "lr": opt.lr}
    p2 = {k: v.copy() for k, v in p.items()}
    opt2 = Adam(p2, lr=999.0)
    opt2.load_state(scalars, arrays)

    g = {k: rng.normal(size=v.shape) for k, v in p.items()}
    opt.step(p, {k: v.copy() for k, v in g.items()})
    opt2.step(p2, {k: v.copy() for k, v in g.items()})
    for k in p:
        np.testing.assert_array_equal(p[k], p2[k])


def test_plateau_reduces_after_patience():
    p = {"w": np.ones(1)}
    opt = Adam(p, lr=1.0)
    sched = PlateauScheduler(opt, factor=0.98, patience=10, threshold=1e-6)
    assert sched.step(1.0) is False  # first observation primes best
    reduced = [sched.step(1.0) for _ in range(10)]
    assert reduced == [False] * 9 + [True]
    assert opt.lr == pytest.approx(0.98)
    # counter restarts after the cut
    for _ in range(9):
        assert sched.step(1.0) is False
    assert sched.step(1.0) is True
    assert opt.lr == pytest.approx(0.98 * 0.98)


def test_plateau_improvement_resets_counter():
    opt = Adam({"w": np.ones(1)}, lr=1.0)
    sched = PlateauScheduler(opt, patience=3)
    sched.step(1.0)
    sched.step(1.0)
    sched.step(1.0)
    assert sched.stale == 2
    sched.step(0.5)  # real improvement
    assert sched.stale == 0
    assert sched.best == 0.5


def test_plateau_threshold_is_relative():
    opt = Adam({"w": np.ones(1)}, lr=1.0)
    sched = PlateauScheduler(opt, patience=2, threshold=1e-3)
    sched.step(100.0)
    assert sched.step(99.99) is False   # 0.01% drop: below threshold, stale
    assert sched.stale == 1
    assert sched.step(99.0) is False    # 1% drop: improvement
    assert sched.stale == 0 and sched.best == 99.0


def test_plateau_state_round_trip():
    opt = Adam({"w": np.ones(1)}, lr=1.0)
    sched = PlateauScheduler(opt, patience=5)
    for loss in (3.0, 3.0, 3.0):
        sched.step(loss)
    state = sched.state_scalars()
    sched2 = PlateauScheduler(Adam({"w": np.ones(1)}, lr=1.0), patience=5)
    sched2.load_state(state)
    assert sched2.best == sched.best and sched2.stale == sched.stale

    fresh = PlateauScheduler(Adam({"w": np.ones(1)}, lr=1.0))
    fresh.load_state({"sched_best": None, "sched_stale": 0})
    assert fresh.best is None

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diloco import optim
from diloco.errors import ConfigError, NumericError
from diloco.tensor import ParamVector, PseudoGradient, make_layout

from oracles import adamw_scalar, nesterov_scalar


def vec(values):
    values = np.asarray(values, np.float32)
    return ParamVector(values, make_layout([("w", values.size)]))


def test_adamw_matches_scalar_recurrence_on_random_draws():
    r = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        steps = int(r.integers(1, 6))
        p0 = float(np.float32(r.normal()))
        grads = [float(np.float32(g)) for g in r.normal(scale=10 ** r.uniform(-3, 1), size=steps)]
        lr = float(10 ** r.uniform(-5, -1))
        b1, b2 = float(r.uniform(0.5, 0.99)), float(r.uniform(0.9, 0.9999))
        eps, wd = float(10 ** r.uniform(-10, -6)), float(r.uniform(0, 0.2))
        state = optim.AdamWState.init(vec([p0]), beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        p = vec([p0])
        for g in grads:
            p, state = optim.adamw_step(state, p, vec([g]), lr)
        worst = max(worst, abs(float(p.data[0]) - adamw_scalar(p0, grads, lr, b1, b2, eps, wd)))
    assert worst <= 1e-12


def test_nesterov_matches_scalar_recurrence_on_random_draws():
    r = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        steps = int(r.integers(1, 6))
        p0 = float(np.float32(r.normal()))
        grads = list(r.normal(scale=0.1, size=steps))
        lr, mu = float(r.uniform(0.1, 1.0)), float(r.uniform(0.0, 0.99))
        state = optim.NesterovState.init(vec([p0]), lr, mu)
        p = vec([p0])
        for g in grads:
            p, state = optim.nesterov_step(state, p, PseudoGradient(np.array([g]), p.layout))
        worst = max(worst, abs(float(p.data[0]) - nesterov_scalar(p0, grads, lr, mu)))
    assert worst <= 1e-12


def test_nesterov_lr_one_no_momentum_is_plain_subtraction():
    p = vec([1.5, -2.0])
    state = optim.NesterovState.init(p, 1.0, 0.0)
    new, _ = optim.nesterov_step(state, p, PseudoGradient(np.array([0.5, -1.0]), p.layout))
    assert new.data.tolist() == [1.0, -1.0]


def test_adamw_first_step_is_sign_like():
    p = vec([0.0, 0.0])
    state = optim.AdamWState.init(p, weight_decay=0.0)
    new, state = optim.adamw_step(state, p, vec([3.0, -0.01]), 1e-2)
    assert new.data == pytest.approx([-1e-2, 1e-2], rel=1e-5)
    assert state.step_count == 1


def test_optimizers_reject_non_finite_input():
    p = vec([1.0])
    with pytest.raises(NumericError):
        optim.adamw_step(optim.AdamWState.init(p), p, vec([np.inf]), 1e-3)
    with pytest.raises(NumericError):
        optim.nesterov_step(optim.NesterovState.init(p), p, PseudoGradient(np.array([np.nan]), p.layout))
    with pytest.raises(ConfigError):
        optim.adamw_step(optim.AdamWState.init(p), p, vec([1.0]), -1.0)


def test_warmup_then_cosine_schedule():
    s = optim.LrSchedule(base_lr=1.0, warmup_steps=10, total_steps=110, decay="cosine", min_ratio=0.1)
    assert optim.lr_at(s, 0) == pytest.approx(0.1)
    assert optim.lr_at(s, 5) == pytest.approx(0.5)
    assert optim.lr_at(s, 10) == pytest.approx(1.0)
    assert optim.lr_at(s, 60) == pytest.approx(0.55)
    assert optim.lr_at(s, 500) == pytest.approx(0.1)
    with pytest.raises(ConfigError):
        optim.LrSchedule(decay="step")


@given(st.integers(0, 200))
def test_schedule_stays_in_bounds(step):
    s = optim.LrSchedule(base_lr=0.3, warmup_steps=20, total_steps=150)
    assert 0 < optim.lr_at(s, step) <= 0.3


def test_loss_scaler_backs_off_and_grows():
    s = optim.LossScaler(scale=8.0, growth_interval=2)
    grad, overflow = optim.scaler_unscale_and_check(s, np.array([np.inf], np.float32))
    assert grad is None and overflow
    s = optim.scaler_update(s, True)
    assert s.scale == 4.0
    s = optim.scaler_update(optim.scaler_update(s, False), False)
    assert s.scale == 8.0
    g, overflow = optim.scaler_unscale_and_check(s, vec([16.0]))
    assert not overflow and g.data.tolist() == [2.0]

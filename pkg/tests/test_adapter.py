"""Disturbance estimation and corrected dynamics."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piwan import adapter, net
from piwan import dynamics as dyn
from piwan.data import NormStats
from piwan.errors import HistoryNotWarm


def small_model(T=5, seed=0):
    cfg = net.NetConfig(T=T, channels=4, dilations=(1, 2), head_hidden=(6,))
    rng = np.random.default_rng(seed)
    norm = NormStats(rng.normal(size=11) * 0.1, rng.uniform(0.5, 2, 11), rng.normal(size=3), rng.uniform(0.5, 2, 3))
    p = net.init_params(cfg, norm, seed=seed)
    return p.with_theta(p.theta + 0.1 * rng.standard_normal(p.theta.size))


def filled_history(params, cfg, n_extra=0, seed=0, shift=np.zeros(3)):
    rng = np.random.default_rng(seed)
    hist = adapter.ControlHistory.for_model(params.config.T, cfg, 0.02)
    for k in range(hist.capacity + n_extra):
        x = dyn.make_state(p=rng.standard_normal(3) + shift, q=dyn.quat_normalize(rng.normal([1, 0, 0, 0], 0.1)),
                           v=rng.standard_normal(3))
        u = np.array([9.81 + rng.normal(), *rng.normal(0, 0.3, 3)])
        hist.push(0.02 * k, x, u)
    return hist


def test_history_capacity_and_push():
    cfg = adapter.AdapterConfig(N_T=10)
    h = adapter.ControlHistory.for_model(20, cfg, 0.02)
    assert h.capacity == 29
    for k in range(40):
        h.push(0.02 * k, dyn.hover_state(), dyn.HOVER_INPUT)
    assert h.full and len(h) == 29
    t, x, u = h.arrays()
    assert np.isclose(t[0], 0.02 * 11) and x.shape == (29, 10) and u.shape == (29, 4)
    h.push(5.0, dyn.hover_state(), dyn.HOVER_INPUT)  # gap
    assert len(h) == 1


def test_estimate_requires_warm_history():
    p = small_model()
    cfg = adapter.AdapterConfig(N_T=3)
    hist = adapter.ControlHistory.for_model(p.config.T, cfg, 0.02)
    hist.push(0.0, dyn.hover_state(), dyn.HOVER_INPUT)
    with pytest.raises(HistoryNotWarm):
        adapter.estimate(p, hist, cfg)
    with pytest.raises(HistoryNotWarm):
        adapter.corrected_dynamics(p, hist, cfg)


def test_estimate_is_mean_of_window_residuals():
    p = small_model()
    cfg = adapter.AdapterConfig(N_T=4)
    hist = filled_history(p, cfg, n_extra=3)
    _, x, u = hist.arrays()
    T = p.config.T
    manual = []
    for j in range(cfg.N_T):
        sl = slice(j, j + T)
        win = np.concatenate([x[sl, dyn.Q], x[sl, dyn.V], u[sl]], axis=1).T
        learned = net.predict_raw(p, win[None])[0]
        manual.append(learned - dyn.nominal_derivative(x[j + T - 1], u[j + T - 1])[dyn.V])
    assert np.allclose(adapter.estimate(p, hist, cfg), np.mean(manual, axis=0), atol=1e-12)


def test_estimate_ignores_positions():
    p = small_model()
    cfg = adapter.AdapterConfig(N_T=3)
    a = adapter.estimate(p, filled_history(p, cfg, seed=1), cfg)
    b = adapter.estimate(p, filled_history(p, cfg, seed=1, shift=np.array([100.0, -5.0, 3.0])), cfg)
    assert np.array_equal(a, b)


def test_estimate_halves_average():
    p = small_model()
    k = 3
    full_cfg = adapter.AdapterConfig(N_T=2 * k)
    hist = filled_history(p, full_cfg, seed=2)
    t, x, u = hist.arrays()
    T = p.config.T
    half_cfg = adapter.AdapterConfig(N_T=k)
    halves = []
    for start in (0, k):
        h = adapter.ControlHistory.for_model(T, half_cfg, 0.02)
        for i in range(start, start + T + k - 1):
            h.push(t[i], x[i], u[i])
        halves.append(adapter.estimate(p, h, half_cfg))
    assert np.allclose(adapter.estimate(p, hist, full_cfg), np.mean(halves, axis=0), atol=1e-12)


@settings(max_examples=30)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.5, 20), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_zero_gain_is_nominal_bit_for_bit(f_w, t, w):
    model = adapter.corrected_model(f_w, (0.0, 0.0, 0.0))
    x = dyn.make_state(q=dyn.quat_normalize([1, 0.1, -0.2, 0.05]), v=[0.3, 0.1, -0.4])
    u = np.array([t, *w])
    assert np.array_equal(model(x, u, 0.02), dyn.nominal_step(x, u, 0.02))
    assert np.array_equal(model.rollout(x, np.tile(u, (3, 1)), 0.02)[1], dyn.OffsetModel().rollout(x, u[None], 0.02)[1])


def test_zero_gain_corrected_dynamics_is_nominal():
    p = small_model()
    cfg = adapter.AdapterConfig(N_T=2, gains=(0, 0, 0))
    model = adapter.corrected_dynamics(p, filled_history(p, cfg), cfg)
    x, u = dyn.hover_state(), np.array([10.0, 0.2, 0.0, -0.1])
    assert np.array_equal(model(x, u, 0.02), dyn.nominal_step(x, u, 0.02))


def test_unit_offset_first_order_effect():
    model = adapter.corrected_model([1.0, 0.0, 0.0], (1.0, 1.0, 1.0))
    x1 = model(dyn.hover_state(), dyn.HOVER_INPUT, 0.02)
    assert np.allclose(x1[dyn.V], [0.02, 0, 0], atol=1e-12)


def test_gains_are_applied_per_axis():
    model = adapter.corrected_model([1.0, 2.0, -1.0], (0.5, 0.0, 1.0))
    assert np.allclose(model.accel, [0.5, 0.0, -1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        adapter.AdapterConfig(N_T=0)
    with pytest.raises(ValueError):
        adapter.AdapterConfig(gains=(1.2, 0, 0))


def test_learned_compensator_uses_nominal_until_warm():
    p = small_model()
    cfg = adapter.AdapterConfig(N_T=2)
    comp = adapter.LearnedCompensator(p, cfg, 0.02)
    assert not np.any(comp.current_model(0.0, dyn.hover_state()).accel)
    rng = np.random.default_rng(0)
    for k in range(comp.history.capacity):
        comp.observe(0.02 * k, dyn.make_state(v=rng.standard_normal(3)), dyn.HOVER_INPUT)
    m = comp.current_model(0.02 * comp.history.capacity, dyn.hover_state())
    assert np.allclose(m.accel, 0.8 * comp.last_estimate)
    assert np.any(m.accel)


def test_oracle_compensator_returns_true_drag():
    wind = dyn.WindField((5.0, 0.0, 0.0))
    comp = adapter.OracleCompensator(wind, gains=(1, 1, 1))
    m = comp.current_model(0.0, dyn.hover_state())
    assert np.allclose(m.accel, [1.5, 0, 0])

"""TCN / MLP forward, hand-written backprop and checkpoints."""

import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piwan import net
from piwan.data import NormStats
from piwan.errors import FormatError, ShapeMismatch

TCN = net.NetConfig()
MLP = net.NetConfig(backbone="mlp")


def norm_stats(rng):
    return NormStats(rng.normal(size=11), rng.uniform(0.5, 2, 11), rng.normal(size=3), rng.uniform(0.5, 2, 3))


def model(cfg=TCN, seed=0):
    rng = np.random.default_rng(seed)
    p = net.init_params(cfg, norm_stats(rng), seed=seed)
    # non-zero biases so every parameter matters
    return p.with_theta(p.theta + 0.05 * rng.standard_normal(p.theta.size))


def windows(n, T=20, seed=1):
    return np.random.default_rng(seed).standard_normal((n, 11, T))


def test_config_reports_receptive_field_and_counts():
    assert TCN.receptive_field == 15
    assert net.param_count(TCN) == 14147
    assert net.param_count(MLP) == 53251
    assert net.layout_hash(TCN) == net.layout_hash(net.NetConfig())
    assert net.layout_hash(TCN) != net.layout_hash(MLP)


@pytest.mark.parametrize("cfg", [TCN, MLP])
def test_flatten_round_trip(cfg):
    p = model(cfg)
    assert np.array_equal(net.flatten(cfg, net.unflatten(cfg, p.theta)), p.theta)


@pytest.mark.parametrize("cfg", [TCN, MLP])
def test_zero_weights_predict_target_mean(cfg):
    p = model(cfg)
    z = p.with_theta(np.zeros_like(p.theta))
    out = net.forward_batch(z, windows(4))
    assert np.allclose(out, p.norm.target_mean, atol=0, rtol=0)


def test_frames_outside_receptive_field_do_not_matter():
    p = model()
    w = windows(3)
    w2 = w.copy()
    rf = TCN.receptive_field
    w2[:, :, : TCN.T - rf] += 10.0
    assert np.array_equal(net.forward_batch(p, w), net.forward_batch(p, w2))
    w3 = w.copy()
    w3[:, :, TCN.T - rf] += 1.0
    assert not np.allclose(net.forward_batch(p, w), net.forward_batch(p, w3))


def test_forward_matches_batch_and_permutation():
    p = model()
    w = windows(7)
    b = net.forward_batch(p, w)
    for i in range(7):
        assert np.allclose(net.forward(p, w[i]), b[i], atol=1e-12, rtol=0)
    perm = np.random.default_rng(3).permutation(7)
    assert np.allclose(net.forward_batch(p, w[perm]), b[perm], atol=1e-12, rtol=0)
    assert np.array_equal(net.forward_batch(p, w), b)


def test_shape_mismatch():
    p = model()
    with pytest.raises(ShapeMismatch):
        net.forward_batch(p, np.zeros((2, 11, 19)))
    with pytest.raises(ShapeMismatch):
        net.forward(p, np.zeros((10, 20)))
    with pytest.raises(ShapeMismatch):
        net.ModelParams(TCN, np.zeros(5), p.norm)


def _fd_check(cfg, n_coords=100, seed=0):
    p = model(cfg, seed)
    w = windows(8, T=cfg.T, seed=seed + 1)
    cot = np.random.default_rng(seed + 2).standard_normal((8, 3))
    g = net.backward(p, w, cot)
    rng = np.random.default_rng(seed + 3)
    idx = rng.choice(p.theta.size, n_coords, replace=False)
    errs = []
    for i in idx:
        h = 1e-5 * max(1.0, abs(p.theta[i]))
        tp, tm = p.theta.copy(), p.theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (np.sum(cot * net.forward_batch(p.with_theta(tp), w)) - np.sum(cot * net.forward_batch(p.with_theta(tm), w))) / (2 * h)
        errs.append(abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6))
    return max(errs)


@pytest.mark.parametrize("cfg", [TCN, MLP])
def test_gradient_matches_finite_differences(cfg):
    assert _fd_check(cfg) <= 1e-4


@pytest.mark.parametrize("cfg", [TCN, MLP])
def test_backward_zero_and_linearity(cfg):
    p = model(cfg)
    w = windows(5)
    assert np.all(net.backward(p, w, np.zeros((5, 3))) == 0)
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    ga, gb, gab = net.backward(p, w, a), net.backward(p, w, b), net.backward(p, w, a + b)
    assert np.max(np.abs(gab - ga - gb)) <= 1e-10 * max(1.0, np.max(np.abs(gab)))


def test_value_and_backward_consistency():
    p = model()
    w = windows(6)
    y = np.random.default_rng(5).standard_normal((6, 3))

    def mse(pred):
        r = pred - y
        return float(np.mean(r * r)), 2 * r / r.size

    value, grad, pred = net.value_and_backward(p, w, mse)
    assert np.array_equal(pred, net.forward_batch(p, w))
    assert np.isclose(value, np.mean((pred - y) ** 2))
    assert np.allclose(grad, net.backward(p, w, 2 * (pred - y) / (pred - y).size))


def test_forward_batch_speed():
    p = model()
    w = windows(256)
    net.forward_batch(p, w)
    t0 = time.perf_counter()
    for _ in range(5):
        net.forward_batch(p, w)
    assert (time.perf_counter() - t0) / 5 < 0.05


def test_init_is_seeded():
    n = NormStats.identity()
    a, b = net.init_params(TCN, n, seed=3), net.init_params(TCN, n, seed=3)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, net.init_params(TCN, n, seed=4).theta)


@pytest.mark.parametrize("cfg", [TCN, MLP, net.NetConfig(T=8, channels=4, dilations=(1, 3), head_hidden=(5,))])
def test_checkpoint_round_trip(tmp_path, cfg):
    p = model(cfg)
    path = tmp_path / "m.bin"
    net.save_checkpoint(path, p, {"method": "x"})
    q = net.load_checkpoint(path)
    assert q.config == p.config
    assert np.array_equal(q.theta, p.theta)
    for k in ("feature_mean", "feature_std", "target_mean", "target_std"):
        assert np.array_equal(getattr(q.norm, k), getattr(p.norm, k))
    assert net.read_checkpoint_extra(path)["method"] == "x"
    assert net.checkpoint_bytes(q, {"method": "x"}) == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    p = model()
    path = tmp_path / "m.bin"
    net.save_checkpoint(path, p)
    blob = bytearray(path.read_bytes())
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + bytes(blob[8:]))
    with pytest.raises(FormatError):
        net.load_checkpoint(bad)
    bad.write_bytes(bytes(blob[:-8]))
    with pytest.raises(FormatError):
        net.load_checkpoint(bad)
    text = bytes(blob).replace(net.layout_hash(TCN).encode(), b"0" * 64)
    bad.write_bytes(text)
    with pytest.raises(FormatError):
        net.load_checkpoint(bad)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 3))
def test_small_architectures_gradients(channels, T, n_blocks):
    cfg = net.NetConfig(T=T, channels=channels, dilations=tuple(2**i for i in range(n_blocks)), head_hidden=(4,))
    assert _fd_check(cfg, n_coords=min(20, net.param_count(cfg))) <= 1e-4
    p = model(cfg)
    w = windows(2, T=T)
    assert net.forward_batch(p, w).shape == (2, 3)

"""Dilated causal TCN (or flat MLP) regressor with hand-written backprop.

Windows enter as ``(N, 11, T)`` arrays already normalized with the model's
:class:`~piwan.data.NormStats`; predictions leave denormalized, in m/s^2.

The TCN is a stack of residual blocks ``h_out = relu(conv_d(h_in)) + res(h_in)``
where ``conv_d`` is a causal convolution with dilation ``d`` and ``res`` is the
identity or a 1x1 convolution when the channel count changes. Only the final
time step feeds the MLP head, so each layer is evaluated only at the time
steps that can reach that output; the remaining steps cannot influence the
result and are skipped.

All parameters live in one flat float64 vector; :func:`layout` gives the
per-tensor shapes and is the single source of truth for (un)flattening.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import N_FEATURES, N_TARGETS, NormStats
from .errors import FormatError, ShapeMismatch

CHECKPOINT_MAGIC = b"PIWANCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    backbone: str = "tcn"
    T: int = 20
    channels: int = 32
    kernel: int = 3
    dilations: tuple = (1, 2, 4)
    head_hidden: tuple = (64, 64)
    mlp_hidden: tuple = (128, 128, 64)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if self.backbone not in ("tcn", "mlp"):
            raise ValueError(f"backbone must be 'tcn' or 'mlp', got {self.backbone!r}")
        if self.T < 1 or self.kernel < 1 or self.channels < 1:
            raise ValueError("T, kernel and channels must be positive")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be positive")

    @property
    def receptive_field(self) -> int:
        if self.backbone == "mlp":
            return self.T
        return 1 + sum((self.kernel - 1) * d for d in self.dilations)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dilations", "head_hidden", "mlp_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def layout(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    if cfg.backbone == "tcn":
        c_in = N_FEATURES
        for i, _ in enumerate(cfg.dilations):
            out.append((f"conv{i}.W", (cfg.kernel, c_in, cfg.channels)))
            out.append((f"conv{i}.b", (cfg.channels,)))
            if c_in != cfg.channels:
                out.append((f"res{i}.W", (c_in, cfg.channels)))
                out.append((f"res{i}.b", (cfg.channels,)))
            c_in = cfg.channels
        hidden, width = cfg.head_hidden, cfg.channels
    else:
        hidden, width = cfg.mlp_hidden, N_FEATURES * cfg.T
    for j, h in enumerate(hidden):
        out.append((f"fc{j}.W", (width, h)))
        out.append((f"fc{j}.b", (h,)))
        width = h
    out.append(("out.W", (width, N_TARGETS)))
    out.append(("out.b", (N_TARGETS,)))
    return out


def layout_hash(cfg: NetConfig) -> str:
    blob = json.dumps([[n, list(s)] for n, s in layout(cfg)]).encode()
    return hashlib.sha256(blob).hexdigest()


def param_count(cfg: NetConfig) -> int:
    return int(sum(np.prod(s) for _, s in layout(cfg)))


@dataclass
class ModelParams:
    config: NetConfig
    theta: np.ndarray
    norm: NormStats

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (param_count(self.config),):
            raise ShapeMismatch(
                f"parameter vector has {self.theta.size} entries, layout needs {param_count(self.config)}"
            )

    def tensors(self) -> dict[str, np.ndarray]:
        return unflatten(self.config, self.theta)

    def with_theta(self, theta) -> "ModelParams":
        return ModelParams(self.config, theta, self.norm)


def unflatten(cfg: NetConfig, theta: np.ndarray) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in layout(cfg):
        n = int(np.prod(shape))
        out[name] = theta[pos : pos + n].reshape(shape)
        pos += n
    return out


def flatten(cfg: NetConfig, tensors: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(tensors[n], float).reshape(-1) for n, _ in layout(cfg)])


def init_params(cfg: NetConfig, norm: NormStats, seed: int | None = None) -> ModelParams:
    """Kaiming-uniform weights scaled by fan-in, zero biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, shape in layout(cfg):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        gain = 3.0 if name.startswith("out") else 6.0
        bound = np.sqrt(gain / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg, flatten(cfg, tensors), norm)


# -- time plan ---------------------------------------------------------------

@lru_cache(maxsize=None)
def _time_plan(T: int, kernel: int, dilations: tuple):
    """Per layer: input time steps, and gather indices for taps and residual.

    Returns a list of (n_in, taps, res_idx, in_times) from first to last
    layer. Tap index ``n_in`` addresses an appended zero row (causal padding).
    """
    times = [[T - 1]]
    for d in reversed(dilations):
        need = set(times[0])
        for t in times[0]:
            need.update(t - j * d for j in range(kernel) if t - j * d >= 0)
        times.insert(0, sorted(need))
    plan = []
    for l, d in enumerate(dilations):
        t_in, t_out = times[l], times[l + 1]
        pos = {t: i for i, t in enumerate(t_in)}
        taps = np.array(
            [[pos.get(t - j * d, len(t_in)) for t in t_out] for j in range(kernel)], dtype=np.intp
        )
        res = np.array([pos[t] for t in t_out], dtype=np.intp)
        plan.append((len(t_in), taps, res, np.array(t_in, dtype=np.intp)))
    return plan


# -- forward / backward ------------------------------------------------------

def _check_windows(cfg: NetConfig, windows) -> np.ndarray:
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim != 3 or w.shape[1:] != (N_FEATURES, cfg.T):
        raise ShapeMismatch(f"expected windows of shape (N, {N_FEATURES}, {cfg.T}), got {w.shape}")
    return w


def _forward(cfg: NetConfig, P: dict, windows: np.ndarray):
    """Raw (normalized-space) outputs plus the activations needed for backprop."""
    N = windows.shape[0]
    cache = {}
    if cfg.backbone == "tcn":
        plan = _time_plan(cfg.T, cfg.kernel, cfg.dilations)
        h = np.ascontiguousarray(windows.transpose(0, 2, 1)[:, plan[0][3], :])
        layers = []
        for i, (n_in, taps, res_idx, _) in enumerate(plan):
            hpad = np.concatenate([h, np.zeros((N, 1, h.shape[2]))], axis=1)
            W = P[f"conv{i}.W"]
            z = P[f"conv{i}.b"] + sum(hpad[:, taps[j], :] @ W[j] for j in range(cfg.kernel))
            hres = h[:, res_idx, :]
            if f"res{i}.W" in P:
                res = hres @ P[f"res{i}.W"] + P[f"res{i}.b"]
            else:
                res = hres
            h = np.maximum(z, 0.0) + res
            layers.append((hpad, z, hres))
        cache["layers"] = layers
        a = h[:, -1, :]
        hidden = cfg.head_hidden
    else:
        a = windows.reshape(N, -1)
        hidden = cfg.mlp_hidden
    acts = [a]
    for j in range(len(hidden)):
        a = np.maximum(a @ P[f"fc{j}.W"] + P[f"fc{j}.b"], 0.0)
        acts.append(a)
    y = a @ P["out.W"] + P["out.b"]
    cache["acts"] = acts
    return y, cache


def _backward(cfg: NetConfig, P: dict, cache: dict, dy: np.ndarray) -> dict:
    G = {}
    acts = cache["acts"]
    nh = len(acts) - 1
    G["out.W"] = acts[-1].T @ dy
    G["out.b"] = dy.sum(0)
    da = dy @ P["out.W"].T
    for j in range(nh - 1, -1, -1):
        dz = da * (acts[j + 1] > 0)
        G[f"fc{j}.W"] = acts[j].T @ dz
        G[f"fc{j}.b"] = dz.sum(0)
        da = dz @ P[f"fc{j}.W"].T
    if cfg.backbone == "tcn":
        plan = _time_plan(cfg.T, cfg.kernel, cfg.dilations)
        N = dy.shape[0]
        dh = np.zeros((N, 1, cfg.channels))
        dh[:, 0, :] = da
        for i in range(len(plan) - 1, -1, -1):
            n_in, taps, res_idx, _ = plan[i]
            hpad, z, hres = cache["layers"][i]
            dz = dh * (z > 0)
            W = P[f"conv{i}.W"]
            c_in = W.shape[1]
            dz2 = dz.reshape(-1, dz.shape[2])
            dW = np.empty_like(W)
            dhpad = np.zeros((N, n_in + 1, c_in))
            for j in range(cfg.kernel):
                xj = hpad[:, taps[j], :]
                dW[j] = xj.reshape(-1, c_in).T @ dz2
                # taps are unique except for the zero-pad row, which is dropped
                dhpad[:, taps[j], :] += dz @ W[j].T
            G[f"conv{i}.W"] = dW
            G[f"conv{i}.b"] = dz2.sum(0)
            dh_in = dhpad[:, :n_in, :]
            if f"res{i}.W" in P:
                G[f"res{i}.W"] = hres.reshape(-1, c_in).T @ dh.reshape(-1, dh.shape[2])
                G[f"res{i}.b"] = dh.sum((0, 1))
                dh_in[:, res_idx, :] += dh @ P[f"res{i}.W"].T
            else:
                dh_in[:, res_idx, :] += dh
            dh = dh_in
    return G


def forward_batch(params: ModelParams, windows) -> np.ndarray:
    """Denormalized predictions ``(N, 3)`` for normalized windows ``(N, 11, T)``."""
    w = _check_windows(params.config, windows)
    y, _ = _forward(params.config, params.tensors(), w)
    return params.norm.denormalize_targets(y)


def forward(params: ModelParams, window) -> np.ndarray:
    """Prediction for a single normalized ``(11, T)`` window."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeMismatch(f"expected a single (11, T) window, got shape {w.shape}")
    return forward_batch(params, w[None])[0]


def value_and_backward(params: ModelParams, windows, cotangent_fn):
    """Forward once, then backprop ``cotangent_fn(pred)`` to the flat parameters.

    ``cotangent_fn`` maps denormalized predictions ``(N, 3)`` to
    ``(value, d value / d pred)``. Returns ``(value, grad_theta, pred)``.
    """
    cfg = params.config
    w = _check_windows(cfg, windows)
    P = params.tensors()
    y, cache = _forward(cfg, P, w)
    pred = params.norm.denormalize_targets(y)
    value, dpred = cotangent_fn(pred)
    G = _backward(cfg, P, cache, np.asarray(dpred, float) * params.norm.target_std)
    return value, flatten(cfg, G), pred


def backward(params: ModelParams, windows, output_cotangent) -> np.ndarray:
    """Gradient of ``sum(output_cotangent * forward_batch(params, windows))`` w.r.t. theta."""
    ct = np.asarray(output_cotangent, dtype=np.float64)
    w = _check_windows(params.config, windows)
    if ct.shape != (w.shape[0], N_TARGETS):
        raise ShapeMismatch(f"cotangent shape {ct.shape} does not match outputs ({w.shape[0]}, 3)")
    _, g, _ = value_and_backward(params, w, lambda pred: (0.0, ct))
    return g


def predict_raw(params: ModelParams, raw_windows) -> np.ndarray:
    """Predictions for un-normalized windows."""
    return forward_batch(params, params.norm.normalize_features(raw_windows))


# -- checkpoint I/O ----------------------------------------------------------

def _header(params: ModelParams) -> dict:
    return {
        "config": params.config.to_dict(),
        "layout": [[n, list(s)] for n, s in layout(params.config)],
        "layout_hash": layout_hash(params.config),
        "norm": params.norm.to_dict(),
        "n_params": int(params.theta.size),
    }


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(params: ModelParams, extra: dict | None = None) -> bytes:
    header = _header(params)
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)))
    buf.write(hb)
    buf.write(params.theta.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    _atomic_write(Path(path), checkpoint_bytes(params, extra))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen])
    cfg = NetConfig.from_dict(header["config"])
    if header["layout_hash"] != layout_hash(cfg):
        raise FormatError(f"{path}: layout hash mismatch")
    theta = np.frombuffer(data[20 + hlen :], dtype="<f8").astype(np.float64)
    if theta.size != header["n_params"]:
        raise FormatError(f"{path}: expected {header['n_params']} parameters, found {theta.size}")
    return ModelParams(cfg, theta, NormStats.from_dict(header["norm"]))


def read_checkpoint_extra(path) -> dict:
    data = Path(path).read_bytes()
    _, hlen = struct.unpack("<IQ", data[8:20])
    return json.loads(data[20 : 20 + hlen]).get("extra", {})

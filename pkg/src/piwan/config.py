"""Run configuration: one YAML document with a section per module.

Every key is validated before any work starts; unknown keys and
out-of-range values raise :class:`ConfigError` naming the key path and the
accepted range. Only the output directory and thread count may be
overridden from the environment (``PIWAN_OUTPUT_DIR``, ``PIWAN_THREADS``).
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import yaml

from . import dynamics as dyn
from .adapter import AdapterConfig
from .errors import ConfigError
from .mpc import DEFAULT_Q, DEFAULT_R, MpcConfig, MpcWeights
from .net import NetConfig
from .train import TrainConfig
from .trajectories import ALL_KINDS, TRAIN_KINDS, TrajectoryKind, TrajectorySpec

ENV_OUTPUT_DIR = "PIWAN_OUTPUT_DIR"
ENV_THREADS = "PIWAN_THREADS"


def _default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


DEFAULTS: dict = {
    "run_id": "default",
    "seed": 0,
    "output_dir": "reports",
    "threads": None,  # resolved to the available core count
    "plant": {"drag": [0.3, 0.3, 0.15]},
    "trajectories": {
        "a": 2.0,
        "b": 1.5,
        "h": 1.0,
        "omega": 0.3141592653589793,
        "climb": 0.05,
        "warp": 0.5,
    },
    "mpc": {
        "horizon": 20,
        "dt": 0.02,
        "u_min": [2.0, -3.0, -3.0, -3.0],
        "u_max": [20.0, 3.0, 3.0, 3.0],
        "max_sqp_iters": 10,
        "kkt_tol": 1.0e-4,
        "Q": list(DEFAULT_Q),
        "R": list(DEFAULT_R),
    },
    "data": {
        "duration": 20.0,
        "winds_per_kind": 5,
        "wind_grid": [[float(x), float(y)] for x in (0, 2, 4) for y in (0, 2, 4)],
        "eval_wind": [5.0, 0.0],
    },
    "net": {
        "T": 20,
        "channels": 32,
        "kernel": 3,
        "dilations": [1, 2, 4],
        "head_hidden": [64, 64],
        "mlp_hidden": [128, 128, 64],
    },
    "train": {
        "epochs": 200,
        "batch_size": 256,
        "lr": 1.0e-3,
        "lam": 0.01,
        "n_colloc": 2048,
        "resample_period": 10,
        "val_fraction": 0.1,
    },
    "adapter": {"N_T": 10, "gains": [0.8, 0.8, 0.8]},
    "bench": {
        "methods": ["nom", "tcn", "pi-mlp", "pi-tcn", "pi-wan"],
        "trajectories": [k.value for k in ALL_KINDS],
        "winds": [[0.0, 0.0], [2.0, 0.0], [5.0, 0.0], [6.0, 0.0]],
        "seeds": [0],
        "duration": 20.0,
    },
}


# -- validators --------------------------------------------------------------

def _num(lo=None, hi=None, integer=False, lo_open=False) -> Callable:
    def check(path, v):
        ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
        if isinstance(v, bool) or not ok_type:
            raise ConfigError(f"{path}: expected {'an integer' if integer else 'a number'}{_range(lo, hi, lo_open)}, got {v!r}")
        if (lo is not None and (v <= lo if lo_open else v < lo)) or (hi is not None and v > hi):
            raise ConfigError(f"{path}: {v!r} outside the accepted range{_range(lo, hi, lo_open)}")
        return int(v) if integer else float(v)

    return check


def _range(lo, hi, lo_open=False) -> str:
    left = "(" if lo_open else "["
    if lo is None and hi is None:
        return ""
    return f" in {left}{'-inf' if lo is None else lo}, {'inf' if hi is None else hi}]"


def _vec(n, item: Callable, min_len=None) -> Callable:
    def check(path, v):
        if not isinstance(v, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {v!r}")
        if n is not None and len(v) != n:
            raise ConfigError(f"{path}: expected {n} values, got {len(v)}")
        if min_len is not None and len(v) < min_len:
            raise ConfigError(f"{path}: expected at least {min_len} values, got {len(v)}")
        return [item(f"{path}[{i}]", x) for i, x in enumerate(v)]

    return check


def _choice(options) -> Callable:
    def check(path, v):
        if v not in options:
            raise ConfigError(f"{path}: {v!r} is not one of {sorted(options)}")
        return v

    return check


def _kind(path, v):
    try:
        return TrajectoryKind.parse(v).value
    except Exception:
        raise ConfigError(f"{path}: unknown trajectory {v!r}; expected one of {[k.value for k in ALL_KINDS]}") from None


def _method(path, v):
    from .bench import Method

    try:
        return Method.parse(v).value
    except Exception:
        raise ConfigError(f"{path}: unknown method {v!r}; expected one of {[m.value for m in Method]}") from None


def _run_id(path, v):
    if not isinstance(v, str) or not v or any(c in v for c in "/\\") or v in (".", ".."):
        raise ConfigError(f"{path}: expected a non-empty name without path separators, got {v!r}")
    return v


def _str(path, v):
    if not isinstance(v, str) or not v:
        raise ConfigError(f"{path}: expected a non-empty string, got {v!r}")
    return v


def _optional(check):
    def wrapped(path, v):
        return None if v is None else check(path, v)

    return wrapped


_pos = _num(0.0, lo_open=True)
_nonneg = _num(0.0)
_wind = _vec(2, _num(-30.0, 30.0))

SCHEMA: dict = {
    "run_id": _run_id,
    "seed": _num(0, 2**32 - 1, integer=True),
    "output_dir": _str,
    "threads": _optional(_num(1, 1024, integer=True)),
    "plant": {"drag": _vec(3, _nonneg)},
    "trajectories": {
        "a": _pos,
        "b": _pos,
        "h": _pos,
        "omega": _pos,
        "climb": _num(),
        "warp": _nonneg,
    },
    "mpc": {
        "horizon": _num(1, 500, integer=True),
        "dt": _num(0.0, 1.0, lo_open=True),
        "u_min": _vec(4, _num()),
        "u_max": _vec(4, _num()),
        "max_sqp_iters": _num(1, 1000, integer=True),
        "kkt_tol": _pos,
        "Q": _vec(10, _nonneg),
        "R": _vec(4, _nonneg),
    },
    "data": {
        "duration": _num(0.0, 3600.0, lo_open=True),
        "winds_per_kind": _num(1, 1000, integer=True),
        "wind_grid": _vec(None, _wind, min_len=1),
        "eval_wind": _wind,
    },
    "net": {
        "T": _num(1, 1000, integer=True),
        "channels": _num(1, 4096, integer=True),
        "kernel": _num(1, 64, integer=True),
        "dilations": _vec(None, _num(1, 1024, integer=True), min_len=1),
        "head_hidden": _vec(None, _num(1, 4096, integer=True)),
        "mlp_hidden": _vec(None, _num(1, 4096, integer=True)),
    },
    "train": {
        "epochs": _num(0, 100000, integer=True),
        "batch_size": _num(1, 1 << 20, integer=True),
        "lr": _pos,
        "lam": _nonneg,
        "n_colloc": _num(1, 1 << 24, integer=True),
        "resample_period": _num(1, 100000, integer=True),
        "val_fraction": _num(0.0, 0.9),
    },
    "adapter": {
        "N_T": _num(1, 10000, integer=True),
        "gains": _vec(3, _num(0.0, 1.0)),
    },
    "bench": {
        "methods": _vec(None, _method, min_len=1),
        "trajectories": _vec(None, _kind, min_len=1),
        "winds": _vec(None, _wind, min_len=1),
        "seeds": _vec(None, _num(0, 2**32 - 1, integer=True), min_len=1),
        "duration": _num(0.0, 3600.0, lo_open=True),
    },
}


def _validate(schema: dict, raw: Any, defaults: dict, path: str) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}; accepted keys: {sorted(schema)}")
    out = {}
    for key, rule in schema.items():
        kp = f"{path}.{key}" if path else key
        value = raw.get(key, defaults[key])
        if isinstance(rule, dict):
            out[key] = _validate(rule, value, defaults[key], kp)
        else:
            out[key] = rule(kp, copy.deepcopy(value))
    return out


@dataclass(frozen=True)
class RunConfig:
    """A validated run configuration; ``data`` holds the normalized document."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict | None, env: dict | None = None) -> "RunConfig":
        d = _validate(SCHEMA, raw, DEFAULTS, "")
        env = os.environ if env is None else env
        if env.get(ENV_OUTPUT_DIR):
            d["output_dir"] = _str(ENV_OUTPUT_DIR, env[ENV_OUTPUT_DIR])
        if env.get(ENV_THREADS):
            try:
                n = int(env[ENV_THREADS])
            except ValueError:
                raise ConfigError(f"{ENV_THREADS}: expected an integer in [1, 1024], got {env[ENV_THREADS]!r}") from None
            d["threads"] = _num(1, 1024, integer=True)(ENV_THREADS, n)
        if d["threads"] is None:
            d["threads"] = _default_threads()
        m = d["mpc"]
        bad = [i for i in range(4) if m["u_min"][i] >= m["u_max"][i]]
        if bad:
            raise ConfigError(f"mpc.u_min[{bad[0]}]: must be strictly below mpc.u_max[{bad[0]}]")
        if d["train"]["val_fraction"] >= 1.0:
            raise ConfigError("train.val_fraction: expected a value in [0, 1)")
        return cls(d)

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None, env: dict | None = None) -> "RunConfig":
        raw: dict = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from None
            try:
                raw = yaml.safe_load(text) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        for ov in overrides or []:
            apply_override(raw, ov)
        return cls.from_dict(raw, env)

    # -- views -----------------------------------------------------------

    def __getitem__(self, key):
        return self.data[key]

    @property
    def run_id(self) -> str:
        return self.data["run_id"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def threads(self) -> int:
        return self.data["threads"]

    @property
    def run_dir(self) -> Path:
        return Path(self.data["output_dir"]) / self.run_id

    @property
    def drag(self) -> tuple:
        return tuple(self.data["plant"]["drag"])

    def wind(self, wx: float, wy: float) -> dyn.WindField:
        return dyn.WindField.xy(wx, wy, drag=self.drag)

    def spec(self, kind) -> TrajectorySpec:
        return TrajectorySpec(kind, **self.data["trajectories"])

    def train_specs(self) -> list[TrajectorySpec]:
        return [self.spec(k) for k in TRAIN_KINDS]

    def mpc_config(self) -> MpcConfig:
        m = self.data["mpc"]
        return MpcConfig(
            H=m["horizon"],
            dt=m["dt"],
            u_min=tuple(m["u_min"]),
            u_max=tuple(m["u_max"]),
            max_sqp_iters=m["max_sqp_iters"],
            kkt_tol=m["kkt_tol"],
        )

    def mpc_weights(self) -> MpcWeights:
        return MpcWeights(self.data["mpc"]["Q"], self.data["mpc"]["R"])

    def net_config(self, backbone: str = "tcn", seed: int | None = None) -> NetConfig:
        n = self.data["net"]
        return NetConfig(
            backbone=backbone,
            T=n["T"],
            channels=n["channels"],
            kernel=n["kernel"],
            dilations=tuple(n["dilations"]),
            head_hidden=tuple(n["head_hidden"]),
            mlp_hidden=tuple(n["mlp_hidden"]),
            seed=self.seed if seed is None else seed,
        )

    def train_config(self, collocation: str = "resampled", seed: int | None = None) -> TrainConfig:
        t = self.data["train"]
        return TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            lam=t["lam"],
            collocation=collocation,
            n_colloc=t["n_colloc"],
            resample_period=t["resample_period"],
            val_fraction=t["val_fraction"],
            seed=self.seed if seed is None else seed,
        )

    def adapter_config(self) -> AdapterConfig:
        a = self.data["adapter"]
        return AdapterConfig(N_T=a["N_T"], gains=tuple(a["gains"]))

    def echo(self) -> str:
        """YAML that reproduces this configuration exactly (threads included)."""
        return yaml.safe_dump(self.data, sort_keys=False, default_flow_style=None)


def apply_override(raw: dict, text: str) -> None:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a raw config mapping."""
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key.path=value")
    key, _, value = text.partition("=")
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r}: empty key")
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError:
        raise ConfigError(f"override {text!r}: value is not valid YAML") from None
    node = raw
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {text!r}: {p} is not a section")
        node = nxt
    node[parts[-1]] = parsed

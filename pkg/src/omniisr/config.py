"""TOML run configuration: schema, defaults, validation and round-trip
serialisation."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .diffcore import ConfigurationError

MODES = ("cl", "fl", "hybrid", "bounds", "escape", "saddle", "ablate", "grad-check")

# section -> key -> (type, default).  A default of None means "unset".
SCHEMA = {
    "data": {
        "task": (str, "classification"),       # classification | gridseg
        "num_classes": (int, 4),
        "dims": (int, 8),                      # features (classification) or channels (gridseg)
        "width": (int, 1),
        "height": (int, 1),
        "n": (int, 400),
        "separation": (float, 2.0),
        "noise": (float, 1.0),
        "test_fraction": (float, 0.25),
        "cloud_fraction": (float, 0.3),
        "path": (str, None),                   # load a dumped dataset instead of generating
    },
    "network": {
        "widths": (list, [16, 16, 16, 16, 16]),
        "downsample_at": (list, []),
        "upsample": (str, "bilinear"),
    },
    "taps": {
        "count": (int, 2),
        "placement": (str, "input"),
        "spacing": (int, 1),
        "indices": (list, []),                 # explicit indices override count/placement/spacing
        "alpha": (float, 0.4),
        "lam": (float, 0.1),
    },
    "optimizer": {
        "kind": (str, "sgd"),
        "eta": (float, 0.1),
        "schedule": (str, "constant"),
        "iterations": (int, 100),
        "batch_size": (int, 0),                # 0 = full batch
        "weight_decay": (float, None),
    },
    "fed": {
        "num_clients": (int, 4),
        "local_epochs": (int, 1),
        "participation": (float, 1.0),
        "rounds": (int, 10),
        "partition": (str, "dirichlet"),
        "concentration": (float, 0.3),
        "classes_per_client": (int, 2),
        "batch_size": (int, 0),
        "parallel": (bool, False),
        "scope": (str, "model"),
    },
    "hybrid": {
        "regime": (str, "fixed"),
        "alpha": (float, 0.5),
        "beta": (float, 0.2),
        "alpha_min": (float, 0.0),
    },
    "theory": {
        "smoothness": (float, 1.0),
        "grad_bound_sq": (float, 1.0),
        "noise_sq": (float, 0.0),
        "init_gap": (float, 1.0),
        "eta": (float, 1.0),
        "T": (float, 100.0),
        "local_epochs": (float, 1.0),
        "heterogeneity": (float, 0.0),
        "drift_const": (float, 1.0),
        "bound_const": (float, 1.0),
        "bias_cl": (float, 0.0),
        "bias_fl": (float, 0.0),
        "noise_cl_sq": (float, 0.0),
        "noise_fl_sq": (float, 0.0),
        "alpha_min": (float, 0.5),
        "bias_eff": (float, None),
        "noise_eff_sq": (float, None),
        "curvature": (float, 0.1),
        "hessian_lip": (float, 1.0),
        "y0": (float, 0.5),
        "c0": (float, 1.0),
        "radius": (float, 10.0),
        "delta": (float, 0.1),
        "eps": (list, []),
        "kappa": (float, 1.0),
    },
    "sweep": {
        "curvatures": (list, [0.01, 0.02, 0.05, 0.1, 0.2]),
        "curvature_grid": (list, []),          # empty = default grid
        "eta_grid": (list, []),
        "radius_grid": (list, []),
        "delta_grid": (list, []),
    },
    "saddle": {
        "curvature": (float, 0.1),
        "eta": (float, 0.01),
        "y0": (float, 0.001),
        "radius": (float, 10.0),
        "sigma_cl": (float, 0.1),
        "sigma_fl": (float, 0.0),
        "alpha": (float, 1.0),
        "bias": (float, 0.0),
        "trials": (int, 1000),
        "cap": (int, 100000),
    },
    "ablate": {
        "axis": (str, "count"),
        "values": (list, [1, 2, 3, 4, 5]),
        "seeds": (list, [0, 1, 2]),
        "mode": (str, "cl"),
    },
}

REQUIRED = {
    "cl": ("data",),
    "fl": ("data", "fed"),
    "hybrid": ("data", "fed", "hybrid"),
    "bounds": ("theory",),
    "escape": (),
    "saddle": (),
    "ablate": ("data",),
    "grad-check": (),
}

TOP_LEVEL = {"mode": str, "seed": int}


def _locate(text: str, section: str | None, key: str | None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header)."""
    lines = text.splitlines()
    current = None
    for i, line in enumerate(lines, 1):
        s = line.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", s)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return i
    return None


def _err(text, section, key, msg) -> ConfigurationError:
    line = _locate(text, section, key) if text else None
    where = f"{section}.{key}" if section and key else (key or section)
    loc = f" (line {line})" if line else ""
    return ConfigurationError(f"config key '{where}'{loc}: {msg}")


def _coerce(value, typ, text, section, key):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _err(text, section, key, f"expected a number, got {value!r}")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise _err(text, section, key, f"expected an integer, got {value!r}")
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise _err(text, section, key, f"expected true/false, got {value!r}")
        return value
    if typ is str:
        if not isinstance(value, str):
            raise _err(text, section, key, f"expected a string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise _err(text, section, key, f"expected an array, got {value!r}")
        return list(value)
    raise AssertionError(typ)


@dataclass
class RunConfig:
    mode: str
    seed: int | None = None
    sections: dict = field(default_factory=dict)
    present: tuple = ()
    text: str = field(default="", compare=False, repr=False)

    def __getitem__(self, section) -> dict:
        return self.sections[section]

    def to_dict(self) -> dict:
        out = {"mode": self.mode}
        if self.seed is not None:
            out["seed"] = self.seed
        for sec in self.present:
            out[sec] = {k: v for k, v in self.sections[sec].items() if v is not None}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @property
    def hash(self) -> str:
        return config_hash(self.text or self.to_toml())


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_text(text: str, mode: str | None = None) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed TOML: {exc}") from None
    return from_dict(raw, mode, text)


def parse_config(path, mode: str | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file {path} not found")
    return parse_text(p.read_text(encoding="utf-8"), mode)


def from_dict(raw: dict, mode: str | None = None, text: str = "") -> RunConfig:
    for k, v in raw.items():
        if k not in TOP_LEVEL and k not in SCHEMA:
            raise _err(text, None, k, "unknown key")
        if k in SCHEMA and not isinstance(v, dict):
            raise _err(text, None, k, "expected a [section] table")
    file_mode = raw.get("mode")
    if file_mode is not None:
        file_mode = _coerce(file_mode, str, text, None, "mode")
        if file_mode not in MODES:
            raise _err(text, None, "mode", f"unknown mode {file_mode!r}, expected one of {MODES}")
    if mode is not None and file_mode is not None and file_mode != mode and mode != "ablate":
        raise _err(text, None, "mode", f"config says {file_mode!r} but subcommand runs {mode!r}")
    mode = mode or file_mode
    if mode is None:
        raise ConfigurationError("config key 'mode': missing (no subcommand given either)")
    seed = raw.get("seed")
    if seed is not None:
        seed = _coerce(seed, int, text, None, "seed")
        if seed < 0:
            raise _err(text, None, "seed", "seed must be nonnegative")
    sections = {}
    for sec, keys in SCHEMA.items():
        given = raw.get(sec, {})
        for k in given:
            if k not in keys:
                raise _err(text, sec, k, "unknown key")
        vals = {}
        for k, (typ, default) in keys.items():
            vals[k] = _coerce(given[k], typ, text, sec, k) if k in given else (
                list(default) if isinstance(default, list) else default)
        sections[sec] = vals
    # ablation runs a training mode underneath and needs that mode's sections
    need = list(REQUIRED[mode])
    if mode == "ablate":
        need += [s for s in REQUIRED.get(sections["ablate"]["mode"], ()) if s not in need]
    for sec in need:
        if sec not in raw:
            raise ConfigurationError(f"config key '{sec}': section [{sec}] is required for mode {mode!r}")
    present = tuple(s for s in SCHEMA if s in raw)
    cfg = RunConfig(mode, seed, sections, present, text)
    validate(cfg)
    return cfg


_CHOICES = {
    ("data", "task"): ("classification", "gridseg"),
    ("network", "upsample"): ("bilinear", "nearest"),
    ("taps", "placement"): ("input", "middle", "output"),
    ("optimizer", "kind"): ("sgd", "adam"),
    ("optimizer", "schedule"): ("constant", "inverse-sqrt-T"),
    ("fed", "partition"): ("iid", "dirichlet", "label-shard"),
    ("fed", "scope"): ("model", "all"),
    ("hybrid", "regime"): ("alternating", "fixed", "adaptive"),
    ("ablate", "axis"): ("count", "spacing", "placement"),
    ("ablate", "mode"): ("cl", "fl", "hybrid"),
}

_POSITIVE = [("data", "num_classes"), ("data", "dims"), ("data", "width"), ("data", "height"), ("data", "n"),
             ("optimizer", "eta"), ("optimizer", "iterations"), ("fed", "num_clients"), ("fed", "local_epochs"),
             ("fed", "rounds"), ("fed", "concentration"), ("saddle", "eta"), ("saddle", "curvature"),
             ("saddle", "radius"), ("saddle", "trials"), ("saddle", "cap")]


def validate(cfg: RunConfig):
    t = cfg.text
    for (sec, key), allowed in _CHOICES.items():
        if cfg[sec][key] not in allowed:
            raise _err(t, sec, key, f"{cfg[sec][key]!r} not one of {allowed}")
    for sec, key in _POSITIVE:
        if not cfg[sec][key] > 0:
            raise _err(t, sec, key, "must be > 0")
    if cfg["data"]["num_classes"] < 2:
        raise _err(t, "data", "num_classes", "need at least 2 classes")
    if not 0 < cfg["data"]["test_fraction"] < 1:
        raise _err(t, "data", "test_fraction", "must lie in (0, 1)")
    if not 0 < cfg["data"]["cloud_fraction"] < 1:
        raise _err(t, "data", "cloud_fraction", "must lie in (0, 1)")
    if not 0 < cfg["fed"]["participation"] <= 1:
        raise _err(t, "fed", "participation", "must lie in (0, 1]")
    for key in ("alpha", "alpha_min"):
        if not 0 <= cfg["hybrid"][key] <= 1:
            raise _err(t, "hybrid", key, "must lie in [0, 1]")
    for key in ("alpha", "lam"):
        if cfg["taps"][key] < 0:
            raise _err(t, "taps", key, "must be >= 0")
    if cfg["taps"]["count"] < 0:
        raise _err(t, "taps", "count", "must be >= 0")
    if cfg["taps"]["spacing"] < 1:
        raise _err(t, "taps", "spacing", "must be >= 1")
    for key in ("widths", "downsample_at", "indices"):
        sec = "taps" if key == "indices" else "network"
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in cfg[sec][key]):
            raise _err(t, sec, key, "expected an array of integers")
    if not cfg["network"]["widths"] or any(w < 1 for w in cfg["network"]["widths"]):
        raise _err(t, "network", "widths", "need at least one positive width")
    for key in ("eps",):
        if any(not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0 for v in cfg["theory"][key]):
            raise _err(t, "theory", key, "expected an array of positive numbers")
    if not 0 < cfg["theory"]["delta"] < 1:
        raise _err(t, "theory", "delta", "must lie in (0, 1)")
    for key, (typ, _) in SCHEMA["theory"].items():
        v = cfg["theory"][key]
        if typ is float and v is not None and v < 0:
            raise _err(t, "theory", key, "must be >= 0")
    if not cfg["ablate"]["seeds"]:
        raise _err(t, "ablate", "seeds", "need at least one seed")
    if cfg["saddle"]["trials"] < 100:
        raise _err(t, "saddle", "trials", "need at least 100 trials")


def default_text(mode: str = "cl") -> str:
    """A config with every section written out, for the reference doc."""
    cfg = RunConfig(mode, 0, {s: {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in keys.items()}
                              for s, keys in SCHEMA.items()}, tuple(SCHEMA))
    return cfg.to_toml()

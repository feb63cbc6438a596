"""Run configuration: one YAML document with fixed sections and strict keys."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import fields
from pathlib import Path

import yaml

from .control import MpcConfig
from .dynamics import DragParams, KnodeMpcError, QuadParams
from .evaluation import RefSpec
from .models import DEFAULT_LAYERS
from .training import TrainConfig


class ConfigError(KnodeMpcError, ValueError):
    pass


def _circle(radius, **kw):
    return {"kind": "circle", "radius": float(radius), **kw}


DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "quad": QuadParams().to_dict(),
    "drag": DragParams().to_dict(),
    "trajectories": {
        "duration": 8.0,
        "plant_dt": 2e-3,
        "period": 10.0,  # used by every spec that does not set its own
        "train": {"train-r3": _circle(3), "train-r6": _circle(6)},
        "val": {"val-r4": _circle(4)},
        "prediction": [_circle(r) for r in (2, 3, 4, 6, 8)]
        + [{"kind": "lemniscate", "radius": float(r)} for r in (2, 3, 4)],
        "tracking": [_circle(r) for r in (1, 2, 4, 8)],
    },
    "model": {"layers": list(DEFAULT_LAYERS), "features": "velocity", "residual": "all"},
    "train": {
        "epochs": 2000,
        "learning_rate": 1e-2,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "batch": 0,
        "loss_weights": None,
        "val_every": 10,
        "segment_stride": 4,
    },
    "gp": {"n_points": 80, "noise": 1e-4, "c": None, "length_scale": None},
    "mpc": {k: v for k, v in MpcConfig().to_dict().items()},
    "eval": {"stride": 10},
}

# sections whose values are free-form mappings (spec names are user-chosen)
_OPEN = {("trajectories", "train"), ("trajectories", "val")}


def _check_keys(doc, ref, path=()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be a mapping")
    for k, v in doc.items():
        if k not in ref:
            raise ConfigError(f"unknown config key {'.'.join(path + (k,))!r}")
        if isinstance(ref[k], dict) and path + (k,) not in _OPEN:
            _check_keys(v, ref[k], path + (k,))


def _merge(base, over, path=()):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(out.get(k), dict) and isinstance(v, dict) and path + (k,) not in _OPEN:
            out[k] = _merge(out[k], v, path + (k,))
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(v):
    """Numbers written like ``1e-3`` load as strings under YAML 1.1; read them as floats."""
    if isinstance(v, dict):
        return {k: _coerce(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_coerce(x) for x in v]
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def parse_override(item: str) -> dict:
    """``section.key=value`` to a nested mapping; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {raw!r}: {e}") from None
    doc = _coerce(value)
    for p in reversed(parts):
        doc = {p: doc}
    return doc


class RunConfig:
    """Validated, fully resolved run configuration.

    ``doc`` is the plain nested mapping (defaults expanded); the typed views
    below are built from it on construction so bad values fail early.
    """

    def __init__(self, doc: dict):
        _check_keys(doc, DEFAULTS)
        self.doc = _merge(DEFAULTS, doc)
        try:
            self._build()
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path=None, overrides=(), seed=None, out=None) -> "RunConfig":
        doc = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise FileNotFoundError(f"config file not found: {path}")
            try:
                doc = _coerce(yaml.safe_load(path.read_text()) or {})
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from None
            _check_keys(doc, DEFAULTS)
        for item in overrides:
            over = parse_override(item)
            _check_keys(over, DEFAULTS)
            doc = _merge(doc, over)
        if seed is not None:
            doc["seed"] = int(seed)
        if out is not None:
            doc["out"] = str(out)
        return cls(doc)

    def _build(self):
        d = self.doc
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a nonnegative integer")
        self.seed = d["seed"]
        self.out = Path(d["out"])
        self.quad = QuadParams(**d["quad"])
        self.drag = DragParams(**d["drag"])

        t = d["trajectories"]
        self.duration = float(t["duration"])
        self.plant_dt = float(t["plant_dt"])
        if not self.duration > 0 or not self.plant_dt > 0:
            raise ConfigError("trajectories.duration and plant_dt must be positive")
        steps = self.duration / self.plant_dt
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise ConfigError("trajectories.duration must be a multiple of plant_dt")
        self.train_specs = self._named_specs(t["train"], "train")
        self.val_specs = self._named_specs(t["val"], "val")
        if len(self.train_specs) == 0 or len(self.val_specs) != 1:
            raise ConfigError("need at least one training spec and exactly one validation spec")
        self.prediction_specs = [self._spec(s, "prediction") for s in t["prediction"]]
        self.tracking_specs = [self._spec(s, "tracking") for s in t["tracking"]]

        m = d["model"]
        if m["features"] not in ("all", "velocity"):
            raise ConfigError("model.features must be 'all' or 'velocity'")
        if m["residual"] not in ("all", "translational"):
            raise ConfigError("model.residual must be 'all' or 'translational'")
        self.layers = tuple(int(n) for n in m["layers"])
        if len(self.layers) < 2 or self.layers[0] != 16 or self.layers[-1] != 12:
            raise ConfigError("model.layers must start at 16 inputs and end at 12 outputs")

        tr = dict(d["train"])
        tr["betas"] = tuple(tr["betas"])
        if tr["loss_weights"] is not None:
            tr["loss_weights"] = tuple(tr["loss_weights"])
        self.train = TrainConfig(seed=self.seed, **tr)

        g = d["gp"]
        if int(g["n_points"]) < 1 or not float(g["noise"]) > 0:
            raise ConfigError("gp.n_points must be >= 1 and gp.noise > 0")

        mp = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d["mpc"].items()}
        self.mpc = MpcConfig(**mp)
        if int(d["eval"]["stride"]) < 1:
            raise ConfigError("eval.stride must be >= 1")

    def _spec(self, s, where) -> RefSpec:
        if not isinstance(s, dict):
            raise ConfigError(f"trajectory spec in {where} must be a mapping")
        known = {f.name for f in fields(RefSpec)}
        bad = set(s) - known
        if bad:
            raise ConfigError(f"unknown trajectory spec key(s) {sorted(bad)} in {where}")
        s = dict(s)
        s.setdefault("period", float(self.doc["trajectories"]["period"]))
        if "center" in s:
            s["center"] = tuple(s["center"])
        return RefSpec(**s)

    def _named_specs(self, mapping, where) -> dict:
        if not isinstance(mapping, dict):
            raise ConfigError(f"trajectories.{where} must map file names to specs")
        return {str(name): self._spec(s, where) for name, s in mapping.items()}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.doc, sort_keys=True, default_flow_style=None)

    def config_hash(self) -> str:
        """sha256 of the resolved document, independent of key order and output path."""
        doc = {k: v for k, v in self.doc.items() if k != "out"}
        return hashlib.sha256(yaml.safe_dump(doc, sort_keys=True).encode()).hexdigest()

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "config.resolved.yaml"
        path.write_text(self.to_yaml())
        return path

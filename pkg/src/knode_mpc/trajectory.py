"""Time-stamped (state, input) sequences and their CSV/JSON on-disk form."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        xs = np.asarray(self.states, dtype=float)
        us = np.asarray(self.inputs, dtype=float)
        if us.ndim == 1:
            us = us.reshape(len(us), -1)
        if not (len(t) == len(xs) == len(us)):
            raise ValueError("times, states and inputs must have equal length")
        if len(t) < 2:
            raise ValueError("a trajectory needs at least two samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", xs)
        object.__setattr__(self, "inputs", us)

    def __len__(self):
        return len(self.times)

    @property
    def dt(self) -> float:
        """Uniform sample spacing; raises if the grid is not uniform."""
        d = np.diff(self.times)
        if np.max(np.abs(d - d[0])) > 1e-9:
            raise ValueError("trajectory is not uniformly sampled")
        return float(d[0])

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, 0:3]

    def to_csv(self, path, metadata: dict | None = None) -> None:
        """Write ``t, x0..x11, u0..u3`` rows; ``metadata`` goes to a ``.json`` sidecar."""
        path = Path(path)
        nx, nu = self.states.shape[1], self.inputs.shape[1]
        header = ",".join(["t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)])
        data = np.column_stack([self.times, self.states, self.inputs])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.12g")
        if metadata is not None:
            path.with_suffix(".json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"trajectory file not found: {path}")
        with path.open() as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        nx = sum(1 for h in header if h.startswith("x"))
        return cls(data[:, 0], data[:, 1:1 + nx], data[:, 1 + nx:])

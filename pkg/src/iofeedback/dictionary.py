"""Regressor dictionaries ``Z(w, xi) = [w; xi; Q(w, xi)]``.

Dictionary entries are plain callables ``q(w, xi)``.  They index the window
along the first axis (``w[0]`` is the oldest output) so the same function
evaluates a single point or a batch of points stored column-wise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .plant import PendulumParams


class DictionaryEvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Dictionary:
    N: int
    q_functions: tuple = ()
    labels: tuple = ()
    name: str = "custom"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        object.__setattr__(self, "q_functions", tuple(self.q_functions))
        labels = tuple(self.labels) or tuple(f"q{i}" for i in range(len(self.q_functions)))
        if len(labels) != len(self.q_functions):
            raise ValueError("one label per dictionary function required")
        object.__setattr__(self, "labels", labels)

    @property
    def S(self) -> int:
        return 2 * self.N + len(self.q_functions)

    @property
    def n_nonlinear(self) -> int:
        return len(self.q_functions)

    @property
    def all_labels(self) -> tuple:
        lin = tuple(f"w{i + 1}" for i in range(self.N)) + tuple(f"xi{i + 1}" for i in range(self.N))
        return lin + self.labels

    def eval_Q(self, w, xi) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        xi = np.asarray(xi, dtype=float)
        if w.shape[0] != self.N or xi.shape[0] != self.N:
            raise ValueError(f"w and xi must have leading dimension N={self.N}")
        batch = w.shape[1:]
        out = np.empty((self.n_nonlinear,) + batch)
        for i, (q, label) in enumerate(zip(self.q_functions, self.labels)):
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                val = np.asarray(q(w, xi), dtype=float)
            if not np.all(np.isfinite(val)):
                raise DictionaryEvaluationError(f"dictionary entry {label!r} is not finite")
            out[i] = val
        return out

    def eval_Z(self, w, xi) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        xi = np.asarray(xi, dtype=float)
        return np.concatenate([w, xi, self.eval_Q(w, xi)], axis=0)

    def manifest(self) -> dict:
        return {"name": self.name, "N": self.N, "S": self.S, "labels": list(self.all_labels)}


def linear_dictionary(N: int) -> Dictionary:
    return Dictionary(N, (), (), name="linear")


def pendulum_dictionary() -> Dictionary:
    """Two nonlinear entries matching the pendulum's lifted output map (N = 2)."""
    return Dictionary(
        2,
        (
            lambda w, xi: np.sin(w[0]) - w[0],
            lambda w, xi: xi[0] * np.cos(w[0]) - xi[0],
        ),
        ("sin(w1)-w1", "xi1*cos(w1)-xi1"),
        name="pendulum",
    )


_DICTIONARIES = {"pendulum": lambda N=2: pendulum_dictionary(), "linear": linear_dictionary}


def get_dictionary(name: str, N: int) -> Dictionary:
    if name not in _DICTIONARIES:
        raise KeyError(f"unknown dictionary {name!r}")
    d = _DICTIONARIES[name](N)
    if d.N != N:
        raise ValueError(f"dictionary {name!r} is defined for N={d.N}, not N={N}")
    return d


@dataclass(frozen=True)
class GroundTruthExpansion:
    """Coefficients ``alpha`` with ``h_tilde = alpha @ Z``; for test oracles only."""

    alpha: np.ndarray

    def predict(self, dictionary: Dictionary, w, xi):
        return self.alpha @ dictionary.eval_Z(w, xi)


def pendulum_ground_truth(params: Optional[PendulumParams] = None) -> GroundTruthExpansion:
    p = params or PendulumParams()
    fr = p.Ts * p.mu / (p.m * p.ell ** 2)
    grav = p.Ts ** 2 * p.g / p.ell
    inp = p.Ts ** 2 / (p.m * p.ell)
    return GroundTruthExpansion(np.array([-1 + fr + grav, 2 - fr, inp, 0.0, grav, inp]))


@dataclass
class SlopeReport:
    radii: np.ndarray
    ratios: np.ndarray
    passed: bool
    reason: str = ""


def check_vanishing_slope(dictionary: Dictionary, radii: Sequence[float] = (1e-1, 1e-2, 1e-3),
                          samples_per_radius: int = 2000, seed: int = 0) -> SlopeReport:
    """Sample ``max |Q(z)| / |z|`` on spheres of shrinking radius.

    Passes when the ratio drops by at least a factor two per decade of radius,
    or is identically zero.
    """
    r = np.asarray(radii, dtype=float)
    if r.ndim != 1 or r.size < 2 or np.any(np.diff(r) >= 0) or r[-1] < 1e-8:
        raise ValueError("radii must be strictly decreasing and >= 1e-8")
    rng = np.random.default_rng(seed)
    dim = 2 * dictionary.N
    ratios = np.zeros(r.size)
    if dictionary.n_nonlinear:
        dirs = rng.standard_normal((dim, samples_per_radius))
        dirs /= np.linalg.norm(dirs, axis=0)
        for i, rad in enumerate(r):
            z = rad * dirs
            q = dictionary.eval_Q(z[: dictionary.N], z[dictionary.N:])
            ratios[i] = np.max(np.linalg.norm(q, axis=0)) / rad
    passed, reason = True, ""
    for i in range(r.size - 1):
        decades = np.log10(r[i] / r[i + 1])
        if ratios[i + 1] > ratios[i] / 2.0 ** decades:
            passed = False
            reason = f"ratio {ratios[i + 1]:.3g} at r={r[i + 1]:g} vs {ratios[i]:.3g} at r={r[i]:g}"
            break
    return SlopeReport(r, ratios, passed, reason)

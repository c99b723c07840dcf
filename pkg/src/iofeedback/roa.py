"""Region-of-attraction estimates.

Two estimates are provided: sampled Lyapunov sublevel sets
``{z : z' P1^-1 z <= gamma}`` on which the data-based Lyapunov difference is
negative, and a brute-force grid of plant initial conditions simulated in
closed loop.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .controller import ControllerState, simulate_closed_loop, tail_norm
from .dictionary import Dictionary
from .plant import PlantModel
from .synthesis import SynthesisResult

log = logging.getLogger(__name__)

CONVERGED = "converged"
DIVERGED = "diverged"
BUDGET_EXHAUSTED = "budget-exhausted"
VERDICT_CODES = {CONVERGED: 0, DIVERGED: 1, BUDGET_EXHAUSTED: 2}
DOMAIN_CAVEAT = ("sublevel-set certificate is sampling based; the dictionary domain is taken "
                 "to be all of R^2N")


@dataclass
class RoaAnalysis:
    P1_inv: np.ndarray
    M: np.ndarray
    N_mat: np.ndarray
    dictionary: Dictionary

    def __post_init__(self):
        self.P1_inv = 0.5 * (np.asarray(self.P1_inv, float) + np.asarray(self.P1_inv, float).T)
        if np.linalg.eigvalsh(self.P1_inv)[0] <= 0:
            raise ValueError("P1_inv must be positive definite")
        self._chol = np.linalg.cholesky(self.P1_inv)  # P1_inv = L L'

    @classmethod
    def from_result(cls, res: SynthesisResult, dictionary: Dictionary) -> "RoaAnalysis":
        return cls(res.P1_inv, res.M, res.N_mat, dictionary)

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    def split(self, z):
        N = self.dictionary.N
        return z[:N], z[N:]

    def step(self, z) -> np.ndarray:
        """Lifted closed-loop map ``z -> M z + N Q(z)``; ``z`` may be (2N,) or (2N, P)."""
        z = np.asarray(z, dtype=float)
        out = self.M @ z
        if self.dictionary.n_nonlinear:
            out = out + self.N_mat @ self.dictionary.eval_Q(*self.split(z))
        return out

    def V(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.einsum("i...,ij,j...->...", z, self.P1_inv, z)

    def difference(self, z) -> np.ndarray:
        return self.V(self.step(z)) - self.V(z)

    def ellipsoid_points(self, unit_points, gamma: float) -> np.ndarray:
        """Map points of the unit ball to ``{V <= gamma}``."""
        return np.linalg.solve(self._chol.T, np.sqrt(gamma) * np.asarray(unit_points, float))


def lyapunov_difference(analysis: RoaAnalysis, w, xi) -> float:
    z = np.concatenate([np.asarray(w, float), np.asarray(xi, float)])
    return float(analysis.difference(z))


@dataclass
class GammaSearch:
    gamma_lo: float = 1e-10
    gamma_hi: float = 1e4
    level_samples: int = 2000
    interior_samples: int = 10000
    rel_tol: float = 1e-3
    exclude_radius: float = 1e-9
    local_starts: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma_lo < self.gamma_hi:
            raise ValueError("need 0 < gamma_lo < gamma_hi")
        if self.level_samples < 1 or self.interior_samples < 0:
            raise ValueError("sample counts must be positive")


@dataclass
class GammaResult:
    gamma: float
    degenerate: bool
    capped: bool
    n_samples: int
    bisection_steps: int
    touching_level: float = float("inf")
    caveat: str = DOMAIN_CAVEAT
    message: str = ""


def _unit_samples(dim: int, search: GammaSearch):
    rng = np.random.default_rng(search.seed)
    s = rng.standard_normal((dim, search.level_samples))
    shell = s / np.linalg.norm(s, axis=0)
    d = rng.standard_normal((dim, search.interior_samples))
    d /= np.linalg.norm(d, axis=0)
    radii = rng.uniform(size=search.interior_samples) ** (1.0 / dim)
    return np.hstack([shell, d * radii])


def _violators(analysis: RoaAnalysis, unit, gamma: float, exclude: float) -> np.ndarray:
    z = analysis.ellipsoid_points(unit, gamma)
    z = z[:, np.linalg.norm(z, axis=0) > exclude]
    with np.errstate(over="ignore", invalid="ignore"):
        W = analysis.difference(z)
    return z[:, ~(W < 0)]


def _ray_hits(analysis: RoaAnalysis, directions, v_max: float, n_radii: int = 400) -> np.ndarray:
    """First point with ``W >= 0`` along each ray ``r * d`` with ``V <= v_max``."""
    radii = np.sqrt(v_max) * np.linspace(0.0, 1.0, n_radii + 1)[1:]
    d = analysis.ellipsoid_points(directions, 1.0)
    pts = (d[:, :, None] * radii).reshape(analysis.dim, -1)  # direction-major
    with np.errstate(over="ignore", invalid="ignore"):
        W = analysis.difference(pts).reshape(d.shape[1], n_radii)
    hit = ~(W < 0)
    rows = np.flatnonzero(hit.any(axis=1))
    first = hit[rows].argmax(axis=1)
    return d[:, rows] * radii[first]


def _touching_level(analysis: RoaAnalysis, starts, floor: float) -> float:
    """Smallest ``V`` found on ``{W >= 0}`` by local searches from ``starts``.

    The searches run in whitened coordinates ``u = L' z`` (so ``V = |u|^2``),
    which keeps them well conditioned when ``P1^-1`` is not.  ``V >= floor``
    keeps them away from the origin, where ``W = 0``.
    """
    L = analysis._chol
    to_z = lambda u: np.linalg.solve(L.T, u)  # noqa: E731
    cons = [{"type": "ineq", "fun": lambda u: analysis.difference(to_z(u))},
            {"type": "ineq", "fun": lambda u: u @ u - floor}]
    best = np.inf
    for z0 in starts.T:
        # each start already lies in {W >= 0}
        best = min(best, float(analysis.V(z0)))
        r = minimize(lambda u: u @ u, L.T @ z0, jac=lambda u: 2 * u, method="SLSQP",
                     constraints=cons, options={"maxiter": 300, "ftol": 1e-14})
        z = to_z(r.x)
        if analysis.difference(z) >= 0 and analysis.V(z) >= floor:
            best = min(best, float(analysis.V(z)))
    return best


def find_gamma(analysis: RoaAnalysis, search: Optional[GammaSearch] = None) -> GammaResult:
    """Largest certified ``gamma`` with ``W < 0`` on ``{V <= gamma}`` minus the origin.

    A geometric bisection over rescaled unit-ball samples brackets the level
    (the sample sets are nested across candidates).  Local searches started
    from the sampled violators then look for the smallest level set reaching
    ``{W >= 0}``, and the result is kept below it by the relative tolerance.
    The outcome is a sampled certificate, not a proof.
    """
    search = search or GammaSearch()
    unit = _unit_samples(analysis.dim, search)
    n = unit.shape[1]
    ok = lambda g: _violators(analysis, unit, g, search.exclude_radius).shape[1] == 0  # noqa: E731
    if ok(search.gamma_hi):
        return GammaResult(search.gamma_hi, False, True, n, 0, message="capped at search upper limit")
    if not ok(search.gamma_lo):
        log.warning("no certified sublevel set at gamma=%g", search.gamma_lo)
        return GammaResult(0.0, True, False, n, 0, message=f"degenerate: check fails at gamma={search.gamma_lo:g}")
    lo, hi, steps = search.gamma_lo, search.gamma_hi, 0
    while hi / lo > 1.0 + search.rel_tol:
        mid = np.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        steps += 1
    shell = unit[:, : search.level_samples]
    bad = np.hstack([_violators(analysis, unit, hi, search.exclude_radius),
                     _ray_hits(analysis, shell, 4.0 * hi)])
    order = np.argsort(analysis.V(bad))[: search.local_starts]
    touch = _touching_level(analysis, bad[:, order], floor=search.gamma_lo)
    gamma = min(lo, touch * (1.0 - search.rel_tol))
    return GammaResult(float(gamma), False, False, n, steps, touching_level=touch)


def sample_sublevel(analysis: RoaAnalysis, gamma: float, n: int, seed: int = 1) -> np.ndarray:
    """Uniform samples from the ellipsoid ``{V <= gamma}`` (columns)."""
    search = GammaSearch(level_samples=1, interior_samples=n, seed=seed)
    return analysis.ellipsoid_points(_unit_samples(analysis.dim, search)[:, 1:], gamma)


def in_sublevel(analysis: RoaAnalysis, z, gamma: float) -> np.ndarray:
    return analysis.V(z) <= gamma


@dataclass
class GridSpec:
    axes: list

    def __post_init__(self):
        axes = []
        for ax in self.axes:
            lo, hi, count = ax
            if int(count) != count or count < 1:
                raise ValueError(f"grid count must be a positive integer, got {count!r}")
            if lo > hi:
                raise ValueError("grid axis has min > max")
            axes.append((float(lo), float(hi), int(count)))
        self.axes = axes

    def points(self) -> np.ndarray:
        grids = np.meshgrid(*[np.linspace(lo, hi, c) for lo, hi, c in self.axes], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @classmethod
    def square(cls, radius: float = 1.0, count: int = 41, dim: int = 2) -> "GridSpec":
        return cls([(-radius, radius, count)] * dim)


@dataclass
class ConvergenceTest:
    horizon: int = 200
    tail_start: int = 195
    tail_stop: int = 200
    threshold: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.tail_start <= self.tail_stop <= self.horizon:
            raise ValueError("need 0 <= tail_start <= tail_stop <= horizon")


@dataclass
class RoaGridResult:
    points: np.ndarray
    verdicts: list
    tail_norms: np.ndarray
    test: ConvergenceTest
    backend: str = ""

    def converged_mask(self) -> np.ndarray:
        return np.array([v == CONVERGED for v in self.verdicts], dtype=bool)

    def counts(self) -> dict:
        return {v: int(sum(1 for x in self.verdicts if x == v)) for v in VERDICT_CODES}

    def summary(self) -> dict:
        mask = self.converged_mask()
        conv = self.points[mask]
        return {
            "n_points": int(len(self.points)),
            "counts": self.counts(),
            "converged_bbox": None if not len(conv) else {
                "lower": conv.min(axis=0).tolist(), "upper": conv.max(axis=0).tolist()},
            "test": vars(self.test),
            "backend": self.backend,
        }

    def to_csv(self, path, config_hash: str = "") -> None:
        dim = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            if config_hash:
                fh.write(f"# config_hash: {config_hash}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([f"x{i + 1}" for i in range(dim)] + ["verdict", "tail_norm"])
            for p, v, t in zip(self.points, self.verdicts, self.tail_norms):
                wr.writerow([repr(float(c)) for c in p] + [v, repr(float(t))])

    def write_summary(self, path, config_hash: str = "") -> None:
        payload = self.summary()
        if config_hash:
            payload["config_hash"] = config_hash
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def classify(tail: float, x0, threshold: float) -> str:
    """Converged below ``threshold``; diverged on overflow or when the tail is
    larger than the initial state; otherwise the horizon was too short."""
    if tail < threshold:
        return CONVERGED
    if not np.isfinite(tail) or tail > np.max(np.abs(x0)):
        return DIVERGED
    return BUDGET_EXHAUSTED


def empirical_roa_grid(model: PlantModel, controller: ControllerState, grid: GridSpec,
                       test: Optional[ConvergenceTest] = None, use_kernel: bool = True) -> RoaGridResult:
    """Simulate the closed loop from every grid point and classify each run."""
    test = test or ConvergenceTest()
    pts = grid.points()
    if pts.shape[1] != model.state_dim:
        raise ValueError(f"grid has dimension {pts.shape[1]}, plant has {model.state_dim}")
    if use_kernel and kernels.supports(model, controller):
        tails = kernels.pendulum_tail_norms(model.params, controller, pts, test.horizon,
                                            test.tail_start, test.tail_stop)
        backend = kernels.BACKEND
    else:
        tails = np.array([
            tail_norm(simulate_closed_loop(model, controller, p, test.horizon), test.tail_start, test.tail_stop)
            for p in pts
        ])
        backend = "python"
    verdicts = [classify(t, p, test.threshold) for t, p in zip(tails, pts)]
    return RoaGridResult(pts, verdicts, tails, test, backend)


def warmup_lifted_state(model: PlantModel, controller: ControllerState, x0) -> np.ndarray:
    """``(eta, xi)`` at the end of the warm-up phase, i.e. the first lifted
    state seen by the feedback law."""
    tr = simulate_closed_loop(model, controller, x0, controller.N)
    return np.concatenate([tr.y[:controller.N], np.array(controller.warmup)])


def certified_starts(model: PlantModel, controller: ControllerState, analysis: RoaAnalysis,
                     gamma: float, points) -> np.ndarray:
    """Mask of initial states whose warm-up lifted state lies in ``{V <= gamma}``."""
    pts = np.atleast_2d(points)
    z = np.array([warmup_lifted_state(model, controller, p) for p in pts]).T
    return in_sublevel(analysis, z, gamma)

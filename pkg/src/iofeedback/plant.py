"""Plant models, lifted input-output coordinates and the auxiliary system.

A plant is a discrete-time SISO system ``x+ = f(x, u)``, ``y = h(x)`` with an
equilibrium at the origin.  Collecting ``N`` consecutive outputs gives the
lifted coordinate ``w``; when the N-step output map is injective in ``x`` the
state can be recovered from ``(w, past inputs)`` and the plant admits an
equivalent description directly in ``w``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

TOL_INV = 1e-9
FD_STEP = 1e-6
MAX_INV_ITER = 100


class DomainError(ValueError):
    """A point lies outside a declared domain box."""

    def __init__(self, what: str, index: int, value: float, lower: float, upper: float):
        self.what = what
        self.index = index
        self.value = value
        super().__init__(
            f"{what}[{index}] = {value!r} outside [{lower!r}, {upper!r}]"
        )


class InversionError(RuntimeError):
    """Numeric inversion of the lifted output map did not converge."""

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"output-window inversion failed: residual {residual:.3e} after {iterations} iterations"
        )


@dataclass(frozen=True)
class Box:
    """Axis-aligned interval box; infinite bounds are allowed."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise ValueError("box bounds have different lengths")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"empty box: lower {lo} exceeds upper {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dim: int) -> "Box":
        return cls((-np.inf,) * dim, (np.inf,) * dim)

    @classmethod
    def cube(cls, dim: int, radius: float) -> "Box":
        return cls((-radius,) * dim, (radius,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def first_violation(self, x) -> Optional[int]:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        for i, xi in enumerate(x):
            if not (self.lower[i] <= xi <= self.upper[i]):
                return i
        return None

    def check(self, x, what: str = "x") -> None:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.dim,):
            raise ValueError(f"{what} has shape {x.shape}, box has dimension {self.dim}")
        i = self.first_violation(x)
        if i is not None:
            raise DomainError(what, i, float(x[i]), self.lower[i], self.upper[i])

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("cannot sample from an unbounded box")
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(lo, hi, size=shape)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class ObservabilityWindow:
    """Lifting horizon ``N`` with the state box and scalar input interval."""

    N: int
    state_box: Box
    input_box: Box = field(default_factory=lambda: Box.unbounded(1))

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if self.input_box.dim != 1:
            raise ValueError("input box must be one-dimensional")
        if not (self.state_box.contains(np.zeros(self.state_box.dim))
                and self.input_box.contains([0.0])):
            raise ValueError("state and input boxes must contain the origin")


@dataclass(frozen=True)
class PlantModel:
    """Black-box discrete-time SISO plant.

    ``inverse`` optionally provides a closed-form left inverse of the output
    window map, ``inverse(w, v, N) -> x`` (return ``None`` when unavailable
    for that ``N``).
    """

    name: str
    state_dim: int
    step: Callable[[np.ndarray, float], np.ndarray]
    output: Callable[[np.ndarray], float]
    inverse: Optional[Callable] = None
    params: Optional[object] = None

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be positive")


@dataclass(frozen=True)
class PendulumParams:
    Ts: float = 0.1
    m: float = 1.0
    ell: float = 1.0
    g: float = 9.8
    mu: float = 0.01

    def __post_init__(self):
        for name in ("Ts", "m", "ell", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"pendulum parameter {name} must be positive")
        if self.mu < 0:
            raise ValueError("friction coefficient mu must be nonnegative")

    def to_dict(self) -> dict:
        return {"Ts": self.Ts, "m": self.m, "ell": self.ell, "g": self.g, "mu": self.mu}


def pendulum(params: Optional[PendulumParams] = None) -> PlantModel:
    """Euler-discretised damped pendulum around its upright equilibrium, ``y = x1``."""
    p = params or PendulumParams()
    a = p.Ts * p.g / p.ell
    d = 1.0 - p.Ts * p.mu / (p.m * p.ell ** 2)
    b = p.Ts / (p.m * p.ell)
    Ts = p.Ts

    def step(x, u):
        x1, x2 = x[0], x[1]
        return np.array([x1 + Ts * x2, a * np.sin(x1) + d * x2 + b * np.cos(x1) * u])

    def output(x):
        return float(x[0])

    def inverse(w, v, N):
        if N != 2:
            return None
        return np.array([w[0], (w[1] - w[0]) / Ts])

    return PlantModel("pendulum", 2, step, output, inverse=inverse, params=p)


_REGISTRY: dict = {"pendulum": lambda **kw: pendulum(PendulumParams(**kw))}


def register_plant(name: str, factory: Callable[..., PlantModel]) -> None:
    if name in _REGISTRY:
        raise ValueError(f"plant {name!r} already registered")
    _REGISTRY[name] = factory


def get_plant(name: str, **params) -> PlantModel:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown plant {name!r}; registered: {sorted(_REGISTRY)}") from None
    return factory(**params)


def available_plants() -> list:
    return sorted(_REGISTRY)


def iterate_dynamics(model: PlantModel, x0, inputs: Sequence[float]) -> np.ndarray:
    """Apply ``inputs`` in order starting from ``x0`` (``F^k`` for ``k = len(inputs)``)."""
    x = np.array(x0, dtype=float)
    for u in inputs:
        x = np.asarray(model.step(x, float(u)), dtype=float)
    return x


def _phi(model: PlantModel, x, v, N: int) -> np.ndarray:
    out = np.empty(N)
    xk = np.array(x, dtype=float)
    for i in range(N):
        out[i] = model.output(xk)
        if i < N - 1:
            xk = np.asarray(model.step(xk, float(v[i])), dtype=float)
    return out


def _check_inputs(win: ObservabilityWindow, v, length: int) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape[0] < length:
        raise ValueError(f"need {length} inputs, got {v.shape[0]}")
    for i in range(length):
        if not win.input_box.contains([v[i]]):
            raise DomainError("v", i, float(v[i]), win.input_box.lower[0], win.input_box.upper[0])
    return v


def lift_phi(model: PlantModel, win: ObservabilityWindow, x, v=()) -> np.ndarray:
    """Output window ``(h(x), h(F^1(x, v0)), ..., h(F^{N-1}(x, v)))``."""
    win.state_box.check(x, "x")
    v = _check_inputs(win, v, win.N - 1)
    return _phi(model, x, v, win.N)


def _fd_jacobian(fun, x, h=FD_STEP):
    f0 = fun(x)
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        xp = x.copy()
        xp[j] += h
        J[:, j] = (fun(xp) - f0) / h
    return J


def invert_phi_numeric(model: PlantModel, win: ObservabilityWindow, w, v=(), seed_x=None,
                       tol: float = TOL_INV, max_iter: int = MAX_INV_ITER) -> np.ndarray:
    """Solve ``lift_phi(x, v) = w`` for ``x`` by damped Gauss-Newton.

    Jacobians are forward differences with step ``1e-6``; every Gauss-Newton
    direction is backtracked until the residual decreases.
    """
    N = win.N
    w = np.asarray(w, dtype=float)
    v = _check_inputs(win, v, N - 1)
    x = np.zeros(model.state_dim) if seed_x is None else np.array(seed_x, dtype=float)

    def residual(z):
        return _phi(model, z, v, N) - w

    r = residual(x)
    err = np.max(np.abs(r))
    it = 0
    while err > tol and it < max_iter:
        it += 1
        J = _fd_jacobian(residual, x)
        dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam = 1.0
        while lam > 1e-10:
            xn = x + lam * dx
            rn = residual(xn)
            en = np.max(np.abs(rn))
            if np.isfinite(en) and en < err:
                break
            lam *= 0.5
        else:
            break
        x, r, err = xn, rn, en
    if not err <= tol:
        raise InversionError(float(err), it)
    return x


def invert_phi(model: PlantModel, win: ObservabilityWindow, w, v=(), seed_x=None) -> np.ndarray:
    """Left inverse of the output-window map; closed form when the model has one."""
    v = _check_inputs(win, v, win.N - 1)
    if model.inverse is not None:
        x = model.inverse(np.asarray(w, dtype=float), v[: win.N - 1], win.N)
        if x is not None:
            return np.asarray(x, dtype=float)
    return invert_phi_numeric(model, win, w, v, seed_x=seed_x)


def psi(model: PlantModel, win: ObservabilityWindow, w, v) -> np.ndarray:
    """Current state from the last ``N`` outputs ``w`` and inputs ``v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (win.N,):
        raise ValueError(f"v must have length N={win.N}")
    x_past = invert_phi(model, win, w, v[: win.N - 1])
    return iterate_dynamics(model, x_past, v)


def auxiliary_step(model: PlantModel, win: ObservabilityWindow, w, v):
    """One step of the lifted system: returns ``(w_next, y_w)``."""
    w = np.asarray(w, dtype=float)
    y_w = model.output(psi(model, win, w, v))
    w_next = np.empty_like(w)
    w_next[:-1] = w[1:]
    w_next[-1] = y_w
    return w_next, float(y_w)


@dataclass
class InjectivityReport:
    n_points: int
    n_pairs_checked: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def injectivity_probe(model: PlantModel, win: ObservabilityWindow, points, v=(),
                      tol: float = TOL_INV) -> InjectivityReport:
    """Look for distinct states whose output windows (nearly) coincide.

    Sampled diagnostic only; it can find counterexamples, never prove injectivity.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    v = _check_inputs(win, v, win.N - 1)
    lifted = np.array([_phi(model, p, v, win.N) for p in pts])
    viol = []
    pairs = 0
    for i in range(len(pts)):
        dx = np.max(np.abs(pts[i + 1:] - pts[i]), axis=1)
        dw = np.max(np.abs(lifted[i + 1:] - lifted[i]), axis=1)
        pairs += dx.size
        for j in np.flatnonzero((dx > 10 * tol) & (dw < tol)):
            viol.append((i, i + 1 + int(j), float(dx[j]), float(dw[j])))
    return InjectivityReport(len(pts), pairs, viol)

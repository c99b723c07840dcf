"""Dynamic output-feedback controller with a dead-beat output observer.

The controller keeps two delay chains: ``eta`` holds the last ``N`` measured
outputs and ``xi`` the last ``N`` applied inputs.  For the first ``N`` steps
an open-loop warm-up sequence is applied; afterwards ``u = kappa @ Z(eta, xi)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .dictionary import Dictionary
from .plant import PlantModel

OVERFLOW_BOUND = 1e9
WARMUP = "warmup"
FEEDBACK = "feedback"


@dataclass(frozen=True)
class ControllerState:
    eta: tuple
    xi: tuple
    phase_counter: int
    warmup: tuple
    kappa: tuple
    dictionary: Dictionary

    @classmethod
    def initial(cls, kappa, dictionary: Dictionary, warmup: Optional[Sequence[float]] = None,
                eta0=None, xi0=None) -> "ControllerState":
        N = dictionary.N
        kappa = tuple(float(k) for k in np.ravel(kappa))
        if len(kappa) != dictionary.S:
            raise ValueError(f"kappa has {len(kappa)} entries, dictionary has S={dictionary.S}")
        warmup = tuple(float(v) for v in (np.zeros(N) if warmup is None else warmup))
        if len(warmup) != N:
            raise ValueError(f"warm-up sequence must have N={N} entries")
        eta0 = tuple(float(v) for v in (np.zeros(N) if eta0 is None else eta0))
        xi0 = tuple(float(v) for v in (np.zeros(N) if xi0 is None else xi0))
        if len(eta0) != N or len(xi0) != N:
            raise ValueError(f"eta0 and xi0 must have N={N} entries")
        return cls(eta0, xi0, 0, warmup, kappa, dictionary)

    @property
    def N(self) -> int:
        return self.dictionary.N

    @property
    def in_warmup(self) -> bool:
        return self.phase_counter < self.N


def controller_step(state: ControllerState, y: float):
    """Return ``(u, next_state)``; ``u`` uses the windows before the shift."""
    if state.in_warmup:
        u = state.warmup[state.phase_counter]
    else:
        Z = state.dictionary.eval_Z(np.array(state.eta), np.array(state.xi))
        u = float(np.dot(state.kappa, Z))
    nxt = replace(state, eta=state.eta[1:] + (float(y),), xi=state.xi[1:] + (float(u),),
                  phase_counter=state.phase_counter + 1)
    return u, nxt


@dataclass
class ClosedLoopTrace:
    """Per-step record for ``k = 0..len-1``; row ``k`` holds the states at time
    ``k`` and the input applied at ``k``."""

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    eta: np.ndarray
    xi: np.ndarray
    phase: np.ndarray
    diverged: bool = False
    N: int = 0

    def __len__(self):
        return len(self.u)

    @property
    def k(self) -> np.ndarray:
        return np.arange(len(self))

    def stacked_state(self) -> np.ndarray:
        return np.hstack([self.x, self.eta, self.xi])

    def to_csv(self, path, config_hash: str = "") -> None:
        n, N = self.x.shape[1], self.eta.shape[1]
        header = (["k", "u", "y"] + [f"x{i + 1}" for i in range(n)]
                  + [f"eta{i + 1}" for i in range(N)] + [f"xi{i + 1}" for i in range(N)] + ["phase"])
        with open(path, "w", newline="") as fh:
            if config_hash:
                fh.write(f"# config_hash: {config_hash}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for k in range(len(self)):
                wr.writerow([k, repr(float(self.u[k])), repr(float(self.y[k]))]
                            + [repr(float(v)) for v in self.x[k]]
                            + [repr(float(v)) for v in self.eta[k]]
                            + [repr(float(v)) for v in self.xi[k]] + [self.phase[k]])


def simulate_closed_loop(model: PlantModel, controller_init: ControllerState, x0, horizon: int,
                         overflow: float = OVERFLOW_BOUND) -> ClosedLoopTrace:
    """Run plant and controller for ``horizon`` plant steps (``horizon + 1`` rows).

    Stops early, flagging ``diverged``, once ``|x|_inf`` exceeds ``overflow``
    or becomes non-finite.
    """
    N = controller_init.N
    if horizon < N:
        raise ValueError(f"horizon must be at least N={N}")
    x = np.array(x0, dtype=float)
    if x.shape != (model.state_dim,):
        raise ValueError(f"x0 must have length {model.state_dim}")
    state = controller_init
    xs, us, ys, etas, xis, phases = [], [], [], [], [], []
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon + 1):
            if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) <= overflow):
                diverged = True
                break
            y = model.output(x)
            phase = WARMUP if state.in_warmup else FEEDBACK
            eta, xi = state.eta, state.xi
            u, state = controller_step(state, y)
            xs.append(x)
            us.append(u)
            ys.append(y)
            etas.append(eta)
            xis.append(xi)
            phases.append(phase)
            if k < horizon:
                x = np.asarray(model.step(x, u), dtype=float)
    n = model.state_dim
    return ClosedLoopTrace(
        np.array(xs).reshape(-1, n), np.array(us), np.array(ys),
        np.array(etas).reshape(-1, N), np.array(xis).reshape(-1, N),
        np.array(phases, dtype=object), diverged, N,
    )


def check_window_consistency(trace: ClosedLoopTrace, N: int) -> float:
    """Largest mismatch between the observer chains and the true sliding
    windows of past outputs/inputs for ``k >= N``."""
    if len(trace) < N + 1:
        raise ValueError(f"trace must have more than N={N} rows")
    err = 0.0
    for k in range(N, len(trace)):
        err = max(err, float(np.max(np.abs(trace.eta[k] - trace.y[k - N:k]))),
                  float(np.max(np.abs(trace.xi[k] - trace.u[k - N:k]))))
    return err


def tail_norm(trace: ClosedLoopTrace, start: int = 195, stop: int = 200) -> float:
    """``max_{start <= k <= stop} |(x, eta, xi)(k)|_inf``; ``inf`` if unavailable."""
    if trace.diverged or len(trace) <= stop:
        return float("inf")
    return float(np.max(np.abs(trace.stacked_state()[start:stop + 1])))


def converged(trace: ClosedLoopTrace, start: int = 195, stop: int = 200, threshold: float = 1e-6) -> bool:
    return tail_norm(trace, start, stop) < threshold

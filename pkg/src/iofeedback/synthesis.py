"""Controller synthesis from input-output data.

The gain ``kappa`` comes from an SDP in a Lyapunov matrix ``P1``, a data-space
variable ``Yv`` and the nonlinear block ``G2``.  With ``G1 = Yv P1^-1`` the
lifted closed loop reads ``z+ = M z + N Q(z)`` where ``M = X1 G1`` and
``N = X1 G2`` are computed from data alone.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from .dictionary import Dictionary
from .experiments import DataMatrices, brunovsky_pair, lifted_blocks
from .solver import (
    OPTIMAL,
    ConicProgram,
    Solution,
    SolverHandle,
    VarDescriptor,
    bmat,
    extract_matrix,
    scaled_identity,
    solve,
)

log = logging.getLogger(__name__)

TOL_LIN = 1e-6
DEFAULT_EPS = 1e-6
MAX_COND_P1 = 1e12


class SynthesisError(RuntimeError):
    pass


class ValidationError(SynthesisError):
    """The solver's point violates a post-solve identity or invariant."""


class CertificateError(SynthesisError):
    pass


@dataclass(frozen=True)
class BrunovskyBlocks:
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    Ac: np.ndarray
    Bc: np.ndarray

    @classmethod
    def of(cls, N: int) -> "BrunovskyBlocks":
        Ac, Bc = brunovsky_pair(N)
        A, B1, B2 = lifted_blocks(N)
        return cls(A, B1, B2, Ac, Bc)


@dataclass
class SdpProblem:
    data: DataMatrices
    blocks: BrunovskyBlocks
    eps: float
    program: ConicProgram
    P1: VarDescriptor
    Yv: VarDescriptor
    G2: Optional[VarDescriptor]
    t: Optional[VarDescriptor]

    @property
    def X1(self) -> np.ndarray:
        return self.data.X1

    @property
    def W0(self) -> np.ndarray:
        return self.data.W0

    def summary(self) -> dict:
        return {
            "n_vars": self.program.n_vars,
            "equality_rows": {n: e.shape[0] * e.shape[1] for n, e in self.program.equalities},
            "lmi_sizes": {n: e.shape[0] for n, e in self.program.psd_blocks},
        }


def build_sdp(dm: DataMatrices, eps: float = DEFAULT_EPS) -> SdpProblem:
    """Encode the gain-design SDP for the data ``dm``.

    Strict LMIs are imposed as ``>= eps * I``.  The objective is the spectral
    norm of ``X1 G2`` through an epigraph LMI; with no nonlinear dictionary
    part there is nothing to minimise and the problem is a feasibility one.
    """
    if not eps > 0:
        raise ValueError(f"strictness eps must be positive, got {eps!r}")
    N, T, S = dm.N, dm.T, dm.S
    n2, nq = 2 * N, S - 2 * N
    X1, W0 = dm.X1, dm.W0
    prog = ConicProgram()
    P1 = prog.add_variable("P1", n2, symmetric=True)
    Yv = prog.add_variable("Y1", (T, n2))
    G2 = prog.add_variable("G2", (T, nq)) if nq else None
    t = prog.add_variable("t", (1, 1)) if nq else None

    P1e, Yve = prog.expr(P1), prog.expr(Yv)
    rhs = bmat([[P1e], [np.zeros((nq, n2))]]) if nq else P1e
    prog.add_equality(W0 @ Yve, rhs, name="lift")
    # Directions orthogonal to every data row change neither the constraints
    # nor kappa, M, N (U0 is the last row of V1).  Pinning them to zero keeps
    # the feasible set bounded in those directions, which interior-point
    # solvers need when there is no objective.
    gauge = scipy.linalg.null_space(np.vstack([W0, X1])).T
    if gauge.shape[0]:
        prog.add_equality(gauge @ Yve, np.zeros((gauge.shape[0], n2)), name="gauge")
    XY = X1 @ Yve
    prog.add_psd(bmat([[P1e, XY.T], [XY, P1e]]) - eps * np.eye(2 * n2), name="decrease")
    if nq:
        G2e, te = prog.expr(G2), prog.expr(t)
        prog.add_equality(W0 @ G2e, np.vstack([np.zeros((n2, nq)), np.eye(nq)]), name="cancel")
        if gauge.shape[0]:
            prog.add_equality(gauge @ G2e, np.zeros((gauge.shape[0], nq)), name="gauge_G2")
        XG = X1 @ G2e
        prog.add_psd(bmat([[scaled_identity(te, nq), XG.T], [XG, scaled_identity(te, n2)]]),
                     name="epigraph")
        prog.minimize(te)
    return SdpProblem(dm, BrunovskyBlocks.of(N), eps, prog, P1, Yv, G2, t)


def _mat(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unmat(d):
    return None if d is None else np.asarray(d["data"], dtype=float).reshape(d["shape"])


@dataclass
class SynthesisResult:
    solver_status: str
    N: int
    S: int
    P1: Optional[np.ndarray] = None
    Y1_var: Optional[np.ndarray] = None
    G1: Optional[np.ndarray] = None
    G2: Optional[np.ndarray] = None
    kappa: Optional[np.ndarray] = None
    M: Optional[np.ndarray] = None
    N_mat: Optional[np.ndarray] = None
    objective_value: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.solver_status == OPTIMAL

    @property
    def P1_inv(self) -> np.ndarray:
        Pi = np.linalg.inv(self.P1)
        return 0.5 * (Pi + Pi.T)

    def to_dict(self) -> dict:
        out = {"solver_status": self.solver_status, "N": self.N, "S": self.S,
               "objective_value": self.objective_value, "diagnostics": _jsonable(self.diagnostics)}
        for name in ("P1", "Y1_var", "G1", "G2", "kappa", "M", "N_mat"):
            val = getattr(self, name)
            out[name] = None if val is None else _mat(val)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisResult":
        kw = {name: _unmat(d.get(name)) for name in ("P1", "Y1_var", "G1", "G2", "kappa", "M", "N_mat")}
        return cls(d["solver_status"], d["N"], d["S"], objective_value=d.get("objective_value", float("nan")),
                   diagnostics=d.get("diagnostics", {}), **kw)

    def save(self, path, extra: Optional[dict] = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SynthesisResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if np.size(M) else 0.0


def _project_affine(W0, X, rhs):
    """Least-norm correction of ``X`` onto ``W0 X = rhs``."""
    return X + np.linalg.pinv(W0) @ (rhs - W0 @ X)


def solve_sdp(problem: SdpProblem, handle: Optional[SolverHandle] = None,
              tol_lin: float = TOL_LIN) -> SynthesisResult:
    """Solve the SDP and derive ``kappa``, ``G1``, ``M``, ``N``.

    Infeasible or failed solves return a result carrying a diagnosis
    (including the numerical rank of ``[U0; Y0; V0; Q0]``) instead of raising.
    Optimal points that violate the post-solve identities raise.
    """
    dm = problem.data
    N, S, T = dm.N, dm.S, dm.T
    n2, nq = 2 * N, S - 2 * N
    rank = int(np.linalg.matrix_rank(dm.W0))
    diag = {"rich_data_rank": dm.rich_data_rank(), "regressor_rank": rank, "rank_required": S,
            "T": T, "eps": problem.eps, "problem": problem.summary()}
    sol: Solution = solve(problem.program, handle)
    diag["solver"] = sol.stats
    if sol.status != OPTIMAL:
        diag["reason"] = (f"solver status {sol.status}; data rank {rank} of required {S}"
                          + ("" if rank >= S else " (rank deficient: collect more or richer data)"))
        log.info("SDP not solved: %s", diag["reason"])
        return SynthesisResult(sol.status, N, S, diagnostics=diag)

    prog = problem.program
    P1 = extract_matrix(sol, prog, problem.P1)
    P1 = 0.5 * (P1 + P1.T)
    Yv = extract_matrix(sol, prog, problem.Yv)
    W0, X1, U0 = dm.W0, dm.X1, dm.U0
    lift_rhs = np.vstack([P1, np.zeros((nq, n2))])
    diag["raw_lift_residual"] = float(np.max(np.abs(W0 @ Yv - lift_rhs)))
    Yv = _project_affine(W0, Yv, lift_rhs)
    if nq:
        G2 = extract_matrix(sol, prog, problem.G2)
        cancel_rhs = np.vstack([np.zeros((n2, nq)), np.eye(nq)])
        diag["raw_cancel_residual"] = float(np.max(np.abs(W0 @ G2 - cancel_rhs)))
        G2 = _project_affine(W0, G2, cancel_rhs)
    else:
        G2 = np.zeros((T, 0))

    eig_P1 = np.linalg.eigvalsh(P1)
    diag["P1_min_eig"] = float(eig_P1[0])
    if eig_P1[0] <= 0:
        raise ValidationError(f"P1 is not positive definite (min eigenvalue {eig_P1[0]:.3e})")
    cond = float(eig_P1[-1] / eig_P1[0])
    diag["P1_cond"] = cond
    if cond > MAX_COND_P1:
        raise SynthesisError(f"P1 numerically singular (condition number {cond:.3e})")
    P1_inv = np.linalg.inv(P1)
    G1 = Yv @ P1_inv
    G = np.hstack([G1, G2])
    kappa = U0 @ G
    M = X1 @ G1
    N_mat = X1 @ G2

    ident = float(np.max(np.abs(W0 @ G - np.eye(S))))
    rich = float(np.max(np.abs(np.vstack([U0, W0]) @ G - np.vstack([kappa, np.eye(S)]))))
    rho = spectral_radius(M)
    diag.update({"identity_residual": ident, "rich_data_residual": rich, "spectral_radius_M": rho,
                 "nonlinear_gain": float(np.linalg.norm(N_mat, 2)) if nq else 0.0})
    if ident > tol_lin:
        raise ValidationError(f"[Y0;V0;Q0][G1 G2] deviates from identity by {ident:.3e}")
    if not rho < 1:
        raise ValidationError(f"closed-loop linear part is not Schur stable (spectral radius {rho:.6f})")
    obj = sol.objective if nq else 0.0
    return SynthesisResult(OPTIMAL, N, S, P1, Yv, G1, G2, kappa, M, N_mat, float(obj), diag)


@dataclass
class LyapunovCertificate:
    P1_inv: np.ndarray
    decrease_min_eig: float
    passed: bool


def lyapunov_certificate(res=None, *, P1=None, M=None, raise_on_failure: bool = True) -> LyapunovCertificate:
    """Check ``P1^-1 - M' P1^-1 M > 0`` for ``V(z) = z' P1^-1 z``."""
    if res is not None:
        if not res.optimal:
            raise ValueError("certificate requires an optimal synthesis result")
        P1, M = res.P1, res.M
    P1 = np.asarray(P1, dtype=float)
    M = np.asarray(M, dtype=float)
    Pi = np.linalg.inv(0.5 * (P1 + P1.T))
    Pi = 0.5 * (Pi + Pi.T)
    D = Pi - M.T @ Pi @ M
    lam = float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])
    cert = LyapunovCertificate(Pi, lam, lam > 0)
    if raise_on_failure and not cert.passed:
        raise CertificateError(f"Lyapunov decrease fails: min eigenvalue {lam:.3e}")
    return cert


def lmi_min_eig(P1, XY) -> float:
    """Smallest eigenvalue of ``[[P1, XY'], [XY, P1]]``."""
    B = np.block([[P1, XY.T], [XY, P1]])
    return float(np.linalg.eigvalsh(0.5 * (B + B.T))[0])


def schur_min_eig(P1, XY) -> float:
    """Smallest eigenvalue of ``P1 - XY' P1^-1 XY`` (the Schur-complement form)."""
    D = P1 - XY.T @ np.linalg.solve(P1, XY)
    return float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])


def direct_closed_loop(kappa, alpha, dictionary: Dictionary, w, xi) -> np.ndarray:
    """Lifted closed loop ``A z + B1 kappa Z + B2 alpha Z`` from known ``alpha``."""
    A, B1, B2 = lifted_blocks(dictionary.N)
    z = np.concatenate([np.asarray(w, float), np.asarray(xi, float)])
    Z = dictionary.eval_Z(w, xi)
    return A @ z + (B1 @ np.atleast_2d(kappa) @ Z).ravel() + (B2 @ np.atleast_2d(alpha) @ Z).ravel()


def data_closed_loop(res: SynthesisResult, dictionary: Dictionary, w, xi) -> np.ndarray:
    """Lifted closed loop ``M z + N Q(z)`` in its data-based form."""
    z = np.concatenate([np.asarray(w, float), np.asarray(xi, float)], axis=0)
    out = res.M @ z
    if dictionary.n_nonlinear:
        out = out + res.N_mat @ dictionary.eval_Q(w, xi)
    return out

"""Small conic-program container and solver adapters.

Programs are linear in a flat vector of scalar decision variables and carry
three kinds of data: equality rows, positive-semidefinite blocks given as
affine symmetric matrix expressions, and a linear objective to minimise.

Matrix variables are flattened row-major.  Symmetric variables are stored as
a scaled upper-triangular vector (off-diagonal entries multiplied by sqrt(2))
so the Frobenius inner product is the Euclidean one on the stored vector.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
BACKEND_ENV = "IOFEEDBACK_SOLVER"

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"
LIMIT = "limit"

_program_ids = itertools.count(1)


class SolverError(RuntimeError):
    pass


class BackendUnavailable(SolverError):
    pass


class MalformedProgram(ValueError):
    pass


@dataclass(frozen=True)
class VarDescriptor:
    program_id: int
    name: str
    offset: int
    shape: tuple
    symmetric: bool = False

    @property
    def size(self) -> int:
        r, c = self.shape
        return r * (r + 1) // 2 if self.symmetric else r * c


def svec_index(n: int):
    """Upper-triangle (i, j) pairs in storage order."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def svec(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.array([X[i, j] if i == j else SQRT2 * X[i, j] for i, j in svec_index(X.shape[0])])


def smat(v, n: int) -> np.ndarray:
    X = np.empty((n, n))
    for k, (i, j) in enumerate(svec_index(n)):
        if i == j:
            X[i, i] = v[k]
        else:
            X[i, j] = X[j, i] = v[k] / SQRT2
    return X


def _const(value, shape=None) -> "AffExpr":
    c = np.atleast_2d(np.asarray(value, dtype=float))
    if shape is not None:
        try:
            c = np.broadcast_to(c, shape)
        except ValueError:
            raise MalformedProgram(f"constant of shape {c.shape} does not fit {tuple(shape)}") from None
    return AffExpr(sp.csr_matrix((c.size, 0)), c.ravel().copy(), c.shape)


class AffExpr:
    """Affine matrix expression ``reshape(coef @ x + const, shape)`` (row-major)."""

    __array_ufunc__ = None

    def __init__(self, coef, const, shape):
        self.coef = sp.csr_matrix(coef)
        self.const = np.asarray(const, dtype=float)
        self.shape = tuple(shape)
        if self.coef.shape[0] != self.shape[0] * self.shape[1] or self.const.size != self.coef.shape[0]:
            raise MalformedProgram("inconsistent affine expression dimensions")

    @property
    def nvars(self) -> int:
        return self.coef.shape[1]

    def _padded(self, n):
        if self.coef.shape[1] == n:
            return self.coef
        c = self.coef.tocoo()
        return sp.csr_matrix((c.data, (c.row, c.col)), shape=(c.shape[0], n))

    @staticmethod
    def wrap(other, shape=None) -> "AffExpr":
        return other if isinstance(other, AffExpr) else _const(other, shape)

    def __add__(self, other):
        other = AffExpr.wrap(other, self.shape)
        if other.shape != self.shape:
            raise MalformedProgram(f"shape mismatch {self.shape} + {other.shape}")
        n = max(self.nvars, other.nvars)
        return AffExpr(self._padded(n) + other._padded(n), self.const + other.const, self.shape)

    __radd__ = __add__

    def __neg__(self):
        return AffExpr(-self.coef, -self.const, self.shape)

    def __sub__(self, other):
        return self + (-AffExpr.wrap(other, self.shape))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        s = float(scalar)
        return AffExpr(self.coef * s, self.const * s, self.shape)

    __rmul__ = __mul__

    def __matmul__(self, D):
        D = np.atleast_2d(np.asarray(D, dtype=float))
        r, c = self.shape
        if D.shape[0] != c:
            raise MalformedProgram(f"cannot multiply {self.shape} by {D.shape}")
        K = sp.kron(sp.eye(r), sp.csr_matrix(D.T), format="csr")
        return AffExpr(K @ self.coef, K @ self.const, (r, D.shape[1]))

    def __rmatmul__(self, C):
        C = np.atleast_2d(np.asarray(C, dtype=float))
        r, c = self.shape
        if C.shape[1] != r:
            raise MalformedProgram(f"cannot multiply {C.shape} by {self.shape}")
        K = sp.kron(sp.csr_matrix(C), sp.eye(c), format="csr")
        return AffExpr(K @ self.coef, K @ self.const, (C.shape[0], c))

    @property
    def T(self) -> "AffExpr":
        r, c = self.shape
        perm = np.arange(r * c).reshape(r, c).T.ravel()
        return AffExpr(self.coef[perm], self.const[perm], (c, r))

    def reshape(self, shape) -> "AffExpr":
        if shape[0] * shape[1] != self.shape[0] * self.shape[1]:
            raise MalformedProgram(f"cannot reshape {self.shape} to {shape}")
        return AffExpr(self.coef, self.const, shape)

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self._padded(x.size) @ x + self.const).reshape(self.shape)


def scaled_identity(scalar: AffExpr, n: int) -> AffExpr:
    """``scalar * I_n`` for a 1x1 expression."""
    return (np.eye(n).reshape(n * n, 1) @ scalar).reshape((n, n))


def bmat(blocks) -> AffExpr:
    """Block matrix of expressions, constant arrays, or ``None`` for zeros."""
    rows = len(blocks)
    cols = len(blocks[0])
    heights = [None] * rows
    widths = [None] * cols
    for i, j in itertools.product(range(rows), range(cols)):
        b = blocks[i][j]
        if b is None:
            continue
        shape = b.shape if isinstance(b, AffExpr) else np.atleast_2d(b).shape
        if heights[i] not in (None, shape[0]) or widths[j] not in (None, shape[1]):
            raise MalformedProgram("incompatible block sizes")
        heights[i], widths[j] = shape[0], shape[1]
    if None in heights or None in widths:
        raise MalformedProgram("every block row and column needs one sized block")
    R, C = sum(heights), sum(widths)
    n = max([b.nvars for row in blocks for b in row if isinstance(b, AffExpr)] + [0])
    ro = np.concatenate([[0], np.cumsum(heights)])
    co = np.concatenate([[0], np.cumsum(widths)])
    parts, consts, targets = [], np.zeros(R * C), []
    for i, j in itertools.product(range(rows), range(cols)):
        b = blocks[i][j]
        if b is None:
            continue
        e = AffExpr.wrap(b)
        h, w = e.shape
        idx = ((ro[i] + np.arange(h))[:, None] * C + co[j] + np.arange(w)[None, :]).ravel()
        consts[idx] = e.const
        parts.append(e._padded(n).tocoo())
        targets.append(idx)
    data = np.concatenate([p.data for p in parts]) if parts else np.zeros(0)
    row = np.concatenate([t[p.row] for p, t in zip(parts, targets)]) if parts else np.zeros(0, int)
    col = np.concatenate([p.col for p in parts]) if parts else np.zeros(0, int)
    return AffExpr(sp.csr_matrix((data, (row, col)), shape=(R * C, n)), consts, (R, C))


@dataclass
class ConicProgram:
    variables: dict = field(default_factory=dict)
    equalities: list = field(default_factory=list)
    psd_blocks: list = field(default_factory=list)
    objective: Optional[AffExpr] = None
    program_id: int = field(default_factory=lambda: next(_program_ids))
    n_vars: int = 0

    def add_variable(self, name: str, shape, symmetric: bool = False) -> VarDescriptor:
        if name in self.variables:
            raise MalformedProgram(f"duplicate variable {name!r}")
        shape = (shape, shape) if np.isscalar(shape) else tuple(shape)
        if symmetric and shape[0] != shape[1]:
            raise MalformedProgram("symmetric variables must be square")
        d = VarDescriptor(self.program_id, name, self.n_vars, shape, symmetric)
        self.variables[name] = d
        self.n_vars += d.size
        return d

    def expr(self, d: VarDescriptor) -> AffExpr:
        self._own(d)
        r, c = d.shape
        rows, cols, vals = [], [], []
        if d.symmetric:
            pos = {ij: k for k, ij in enumerate(svec_index(r))}
            for i, j in itertools.product(range(r), range(c)):
                k = pos[(min(i, j), max(i, j))]
                rows.append(i * c + j)
                cols.append(d.offset + k)
                vals.append(1.0 if i == j else 1.0 / SQRT2)
        else:
            rows = list(range(r * c))
            cols = [d.offset + k for k in rows]
            vals = [1.0] * (r * c)
        coef = sp.csr_matrix((vals, (rows, cols)), shape=(r * c, self.n_vars))
        return AffExpr(coef, np.zeros(r * c), (r, c))

    def _own(self, d: VarDescriptor):
        if d.program_id != self.program_id or self.variables.get(d.name) != d:
            raise KeyError(f"variable {d.name!r} is not registered in this program")

    def add_equality(self, lhs: AffExpr, rhs=0.0, name: str = "") -> None:
        """Entrywise ``lhs == rhs``."""
        e = AffExpr.wrap(lhs) - AffExpr.wrap(rhs, lhs.shape)
        self.equalities.append((name or f"eq{len(self.equalities)}", e))

    def add_psd(self, expr: AffExpr, name: str = "") -> None:
        r, c = expr.shape
        if r != c:
            raise MalformedProgram("PSD block must be square")
        diff = expr - expr.T
        if abs(diff._padded(self.n_vars)).max() > 1e-12 or np.max(np.abs(diff.const), initial=0) > 1e-12:
            raise MalformedProgram(f"PSD block {name!r} is not symmetric")
        self.psd_blocks.append((name or f"psd{len(self.psd_blocks)}", expr))

    def minimize(self, expr) -> None:
        e = AffExpr.wrap(expr)
        if e.shape != (1, 1):
            raise MalformedProgram("objective must be scalar")
        self.objective = e

    # -- dense data -------------------------------------------------------
    def equality_data(self):
        if not self.equalities:
            return np.zeros((0, self.n_vars)), np.zeros(0)
        A = sp.vstack([e._padded(self.n_vars) for _, e in self.equalities]).toarray()
        b = -np.concatenate([e.const for _, e in self.equalities])
        return A, b

    def objective_data(self):
        if self.objective is None:
            return np.zeros(self.n_vars), 0.0
        return self.objective._padded(self.n_vars).toarray().ravel(), float(self.objective.const[0])

    def objective_value(self, x) -> float:
        c, c0 = self.objective_data()
        return float(c @ x + c0)

    def pack(self, values: dict) -> np.ndarray:
        x = np.zeros(self.n_vars)
        for name, val in values.items():
            d = self.variables[name]
            val = np.asarray(val, dtype=float).reshape(d.shape)
            x[d.offset:d.offset + d.size] = svec(val) if d.symmetric else val.ravel()
        return x

    def unpack(self, x, d: VarDescriptor) -> np.ndarray:
        self._own(d)
        chunk = np.asarray(x, dtype=float)[d.offset:d.offset + d.size]
        return smat(chunk, d.shape[0]) if d.symmetric else chunk.reshape(d.shape).copy()

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        def coo(e):
            m = e._padded(self.n_vars).tocoo()
            return {"rows": m.row.tolist(), "cols": m.col.tolist(), "vals": m.data.tolist()}

        c, c0 = self.objective_data()
        return {
            "format": "iofeedback-conic-program/1",
            "n_vars": self.n_vars,
            "variables": [
                {"name": d.name, "offset": d.offset, "shape": list(d.shape), "symmetric": d.symmetric}
                for d in self.variables.values()
            ],
            "equalities": [
                {"name": n, "shape": list(e.shape), "coef": coo(e), "const": e.const.tolist()}
                for n, e in self.equalities
            ],
            "psd_blocks": [
                {"name": n, "shape": list(e.shape), "coef": coo(e), "const": e.const.tolist()}
                for n, e in self.psd_blocks
            ],
            "objective": {"c": c.tolist(), "const": c0},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConicProgram":
        prog = cls()
        for v in sorted(d["variables"], key=lambda v: v["offset"]):
            prog.add_variable(v["name"], tuple(v["shape"]), v["symmetric"])
        if prog.n_vars != d["n_vars"]:
            raise MalformedProgram("variable sizes do not match n_vars")

        def expr(item):
            co = item["coef"]
            r, c = item["shape"]
            coef = sp.csr_matrix((co["vals"], (co["rows"], co["cols"])), shape=(r * c, prog.n_vars))
            return AffExpr(coef, item["const"], (r, c))

        prog.equalities = [(e["name"], expr(e)) for e in d["equalities"]]
        prog.psd_blocks = [(b["name"], expr(b)) for b in d["psd_blocks"]]
        obj = d["objective"]
        prog.objective = AffExpr(sp.csr_matrix(np.atleast_2d(obj["c"])), [obj["const"]], (1, 1))
        return prog

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ConicProgram":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SolverHandle:
    backend: str = ""
    feastol: float = 1e-9
    abstol: float = 1e-9
    reltol: float = 1e-9
    max_iters: int = 200
    time_limit: Optional[float] = None

    def __post_init__(self):
        self.backend = self.backend or os.environ.get(BACKEND_ENV, "cvxopt")
        for name in ("feastol", "abstol", "reltol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class Solution:
    status: str
    primal: Optional[np.ndarray]
    objective: float
    stats: dict
    program_id: int


def extract_matrix(solution: Solution, program: ConicProgram, d: VarDescriptor) -> np.ndarray:
    if solution.program_id != program.program_id or d.program_id != program.program_id:
        raise KeyError(f"variable {d.name!r} does not belong to the solved program")
    if solution.primal is None:
        raise SolverError(f"no primal solution available (status {solution.status})")
    return program.unpack(solution.primal, d)


def _reduce_equalities(A, b):
    """Drop redundant rows; return ``None`` when the system is inconsistent."""
    if A.shape[0] == 0:
        return A, b, 0
    scale = max(1.0, np.max(np.abs(A)), np.max(np.abs(b), initial=0.0))
    tol = max(A.shape) * np.finfo(float).eps * scale * 1e3
    rank = np.linalg.matrix_rank(A, tol=tol)
    rank_ab = np.linalg.matrix_rank(np.column_stack([A, b]), tol=tol)
    if rank_ab > rank:
        return None
    _, _, piv = scipy.linalg.qr(A.T, pivoting=True, mode="economic")
    keep = np.sort(piv[:rank])
    return A[keep], b[keep], rank


def _diagnostics(prog: ConicProgram, x) -> dict:
    A, b = prog.equality_data()
    eq = float(np.max(np.abs(A @ x - b))) if A.shape[0] else 0.0
    mins = [float(np.linalg.eigvalsh(e.value(x)).min()) for _, e in prog.psd_blocks]
    return {"equality_residual": eq, "psd_min_eigenvalues": mins}


def _solve_equality_only(prog, A, b, c, c0, t0):
    x = np.linalg.lstsq(A, b, rcond=None)[0] if A.shape[0] else np.zeros(prog.n_vars)
    # objective bounded on the affine set iff c lies in the row space of A
    if A.shape[0]:
        y = np.linalg.lstsq(A.T, c, rcond=None)[0]
        resid = np.linalg.norm(A.T @ y - c)
    else:
        resid = np.linalg.norm(c)
    stats = {"iterations": 0, "solve_time": time.perf_counter() - t0, "backend": "direct"}
    if resid > 1e-9 * max(1.0, np.linalg.norm(c)):
        return Solution(UNBOUNDED, None, -np.inf, stats, prog.program_id)
    stats.update(_diagnostics(prog, x))
    return Solution(OPTIMAL, x, float(c @ x + c0), stats, prog.program_id)


def _solve_cvxopt(prog, A, b, c, c0, handle, t0):
    try:
        import cvxopt
        from cvxopt import solvers
    except ImportError as exc:
        raise BackendUnavailable("cvxopt is not installed") from exc
    G = sp.vstack([-e._padded(prog.n_vars) for _, e in prog.psd_blocks]).toarray()
    h = np.concatenate([e.const for _, e in prog.psd_blocks])
    dims = {"l": 0, "q": [], "s": [e.shape[0] for _, e in prog.psd_blocks]}
    opts = {"show_progress": False, "abstol": handle.abstol, "reltol": handle.reltol,
            "feastol": handle.feastol, "maxiters": handle.max_iters}
    args = dict(G=cvxopt.matrix(G), h=cvxopt.matrix(h), dims=dims, options=opts)
    if A.shape[0]:
        args.update(A=cvxopt.matrix(A), b=cvxopt.matrix(b))
    try:
        sol = solvers.conelp(cvxopt.matrix(c), **args)
    except (ValueError, ArithmeticError) as exc:
        stats = {"iterations": None, "solve_time": time.perf_counter() - t0,
                 "backend": "cvxopt", "message": str(exc)}
        return Solution(NUMERICAL_FAILURE, None, np.nan, stats, prog.program_id)
    raw = sol["status"]
    iters = sol.get("iterations")
    if raw == "optimal":
        status = OPTIMAL
    elif raw == "primal infeasible":
        status = INFEASIBLE
    elif raw == "dual infeasible":
        status = UNBOUNDED
    elif iters is not None and iters >= handle.max_iters:
        status = LIMIT
    else:
        status = NUMERICAL_FAILURE
    x = np.array(sol["x"]).ravel() if sol["x"] is not None else None
    stats = {"iterations": iters, "solve_time": time.perf_counter() - t0, "backend": "cvxopt",
             "raw_status": raw, "gap": sol.get("gap"), "primal_infeasibility": sol.get("primal infeasibility"),
             "dual_infeasibility": sol.get("dual infeasibility")}
    if x is not None and status in (OPTIMAL, LIMIT, NUMERICAL_FAILURE):
        stats.update(_diagnostics(prog, x))
        obj = float(c @ x + c0)
    else:
        x, obj = None, (np.inf if status == INFEASIBLE else -np.inf if status == UNBOUNDED else np.nan)
    return Solution(status, x, obj, stats, prog.program_id)


def _solve_cvxpy(prog, A, b, c, c0, handle, t0):
    try:
        import cvxpy as cp
    except ImportError as exc:
        raise BackendUnavailable("cvxpy is not installed") from exc
    x = cp.Variable(prog.n_vars)
    cons = []
    if A.shape[0]:
        cons.append(A @ x == b)
    for _, e in prog.psd_blocks:
        n = e.shape[0]
        F = e._padded(prog.n_vars)
        M = cp.reshape(F @ x + e.const, (n, n), order="C")
        cons.append(0.5 * (M + M.T) >> 0)
    problem = cp.Problem(cp.Minimize(c @ x + c0), cons)
    solver = "CLARABEL" if "CLARABEL" in cp.installed_solvers() else "SCS"
    kwargs = {"max_iter": handle.max_iters}
    if handle.time_limit and solver == "CLARABEL":
        kwargs["time_limit"] = handle.time_limit
    try:
        problem.solve(solver=solver, **kwargs)
    except cp.error.SolverError as exc:
        return Solution(NUMERICAL_FAILURE, None, np.nan,
                        {"backend": f"cvxpy/{solver}", "message": str(exc)}, prog.program_id)
    mapping = {cp.OPTIMAL: OPTIMAL, cp.OPTIMAL_INACCURATE: OPTIMAL, cp.INFEASIBLE: INFEASIBLE,
               cp.INFEASIBLE_INACCURATE: INFEASIBLE, cp.UNBOUNDED: UNBOUNDED,
               cp.UNBOUNDED_INACCURATE: UNBOUNDED, cp.USER_LIMIT: LIMIT}
    status = mapping.get(problem.status, NUMERICAL_FAILURE)
    stats = {"backend": f"cvxpy/{solver}", "raw_status": problem.status,
             "iterations": problem.solver_stats.num_iters, "solve_time": time.perf_counter() - t0}
    if status == OPTIMAL and x.value is not None:
        xv = np.asarray(x.value, dtype=float)
        stats.update(_diagnostics(prog, xv))
        return Solution(status, xv, float(c @ xv + c0), stats, prog.program_id)
    return Solution(status, None, np.nan, stats, prog.program_id)


_BACKENDS = {"cvxopt": _solve_cvxopt, "cvxpy": _solve_cvxpy}


def available_backends() -> list:
    out = []
    for name, mod in (("cvxopt", "cvxopt"), ("cvxpy", "cvxpy")):
        try:
            __import__(mod)
            out.append(name)
        except ImportError:
            pass
    return out


def solve(prog: ConicProgram, handle: Optional[SolverHandle] = None) -> Solution:
    """Solve ``prog``; equality rows are reduced to an independent set first."""
    handle = handle or SolverHandle()
    if handle.backend not in _BACKENDS:
        raise BackendUnavailable(f"unknown backend {handle.backend!r}; choose from {sorted(_BACKENDS)}")
    t0 = time.perf_counter()
    A, b = prog.equality_data()
    c, c0 = prog.objective_data()
    reduced = _reduce_equalities(A, b)
    if reduced is None:
        stats = {"iterations": 0, "solve_time": time.perf_counter() - t0, "backend": "presolve",
                 "message": "inconsistent equality constraints",
                 "equality_rank": int(np.linalg.matrix_rank(A))}
        return Solution(INFEASIBLE, None, np.inf, stats, prog.program_id)
    A, b, _ = reduced
    if not prog.psd_blocks:
        return _solve_equality_only(prog, A, b, c, c0, t0)
    log.debug("solving %d vars, %d eq rows, PSD blocks %s with %s", prog.n_vars, A.shape[0],
              [e.shape[0] for _, e in prog.psd_blocks], handle.backend)
    return _BACKENDS[handle.backend](prog, A, b, c, c0, handle, t0)

"""Open-loop data collection and the data matrices built from it."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dictionary import Dictionary, DictionaryEvaluationError, GroundTruthExpansion
from .plant import Box, InversionError, ObservabilityWindow, PlantModel, invert_phi

log = logging.getLogger(__name__)

MULTI = "multi-experiment"
SINGLE = "single-trajectory"


class ExperimentDivergenceError(RuntimeError):
    def __init__(self, index: int, step: int, bound: float):
        self.index = index
        self.step = step
        super().__init__(f"experiment {index} left the safety box |x|_inf <= {bound:g} at step {step}")


@dataclass(frozen=True)
class ExperimentConfig:
    T: int = 7
    N: int = 2
    input_low: float = -0.5
    input_high: float = 0.5
    init_box: Box = field(default_factory=lambda: Box.cube(2, 0.5))
    seed: int = 0
    mode: str = MULTI
    safety_bound: float = 1e6

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if not (np.isfinite(self.input_low) and np.isfinite(self.input_high)):
            raise ValueError("input interval must be finite")
        if self.input_low > self.input_high:
            raise ValueError("input interval is empty")
        if not (np.all(np.isfinite(self.init_box.lower)) and np.all(np.isfinite(self.init_box.upper))):
            raise ValueError("initial-state box must be finite")
        if self.mode not in (MULTI, SINGLE):
            raise ValueError(f"mode must be {MULTI!r} or {SINGLE!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def samples_per_record(self) -> int:
        return self.N + 1 if self.mode == MULTI else self.N + self.T

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "T": self.T,
            "seed": self.seed,
            "input_law": {"kind": "uniform", "low": self.input_low, "high": self.input_high},
            "init_box": self.init_box.to_dict(),
            "mode": self.mode,
            "safety_bound": self.safety_bound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        law = d.get("input_law", {})
        box = d.get("init_box")
        return cls(
            T=d["T"],
            N=d["N"],
            input_low=law.get("low", -0.5),
            input_high=law.get("high", 0.5),
            init_box=Box(box["lower"], box["upper"]) if box else Box.cube(2, 0.5),
            seed=d.get("seed", 0),
            mode=d.get("mode", MULTI),
            safety_bound=d.get("safety_bound", 1e6),
        )


@dataclass
class ExperimentRecord:
    u: np.ndarray
    y: np.ndarray
    x0: Optional[np.ndarray] = None


@dataclass
class RawDataset:
    records: list
    config: ExperimentConfig
    model_name: str = ""

    def __len__(self):
        return len(self.records)


def experiment_rngs(seed: int, count: int) -> list:
    """Independent PCG64 streams: experiment ``j`` uses child ``j`` of ``SeedSequence(seed)``."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(count)]


def _simulate(model: PlantModel, x0, u, bound: float, index: int) -> np.ndarray:
    y = np.empty(len(u))
    x = np.array(x0, dtype=float)
    for k in range(len(u)):
        if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) <= bound):
            raise ExperimentDivergenceError(index, k, bound)
        y[k] = model.output(x)
        x = np.asarray(model.step(x, float(u[k])), dtype=float)
    return y


def run_experiments(model: PlantModel, cfg: ExperimentConfig) -> RawDataset:
    """Excite the plant with uniform random inputs from random initial states."""
    if cfg.init_box.dim != model.state_dim:
        raise ValueError(f"init box has dimension {cfg.init_box.dim}, plant has {model.state_dim}")
    n_rec = cfg.T if cfg.mode == MULTI else 1
    length = cfg.samples_per_record()
    records = []
    for j, rng in enumerate(experiment_rngs(cfg.seed, n_rec)):
        x0 = cfg.init_box.sample(rng)
        u = rng.uniform(cfg.input_low, cfg.input_high, size=length)
        y = _simulate(model, x0, u, cfg.safety_bound, j)
        records.append(ExperimentRecord(u, y, x0))
    return RawDataset(records, cfg, model.name)


@dataclass
class DataMatrices:
    Y0: np.ndarray
    V0: np.ndarray
    Y1: np.ndarray
    V1: np.ndarray
    Q0: np.ndarray
    U0: np.ndarray
    N: int
    T: int
    S: int

    def __post_init__(self):
        N, T, S = self.N, self.T, self.S
        expected = {"Y0": (N, T), "V0": (N, T), "Y1": (N, T), "V1": (N, T),
                    "Q0": (S - 2 * N, T), "U0": (1, T)}
        for name, shape in expected.items():
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if name == "Q0" and arr.size == 0:
                arr = arr.reshape(shape)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @property
    def X1(self) -> np.ndarray:
        return np.vstack([self.Y1, self.V1])

    @property
    def X0(self) -> np.ndarray:
        return np.vstack([self.Y0, self.V0])

    @property
    def W0(self) -> np.ndarray:
        """Regressor data ``[Y0; V0; Q0]`` (S x T)."""
        return np.vstack([self.Y0, self.V0, self.Q0])

    def rich_data_rank(self, tol: Optional[float] = None) -> int:
        return int(np.linalg.matrix_rank(np.vstack([self.U0, self.W0]), tol=tol))

    def to_dict(self) -> dict:
        out = {"N": self.N, "T": self.T, "S": self.S}
        for name in ("Y0", "V0", "Y1", "V1", "Q0", "U0"):
            arr = getattr(self, name)
            out[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DataMatrices":
        mats = {name: np.asarray(d[name]["data"], dtype=float).reshape(d[name]["shape"])
                for name in ("Y0", "V0", "Y1", "V1", "Q0", "U0")}
        return cls(N=d["N"], T=d["T"], S=d["S"], **mats)


def _windows(raw: RawDataset):
    """Yield ``(Y(i), U(i), Y(i+1), U(i+1), u(i+N))`` per column."""
    N = raw.config.N
    if raw.config.mode == MULTI:
        for rec in raw.records:
            yield rec.y[:N], rec.u[:N], rec.y[1:N + 1], rec.u[1:N + 1], rec.u[N]
    else:
        rec = raw.records[0]
        for i in range(raw.config.T):
            yield (rec.y[i:i + N], rec.u[i:i + N], rec.y[i + 1:i + N + 1],
                   rec.u[i + 1:i + N + 1], rec.u[i + N])


def assemble_matrices(raw: RawDataset, dictionary: Dictionary) -> DataMatrices:
    cfg = raw.config
    N, T = cfg.N, cfg.T
    if dictionary.N != N:
        raise ValueError(f"dictionary window N={dictionary.N} differs from data N={N}")
    n_rec = T if cfg.mode == MULTI else 1
    if len(raw.records) != n_rec:
        raise ValueError(f"expected {n_rec} records, got {len(raw.records)}")
    for rec in raw.records:
        if len(rec.u) != cfg.samples_per_record() or len(rec.y) != len(rec.u):
            raise ValueError("record length inconsistent with the experiment mode")
    cols = list(_windows(raw))
    Y0 = np.column_stack([c[0] for c in cols])
    V0 = np.column_stack([c[1] for c in cols])
    Y1 = np.column_stack([c[2] for c in cols])
    V1 = np.column_stack([c[3] for c in cols])
    U0 = np.array([[c[4] for c in cols]])
    Q0 = np.empty((dictionary.n_nonlinear, T))
    for i in range(T):
        try:
            Q0[:, i] = dictionary.eval_Q(Y0[:, i], V0[:, i])
        except DictionaryEvaluationError as exc:
            raise DictionaryEvaluationError(f"column {i}: {exc}") from exc
    if T < dictionary.S:
        warnings.warn(f"T={T} < S={dictionary.S}: the data cannot have full row rank", stacklevel=2)
    return DataMatrices(Y0, V0, Y1, V1, Q0, U0, N, T, dictionary.S)


def brunovsky_pair(N: int):
    Ac = np.eye(N, k=1)
    Bc = np.zeros((N, 1))
    Bc[-1, 0] = 1.0
    return Ac, Bc


def lifted_blocks(N: int):
    """Block matrices ``A, B1, B2`` of the lifted (w, xi) dynamics."""
    Ac, Bc = brunovsky_pair(N)
    Z = np.zeros((N, N))
    A = np.block([[Ac, Z], [Z, Ac]])
    B1 = np.vstack([np.zeros((N, 1)), Bc])
    B2 = np.vstack([Bc, np.zeros((N, 1))])
    return A, B1, B2


def verify_data_identity(truth: GroundTruthExpansion, dm: DataMatrices) -> float:
    """Max-abs residual of ``X1 = A X0 + B1 U0 + B2 alpha W0`` for known ``alpha``."""
    alpha = np.atleast_2d(truth.alpha)
    if alpha.shape != (1, dm.S):
        raise ValueError(f"alpha has shape {alpha.shape}, expected (1, {dm.S})")
    A, B1, B2 = lifted_blocks(dm.N)
    r = dm.X1 - A @ dm.X0 - B1 @ dm.U0 - B2 @ (alpha @ dm.W0)
    return float(np.max(np.abs(r))) if r.size else 0.0


@dataclass
class Assumption3Report:
    input_violations: list = field(default_factory=list)
    output_violations: list = field(default_factory=list)
    n_windows: int = 0

    @property
    def ok(self) -> bool:
        return not (self.input_violations or self.output_violations)


def check_assumption3(raw: RawDataset, win: ObservabilityWindow, model: PlantModel) -> Assumption3Report:
    """Flag data windows whose inputs leave the input set or whose outputs are not
    reachable from the state box.  Diagnostic only."""
    report = Assumption3Report()
    if not raw.records:
        return report
    N = win.N
    for i, (Yi, Ui, _, _, _) in enumerate(_windows(raw)):
        report.n_windows += 1
        bad = [j for j, u in enumerate(Ui) if not win.input_box.contains([u])]
        if bad:
            report.input_violations.append((i, bad))
            continue
        try:
            xh = invert_phi(model, win, Yi, Ui[: N - 1])
        except InversionError as exc:
            report.output_violations.append((i, f"inversion failed: {exc}"))
            continue
        if not win.state_box.contains(xh):
            report.output_violations.append((i, f"recovered state {xh.tolist()} outside state box"))
    return report


def save_dataset(raw: RawDataset, directory, config_hash: str = "") -> list:
    """One CSV per record (columns k, u, y) plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, rec in enumerate(raw.records):
        p = d / f"experiment_{j:03d}.csv"
        with open(p, "w", newline="") as fh:
            if config_hash:
                fh.write(f"# config_hash: {config_hash}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["k", "u", "y"])
            for k, (u, y) in enumerate(zip(rec.u, rec.y)):
                wr.writerow([k, repr(float(u)), repr(float(y))])
        paths.append(p)
    manifest = {"model": raw.model_name, **raw.config.to_dict(),
                "files": [p.name for p in paths], "config_hash": config_hash}
    mp = d / "manifest.json"
    mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths + [mp]


def load_dataset(directory) -> RawDataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = ExperimentConfig.from_dict(manifest)
    records = []
    for name in manifest["files"]:
        with open(d / name) as fh:
            rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
        records.append(ExperimentRecord(np.array([float(r["u"]) for r in rows]),
                                        np.array([float(r["y"]) for r in rows])))
    return RawDataset(records, cfg, manifest.get("model", ""))


def save_matrices(dm: DataMatrices, path, config_hash: str = "") -> None:
    payload = dm.to_dict()
    if config_hash:
        payload["config_hash"] = config_hash
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_matrices(path) -> DataMatrices:
    return DataMatrices.from_dict(json.loads(Path(path).read_text()))

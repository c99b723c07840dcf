"""Time the closed-loop grid sweep with each available implementation.

    python benchmarks/bench_kernels.py --count 41 --repeat 3

Compares the compiled kernel, the vectorised NumPy fallback and the generic
per-point simulator on the same grid and checks that their verdicts agree.
"""
import argparse
import time

import numpy as np

from iofeedback import kernels
from iofeedback.controller import ControllerState
from iofeedback.dictionary import pendulum_dictionary
from iofeedback.experiments import ExperimentConfig, assemble_matrices, run_experiments
from iofeedback.plant import pendulum
from iofeedback.roa import ConvergenceTest, GridSpec, classify, empirical_roa_grid
from iofeedback.synthesis import build_sdp, solve_sdp

try:
    from iofeedback import _ckernels
except ImportError:
    _ckernels = None


def reference_controller(model, seed):
    d = pendulum_dictionary()
    res = solve_sdp(build_sdp(assemble_matrices(run_experiments(model, ExperimentConfig(seed=seed)), d)))
    if not res.optimal:
        raise SystemExit(f"synthesis failed for seed {seed}: {res.diagnostics.get('reason')}")
    return ControllerState.initial(res.kappa, d)


def best_of(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=41, help="grid points per axis")
    ap.add_argument("--radius", type=float, default=1.0)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=20231)
    ap.add_argument("--skip-generic", action="store_true", help="skip the slow per-point simulator")
    args = ap.parse_args(argv)

    model = pendulum()
    ctrl = reference_controller(model, args.seed)
    grid = GridSpec.square(args.radius, args.count)
    pts = grid.points()
    test = ConvergenceTest()

    impls = {"numpy": lambda: kernels.pendulum_tail_norms(model.params, ctrl, pts, impl=kernels._pykernels)}
    if _ckernels is not None:
        impls = {"cython": lambda: kernels.pendulum_tail_norms(model.params, ctrl, pts, impl=_ckernels), **impls}
    if not args.skip_generic:
        impls["generic"] = lambda: empirical_roa_grid(model, ctrl, grid, test, use_kernel=False).tail_norms

    print(f"{len(pts)} closed-loop runs, horizon {test.horizon}")
    times, verdicts = {}, {}
    for name, fn in impls.items():
        t, tails = best_of(fn, 1 if name == "generic" else args.repeat)
        times[name] = t
        verdicts[name] = [classify(v, p, test.threshold) for v, p in zip(tails, pts)]
        print(f"{name:>8}: {t * 1e3:9.2f} ms  ({sum(v == 'converged' for v in verdicts[name])} converged)")
    base = next(iter(verdicts.values()))
    agree = all(v == base for v in verdicts.values())
    slowest = max(times.values())
    for name, t in times.items():
        print(f"{name:>8}: {slowest / t:8.1f}x vs slowest")
    print("verdicts agree" if agree else "VERDICTS DIFFER")
    return 0 if agree else 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Hot-loop kernels: compiled extension when built, NumPy fallback otherwise.

Set ``IOFEEDBACK_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from .controller import OVERFLOW_BOUND
from .plant import PendulumParams

try:
    if os.environ.get("IOFEEDBACK_PURE_PYTHON"):
        raise ImportError("pure-python mode requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    from . import _pykernels as _impl

    BACKEND = "numpy"

from . import _pykernels  # noqa: E402,F401  (always importable, used by benchmarks/tests)


def supports(model, controller) -> bool:
    """Kernel covers the built-in pendulum driven by the pendulum dictionary."""
    return (model.name == "pendulum" and isinstance(model.params, PendulumParams)
            and controller.dictionary.name == "pendulum" and controller.N == 2)


def pendulum_tail_norms(params: PendulumParams, controller, x0s, horizon=200, tail_start=195,
                        tail_stop=200, overflow=OVERFLOW_BOUND, impl=None):
    """Tail sup-norm of ``(x, eta, xi)`` for closed-loop runs from each row of ``x0s``."""
    impl = impl or _impl
    f = lambda v: np.ascontiguousarray(v, dtype=float)  # noqa: E731
    return impl.pendulum_tail_norms(
        f(np.atleast_2d(x0s)), float(params.Ts), float(params.m), float(params.ell), float(params.g),
        float(params.mu), f(controller.kappa), f(controller.warmup), f(controller.eta),
        f(controller.xi), int(horizon), int(tail_start), int(tail_stop), float(overflow),
    )

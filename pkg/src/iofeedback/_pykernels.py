"""NumPy fallback for the compiled closed-loop kernel (vectorised over start points)."""
import numpy as np


def pendulum_tail_norms(x0s, Ts, m, ell, g, mu, kappa, warmup, eta0, xi0,
                        horizon, tail_start, tail_stop, overflow):
    x0s = np.ascontiguousarray(x0s, dtype=float)
    P = x0s.shape[0]
    a = Ts * g / ell
    d = 1.0 - Ts * mu / (m * ell * ell)
    b = Ts / (m * ell)
    k0, k1, k2, k3, k4, k5 = (float(c) for c in kappa)
    x1, x2 = x0s[:, 0].copy(), x0s[:, 1].copy()
    e1, e2 = np.full(P, float(eta0[0])), np.full(P, float(eta0[1]))
    s1, s2 = np.full(P, float(xi0[0])), np.full(P, float(xi0[1]))
    tail = np.zeros(P)
    dead = np.zeros(P, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon + 1):
            bad = ~(np.isfinite(x1) & np.isfinite(x2)) | (np.abs(x1) > overflow) | (np.abs(x2) > overflow)
            dead |= bad
            # frozen rows keep finite placeholders so they cannot poison anything
            x1[dead] = 0.0
            x2[dead] = 0.0
            y = x1.copy()
            if k < 2:
                u = np.full(P, float(warmup[k]))
            else:
                u = (k0 * e1 + k1 * e2 + k2 * s1 + k3 * s2
                     + k4 * (np.sin(e1) - e1) + k5 * (s1 * np.cos(e1) - s1))
            if tail_start <= k <= tail_stop:
                v = np.max(np.abs(np.stack([x1, x2, e1, e2, s1, s2])), axis=0)
                tail = np.maximum(tail, v)
            e1, e2 = e2, y
            s1, s2 = s2, u
            if k < horizon:
                nx1 = x1 + Ts * x2
                x2 = a * np.sin(x1) + d * x2 + b * np.cos(x1) * u
                x1 = nx1
    tail[dead] = np.inf
    return tail

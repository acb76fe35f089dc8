"""Fixed-step Runge-Kutta helpers shared by seeding, validation and flight."""

from __future__ import annotations

import numpy as np


def rk4_step(f, x, t, h):
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def propagate(f, x0, t0, t1, n_steps):
    """RK4 from t0 to t1 in n_steps; returns (times, states) incl. endpoints."""
    ts = np.linspace(t0, t1, n_steps + 1)
    h = (t1 - t0) / n_steps
    out = np.empty((n_steps + 1,) + np.shape(x0))
    out[0] = x0
    x = np.asarray(x0, dtype=float)
    for i in range(n_steps):
        x = rk4_step(f, x, ts[i], h)
        out[i + 1] = x
    return ts, out

"""Radau pseudospectral machinery.

Legendre-Gauss-Radau collocation on [-1, 1]: the p collocation points
are the roots of P_{p-1} + P_p (the left endpoint -1 is included, the
right endpoint excluded).  The state is carried at the p collocation
points plus the non-collocated right endpoint, so consecutive segments
share their boundary node and no control variable is duplicated there.

Differentiation matrices are built by barycentric Lagrange
interpolation over the p+1 state nodes and evaluated at the p
collocation points.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre
from scipy.special import eval_legendre


@lru_cache(maxsize=None)
def lgr_nodes(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Collocation points and quadrature weights of the p-point Radau rule.

    Returns (tau, w) with tau[0] = -1, all tau < 1, w > 0 and sum(w) = 2.
    """
    if p < 1:
        raise ValueError("Radau order must be at least 1")
    if p == 1:
        return np.array([-1.0]), np.array([2.0])
    coeffs = np.zeros(p + 1)
    coeffs[p - 1] = 1.0
    coeffs[p] = 1.0
    tau = np.sort(legendre.legroots(coeffs))
    tau[0] = -1.0
    w = np.empty(p)
    w[0] = 2.0 / p**2
    interior = tau[1:]
    w[1:] = (1.0 - interior) / (p**2 * eval_legendre(p - 1, interior) ** 2)
    return tau, w


@lru_cache(maxsize=None)
def state_nodes(p: int) -> np.ndarray:
    """The p collocation points plus the non-collocated endpoint +1."""
    tau, _ = lgr_nodes(p)
    return np.append(tau, 1.0)


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


@lru_cache(maxsize=None)
def differentiation_matrix(p: int) -> np.ndarray:
    """D of shape (p, p+1): row i applies d/dtau of the state interpolant
    at collocation point i."""
    nodes = state_nodes(p)
    b = barycentric_weights(nodes)
    n = p + 1
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (b[j] / b[i]) / (nodes[i] - nodes[j])
        D[i, i] = -D[i].sum()
    return D[:p]


def barycentric_interpolate(nodes: np.ndarray, values: np.ndarray, t) -> np.ndarray:
    """Evaluate the Lagrange interpolant through (nodes, values) at t.

    values has shape (len(nodes), ...); query points that coincide with
    a node return the nodal value exactly.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    b = barycentric_weights(np.asarray(nodes, dtype=float))
    diff = t[:, None] - nodes[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-14)
    diff = np.where(exact, 1.0, diff)
    w = b[None, :] / diff
    w = np.where(exact, np.inf, w)
    hit = exact.any(axis=1)
    w[hit] = exact[hit].astype(float)
    vals = np.tensordot(w, values, axes=(1, 0))
    denom = w.sum(axis=1).reshape((-1,) + (1,) * (values.ndim - 1))
    return vals / denom


@dataclass(frozen=True)
class PhaseMesh:
    """hp mesh of one phase over tau in [0, 1].

    Segments are uniform unless explicit boundaries are given; phases
    with a sharp feature (the return-phase drag wall) cluster their
    segment boundaries around it.
    """

    phase_index: int
    h: int
    p: int
    boundaries: tuple | None = None

    def __post_init__(self):
        if self.boundaries is not None:
            b = tuple(float(x) for x in self.boundaries)
            if len(b) != self.h + 1 or b[0] != 0.0 or b[-1] != 1.0 or np.any(np.diff(b) <= 0):
                raise ValueError("segment boundaries must increase from 0 to 1 with h+1 entries")
            object.__setattr__(self, "boundaries", b)

    @property
    def bounds(self) -> np.ndarray:
        if self.boundaries is not None:
            return np.asarray(self.boundaries)
        return np.linspace(0.0, 1.0, self.h + 1)

    @property
    def n_state_nodes(self) -> int:
        return self.h * self.p + 1

    @property
    def n_colloc(self) -> int:
        return self.h * self.p

    def seg_width(self, k: int) -> float:
        b = self.bounds
        return b[k + 1] - b[k]

    def segment_state_slice(self, k: int) -> slice:
        return slice(k * self.p, k * self.p + self.p + 1)

    def state_tau(self) -> np.ndarray:
        """Phase-domain locations of all h*p + 1 state nodes."""
        loc = state_nodes(self.p)
        b = self.bounds
        out = []
        for k in range(self.h):
            out.append(b[k] + 0.5 * (b[k + 1] - b[k]) * (loc[:-1] + 1.0))
        out.append(np.array([1.0]))
        return np.concatenate(out)

    def colloc_tau(self) -> np.ndarray:
        """Locations of the h*p collocation points (= state nodes minus the end)."""
        return self.state_tau()[:-1]

    def colloc_half_widths(self) -> np.ndarray:
        """(dtau_k / 2) factor of every collocation point's segment."""
        b = self.bounds
        return np.repeat(0.5 * np.diff(b), self.p)

    def segment_of(self, tau: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.bounds, tau, side="right") - 1, 0, self.h - 1)


def mesh_from_table(orders: dict[int, tuple[int, int]]) -> dict[int, PhaseMesh]:
    """Build phase meshes from {phase_index: (h, p)}."""
    return {i: PhaseMesh(i, h, p) for i, (h, p) in orders.items()}


def interpolate_phase(mesh: PhaseMesh, values: np.ndarray, tau) -> np.ndarray:
    """Evaluate the per-segment state interpolant of a phase at tau in [0, 1]."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    out = None
    seg = mesh.segment_of(tau)
    nodes = state_nodes(mesh.p)
    b = mesh.bounds
    for k in range(mesh.h):
        sel = seg == k
        if not sel.any():
            continue
        local = 2.0 * (tau[sel] - b[k]) / (b[k + 1] - b[k]) - 1.0
        vals = barycentric_interpolate(nodes, values[mesh.segment_state_slice(k)], local)
        if out is None:
            out = np.empty((len(tau),) + vals.shape[1:])
        out[sel] = vals
    return out


def interpolate_controls(mesh: PhaseMesh, u: np.ndarray, tau) -> np.ndarray:
    """Same as `interpolate_phase` but over the collocation-only grid."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    out = None
    seg = mesh.segment_of(tau)
    nodes, _ = lgr_nodes(mesh.p)
    b = mesh.bounds
    for k in range(mesh.h):
        sel = seg == k
        if not sel.any():
            continue
        local = 2.0 * (tau[sel] - b[k]) / (b[k + 1] - b[k]) - 1.0
        vals = barycentric_interpolate(nodes, u[k * mesh.p:(k + 1) * mesh.p], local)
        if out is None:
            out = np.empty((len(tau),) + vals.shape[1:])
        out[sel] = vals
    return out

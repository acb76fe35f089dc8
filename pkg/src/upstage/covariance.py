"""Minimum splash-down dispersion gain synthesis.

The linearized stochastic dynamics along the nominal powered-phase
trajectory are discretized under a zero-order hold; the multiplicative
feedback law u = (I + skew(alpha)) nu, alpha = K (x - mu), leaves the
closed-loop covariance propagation bilinear in (K, P).  Substituting
Y = K P and relaxing the propagation equality to a semidefinite
inequality (Schur complement form) yields a semidefinite program whose
objective is the largest eigenvalue of the splash-down position
covariance.  The relaxation is expected to be tight at the optimum;
the recovered gains are verified by re-propagating the closed-loop
recursion with the equality sign and reporting the gap.

The noise-free return phase is eliminated from the decision variables:
its state-transition matrices compose into a single linear map from
the burnout covariance to the splash-down covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, OPTIMAL
from .integrate import rk4_step
from .scvx import Trajectory
from .vehicle import IDX_M, IDX_R, NX, VehicleModel


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def gamma_coefficient(p: float, n_alpha: int = 3) -> float:
    """Probability scaling of the 2-norm bound on a Gaussian vector."""
    if not 0.0 < p < 1.0:
        raise ValueError("probability level must be in (0, 1)")
    base = np.sqrt(2.0 * np.log(1.0 / (1.0 - p)))
    if n_alpha <= 2:
        return base
    return base + np.sqrt(n_alpha)


@dataclass(frozen=True)
class ChanceSpec:
    alpha_max: float              # rad
    probability: float = 0.95
    n_alpha: int = 3

    @property
    def gamma(self):
        return gamma_coefficient(self.probability, self.n_alpha)

    @property
    def tau_bound(self):
        """Bound on the spectral radius of cov(alpha), rad^2."""
        return self.alpha_max**2 / self.gamma**2


@dataclass
class StochasticModel:
    """ZOH-discretized linear stochastic dynamics along the nominal."""

    t: np.ndarray                  # (N,) grid over the powered phase
    A: np.ndarray                  # (N-1, 7, 7) interval state transition
    B: np.ndarray                  # (N-1, 7, 3) ZOH control influence
    c: np.ndarray                  # (N-1, 7) forcing integrals
    Q: np.ndarray                  # (N-1, 7, 7) process noise covariance
    nu: np.ndarray                 # (N-1, 3) nominal control at interval start
    mu: np.ndarray                 # (N, 7) nominal state at the grid
    g_v: float
    t_return: np.ndarray           # (N_R,) return grid (from burnout)
    A_return: np.ndarray           # (N_R-1, 7, 7) return interval STMs
    return_map: np.ndarray         # (7, 7) composed burnout->splash map
    splash_state: np.ndarray       # (7,) nominal splash-down state


def _stm_interval(model, phase, x_interp, u_interp, t0, t1, g_v, n_sub,
                  freeze_atmo=False, with_noise=True):
    """Integrate Phi, B_j, c_j, Q_j over [t0, t1] with RK4 substeps."""
    G = np.zeros((NX, 3))
    G[3:6] = g_v * np.eye(3)
    GGT = G @ G.T

    def rhs(state, t):
        Phi, Xb, Xc, Q = state
        x = x_interp(t)
        u = u_interp(t) if u_interp is not None else None
        A, _ = model.jacobians(x, u, phase, t, freeze_atmo_gradients=freeze_atmo)
        f = model.dynamics(x, u, phase, t)
        cvec = f - A @ x
        if u is not None:
            Bmat = np.zeros((NX, 3))
            Bmat[3:6] = np.eye(3)
            cvec = cvec - Bmat @ u
        else:
            Bmat = np.zeros((NX, 3))
        dPhi = A @ Phi
        dXb = A @ Xb + Bmat
        dXc = A @ Xc + cvec
        dQ = A @ Q + Q @ A.T + (GGT if with_noise else 0.0)
        return (dPhi, dXb, dXc, dQ)

    h = (t1 - t0) / n_sub
    Phi = np.eye(NX)
    Xb = np.zeros((NX, 3))
    Xc = np.zeros(NX)
    Q = np.zeros((NX, NX))
    state = (Phi, Xb, Xc, Q)
    t = t0
    for _ in range(n_sub):
        k1 = rhs(state, t)
        s2 = tuple(s + 0.5 * h * k for s, k in zip(state, k1))
        k2 = rhs(s2, t + 0.5 * h)
        s3 = tuple(s + 0.5 * h * k for s, k in zip(state, k2))
        k3 = rhs(s3, t + 0.5 * h)
        s4 = tuple(s + h * k for s, k in zip(state, k3))
        k4 = rhs(s4, t + h)
        state = tuple(s + (h / 6.0) * (a + 2 * b + 2 * c_ + d)
                      for s, a, b, c_, d in zip(state, k1, k2, k3, k4))
        t += h
    return state


def discretize_zoh(model: VehicleModel, nominal: Trajectory, n_nodes: int,
                   g_v: float, n_return: int = 1001, n_sub: int = 4,
                   freeze_return_atmo: bool = False) -> StochasticModel:
    """ZOH discretization of the linearized dynamics along the nominal.

    The powered-phase grid is uniform over the stage burn; the return
    phase is re-propagated ballistically from the nominal burnout state
    and linearized along that flight (optionally with the atmosphere
    density gradients frozen).
    """
    if n_nodes < 2:
        raise ValueError("need at least two grid nodes")
    p1 = nominal.phase(1)
    if p1.s <= 0:
        raise ValueError("nominal does not cover the powered phase")
    phase1 = model.phase(1)
    t = np.linspace(0.0, p1.s, n_nodes)

    def x_of(tt):
        return p1.interp_x(p1.t0 + tt)[0]

    def u_of(tt):
        return p1.interp_u(p1.t0 + tt)[0]

    N = n_nodes
    A = np.empty((N - 1, NX, NX))
    B = np.empty((N - 1, NX, 3))
    c = np.empty((N - 1, NX))
    Q = np.empty((N - 1, NX, NX))
    nu = np.empty((N - 1, 3))
    mu = np.stack([x_of(tt) for tt in t])
    for j in range(N - 1):
        Phi, Xb, Xc, Qj = _stm_interval(model, phase1, x_of, u_of, t[j], t[j + 1],
                                        g_v, n_sub)
        A[j], B[j], c[j], Q[j] = Phi, Xb, Xc, 0.5 * (Qj + Qj.T)
        nu[j] = u_of(t[j])

    # ballistic return from the nominal burnout state
    phase6 = model.phase(6)
    x_bo = p1.x[-1].copy()
    x_bo[IDX_M] = model.mission.m_dry3

    def f6(xx, tt):
        return model.dynamics(xx, None, phase6, tt)

    step = 0.5
    xs = [x_bo.copy()]
    tt = 0.0
    x_cur = x_bo.copy()
    while tt < 3.0 * max(nominal.phase(6).s if any(p.phase_index == 6 for p in nominal.phases) else 2000.0, 1000.0):
        x_cur = rk4_step(f6, x_cur, tt, step)
        tt += step
        xs.append(x_cur.copy())
        if np.linalg.norm(x_cur[IDX_R]) <= model.env.r_earth:
            break
    xs = np.asarray(xs)
    ts = step * np.arange(len(xs))
    t_ret = np.linspace(0.0, ts[-1], n_return)

    def xr_of(q):
        return np.array([np.interp(q, ts, xs[:, d]) for d in range(NX)])

    A_ret = np.empty((n_return - 1, NX, NX))
    for j in range(n_return - 1):
        Phi, _, _, _ = _stm_interval(model, phase6, xr_of, None,
                                     t_ret[j], t_ret[j + 1], 0.0, n_sub,
                                     freeze_atmo=freeze_return_atmo, with_noise=False)
        A_ret[j] = Phi
    M = np.eye(NX)
    for j in range(n_return - 1):
        M = A_ret[j] @ M
    return StochasticModel(t, A, B, c, Q, nu, mu, g_v, t_ret, A_ret, M, xs[-1])


@dataclass
class CovarianceSchedule:
    """Optimized gain schedule and the covariance history it induces."""

    t: np.ndarray                  # (N,)
    P: np.ndarray                  # (N, 7, 7) SDP covariances (physical units)
    Y: np.ndarray                  # (N-1, 3, 7)
    K: np.ndarray                  # (N-1, 3, 7) feedback gains
    tau: np.ndarray                # (N-1,) spectral-radius epigraph values, rad^2
    tau_r: float                   # objective, m^2
    P_forward: np.ndarray          # (N, 7, 7) equality-recursion covariances
    tightness_gap: float           # max relative Frobenius gap SDP vs forward
    P_return: np.ndarray           # (N_R, 7, 7) return-phase covariances
    t_return: np.ndarray
    mu: np.ndarray                 # (N, 7) nominal states on the grid
    nu: np.ndarray                 # (N-1, 3) nominal controls on the grid
    splash_state: np.ndarray
    g_v: float = 0.0
    chance: ChanceSpec | None = None
    solve_wall_time: float = 0.0
    condition_warnings: int = 0

    @property
    def terminal_position_cov(self):
        return self.P_return[-1][:3, :3]


_PAIR_CACHE = {}


def _tri_pairs(n):
    if n not in _PAIR_CACHE:
        K, L = np.tril_indices(n)
        _PAIR_CACHE[n] = (K, L)
    return _PAIR_CACHE[n]


def congruence_packed(A):
    """Matrix mapping packed sym P to packed sym A P A^T.

    A is (m, n); rows index packed (m) entries, columns packed (n).
    """
    m, n = A.shape
    K, L = _tri_pairs(m)
    a, b = _tri_pairs(n)
    C = (A[K[:, None], a[None, :]] * A[L[:, None], b[None, :]]
         + np.where(a != b, A[K[:, None], b[None, :]] * A[L[:, None], a[None, :]], 0.0))
    return C


def assemble_sdp(stoch: StochasticModel, chance: ChanceSpec, P0: np.ndarray,
                 trace_penalty: float = 1e-7,
                 scales=(1000.0, 10.0, 1.0)) -> tuple[ConicProgram, dict]:
    """Build the minimum terminal-dispersion SDP.

    Decision variables: the covariance P_j at every grid node, the
    gain surrogate Y_j = K_j P_j and the gain-magnitude epigraph tau_j
    per interval, plus the terminal epigraph tau_R.  The return phase
    enters only through the composed burnout-to-splash map.  A small
    trace penalty keeps the propagation inequality tight at every node
    (the objective alone leaves null directions of the terminal
    projection undetermined).
    """
    P0 = np.asarray(P0, dtype=float)
    if P0.shape != (NX, NX):
        raise ValueError("P0 must be 7x7")
    if np.any(np.linalg.eigvalsh(P0) < -1e-9 * max(np.trace(P0), 1.0)):
        raise ValueError("P0 must be positive semidefinite")
    N = len(stoch.t)
    sr, sv, sm = scales
    S = np.diag([sr] * 3 + [sv] * 3 + [sm])
    Sinv = np.diag(1.0 / np.diag(S))
    a_s = np.sqrt(chance.tau_bound)          # alpha scale: bound becomes tau <= 1

    prog = ConicProgram()
    P_blocks = [prog.add_sym(f"P{j}", NX) for j in range(N)]
    Y_vars = [prog.add_var(f"Y{j}", (3, NX)) for j in range(N - 1)]
    tau_vars = prog.add_var("tau", (N - 1,), lb=0.0, ub=1.0)
    tau_r = prog.add_var("tau_r", lb=0.0)

    # objective: terminal epigraph + tiny trace pressure
    cols = [np.array([tau_r])]
    vals = [np.array([1.0])]
    if trace_penalty > 0.0:
        diag_idx = [pb.index(d, d) for pb in P_blocks[1:] for d in range(NX)]
        cols.append(np.array(diag_idx))
        vals.append(np.full(len(diag_idx), trace_penalty))
    prog.minimize_terms(np.concatenate(cols), np.concatenate(vals))

    # fixed initial covariance
    P0s = Sinv @ P0 @ Sinv
    K7, L7 = _tri_pairs(NX)
    prog.add_eq_block(np.arange(len(K7)), P_blocks[0].packed, np.ones(len(K7)),
                      P0s[K7, L7])

    n_pk = NX * (NX + 1) // 2
    big_pairs = _tri_pairs(2 * NX)
    for j in range(N - 1):
        At = Sinv @ stoch.A[j] @ S
        Bt = a_s * (Sinv @ stoch.B[j])
        Qt = Sinv @ stoch.Q[j] @ Sinv
        Bnu = Bt @ skew(stoch.nu[j])          # (7, 3)

        ei, ej, cc, vv = [], [], [], []
        # top-left P_j
        ei.append(K7); ej.append(L7)
        cc.append(P_blocks[j].packed); vv.append(np.ones(n_pk))
        # bottom-left W = Bnu Y : entry (7+k, l) coeff Bnu[k, a] on Y[a, l]
        kk, ll = np.meshgrid(np.arange(NX), np.arange(NX), indexing="ij")
        for a in range(3):
            ei.append(7 + kk.ravel()); ej.append(ll.ravel())
            cc.append(np.broadcast_to(Y_vars[j][a], (NX, NX)).ravel())
            vv.append(np.broadcast_to(Bnu[:, a][:, None], (NX, NX)).ravel())
        # bottom-right Pi = P_{j+1} - At P_j At^T + At W^T + W At^T - Qt
        ei.append(7 + K7); ej.append(7 + L7)
        cc.append(P_blocks[j + 1].packed); vv.append(np.ones(n_pk))
        C = congruence_packed(At)             # packs At P At^T
        # scatter -C over P_j packed entries
        src = np.broadcast_to(P_blocks[j].packed[None, :], C.shape)
        ei.append(np.repeat(7 + K7, n_pk)); ej.append(np.repeat(7 + L7, n_pk))
        cc.append(src.ravel()); vv.append(-C.ravel())
        # cross terms: (At W^T + W At^T)[k,l] = sum_m At[k,m] Bnu[l,a] Y[a,m] + At[l,m] Bnu[k,a] Y[a,m]
        for a in range(3):
            coef = (At[K7][:, None, :] * Bnu[L7, a][:, None, None]).squeeze(1) \
                 + (At[L7][:, None, :] * Bnu[K7, a][:, None, None]).squeeze(1)
            ei.append(np.repeat(7 + K7, NX)); ej.append(np.repeat(7 + L7, NX))
            cc.append(np.broadcast_to(Y_vars[j][a][None, :], (n_pk, NX)).ravel())
            vv.append(coef.ravel())
        const = np.zeros((2 * NX, 2 * NX))
        const[NX:, NX:] = -Qt
        prog.add_psd_block(2 * NX, np.concatenate(ei), np.concatenate(ej),
                           np.concatenate(cc), np.concatenate(vv), const)

        # gain magnitude LMI [[tau I, Y], [Y^T, P]]
        gi, gj, gc, gv = [], [], [], []
        for d in range(3):
            gi.append([d]); gj.append([d]); gc.append([tau_vars[j]]); gv.append([1.0])
        # lower-left block rows 3..9, cols 0..2: Y^T entry (3+m, a) = Y[a, m]
        mm, aa = np.meshgrid(np.arange(NX), np.arange(3), indexing="ij")
        gi.append((3 + mm).ravel()); gj.append(aa.ravel())
        gc.append(Y_vars[j].T.ravel()); gv.append(np.ones(3 * NX))
        gi.append(3 + K7); gj.append(3 + L7)
        gc.append(P_blocks[j].packed); gv.append(np.ones(n_pk))
        prog.add_psd_block(3 + NX, np.concatenate(gi), np.concatenate(gj),
                           np.concatenate(gc), np.concatenate(gv))

    # terminal epigraph on the splash position block
    Mt = Sinv @ stoch.return_map @ S
    M13 = Mt[:3]
    C = congruence_packed(M13)                # (6, 28)
    K3, L3 = _tri_pairs(3)
    ei = [K3, np.repeat(K3, n_pk)]
    ej = [L3, np.repeat(L3, n_pk)]
    cc = [np.full(len(K3), tau_r), np.broadcast_to(P_blocks[-1].packed[None, :], C.shape).ravel()]
    vv = [(K3 == L3).astype(float), -C.ravel()]
    prog.add_psd_block(3, np.concatenate(ei), np.concatenate(ej),
                       np.concatenate(cc), np.concatenate(vv))

    handles = dict(P=P_blocks, Y=Y_vars, tau=tau_vars, tau_r=tau_r,
                   S=S, alpha_scale=a_s, scales=scales)
    return prog, handles


def solve_and_recover(prog: ConicProgram, handles: dict, stoch: StochasticModel,
                      backend: str = "clarabel", tol: float = 1e-8,
                      chance: ChanceSpec | None = None) -> CovarianceSchedule:
    """Solve the SDP, recover gains K = Y P^-1 and verify tightness.

    The closed-loop covariance is re-propagated with the equality
    recursion using the recovered gains; the maximum relative Frobenius
    gap against the SDP covariances is reported as `tightness_gap`.
    """
    rep = prog.solve(backend=backend, tol=tol)
    if rep.status != OPTIMAL:
        raise RuntimeError(f"covariance SDP not solved: {rep.status} ({rep.detail})")
    S = handles["S"]
    a_s = handles["alpha_scale"]
    sr = handles["scales"][0]
    N = len(stoch.t)

    P = np.empty((N, NX, NX))
    for j, blk in enumerate(handles["P"]):
        P[j] = S @ blk.unpack(rep.x) @ S
    Y = np.empty((N - 1, 3, NX))
    K = np.empty((N - 1, 3, NX))
    warnings = 0
    for j in range(N - 1):
        Yt = rep.x[handles["Y"][j]]
        Y[j] = a_s * Yt @ S                   # physical Y = K P
        Pj = P[j]
        cond = np.linalg.cond(Pj)
        if cond > 1e12:
            warnings += 1
            K[j] = Y[j] @ np.linalg.pinv(Pj, rcond=1e-12)
        else:
            K[j] = np.linalg.solve(Pj.T, Y[j].T).T
    tau = rep.x[handles["tau"]] * a_s**2
    tau_r = float(rep.x[handles["tau_r"]]) * sr**2

    # forward equality recursion with the recovered gains
    P_fwd = np.empty_like(P)
    P_fwd[0] = P[0]
    gap = 0.0
    for j in range(N - 1):
        Acl = stoch.A[j] - stoch.B[j] @ skew(stoch.nu[j]) @ K[j]
        P_fwd[j + 1] = Acl @ P_fwd[j] @ Acl.T + stoch.Q[j]
        P_fwd[j + 1] = 0.5 * (P_fwd[j + 1] + P_fwd[j + 1].T)
        denom = np.linalg.norm(P_fwd[j + 1])
        gap = max(gap, np.linalg.norm(P[j + 1] - P_fwd[j + 1]) / denom)

    # return-phase covariance history (no noise, no control)
    NR = len(stoch.t_return)
    P_ret = np.empty((NR, NX, NX))
    P_ret[0] = P_fwd[-1]
    for j in range(NR - 1):
        P_ret[j + 1] = stoch.A_return[j] @ P_ret[j] @ stoch.A_return[j].T
    return CovarianceSchedule(
        t=stoch.t, P=P, Y=Y, K=K, tau=tau, tau_r=tau_r, P_forward=P_fwd,
        tightness_gap=float(gap), P_return=P_ret, t_return=stoch.t_return,
        mu=stoch.mu, nu=stoch.nu, splash_state=stoch.splash_state,
        g_v=stoch.g_v, chance=chance, solve_wall_time=rep.wall_time,
        condition_warnings=warnings)


def local_horizontal_basis(r_splash):
    """East/north unit vectors of the horizontal plane at a ground point."""
    up = r_splash / np.linalg.norm(r_splash)
    zhat = np.array([0.0, 0.0, 1.0])
    east = np.cross(zhat, up)
    if np.linalg.norm(east) < 1e-12:
        east = np.array([1.0, 0.0, 0.0])
    east = east / np.linalg.norm(east)
    north = np.cross(up, east)
    return east, north


def terminal_footprint_stats(schedule: CovarianceSchedule, confidence: float = 0.95):
    """95 percent splash-down ellipse from the predicted covariance.

    Projects the terminal position covariance onto the local horizontal
    plane; returns (semi-major, semi-minor, orientation) with semi-axes
    sqrt(chi2_2(confidence) * eigenvalue) in meters and the orientation
    of the major axis measured from east toward north in radians.
    """
    from scipy.stats import chi2

    cov3 = schedule.terminal_position_cov
    east, north = local_horizontal_basis(schedule.splash_state[:3])
    B = np.stack([east, north], axis=1)
    cov2 = B.T @ cov3 @ B
    w, V = np.linalg.eigh(cov2)
    k = chi2.ppf(confidence, 2)
    semi_minor, semi_major = np.sqrt(np.maximum(k * w, 0.0))
    major_vec = V[:, 1]
    orientation = np.arctan2(major_vec[1], major_vec[0])
    return semi_major, semi_minor, orientation


def open_loop_terminal_lambda_max(stoch: StochasticModel, P0: np.ndarray) -> float:
    """Largest eigenvalue of the splash position covariance with zero gains."""
    P = np.asarray(P0, dtype=float)
    for j in range(len(stoch.t) - 1):
        P = stoch.A[j] @ P @ stoch.A[j].T + stoch.Q[j]
    Pr = stoch.return_map @ P @ stoch.return_map.T
    return float(np.linalg.eigvalsh(Pr[:3, :3]).max())

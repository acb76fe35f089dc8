"""Sequential convex optimization of the multi-phase ascent.

Each iteration linearizes the dynamics, path and boundary constraints
around the current reference, transcribes them with Radau collocation,
and solves the resulting second-order cone program.  Virtual controls
on the dynamics and virtual buffers on the linearized boundary
conditions keep every subproblem feasible; both are heavily penalized
so they vanish at convergence.  The nonconvex unit-thrust-direction
constraint is relaxed to ||u|| <= u_N, which is tight at the optimum.

The reference is updated by filtering (a weighted average of the last
K solutions) and the iteration stops when the solution change, the
nonlinear collocation defect, and the virtual buffers are all below
their tolerances.

All decision variables are affinely scaled to O(1) before solver
handoff; the penalty weights and the convergence tolerances apply to
the scaled quantities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import collocation as col
from .conic import OPTIMAL, ConicProgram, SolveReport
from .vehicle import IDX_M, IDX_R, IDX_V, NX, Phase, VehicleModel


class ScvxError(RuntimeError):
    pass


@dataclass
class ScvxConfig:
    lambda_q: float = 1.0e4
    lambda_w: float = 1.0e4
    lambda_delta: float = 1.0e-3
    trust_fraction: float = 0.05          # delta_max as a fraction of the reference duration
    filter_weights: tuple = (6 / 11, 3 / 11, 2 / 11)
    eps_tol: float = 1.0e-4               # criterion (i), scaled state change
    eps_f: float = 1.0e-6                 # criteria (ii)/(iii), defect and buffers
    max_iterations: int = 30
    homotopy_steps: int = 5
    u_scale: float = 50.0
    backend: str = "clarabel"
    solver_tol: float = 1.0e-9
    duration_bounds: dict = field(default_factory=lambda: {
        3: (5.0, 2500.0), 4: (50.0, 8000.0), 5: (5.0, 2500.0), 6: (200.0, 6000.0)})
    seed_durations: dict = field(default_factory=lambda: {
        3: 300.0, 4: 2500.0, 5: 500.0, 6: 2500.0})
    heat_flux_relax_weight: float = 1.0e-2   # active only when a plan requests relaxation

    def validate(self):
        if self.lambda_q <= 0 or self.lambda_w <= 0:
            raise ScvxError("virtual-variable penalties must be positive")
        w = np.asarray(self.filter_weights)
        if np.any(w <= 0) or not np.isclose(w.sum(), 1.0):
            raise ScvxError("filter weights must be positive and sum to one")


@dataclass
class PhaseNodes:
    """One phase of a (reference or solved) trajectory."""

    phase_index: int
    mesh: col.PhaseMesh
    s: float                     # duration [s]
    t0: float                    # global start time [s]
    x: np.ndarray                # (n_nodes, 7) physical state
    u: np.ndarray | None         # (n_colloc, 3) physical control accel
    u_n: np.ndarray | None       # (n_colloc,) control magnitude variable
    engine_t0: float = 0.0       # engine-law time at phase start

    @property
    def node_times(self):
        return self.t0 + self.s * self.mesh.state_tau()

    @property
    def colloc_times(self):
        return self.t0 + self.s * self.mesh.colloc_tau()

    def interp_x(self, t):
        tau = np.clip((np.asarray(t, dtype=float) - self.t0) / self.s, 0.0, 1.0)
        return col.interpolate_phase(self.mesh, self.x, tau)

    def interp_u(self, t):
        tau = np.clip((np.asarray(t, dtype=float) - self.t0) / self.s, 0.0, 1.0)
        return col.interpolate_controls(self.mesh, self.u, tau)


@dataclass
class Trajectory:
    phases: list[PhaseNodes]
    objective: float = np.nan
    converged: bool = False
    iterations: int = 0
    virtual_control_norm: float = np.nan
    virtual_buffer_norm: float = np.nan
    log: list = field(default_factory=list)

    def phase(self, index: int) -> PhaseNodes:
        for p in self.phases:
            if p.phase_index == index:
                return p
        raise KeyError(index)

    @property
    def final_mass(self):
        upper = [p for p in self.phases if p.phase_index <= 5]
        return upper[-1].x[-1, IDX_M]

    @property
    def splash_state(self):
        return self.phase(6).x[-1]

    @property
    def splash_latitude(self):
        r = self.splash_state[IDX_R]
        return np.arcsin(r[2] / np.linalg.norm(r))


@dataclass
class PlanEntry:
    phase: Phase
    mesh: col.PhaseMesh
    duration: float | None        # fixed duration, or None -> free
    engine_t0: float = 0.0

    @property
    def free(self):
        return self.duration is None


@dataclass
class PhasePlan:
    """What to assemble: phases, boundary set, initial state."""

    entries: list[PlanEntry]
    x_init: np.ndarray
    orbital_bc: bool = True
    splash_bc: bool = False
    splash_latitude: float | None = None
    mass_drop_after: int | None = None    # chain position of the stage burn, if any
    return_entry: int | None = None       # index into entries of the return phase
    heat_flux_relax: bool = False
    m_dry3: float = 0.0

    @property
    def chain(self):
        """Indices of chronologically chained entries (return excluded)."""
        return [i for i in range(len(self.entries)) if i != self.return_entry]


def nominal_plan(model: VehicleModel, meshes: dict[int, col.PhaseMesh],
                 splash_latitude: float | None,
                 include_return: bool = True) -> PhasePlan:
    ph = {p.index: p for p in model.phases()}
    entries = [
        PlanEntry(ph[1], meshes[1], model.stage3.burn_time),
        PlanEntry(ph[2], meshes[2], model.mission.dt_coast2),
        PlanEntry(ph[3], meshes[3], None),
        PlanEntry(ph[4], meshes[4], None),
        PlanEntry(ph[5], meshes[5], None),
    ]
    if include_return:
        entries.append(PlanEntry(ph[6], meshes[6], None))
    return PhasePlan(entries, model.x0, orbital_bc=True, splash_bc=include_return,
                     splash_latitude=splash_latitude, mass_drop_after=0,
                     return_entry=5 if include_return else None,
                     m_dry3=model.mission.m_dry3)


def mpc_plan(model: VehicleModel, meshes: dict[int, col.PhaseMesh], t_elapsed: float,
             x_measured: np.ndarray, p1_order: int,
             splash_latitude: float) -> PhasePlan:
    ph = {p.index: p for p in model.phases()}
    remaining = model.stage3.burn_time - t_elapsed
    entries = [
        PlanEntry(ph[1], col.PhaseMesh(1, 1, p1_order), remaining, engine_t0=t_elapsed),
        PlanEntry(ph[2], meshes[2], model.mission.dt_coast2),
        PlanEntry(ph[3], meshes[3], None),
        PlanEntry(ph[4], meshes[4], None),
        PlanEntry(ph[5], meshes[5], None),
        PlanEntry(ph[6], meshes[6], None),
    ]
    return PhasePlan(entries, x_measured, orbital_bc=True, splash_bc=True,
                     splash_latitude=splash_latitude, mass_drop_after=0,
                     return_entry=5, heat_flux_relax=True, m_dry3=model.mission.m_dry3)


def continuation_plan(model: VehicleModel, meshes: dict[int, col.PhaseMesh],
                      x_stack: np.ndarray) -> PhasePlan:
    """Orbit-insertion re-optimization from a post-separation stack state."""
    ph = {p.index: p for p in model.phases()}
    entries = [
        PlanEntry(ph[2], meshes[2], model.mission.dt_coast2),
        PlanEntry(ph[3], meshes[3], None),
        PlanEntry(ph[4], meshes[4], None),
        PlanEntry(ph[5], meshes[5], None),
    ]
    return PhasePlan(entries, x_stack, orbital_bc=True, splash_bc=False)


# ---------------------------------------------------------------------------
# subproblem assembly
# ---------------------------------------------------------------------------


@dataclass
class _Layout:
    """Variable bookkeeping of one assembled subproblem."""

    x_scale: np.ndarray
    u_scale: float
    x_vars: list[np.ndarray]
    u_vars: list
    un_vars: list
    q_pos: list
    q_neg: list
    s_vars: list
    s_refs: list[float]
    w_vars: tuple | None = None
    delta_vars: dict = field(default_factory=dict)
    delta_qdot: int | None = None

    def extract(self, plan: PhasePlan, rep: SolveReport, t_start: float) -> Trajectory:
        phases = []
        s_vals = []
        for i, e in enumerate(plan.entries):
            s_vals.append(e.duration if not e.free
                          else rep.x[self.s_vars[i]] * self.s_refs[i])
        t0 = t_start
        starts = {}
        for i in plan.chain:
            starts[i] = t0
            t0 += s_vals[i]
        if plan.return_entry is not None:
            stage = plan.chain[plan.mass_drop_after]
            starts[plan.return_entry] = starts[stage] + s_vals[stage]
        for i, e in enumerate(plan.entries):
            x = rep.x[self.x_vars[i]] * self.x_scale
            u = un = None
            if e.phase.propelled:
                u = rep.x[self.u_vars[i]] * self.u_scale
                un = rep.x[self.un_vars[i]] * self.u_scale
            phases.append(PhaseNodes(e.phase.index, e.mesh, s_vals[i], starts[i],
                                     x, u, un, engine_t0=e.engine_t0))
        q_mag = max(float(np.max(rep.x[self.q_pos[i]] + rep.x[self.q_neg[i]]))
                    for i in range(len(plan.entries)))
        traj = Trajectory(phases, objective=rep.objective)
        traj.virtual_control_norm = max(q_mag, 0.0)
        if self.w_vars is not None:
            wp, wm = self.w_vars
            traj.virtual_buffer_norm = max(float(np.max(rep.x[wp] + rep.x[wm])), 0.0)
        else:
            traj.virtual_buffer_norm = 0.0
        return traj


def _linearize(model: VehicleModel, e: PlanEntry, xr, ur, sr):
    """Reference dynamics f, Jacobian A and engine data at collocation nodes."""
    nc = e.mesh.n_colloc
    xc = xr[:nc]
    uc = ur if e.phase.propelled else None
    t = e.engine_t0 + sr * e.mesh.colloc_tau()
    f = model.dynamics(xc, uc, e.phase, t)
    A, _ = model.jacobians(xc, uc, e.phase, t)
    return xc, uc, t, f, A


def build_subproblem(model: VehicleModel, plan: PhasePlan, ref: Trajectory,
                     cfg: ScvxConfig) -> tuple[ConicProgram, _Layout]:
    """Assemble the convex subproblem linearized around `ref`."""
    cfg.validate()
    for p in ref.phases:
        if not np.all(np.isfinite(p.x)) or (p.u is not None and not np.all(np.isfinite(p.u))):
            raise ScvxError("reference trajectory contains non-finite values")
        if p.s <= 0:
            raise ScvxError("reference durations must be positive")

    ms = model.mission
    x_scale = np.array([ms.a_des] * 3 + [ms.v_des] * 3 + [model.x0[IDX_M]])
    u_s = cfg.u_scale

    prog = ConicProgram()
    lay = _Layout(x_scale, u_s, [], [], [], [], [], [], [])

    for i, e in enumerate(plan.entries):
        n, nc = e.mesh.n_state_nodes, e.mesh.n_colloc
        lay.x_vars.append(prog.add_var(f"x{i}", (n, NX)))
        if e.phase.propelled:
            lay.u_vars.append(prog.add_var(f"u{i}", (nc, 3)))
            lay.un_vars.append(prog.add_var(f"un{i}", (nc,), lb=0.0, ub=3.0))
        else:
            lay.u_vars.append(None)
            lay.un_vars.append(None)
        lay.q_pos.append(prog.add_var(f"qp{i}", (nc, NX), lb=0.0))
        lay.q_neg.append(prog.add_var(f"qm{i}", (nc, NX), lb=0.0))
        sref = ref.phases[i].s
        lay.s_refs.append(sref)
        if e.free:
            lo, hi = cfg.duration_bounds.get(e.phase.index, (1.0, 1e4))
            lay.s_vars.append(prog.add_var(f"s{i}", (), lb=lo / sref, ub=hi / sref))
        else:
            lay.s_vars.append(None)
        # phase 6 also gets a soft trust region: without one its duration
        # is nearly indifferent and drifts the reference into the ground
        if e.free and (e.phase.trust_region or e.phase.kind == "return"):
            lay.delta_vars[i] = prog.add_var(f"delta{i}", (), lb=0.0, ub=cfg.trust_fraction)

    if plan.heat_flux_relax:
        lay.delta_qdot = prog.add_var("delta_qdot", (), lb=0.0)

    n_buf = (4 if plan.orbital_bc else 0) + (1 if plan.splash_bc else 0)
    if n_buf:
        wp = prog.add_var("wp", (n_buf,), lb=0.0)
        wm = prog.add_var("wm", (n_buf,), lb=0.0)
        lay.w_vars = (wp, wm)

    # objective: -m(t_f) + penalties (all on scaled, dimensionless quantities)
    obj_cols, obj_vals = [], []
    last_upper = [i for i in plan.chain if plan.entries[i].phase.index <= 5][-1]
    obj_cols.append(np.array([lay.x_vars[last_upper][-1, IDX_M]]))
    obj_vals.append(np.array([-1.0]))
    for i in range(len(plan.entries)):
        obj_cols.extend([lay.q_pos[i].ravel(), lay.q_neg[i].ravel()])
        obj_vals.extend([np.full(lay.q_pos[i].size, cfg.lambda_q)] * 2)
    if n_buf:
        obj_cols.extend([wp, wm])
        obj_vals.extend([np.full(n_buf, cfg.lambda_w)] * 2)
    for i, d in lay.delta_vars.items():
        obj_cols.append(np.array([d]))
        obj_vals.append(np.array([cfg.lambda_delta]))
    if lay.delta_qdot is not None:
        obj_cols.append(np.array([lay.delta_qdot]))
        obj_vals.append(np.array([cfg.heat_flux_relax_weight]))
    prog.minimize_terms(np.concatenate(obj_cols), np.concatenate(obj_vals))

    # dynamics, path constraints, trust regions per phase
    for i, e in enumerate(plan.entries):
        rp = ref.phases[i]
        _assemble_phase(model, prog, lay, plan, cfg, i, e, rp)

    # initial state
    first = plan.chain[0]
    prog.add_eq_block(np.arange(NX), lay.x_vars[first][0], np.ones(NX),
                      np.asarray(plan.x_init) / x_scale)

    # interphase linkage (explicit equality rows)
    for a, b in zip(plan.chain[:-1], plan.chain[1:]):
        xa, xb = lay.x_vars[a][-1], lay.x_vars[b][0]
        rows = np.arange(2 * NX) % NX
        cols = np.concatenate([xa, xb])
        vals = np.concatenate([np.ones(NX), -np.ones(NX)])
        rhs = np.zeros(NX)
        if plan.mass_drop_after is not None and a == plan.chain[plan.mass_drop_after]:
            rhs[IDX_M] = plan.m_dry3 / x_scale[IDX_M]
        prog.add_eq_block(rows, cols, vals, rhs)

    if plan.return_entry is not None:
        stage = plan.chain[plan.mass_drop_after]
        xa, xb = lay.x_vars[stage][-1], lay.x_vars[plan.return_entry][0]
        rows = np.arange(12) % 6
        prog.add_eq_block(rows, np.concatenate([xa[:6], xb[:6]]),
                          np.concatenate([np.ones(6), -np.ones(6)]), np.zeros(6))
        prog.add_eq_block([0], [xb[IDX_M]], [1.0],
                          [plan.m_dry3 / x_scale[IDX_M]])

    _assemble_boundaries(model, prog, lay, plan, ref)
    return prog, lay


def _assemble_phase(model, prog, lay, plan, cfg, i, e: PlanEntry, rp: PhaseNodes):
    mesh = e.mesh
    x_scale, u_s = lay.x_scale, lay.u_scale
    n, nc, p = mesh.n_state_nodes, mesh.n_colloc, mesh.p
    sr = rp.s
    half_w = mesh.colloc_half_widths()          # (nc,), per-segment dtau/2

    xc, uc, tc, f, J = _linearize(model, e, rp.x, rp.u, sr)
    # scaled linearization: x' = Atil x + Btil u + Sigtil s + ctil + q
    Atil = sr * J * (x_scale[None, None, :] / x_scale[None, :, None])
    xtil = xc / x_scale
    Sigtil = f * (sr / x_scale)          # coefficient of s/sr
    ctil = -np.einsum("nij,nj->ni", Atil, xtil)
    if e.phase.propelled:
        butil = sr * u_s / x_scale[IDX_V]   # diagonal of the velocity-row control block
        util = uc / u_s
        ctil[:, IDX_V] -= butil[None, :] * util

    xv = lay.x_vars[i]
    rows, cols, vals = [], [], []

    # D part: rows (g, d) ; g = k*p + ilocal
    D = col.differentiation_matrix(p)
    for k in range(mesh.h):
        g0 = k * p
        sl = mesh.segment_state_slice(k)
        r_idx = (np.arange(p)[:, None, None] + g0) * NX + np.arange(NX)[None, None, :]
        c_idx = np.broadcast_to(xv[sl][None, :, :], (p, p + 1, NX))
        v = np.broadcast_to(D[:, :, None], (p, p + 1, NX))
        rows.append(np.broadcast_to(r_idx, v.shape).ravel())
        cols.append(c_idx.ravel())
        vals.append(v.ravel())

    # -(dtau/2) * Atil x
    g = np.arange(nc)
    hw = half_w[:, None, None]
    r_idx = (g[:, None, None] * NX + np.arange(NX)[None, :, None])
    c_idx = np.broadcast_to(xv[g][:, None, :], (nc, NX, NX))
    rows.append(np.broadcast_to(r_idx, (nc, NX, NX)).ravel())
    cols.append(c_idx.ravel())
    vals.append((-hw * Atil).ravel())

    # -(dtau/2) * Btil u (velocity rows, diagonal block)
    if e.phase.propelled:
        uv = lay.u_vars[i]
        r_idx = g[:, None] * NX + (3 + np.arange(3))[None, :]
        rows.append(r_idx.ravel())
        cols.append(uv.ravel())
        vals.append((-half_w[:, None] * butil[None, :]).ravel())

    # -(dtau/2) * Sigtil s  (or fold into rhs when duration fixed)
    rhs = half_w[:, None] * ctil
    if e.free:
        sv = lay.s_vars[i]
        rows.append((g[:, None] * NX + np.arange(NX)[None, :]).ravel())
        cols.append(np.full(nc * NX, sv))
        vals.append((-half_w[:, None] * Sigtil).ravel())
    else:
        rhs = rhs + half_w[:, None] * Sigtil

    # virtual control
    qp, qm = lay.q_pos[i], lay.q_neg[i]
    r_idx = (g[:, None] * NX + np.arange(NX)[None, :]).ravel()
    hw7 = np.repeat(half_w, NX)
    rows.extend([r_idx, r_idx])
    cols.extend([qp.ravel(), qm.ravel()])
    vals.extend([-hw7, hw7])

    prog.add_eq_block(np.concatenate(rows), np.concatenate(cols),
                      np.concatenate(vals), rhs.ravel())

    if e.phase.propelled:
        _propelled_rows(model, prog, lay, i, e, rp, xc, tc)
    if e.phase.index <= 5:
        _heat_flux_rows(model, prog, lay, plan, i, xc)

    # soft trust region on the duration
    if i in lay.delta_vars:
        sv, dv = lay.s_vars[i], lay.delta_vars[i]
        prog.add_le_block([0, 0], [sv, dv], [1.0, -1.0], [1.0])
        prog.add_le_block([0, 0], [sv, dv], [-1.0, -1.0], [-1.0])


def _propelled_rows(model, prog, lay, i, e, rp, xc, tc):
    """SOC relaxation ||u|| <= u_N and the linearized magnitude tie."""
    mesh = e.mesh
    x_scale, u_s = lay.x_scale, lay.u_scale
    nc = mesh.n_colloc
    xv, uv, unv = lay.x_vars[i], lay.u_vars[i], lay.un_vars[i]

    for gidx in range(nc):
        prog.add_soc_block([unv[gidx]], [1.0], 0.0,
                           [0, 1, 2], uv[gidx], [1.0, 1.0, 1.0], np.zeros(3))

    eng = e.phase.engine
    rnorm = np.linalg.norm(xc[:, IDX_R], axis=1)
    rhat = xc[:, IDX_R] / rnorm[:, None]
    _, pbar, _, dp_dh = model.env.atmosphere.evaluate(rnorm - model.env.r_earth)
    tvac = eng.thrust_vac(tc)
    tnet = tvac - pbar * eng.exit_area
    mbar = xc[:, IDX_M]
    grad = eng.exit_area * dp_dh / mbar          # d(u_N)/dh magnitude

    # u_N + (Tnet/mbar^2) m + (Ae dp/dh / mbar) rhat.r = 2 Tnet/mbar + grad rhat.rbar
    g = np.arange(nc)
    rows = [g, g]
    cols = [unv, xv[g, IDX_M]]
    vals = [np.full(nc, u_s), tnet / mbar**2 * x_scale[IDX_M]]
    rows.append(np.repeat(g, 3))
    cols.append(xv[:nc, 0:3].ravel())
    vals.append((grad[:, None] * rhat * x_scale[None, 0:3]).ravel())
    rhs = 2.0 * tnet / mbar + grad * np.einsum("ni,ni->n", rhat, xc[:, IDX_R])
    prog.add_eq_block(np.concatenate(rows), np.concatenate(cols),
                      np.concatenate([v / u_s for v in vals]), rhs / u_s)


def _heat_flux_rows(model, prog, lay, plan, i, xc):
    """Linearized heat-flux bound at every collocation node of phases 1-5."""
    qmax = model.mission.qdot_max
    x_scale = lay.x_scale
    nc = xc.shape[0]
    xv = lay.x_vars[i]
    qbar, dq_dr, dq_dv = model.heat_flux(xc, gradients=True)

    g = np.arange(nc)
    rows = [np.repeat(g, 3), np.repeat(g, 3)]
    cols = [xv[:nc, 0:3].ravel(), xv[:nc, 3:6].ravel()]
    vals = [(dq_dr * x_scale[None, 0:3]).ravel() / qmax,
            (dq_dv * x_scale[None, 3:6]).ravel() / qmax]
    rhs = 1.0 - qbar / qmax + (np.einsum("ni,ni->n", dq_dr, xc[:, IDX_R])
                               + np.einsum("ni,ni->n", dq_dv, xc[:, IDX_V])) / qmax
    if plan.heat_flux_relax:
        rows.append(g)
        cols.append(np.full(nc, lay.delta_qdot))
        vals.append(np.full(nc, -1.0))
    prog.add_le_block(np.concatenate(rows), np.concatenate(cols),
                      np.concatenate(vals), rhs)


def _assemble_boundaries(model, prog, lay, plan: PhasePlan, ref: Trajectory):
    """Linearized terminal conditions with virtual buffers.

    Rows are normalized by their natural magnitudes so the buffers are
    dimensionless; the splash-down latitude condition is linear and
    enters exactly (no buffer).
    """
    ms = model.mission
    x_scale = lay.x_scale
    buf = 0
    if plan.orbital_bc:
        last = [i for i in plan.chain if plan.entries[i].phase.index <= 5][-1]
        xv = lay.x_vars[last][-1]
        xbar = ref.phases[last].x[-1]
        rb, vb = xbar[IDX_R], xbar[IDX_V]
        wp, wm = lay.w_vars
        a2, v2 = ms.a_des**2, ms.v_des**2
        hsc = np.sqrt(ms.mu * ms.a_des)
        rows_spec = [
            # 2 rbar.r = a^2 + rbar.rbar
            (xv[0:3], 2.0 * rb * x_scale[0:3], a2 + rb @ rb, a2),
            (xv[3:6], 2.0 * vb * x_scale[3:6], v2 + vb @ vb, v2),
            (np.concatenate([xv[0:3], xv[3:6]]),
             np.concatenate([vb * x_scale[0:3], rb * x_scale[3:6]]),
             rb @ vb, ms.a_des * ms.v_des),
            (np.array([xv[0], xv[1], xv[3], xv[4]]),
             np.array([vb[1], -vb[0], -rb[1], rb[0]]) * x_scale[[0, 1, 3, 4]],
             ms.h_z_des + vb[1] * rb[0] - vb[0] * rb[1], hsc),
        ]
        for cols, vals, rhs, scale in rows_spec:
            n = len(cols) + 2
            prog.add_eq_block(np.zeros(n, dtype=int),
                              np.concatenate([cols, [wp[buf], wm[buf]]]),
                              np.concatenate([vals / scale, [-1.0, 1.0]]),
                              [rhs / scale])
            buf += 1
    if plan.splash_bc:
        re_ = plan.return_entry
        xv = lay.x_vars[re_][-1]
        rbar = ref.phases[re_].x[-1, IDX_R]
        wp, wm = lay.w_vars
        scale = ms.r_earth**2
        cols = np.concatenate([xv[0:3], [wp[buf], wm[buf]]])
        vals = np.concatenate([2.0 * rbar * x_scale[0:3] / scale, [-1.0, 1.0]])
        rhs = (ms.r_earth**2 + rbar @ rbar) / scale
        prog.add_eq_block(np.zeros(5, dtype=int), cols, vals, [rhs])
        buf += 1
        if plan.splash_latitude is not None:
            z_des = ms.r_earth * np.sin(plan.splash_latitude)
            prog.add_eq_block([0], [xv[2]], [x_scale[2] / ms.r_earth],
                              [z_des / ms.r_earth])


# ---------------------------------------------------------------------------
# iteration driver
# ---------------------------------------------------------------------------


def defect_norms(model: VehicleModel, traj: Trajectory, x_scale=None) -> dict[int, float]:
    """Max scaled nonlinear collocation defect per phase.

    Evaluates sum_j D_ij x_j - (dtau/2) s f(x_i, u_i) with the true
    nonlinear dynamics on the scaled state; the convergence criterion
    compares the result against eps_f.
    """
    if x_scale is None:
        ms = model.mission
        x_scale = np.array([ms.a_des] * 3 + [ms.v_des] * 3 + [model.x0[IDX_M]])
    phases = {p.index: p for p in model.phases()}
    out = {}
    for pn in traj.phases:
        mesh = pn.mesh
        phase = phases[pn.phase_index]
        nc = mesh.n_colloc
        t = pn.engine_t0 + pn.s * mesh.colloc_tau()
        f = model.dynamics(pn.x[:nc], pn.u, phase, t)
        ftil = pn.s * f / x_scale[None, :]
        D = col.differentiation_matrix(mesh.p)
        worst = 0.0
        xtil = pn.x / x_scale[None, :]
        for k in range(mesh.h):
            sl = mesh.segment_state_slice(k)
            d = D @ xtil[sl] - 0.5 * mesh.seg_width(k) * ftil[k * mesh.p:(k + 1) * mesh.p]
            worst = max(worst, float(np.abs(d).max()))
        out[pn.phase_index] = worst
    return out


def _filtered_reference(history: list[Trajectory], weights) -> Trajectory:
    """Weighted sum of the most recent solutions (newest first)."""
    phases = []
    for ip in range(len(history[0].phases)):
        parts = []
        for k, a in enumerate(weights):
            src = history[min(k, len(history) - 1)].phases[ip]
            parts.append((a, src))
        base = parts[0][1]
        x = sum(a * p.x for a, p in parts)
        u = sum(a * p.u for a, p in parts) if base.u is not None else None
        un = sum(a * p.u_n for a, p in parts) if base.u_n is not None else None
        s = sum(a * p.s for a, p in parts)
        phases.append(PhaseNodes(base.phase_index, base.mesh, s, base.t0, x, u, un,
                                 engine_t0=base.engine_t0))
    return Trajectory(phases)


def iterate(model: VehicleModel, plan: PhasePlan, cfg: ScvxConfig,
            initial: Trajectory, t_start: float = 0.0,
            max_iterations: int | None = None,
            require_convergence: bool = False) -> Trajectory:
    """Run the solve-filter-relinearize loop until the three criteria hold.

    Returns the last solution with `converged` set; `log` carries one
    row per iteration: (iter, objective, step_inf, defect_inf, q_inf,
    w_inf, wall_s, durations...).
    """
    cfg.validate()
    ms = model.mission
    x_scale = np.array([ms.a_des] * 3 + [ms.v_des] * 3 + [model.x0[IDX_M]])
    cap = max_iterations if max_iterations is not None else cfg.max_iterations

    history = [initial]
    ref = initial
    log = []
    best = None
    for it in range(cap):
        t0 = time.perf_counter()
        prog, lay = build_subproblem(model, plan, ref, cfg)
        rep = prog.solve(backend=cfg.backend, tol=cfg.solver_tol)
        if rep.status != OPTIMAL:
            raise ScvxError(
                f"subproblem not optimal at iteration {it}: {rep.status} ({rep.detail}); "
                "virtual variables should prevent this")
        sol = lay.extract(plan, rep, t_start)
        step = max(float(np.abs(s.x / x_scale - r.x / x_scale).max())
                   for s, r in zip(sol.phases, ref.phases))
        defects = defect_norms(model, sol, x_scale)
        dmax = max(defects.values())
        wall = time.perf_counter() - t0
        row = dict(iteration=it, objective=rep.objective, step=step, defect=dmax,
                   q_norm=sol.virtual_control_norm, w_norm=sol.virtual_buffer_norm,
                   wall_s=wall,
                   durations={p.phase_index: p.s for p in sol.phases})
        log.append(row)
        history.insert(0, sol)
        best = sol
        if (step < cfg.eps_tol and dmax < cfg.eps_f
                and sol.virtual_buffer_norm < cfg.eps_f):
            sol.converged = True
            sol.iterations = it + 1
            sol.log = log
            return sol
        ref = _filtered_reference(history, cfg.filter_weights)
    best.converged = False
    best.iterations = cap
    best.log = log
    if require_convergence:
        raise ScvxError(f"no convergence within {cap} iterations "
                        f"(step={log[-1]['step']:.2e}, defect={log[-1]['defect']:.2e}, "
                        f"w={log[-1]['w_norm']:.2e})")
    return best


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------


def initial_guess(model: VehicleModel, plan: PhasePlan, cfg: ScvxConfig,
                  mode: str = "propagate") -> Trajectory:
    """Structurally complete seed trajectory.

    "propagate": integrate the nonlinear dynamics with velocity-aligned
    thrust through the chained phases and ballistically for the return.
    "linear": straight-line interpolation of the states toward a
    target-orbit point with gravity-turn controls.
    """
    from .integrate import propagate, rk4_step

    ms = model.mission
    durations = []
    for e in plan.entries:
        durations.append(e.duration if not e.free
                         else cfg.seed_durations.get(e.phase.index, 300.0))

    phases_out = [None] * len(plan.entries)
    x0 = np.asarray(plan.x_init, dtype=float)

    if mode == "propagate":
        t0 = 0.0
        x_cur = x0
        stage_end = None
        for ci, i in enumerate(plan.chain):
            e = plan.entries[i]
            s = durations[i]
            mesh = e.mesh

            def f(x, t, e=e):
                u = None
                if e.phase.propelled:
                    tn = model.net_thrust(e.phase, e.engine_t0 + t, x)
                    v = x[IDX_V]
                    u = (tn / x[IDX_M]) * v / np.linalg.norm(v)
                return model.dynamics(x, u, e.phase, e.engine_t0 + t)

            n_fine = max(200, 4 * mesh.n_state_nodes)
            ts, xs = propagate(f, x_cur, 0.0, s, n_fine)
            node_t = s * mesh.state_tau()
            x_nodes = np.stack([np.interp(node_t, ts, xs[:, d]) for d in range(NX)], axis=1)
            u = un = None
            if e.phase.propelled:
                tcol = s * mesh.colloc_tau()
                xc = np.stack([np.interp(tcol, ts, xs[:, d]) for d in range(NX)], axis=1)
                tn = model.net_thrust(e.phase, e.engine_t0 + tcol, xc)
                un = tn / xc[:, IDX_M]
                vhat = xc[:, IDX_V] / np.linalg.norm(xc[:, IDX_V], axis=1)[:, None]
                u = un[:, None] * vhat
            phases_out[i] = PhaseNodes(e.phase.index, mesh, s, t0, x_nodes, u, un,
                                       engine_t0=e.engine_t0)
            if plan.mass_drop_after is not None and i == plan.chain[plan.mass_drop_after]:
                stage_end = xs[-1].copy()
            x_cur = xs[-1].copy()
            if plan.mass_drop_after is not None and i == plan.chain[plan.mass_drop_after]:
                x_cur[IDX_M] -= plan.m_dry3
            t0 += s
    else:
        # linear interpolation from x_init to a point on the target orbit
        lat0 = np.arcsin(x0[2] / np.linalg.norm(x0[IDX_R]))
        th = lat0 + np.deg2rad(30.0)
        r_f = ms.a_des * np.array([np.cos(th), 0.0, np.sin(th)])
        v_f = ms.v_des * np.array([-np.sin(th), 0.0, np.cos(th)])
        total = sum(durations[i] for i in plan.chain)
        t0 = 0.0
        x_cur_m = x0[IDX_M]
        stage_end = None
        for ci, i in enumerate(plan.chain):
            e = plan.entries[i]
            s = durations[i]
            mesh = e.mesh
            node_t = t0 + s * mesh.state_tau()
            a = node_t / total
            x_nodes = np.empty((mesh.n_state_nodes, NX))
            x_nodes[:, 0:3] = (1 - a)[:, None] * x0[None, IDX_R] + a[:, None] * r_f[None, :]
            x_nodes[:, 3:6] = (1 - a)[:, None] * x0[None, IDX_V] + a[:, None] * v_f[None, :]
            if e.phase.propelled:
                tcol_loc = s * mesh.colloc_tau()
                burned = e.phase.engine.burned_mass(e.engine_t0 + tcol_loc) \
                    - e.phase.engine.burned_mass(e.engine_t0)
                burned_n = e.phase.engine.burned_mass(e.engine_t0 + s * mesh.state_tau()) \
                    - e.phase.engine.burned_mass(e.engine_t0)
                x_nodes[:, IDX_M] = x_cur_m - burned_n
            else:
                x_nodes[:, IDX_M] = x_cur_m
            u = un = None
            if e.phase.propelled:
                tcol = e.engine_t0 + s * mesh.colloc_tau()
                xc = x_nodes[:mesh.n_colloc]
                tn = model.net_thrust(e.phase, tcol, xc)
                un = tn / xc[:, IDX_M]
                vhat = xc[:, IDX_V] / np.linalg.norm(xc[:, IDX_V], axis=1)[:, None]
                u = un[:, None] * vhat
            phases_out[i] = PhaseNodes(e.phase.index, mesh, s, t0, x_nodes, u, un,
                                       engine_t0=e.engine_t0)
            x_cur_m = x_nodes[-1, IDX_M]
            if plan.mass_drop_after is not None and i == plan.chain[plan.mass_drop_after]:
                stage_end = x_nodes[-1].copy()
                x_cur_m -= plan.m_dry3
            t0 += s

    if plan.return_entry is not None:
        i = plan.return_entry
        e = plan.entries[i]
        mesh = e.mesh
        x_r0 = stage_end.copy()
        x_r0[IDX_M] = plan.m_dry3
        phase6 = model.phase(6)

        def f6(x, t):
            return model.dynamics(x, None, phase6, t)

        # ballistic until ground (or the seed duration cap)
        s_cap = durations[i]
        h = s_cap / 2000.0
        xs = [x_r0]
        t = 0.0
        x_c = x_r0
        while t < 3.0 * s_cap:
            x_c = rk4_step(f6, x_c, t, h)
            t += h
            xs.append(x_c)
            if np.linalg.norm(x_c[IDX_R]) <= model.env.r_earth:
                break
        xs = np.asarray(xs)
        s6 = t if np.linalg.norm(xs[-1][IDX_R]) <= model.env.r_earth else s_cap
        ts = np.linspace(0.0, h * (len(xs) - 1), len(xs))
        node_t = s6 * mesh.state_tau()
        x_nodes = np.stack([np.interp(node_t, ts, xs[:, d]) for d in range(NX)], axis=1)
        stage_t0 = phases_out[plan.chain[plan.mass_drop_after]].t0 \
            + phases_out[plan.chain[plan.mass_drop_after]].s
        phases_out[i] = PhaseNodes(6, mesh, s6, stage_t0, x_nodes, None, None)

    return Trajectory(phases_out)


# ---------------------------------------------------------------------------
# nominal solve with splash-down homotopy
# ---------------------------------------------------------------------------


def simulate_return(model: VehicleModel, stage_end: np.ndarray, mesh: col.PhaseMesh,
                    t0: float, step: float = 0.5, t_max: float = 6000.0) -> PhaseNodes:
    """Ballistic spent-stage flight from burnout to ground, sampled on `mesh`."""
    from .integrate import rk4_step

    phase6 = model.phase(6)
    x = stage_end.copy()
    x[IDX_M] = model.mission.m_dry3

    def f6(xx, tt):
        return model.dynamics(xx, None, phase6, tt)

    xs = [x.copy()]
    t = 0.0
    while t < t_max:
        x = rk4_step(f6, x, t, step)
        t += step
        xs.append(x.copy())
        if np.linalg.norm(x[IDX_R]) <= model.env.r_earth:
            break
    xs = np.asarray(xs)
    ts = step * np.arange(len(xs))
    s6 = ts[-1]
    node_t = s6 * mesh.state_tau()
    x_nodes = np.stack([np.interp(node_t, ts, xs[:, d]) for d in range(NX)], axis=1)
    return PhaseNodes(6, mesh, s6, t0, x_nodes, None, None)


def solve_nominal(model: VehicleModel, meshes: dict[int, col.PhaseMesh],
                  cfg: ScvxConfig, seed_mode: str = "propagate"):
    """Full nominal solution.

    First the ascent is optimized without the return phase; then the
    spent-stage return is simulated ballistically and the splash-down
    latitude constraint is walked from its unconstrained value to the
    target in `homotopy_steps` continuation steps.

    Returns (trajectory, stages): stages is a list of (label, latitude
    or None, Trajectory) in solve order.
    """
    plan_a = nominal_plan(model, meshes, splash_latitude=None, include_return=False)
    seed = initial_guess(model, plan_a, cfg, mode=seed_mode)
    stages = []
    t_a = iterate(model, plan_a, cfg, seed, require_convergence=True)
    stages.append(("ascent", None, t_a))

    p1 = t_a.phase(1)
    ret = simulate_return(model, p1.x[-1], meshes[6], p1.t0 + p1.s)
    current = Trajectory(t_a.phases + [ret])
    phi_free = current.splash_latitude
    target = model.mission.phi_r_des
    steps = max(1, cfg.homotopy_steps)
    for k in range(1, steps + 1):
        phi_k = phi_free + (target - phi_free) * k / steps
        plan_k = nominal_plan(model, meshes, splash_latitude=phi_k)
        current = iterate(model, plan_k, cfg, current, require_convergence=(k == steps))
        stages.append((f"homotopy-{k}", phi_k, current))
    return current, stages

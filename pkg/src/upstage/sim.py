"""Stochastic closed-loop flight simulation and Monte Carlo campaigns.

The powered stage flight integrates the nonlinear equations of motion
with the Euler-Maruyama scheme; white acceleration noise of intensity
g_v enters the velocity rows only.  Three control modes are available:

  open-loop  - fly the nominal control profile as-is
  feedback   - rotate the nominal control by the multiplicative law
               u = (I + skew(alpha)) nu, alpha = K_j (x - mu_j), with
               the gain held over each synthesis interval
  mpc        - re-solve the guidance problem from the measured state
               on a shrinking grid at a fixed update period

After burnout the spent stage separates and returns ballistically
(4th-order Runge-Kutta, no noise); ground impact is located by
bisection to 1 m.  The payload capacity of each run is evaluated by
re-optimizing the orbit-insertion phases from the realized separation
state.

Monte Carlo runs are independent: run i draws from a dedicated RNG
stream seeded by SeedSequence([campaign_seed, i]), so results are
reproducible regardless of worker count or execution order.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import scvx
from .covariance import CovarianceSchedule
from .integrate import rk4_step
from .vehicle import IDX_M, IDX_R, IDX_V, NX, VehicleModel

MODES = ("open-loop", "feedback", "mpc")


@dataclass
class SimConfig:
    mode: str = "feedback"
    g_v: float = 0.0
    em_step: float = 0.05
    return_step: float = 0.5
    seed: int = 0
    n_runs: int = 1
    draw_initial: bool = True
    initial_covariance: np.ndarray | None = None
    mpc_period: float = 1.0
    mpc_min_order: int = 5
    mpc_iteration_cap: int = 3
    alpha_clamp: float = np.pi / 2
    max_return_time: float = 5000.0
    payload_continuation: bool = True
    dump_decimation: int = 0          # 0 -> no per-run trajectory dump
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_runs < 1:
            raise ValueError("run count must be at least 1")
        if self.mode == "mpc" and abs(self.mpc_period / self.em_step
                                      - round(self.mpc_period / self.em_step)) > 1e-9:
            raise ValueError("EM step must divide the update period")


@dataclass
class RunRecord:
    run_id: int
    payload: float
    splash_lat: float             # rad
    splash_lon: float             # rad
    max_heat_flux: float
    failed: bool
    t_impact: float = np.nan
    burnout_state: np.ndarray | None = None
    alpha_exceed_steps: int = 0
    alpha_total_steps: int = 0
    trace: np.ndarray | None = None   # decimated (t, alt, range) rows


@dataclass
class McReport:
    mode: str
    g_v: float
    seed: int
    runs: list[RunRecord]
    nominal_splash_lat: float
    nominal_splash_lon: float
    footprint_major_km: float = np.nan
    footprint_minor_km: float = np.nan
    footprint_orientation_deg: float = np.nan
    aggregates: dict = field(default_factory=dict)
    alpha_exceed_fraction: float = 0.0
    wall_time: float = 0.0

    @property
    def n_failed(self):
        return sum(r.failed for r in self.runs)

    def burnout_sample(self):
        ok = [r for r in self.runs if not r.failed and r.burnout_state is not None]
        return np.stack([r.burnout_state for r in ok])


def em_step(model: VehicleModel, phase, x, u, t, dt, g_v, rng):
    """One Euler-Maruyama step; noise enters the velocity rows only."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    f = model.dynamics(x, u, phase, t)
    xi = rng.standard_normal(3)
    if not np.all(np.isfinite(xi)):
        raise FloatingPointError("non-finite noise draw")
    out = x + f * dt
    out[..., IDX_V] = out[..., IDX_V] + g_v * np.sqrt(dt) * xi
    return out


def _run_rng(seed: int, run_id: int) -> np.random.Generator:
    """Documented stream-splitting rule: SeedSequence([seed, run])."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(run_id)]))


def _draw_initial_states(model, sim: SimConfig):
    """Initial state of every run (plus its pre-generated noise stream)."""
    n_steps = int(round(model.stage3.burn_time / sim.em_step))
    x0 = np.empty((sim.n_runs, NX))
    noise = np.empty((sim.n_runs, n_steps, 3))
    P0 = sim.initial_covariance
    L = None
    if sim.draw_initial and P0 is not None:
        L = np.linalg.cholesky(P0)
    for i in range(sim.n_runs):
        rng = _run_rng(sim.seed, i)
        z = rng.standard_normal(NX)
        x0[i] = model.x0 + (L @ z if L is not None else 0.0)
        noise[i] = rng.standard_normal((n_steps, 3))
    return x0, noise


def fly_powered(model, nominal: scvx.Trajectory, gains: CovarianceSchedule | None,
                sim: SimConfig, x0: np.ndarray, noise: np.ndarray):
    """Vectorized EM integration of the stage burn for a batch of runs.

    Returns (burnout states, max heat flux per run, alpha exceed/total
    counts, decimated traces).
    """
    phase1 = model.phase(1)
    t_b = model.stage3.burn_time
    dt = sim.em_step
    n_steps = noise.shape[1]
    R = x0.shape[0]
    p1 = nominal.phase(1)
    t_grid = dt * np.arange(n_steps)
    nu_steps = p1.interp_u(p1.t0 + t_grid)          # (n_steps, 3)

    x = x0.copy()
    alpha = np.zeros((R, 3))
    exceed = np.zeros(R, dtype=int)
    qmax = model.heat_flux(x)
    sq = np.sqrt(dt)
    alpha_max = gains.chance.alpha_max if (gains is not None and gains.chance) else np.deg2rad(5.0)
    next_gain = 0
    traces = [[] for _ in range(R)] if sim.dump_decimation else None
    r0 = model.x0[IDX_R] / np.linalg.norm(model.x0[IDX_R])

    for k in range(n_steps):
        t = t_grid[k]
        if gains is not None and next_gain < len(gains.K) and t >= gains.t[next_gain] - 1e-9:
            dx = x - gains.mu[next_gain]
            alpha = dx @ gains.K[next_gain].T
            nrm = np.linalg.norm(alpha, axis=1)
            big = nrm > sim.alpha_clamp
            if big.any():
                alpha[big] *= (sim.alpha_clamp / nrm[big])[:, None]
            next_gain += 1
        if gains is not None:
            exceed += (np.abs(alpha).max(axis=1) > alpha_max + 1e-12)
        nu = nu_steps[k]
        u = nu[None, :] + np.cross(alpha, np.broadcast_to(nu, (R, 3)))
        f = model.dynamics(x, u, phase1, t)
        x = x + f * dt
        x[:, IDX_V] += sim.g_v * sq * noise[:, k, :]
        q = model.heat_flux(x)
        qmax = np.maximum(qmax, q)
        if traces is not None and k % sim.dump_decimation == 0:
            rn = np.linalg.norm(x[:, IDX_R], axis=1)
            rng_deg = np.degrees(np.arccos(np.clip(
                (x[:, IDX_R] @ r0) / rn, -1.0, 1.0)))
            for i in range(R):
                traces[i].append((t + dt, (rn[i] - model.env.r_earth) / 1e3, rng_deg[i]))
    return x, qmax, exceed, np.full(R, n_steps), traces


def fly_return(model, x_bo: np.ndarray, sim: SimConfig, t_start: float,
               traces=None):
    """Ballistic spent-stage return for a batch of burnout states.

    Integrates with RK4 until ground impact (bisected to 1 m) or the
    failure time limit.  Returns (impact states, impact times, failed).
    """
    phase6 = model.phase(6)
    R = x_bo.shape[0]
    x = x_bo.copy()
    x[:, IDX_M] = model.mission.m_dry3
    h = sim.return_step
    r_e = model.env.r_earth

    def f6(xx, tt):
        return model.dynamics(xx, None, phase6, tt)

    impact = np.full((R, NX), np.nan)
    t_imp = np.full(R, np.nan)
    active = np.ones(R, dtype=bool)
    t = 0.0
    r0 = model.x0[IDX_R] / np.linalg.norm(model.x0[IDX_R])
    while active.any() and t < sim.max_return_time:
        xa = x[active]
        xn = rk4_step(f6, xa, t, h)
        rn = np.linalg.norm(xn[:, IDX_R], axis=1)
        hit = rn <= r_e
        idx_active = np.flatnonzero(active)
        if hit.any():
            for i in idx_active[hit]:
                lo, hi = 0.0, h
                xs = x[i]
                for _ in range(40):
                    mid = 0.5 * (lo + hi)
                    xm = rk4_step(f6, xs, t, mid)
                    if np.linalg.norm(xm[IDX_R]) <= r_e:
                        hi = mid
                    else:
                        lo = mid
                    if abs(np.linalg.norm(xm[IDX_R]) - r_e) < 1.0:
                        break
                impact[i] = rk4_step(f6, xs, t, 0.5 * (lo + hi))
                t_imp[i] = t_start + t + 0.5 * (lo + hi)
        x[idx_active] = xn
        if traces is not None and (int(t / h) % max(1, sim.dump_decimation)) == 0:
            for i in idx_active:
                rni = np.linalg.norm(x[i, IDX_R])
                rng_deg = np.degrees(np.arccos(np.clip(
                    (x[i, IDX_R] @ r0) / rni, -1.0, 1.0)))
                traces[i].append((t_start + t + h, (rni - r_e) / 1e3, rng_deg))
        active[idx_active[hit]] = False
        t += h
    failed = active.copy()
    return impact, t_imp, failed


def splash_geodetic(model, impact_state, t_impact):
    """(lat, lon) of an impact point; Earth-fixed longitude assumes the
    inertial and rotating frames coincide at stage ignition (t = 0)."""
    r = impact_state[..., IDX_R]
    rn = np.linalg.norm(r, axis=-1)
    lat = np.arcsin(r[..., 2] / rn)
    lon = np.arctan2(r[..., 1], r[..., 0]) - model.env.omega_earth * t_impact
    lon = (lon + np.pi) % (2.0 * np.pi) - np.pi
    return lat, lon


def payload_capacity(model, meshes, cfg_scvx, nominal, x_bo):
    """Mass-to-orbit from a realized separation state.

    Re-optimizes the upper-stage phases (coast, two burns) from the
    post-separation stack state and returns final mass minus the
    liquid-stage dry mass.  Non-converged continuations fall back to
    the best iterate; a solver failure returns NaN.
    """
    x_stack = np.asarray(x_bo, dtype=float).copy()
    x_stack[IDX_M] -= model.mission.m_dry3
    plan = scvx.continuation_plan(model, meshes, x_stack)
    ref = scvx.Trajectory([dataclasses.replace(nominal.phase(i)) for i in (2, 3, 4, 5)])
    cfg = dataclasses.replace(cfg_scvx, max_iterations=8)
    try:
        sol = scvx.iterate(model, plan, cfg, ref, t_start=model.stage3.burn_time)
    except scvx.ScvxError:
        return np.nan
    return sol.final_mass - model.m_dry4


def _mpc_order(t_elapsed, t_b, p0, p_min):
    frac = min(max(t_elapsed / t_b, 0.0), 1.0)
    return max(p_min, int(round(p0 - (p0 - p_min) * frac)))


def fly_mpc_run(model, meshes, cfg_scvx, nominal, sim: SimConfig, run_id: int):
    """One receding-horizon run: re-solve, fly, repeat until burnout."""
    phase1 = model.phase(1)
    t_b = model.stage3.burn_time
    dt = sim.em_step
    rng = _run_rng(sim.seed, run_id)
    z = rng.standard_normal(NX)
    x = model.x0.copy()
    if sim.draw_initial and sim.initial_covariance is not None:
        x = x + np.linalg.cholesky(sim.initial_covariance) @ z
    n_steps = int(round(t_b / dt))
    noise = rng.standard_normal((n_steps, 3))

    p0_order = meshes[1].p
    ref = nominal
    current = nominal
    fails = 0
    qmax = model.heat_flux(x)
    relax_cfg = dataclasses.replace(cfg_scvx, max_iterations=sim.mpc_iteration_cap)
    step_per_cycle = int(round(sim.mpc_period / dt))
    k = 0
    failed_run = False
    while k < n_steps:
        t_k = k * dt
        remaining = t_b - t_k
        if remaining > 1e-6:
            order = _mpc_order(t_k, t_b, p0_order, sim.mpc_min_order)
            plan = scvx.mpc_plan(model, meshes, t_k, x, order,
                                 model.mission.phi_r_des)
            ref_k = _shift_reference(model, current, plan, t_k)
            try:
                current = scvx.iterate(model, plan, relax_cfg, ref_k, t_start=t_k)
                fails = 0
            except scvx.ScvxError:
                fails += 1
                if fails >= 3:
                    failed_run = True
                    break
        p1 = current.phase(1)
        for j in range(min(step_per_cycle, n_steps - k)):
            t = (k + j) * dt
            u = p1.interp_u(np.clip(t, p1.t0, p1.t0 + p1.s))[0]
            f = model.dynamics(x, u, phase1, t)
            x = x + f * dt
            x[IDX_V] += sim.g_v * np.sqrt(dt) * noise[k + j]
            qmax = max(qmax, float(model.heat_flux(x)))
        k += step_per_cycle
    return x, float(qmax), failed_run, current


def _shift_reference(model, prev: scvx.Trajectory, plan, t_k):
    """Previous solution with the elapsed powered flight removed."""
    p1 = prev.phase(1)
    mesh1 = plan.entries[0].mesh
    s_rem = model.stage3.burn_time - t_k
    node_t = t_k + s_rem * mesh1.state_tau()
    x_nodes = p1.interp_x(np.minimum(node_t, p1.t0 + p1.s))
    colloc_t = t_k + s_rem * mesh1.colloc_tau()
    u_nodes = p1.interp_u(np.minimum(colloc_t, p1.t0 + p1.s))
    un = np.linalg.norm(u_nodes, axis=1)
    ph1 = scvx.PhaseNodes(1, mesh1, s_rem, t_k, x_nodes, u_nodes, un, engine_t0=t_k)
    return scvx.Trajectory([ph1] + [prev.phase(i) for i in (2, 3, 4, 5, 6)])


def _finish_runs(model, meshes, cfg_scvx, nominal, sim, x_bo, qmax, exceed,
                 total, traces):
    """Shared post-burnout path: return flight, splash, payload, records."""
    impact, t_imp, failed_ret = fly_return(model, x_bo, sim,
                                           model.stage3.burn_time, traces)
    records = []
    for i in range(x_bo.shape[0]):
        failed = bool(failed_ret[i]) or not np.all(np.isfinite(x_bo[i]))
        if failed:
            rec = RunRecord(i, np.nan, np.nan, np.nan, float(qmax[i]), True,
                            burnout_state=x_bo[i].copy(),
                            alpha_exceed_steps=int(exceed[i]),
                            alpha_total_steps=int(total[i]))
            records.append(rec)
            continue
        lat, lon = splash_geodetic(model, impact[i], t_imp[i])
        payload = np.nan
        if sim.payload_continuation:
            payload = payload_capacity(model, meshes, cfg_scvx, nominal, x_bo[i])
        rec = RunRecord(i, payload, float(lat), float(lon), float(qmax[i]), False,
                        t_impact=float(t_imp[i]), burnout_state=x_bo[i].copy(),
                        alpha_exceed_steps=int(exceed[i]),
                        alpha_total_steps=int(total[i]),
                        trace=np.asarray(traces[i]) if traces is not None else None)
        records.append(rec)
    return records


def _stats(values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return dict(min=np.nan, mean=np.nan, max=np.nan, std=np.nan)
    return dict(min=float(v.min()), mean=float(v.mean()), max=float(v.max()),
                std=float(v.std(ddof=1)) if len(v) > 1 else 0.0)


def footprint_from_samples(model, lats, lons, lat0, lon0, confidence=0.95):
    """95 percent ellipse of splash points in the local tangent plane.

    Returns full axis lengths (major, minor) in km and the major-axis
    orientation from east, degrees.
    """
    r_e = model.env.r_earth
    east = r_e * np.cos(lat0) * _wrap(lons - lon0)
    north = r_e * (lats - lat0)
    pts = np.stack([east, north], axis=1) / 1e3
    if len(pts) < 2:
        return 0.0, 0.0, 0.0
    cov = np.cov(pts.T, ddof=1)
    w, V = np.linalg.eigh(cov)
    k = chi2.ppf(confidence, 2)
    minor, major = 2.0 * np.sqrt(np.maximum(k * w, 0.0))
    ang = np.degrees(np.arctan2(V[1, 1], V[0, 1]))
    return float(major), float(minor), float(ang)


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def nominal_splash(model, nominal, sim: SimConfig):
    """Deterministic splash point of the nominal burnout state."""
    x_bo = nominal.phase(1).x[-1][None, :]
    quiet = dataclasses.replace(sim, dump_decimation=0, n_runs=1)
    impact, t_imp, failed = fly_return(model, x_bo, quiet, model.stage3.burn_time)
    if failed[0]:
        raise RuntimeError("nominal return never reaches the ground")
    return splash_geodetic(model, impact[0], t_imp[0])


def run_campaign(model, meshes, cfg_scvx, nominal, sim: SimConfig,
                 gains: CovarianceSchedule | None = None) -> McReport:
    """Monte Carlo campaign in the requested mode.

    Runs are seeded independently from (seed, run index); failed runs
    are reported separately and excluded from the aggregates.
    """
    t0 = time.perf_counter()
    if sim.mode == "feedback" and gains is None:
        raise ValueError("feedback mode requires a gain schedule")
    lat0, lon0 = nominal_splash(model, nominal, sim)

    if sim.mode in ("open-loop", "feedback"):
        if sim.jobs > 1:
            records = _parallel_chunks(model, meshes, cfg_scvx, nominal, sim, gains)
        else:
            records = _vector_chunk(model, meshes, cfg_scvx, nominal, sim, gains,
                                    np.arange(sim.n_runs))
    else:
        if sim.jobs > 1:
            records = _parallel_chunks(model, meshes, cfg_scvx, nominal, sim, None)
        else:
            records = [_mpc_record(model, meshes, cfg_scvx, nominal, sim, i)
                       for i in range(sim.n_runs)]
    records.sort(key=lambda r: r.run_id)

    ok = [r for r in records if not r.failed]
    lats = np.array([r.splash_lat for r in ok])
    lons = np.array([r.splash_lon for r in ok])
    major, minor, ang = footprint_from_samples(model, lats, lons, lat0, lon0)
    total_steps = sum(r.alpha_total_steps for r in records) or 1
    rep = McReport(
        mode=sim.mode, g_v=sim.g_v, seed=sim.seed, runs=records,
        nominal_splash_lat=float(lat0), nominal_splash_lon=float(lon0),
        footprint_major_km=major, footprint_minor_km=minor,
        footprint_orientation_deg=ang,
        aggregates=dict(
            payload=_stats([r.payload for r in ok]),
            splash_lat_deg=_stats([np.degrees(r.splash_lat) for r in ok]),
            max_heat_flux=_stats([r.max_heat_flux for r in ok]),
        ),
        alpha_exceed_fraction=sum(r.alpha_exceed_steps for r in records) / total_steps,
    )
    rep.wall_time = time.perf_counter() - t0
    return rep


def _vector_chunk(model, meshes, cfg_scvx, nominal, sim, gains, run_ids):
    sub = dataclasses.replace(sim, n_runs=len(run_ids))
    x0 = np.empty((len(run_ids), NX))
    n_steps = int(round(model.stage3.burn_time / sim.em_step))
    noise = np.empty((len(run_ids), n_steps, 3))
    L = np.linalg.cholesky(sim.initial_covariance) \
        if (sim.draw_initial and sim.initial_covariance is not None) else None
    for k, rid in enumerate(run_ids):
        rng = _run_rng(sim.seed, int(rid))
        z = rng.standard_normal(NX)
        x0[k] = model.x0 + (L @ z if L is not None else 0.0)
        noise[k] = rng.standard_normal((n_steps, 3))
    use_gains = gains if sim.mode == "feedback" else None
    x_bo, qmax, exceed, total, traces = fly_powered(
        model, nominal, use_gains, sub, x0, noise)
    recs = _finish_runs(model, meshes, cfg_scvx, nominal, sub, x_bo, qmax,
                        exceed, total, traces)
    for rec, rid in zip(recs, run_ids):
        rec.run_id = int(rid)
    return recs


def _mpc_record(model, meshes, cfg_scvx, nominal, sim, run_id):
    x_bo, qmax, failed, last = fly_mpc_run(model, meshes, cfg_scvx, nominal,
                                           sim, run_id)
    recs = _finish_runs(model, meshes, cfg_scvx, nominal,
                        dataclasses.replace(sim, dump_decimation=0),
                        x_bo[None, :], [qmax], [0], [0], None)
    rec = recs[0]
    rec.run_id = run_id
    rec.failed = rec.failed or failed
    return rec


_POOL_STATE = {}


def _pool_init(model, meshes, cfg_scvx, nominal, sim, gains):
    _POOL_STATE.update(model=model, meshes=meshes, cfg=cfg_scvx,
                       nominal=nominal, sim=sim, gains=gains)


def _pool_chunk(run_ids):
    st = _POOL_STATE
    if st["sim"].mode == "mpc":
        return [_mpc_record(st["model"], st["meshes"], st["cfg"], st["nominal"],
                            st["sim"], int(i)) for i in run_ids]
    return _vector_chunk(st["model"], st["meshes"], st["cfg"], st["nominal"],
                         st["sim"], st["gains"], run_ids)


def _parallel_chunks(model, meshes, cfg_scvx, nominal, sim, gains):
    import multiprocessing as mp

    ids = np.arange(sim.n_runs)
    chunks = np.array_split(ids, min(sim.jobs * 4, sim.n_runs))
    ctx = mp.get_context("fork")
    with ctx.Pool(sim.jobs, initializer=_pool_init,
                  initargs=(model, meshes, cfg_scvx, nominal, sim, gains)) as pool:
        out = pool.map(_pool_chunk, chunks)
    return [r for chunk in out for r in chunk]

"""Point-mass model of the upper-stage flight.

State is x = [r (3), v (3), m] in ECI Cartesian coordinates (SI units).
Forces: inverse-square gravity, drag against the rotating atmosphere,
and the engine thrust expressed through the acceleration control
u = (T/m) T_hat, which makes the dynamics control-affine.

Phases:
  1  third-stage burn (solid motor, linear thrust/mass-flow laws)
  2  short coast of fixed duration after third-stage separation
  3  first liquid-engine burn
  4  long coast
  5  second liquid-engine burn (orbit insertion)
  6  ballistic return of the spent third stage

All evaluation routines accept batched states with shape (..., 7) and
are pure; they are safe to call concurrently from simulation workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atmosphere import Atmosphere

NX = 7
NU = 3
IDX_R = slice(0, 3)
IDX_V = slice(3, 6)
IDX_M = 6

BURN, COAST, RETURN = "burn", "coast", "return"


@dataclass(frozen=True)
class EngineLaw:
    """Thrust and mass-flow profile, linear in burn time."""

    burn_time: float
    thrust_vac0: float
    thrust_vacf: float
    mdot0: float
    mdotf: float
    exit_area: float
    throttleable: bool = False

    def thrust_vac(self, t):
        t = np.clip(t, 0.0, self.burn_time)
        return self.thrust_vac0 + (self.thrust_vacf - self.thrust_vac0) * t / self.burn_time

    def mdot(self, t):
        t = np.clip(t, 0.0, self.burn_time)
        return self.mdot0 + (self.mdotf - self.mdot0) * t / self.burn_time

    def burned_mass(self, t):
        """Propellant consumed on [0, t]."""
        t = np.clip(t, 0.0, self.burn_time)
        slope = (self.mdotf - self.mdot0) / self.burn_time
        return self.mdot0 * t + 0.5 * slope * t * t


@dataclass(frozen=True)
class Environment:
    mu: float = 3.986004418e14
    r_earth: float = 6378137.0
    omega_earth: float = 7.2921159e-5   # rad/s about +z
    c_d: float = 0.38
    s_ref: float = 9.08
    atmosphere: Atmosphere = Atmosphere()

    @property
    def omega_vec(self):
        return np.array([0.0, 0.0, self.omega_earth])


@dataclass(frozen=True)
class MissionSpec:
    a_des: float
    i_des: float                 # rad
    phi_r_des: float             # rad, splash-down latitude
    qdot_max: float
    m_dry3: float
    dt_coast2: float
    mu: float
    r_earth: float

    @property
    def v_des(self):
        return np.sqrt(self.mu / self.a_des)

    @property
    def h_z_des(self):
        return np.cos(self.i_des) * np.sqrt(self.mu * self.a_des)

    @property
    def z_r_des(self):
        return self.r_earth * np.sin(self.phi_r_des)


@dataclass(frozen=True)
class Phase:
    """Static description of one flight phase."""

    index: int
    kind: str                    # burn | coast | return
    engine: EngineLaw | None = None
    fixed_duration: float | None = None
    trust_region: bool = False

    @property
    def propelled(self):
        return self.kind == BURN


@dataclass(frozen=True)
class VehicleModel:
    """Bundles environment, engines, mission and the assigned initial state."""

    env: Environment
    stage3: EngineLaw
    stage4: EngineLaw
    mission: MissionSpec
    x0: np.ndarray               # (7,) state at third-stage ignition
    m_dry4: float

    def phases(self) -> list[Phase]:
        return [
            Phase(1, BURN, self.stage3, fixed_duration=self.stage3.burn_time),
            Phase(2, COAST, fixed_duration=self.mission.dt_coast2),
            Phase(3, BURN, self.stage4),
            Phase(4, COAST, trust_region=True),
            Phase(5, BURN, self.stage4, trust_region=True),
            Phase(6, RETURN),
        ]

    def phase(self, index: int) -> Phase:
        return self.phases()[index - 1]

    # -- primitive force evaluations ------------------------------------

    def rel_velocity(self, x):
        r = x[..., IDX_R]
        v = x[..., IDX_V]
        w = np.cross(np.broadcast_to(self.env.omega_vec, r.shape), r)
        return v - w

    def altitude(self, x):
        return np.linalg.norm(x[..., IDX_R], axis=-1) - self.env.r_earth

    def net_thrust(self, phase: Phase, t, x):
        """Net thrust T_vac(t) - p*A_e [N]; zero on unpropelled phases."""
        if not phase.propelled:
            return np.zeros(np.shape(t))
        _, p, _, _ = self.env.atmosphere.evaluate(self.altitude(x))
        return phase.engine.thrust_vac(t) - p * phase.engine.exit_area

    def dynamics(self, x, u, phase: Phase, t=0.0):
        """State derivative f(x, u, t); u is the thrust acceleration [m/s^2].

        On coast/return phases u is ignored (no control authority, no
        mass flow).  Non-finite states are rejected.
        """
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite state passed to dynamics")
        r = x[..., IDX_R]
        v = x[..., IDX_V]
        m = x[..., IDX_M]
        rn = np.linalg.norm(r, axis=-1)

        grav = -self.env.mu * r / rn[..., None] ** 3

        w = self.rel_velocity(x)
        wn = np.linalg.norm(w, axis=-1)
        rho, _, _, _ = self.env.atmosphere.evaluate(rn - self.env.r_earth)
        k = 0.5 * self.env.s_ref * self.env.c_d
        drag = -(k * rho * wn / m)[..., None] * w

        acc = grav + drag
        mdot = np.zeros_like(m)
        if phase.propelled:
            acc = acc + np.asarray(u, dtype=float)
            mdot = np.broadcast_to(phase.engine.mdot(t), m.shape)

        out = np.empty_like(x)
        out[..., IDX_R] = v
        out[..., IDX_V] = acc
        out[..., IDX_M] = -mdot
        return out

    def jacobians(self, x, u, phase: Phase, t=0.0, freeze_atmo_gradients=False):
        """Dense (..., 7, 7) and (..., 7, 3) Jacobians of `dynamics`.

        The control block is exactly [0; I3; 0] on propelled phases and
        zero otherwise.  Setting `freeze_atmo_gradients` drops the
        density-gradient contribution to d(drag)/dr (used to study the
        return-phase linearization options).
        """
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        r = x[..., IDX_R]
        v = x[..., IDX_V]
        m = x[..., IDX_M]
        rn = np.linalg.norm(r, axis=-1)
        rhat = r / rn[..., None]

        A = np.zeros(batch + (NX, NX))
        A[..., 0:3, 3:6] = np.eye(3)

        # gravity gradient
        eye = np.broadcast_to(np.eye(3), batch + (3, 3))
        rrT = rhat[..., :, None] * rhat[..., None, :]
        A[..., 3:6, 0:3] = -self.env.mu / rn[..., None, None] ** 3 * (eye - 3.0 * rrT)

        # drag terms
        w = self.rel_velocity(x)
        wn = np.linalg.norm(w, axis=-1)
        rho, _, drho, _ = self.env.atmosphere.evaluate(rn - self.env.r_earth)
        k = 0.5 * self.env.s_ref * self.env.c_d
        corr = k / m

        # d a_drag / d w = -(k rho/m) (|w| I + w w^T/|w|); zero in still air
        safe = np.where(wn > 0.0, wn, 1.0)
        wwT = w[..., :, None] * w[..., None, :] / safe[..., None, None]
        dadw = -(corr * rho)[..., None, None] * (wn[..., None, None] * eye + wwT)

        Wx = np.zeros(batch + (3, 3))
        om = self.env.omega_earth
        # dw/dr = -[omega]_x
        Wx[..., 0, 1] = om
        Wx[..., 1, 0] = -om

        dadr = np.einsum("...ij,...jk->...ik", dadw, Wx)
        if not freeze_atmo_gradients:
            grad_rho = drho[..., None] * rhat
            dadr = dadr - (corr * wn)[..., None, None] * (
                w[..., :, None] * grad_rho[..., None, :]
            )
        A[..., 3:6, 0:3] += dadr
        A[..., 3:6, 3:6] += dadw
        A[..., 3:6, 6] = (corr / m * rho * wn)[..., None] * w

        B = np.zeros(batch + (NX, NU))
        if phase.propelled:
            B[..., 3:6, :] = np.eye(3)
        return A, B

    # -- heat flux -------------------------------------------------------

    def heat_flux(self, x, gradients=False):
        """Free-molecular heat flux 0.5*rho*v_rel^3 [W/m^2] (+ gradients)."""
        x = np.asarray(x, dtype=float)
        r = x[..., IDX_R]
        rn = np.linalg.norm(r, axis=-1)
        w = self.rel_velocity(x)
        wn = np.linalg.norm(w, axis=-1)
        rho, _, drho, _ = self.env.atmosphere.evaluate(rn - self.env.r_earth)
        q = 0.5 * rho * wn**3
        if not gradients:
            return q
        rhat = r / rn[..., None]
        omega = np.broadcast_to(self.env.omega_vec, w.shape)
        dq_dr = 0.5 * drho[..., None] * wn[..., None] ** 3 * rhat + (
            1.5 * rho * wn
        )[..., None] * np.cross(omega, w)
        dq_dv = (1.5 * rho * wn)[..., None] * w
        return q, dq_dr, dq_dv

    # -- boundary conditions ----------------------------------------------

    def boundary_residuals(self, x_orbit, x_splash, x1_end=None, x2_start=None, x6_start=None):
        """Residual vector of the terminal and linkage conditions.

        x_orbit: state at payload release (end of phase 5)
        x_splash: state at splash-down (end of phase 6)
        Optional endpoint pairs add the staging linkage residuals.
        Returns residuals ordered: radius, speed, radial velocity,
        angular momentum z, splash radius, splash latitude
        [, mass drop, position/velocity continuity (6), return mass].
        """
        ms = self.mission
        r = np.asarray(x_orbit[IDX_R])
        v = np.asarray(x_orbit[IDX_V])
        res = [
            float(r @ r - ms.a_des**2),
            float(v @ v - ms.v_des**2),
            float(r @ v),
            float(r[0] * v[1] - r[1] * v[0] - ms.h_z_des),
            float(np.asarray(x_splash[IDX_R]) @ np.asarray(x_splash[IDX_R]) - ms.r_earth**2),
            float(x_splash[2] - ms.z_r_des),
        ]
        if x1_end is not None:
            res.append(float(x2_start[IDX_M] - (x1_end[IDX_M] - ms.m_dry3)))
            res.extend((np.asarray(x6_start[:6]) - np.asarray(x1_end[:6])).tolist())
            res.append(float(x6_start[IDX_M] - ms.m_dry3))
        return np.array(res)

"""U.S. Standard Atmosphere 1976 with analytic altitude derivatives.

The lower portion (up to 86 km geometric altitude) is the published
seven-layer piecewise model: temperature is linear in geopotential
altitude within each layer and pressure follows the hydrostatic
closed forms.  Above 86 km a single isothermal exponential extension
is used; its scale height defaults to the local hydrostatic value at
the 86 km boundary so that density and pressure are C0-continuous.

Density and pressure are returned together with their derivatives
with respect to geometric altitude, which downstream linearizations
need.  Derivatives are discontinuous at layer boundaries; collocation
nodes essentially never sit on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Model constants from the 1976 standard.
G0 = 9.80665            # m/s^2
R_AIR = 287.0531        # J/(kg K), R*/M for dry air
GMR = G0 / R_AIR        # K/m, exponent group g0*M/R*
R_GEOPOT = 6356766.0    # m, radius used for the geometric->geopotential map

# Layer bases: geopotential altitude [m], lapse rate [K/m].
_H_BASE = np.array([0.0, 11000.0, 20000.0, 32000.0, 47000.0, 51000.0, 71000.0, 84852.0])
_LAPSE = np.array([-6.5e-3, 0.0, 1.0e-3, 2.8e-3, 0.0, -2.8e-3, -2.0e-3])
_T_SEA = 288.15         # K
_P_SEA = 101325.0       # Pa


def _layer_tables() -> tuple[np.ndarray, np.ndarray]:
    """Base temperature and pressure of each layer, evaluated recursively."""
    t = np.empty(8)
    p = np.empty(8)
    t[0], p[0] = _T_SEA, _P_SEA
    for i in range(7):
        dh = _H_BASE[i + 1] - _H_BASE[i]
        t[i + 1] = t[i] + _LAPSE[i] * dh
        if _LAPSE[i] == 0.0:
            p[i + 1] = p[i] * np.exp(-GMR * dh / t[i])
        else:
            p[i + 1] = p[i] * (t[i + 1] / t[i]) ** (-GMR / _LAPSE[i])
    return t, p


_T_BASE, _P_BASE = _layer_tables()


@dataclass(frozen=True)
class Atmosphere:
    """Density/pressure model; callable on scalar or array geometric altitude."""

    extension_scale_height: float = field(default=0.0)

    def __post_init__(self):
        if self.extension_scale_height <= 0.0:
            # Hydrostatic scale height at the 86 km boundary.
            g86 = G0 * (R_GEOPOT / (R_GEOPOT + 86000.0)) ** 2
            h = R_AIR * _T_BASE[7] / g86
            object.__setattr__(self, "extension_scale_height", h)

    def evaluate(self, altitude):
        """Return (rho, p, drho_dh, dp_dh) at geometric altitude [m].

        Below the table floor (0 m) the sea-level values are held with
        zero derivative; callers can detect the clamp via altitude < 0.
        """
        h = np.asarray(altitude, dtype=float)
        scalar = h.ndim == 0
        h = np.atleast_1d(h)

        rho = np.empty_like(h)
        p = np.empty_like(h)
        drho = np.empty_like(h)
        dp = np.empty_like(h)

        below = h < 0.0
        above = h >= 86000.0
        mid = ~(below | above)

        if np.any(below):
            rho[below] = _P_SEA / (R_AIR * _T_SEA)
            p[below] = _P_SEA
            drho[below] = 0.0
            dp[below] = 0.0

        if np.any(mid):
            hm = h[mid]
            # geometric -> geopotential and its derivative
            hp = R_GEOPOT * hm / (R_GEOPOT + hm)
            dhp = (R_GEOPOT / (R_GEOPOT + hm)) ** 2
            idx = np.clip(np.searchsorted(_H_BASE, hp, side="right") - 1, 0, 6)
            tb, pb = _T_BASE[idx], _P_BASE[idx]
            lam = _LAPSE[idx]
            dh = hp - _H_BASE[idx]
            t = tb + lam * dh
            iso = lam == 0.0
            pm = np.where(
                iso,
                pb * np.exp(-GMR * dh / np.where(iso, tb, 1.0)),
                pb * (t / tb) ** np.where(iso, 1.0, -GMR / np.where(iso, 1.0, lam)),
            )
            rhom = pm / (R_AIR * t)
            # d ln p / dh' = -GMR / T;  d ln rho / dh' = -(GMR + lambda) / T
            dpm = -pm * GMR / t * dhp
            drhom = -rhom * (GMR + lam) / t * dhp
            rho[mid], p[mid], drho[mid], dp[mid] = rhom, pm, drhom, dpm

        if np.any(above):
            hs = self.extension_scale_height
            rho86 = _P_BASE[7] / (R_AIR * _T_BASE[7])
            fac = np.exp(-(h[above] - 86000.0) / hs)
            rho[above] = rho86 * fac
            p[above] = _P_BASE[7] * fac
            drho[above] = -rho[above] / hs
            dp[above] = -p[above] / hs

        if scalar:
            return rho[0], p[0], drho[0], dp[0]
        return rho, p, drho, dp

    def density(self, altitude):
        return self.evaluate(altitude)[0]

    def pressure(self, altitude):
        return self.evaluate(altitude)[1]


@dataclass(frozen=True)
class Vacuum(Atmosphere):
    """Zero-density model for Keplerian test cases."""

    def evaluate(self, altitude):
        h = np.asarray(altitude, dtype=float)
        z = np.zeros_like(h)
        if h.ndim == 0:
            return 0.0, 0.0, 0.0, 0.0
        return z, z.copy(), z.copy(), z.copy()

"""Configuration ingestion and validation.

The tool is driven by one nested YAML document; every key carries SI
units in its name where ambiguity is possible.  Parsing collects all
missing keys in a single pass before failing, and a parsed config can
be re-serialized to a canonical normal form (sorted keys, plain
floats) for hashing and idempotence checks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .atmosphere import Atmosphere
from .collocation import PhaseMesh
from .scvx import ScvxConfig
from .vehicle import Environment, EngineLaw, MissionSpec, VehicleModel


class ConfigError(ValueError):
    pass


_REQUIRED = [
    "mission.semi_major_axis_m",
    "mission.inclination_deg",
    "mission.splash_latitude_deg",
    "mission.heat_flux_max_w_m2",
    "mission.coast2_duration_s",
    "environment.mu_m3_s2",
    "environment.earth_radius_m",
    "environment.earth_rotation_rad_s",
    "environment.drag_coefficient",
    "environment.reference_area_m2",
    "vehicle.initial_mass_kg",
    "vehicle.stage3.burn_time_s",
    "vehicle.stage3.thrust_vac_initial_n",
    "vehicle.stage3.thrust_vac_final_n",
    "vehicle.stage3.mdot_initial_kg_s",
    "vehicle.stage3.mdot_final_kg_s",
    "vehicle.stage3.exit_area_m2",
    "vehicle.stage3.dry_mass_kg",
    "vehicle.stage4.thrust_vac_n",
    "vehicle.stage4.mdot_kg_s",
    "vehicle.stage4.exit_area_m2",
    "vehicle.stage4.dry_mass_kg",
    "initial_state.position_m",
    "initial_state.velocity_m_s",
]


def _get(d, dotted):
    cur = d
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise KeyError(dotted)
        cur = cur[part]
    return cur


@dataclass
class RunConfig:
    """Validated, normalized run configuration."""

    raw: dict
    model: VehicleModel
    meshes: dict[int, PhaseMesh]
    scvx: ScvxConfig
    covariance: dict
    simulation: dict

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))


_MESH_DEFAULT = {1: (1, 19), 2: (1, 9), 3: (1, 19), 4: (1, 19), 5: (1, 19), 6: (5, 20)}
# the return phase clusters its segments around the reentry drag wall
_BOUNDS_DEFAULT = {6: (0.0, 0.65, 0.87, 0.93, 0.97, 1.0)}

_COV_DEFAULT = dict(
    grid_nodes=161, return_grid_nodes=1001, alpha_max_deg=5.0,
    probability_level=0.95,
    initial_covariance_diag=[1e4, 1e4, 1e4, 1e2, 1e2, 1e2, 1.0],
    trace_penalty=0.1, return_linearization="full", backend="clarabel",
    solver_tol=1e-8)

_SIM_DEFAULT = dict(
    em_step_s=0.05, return_step_s=0.5, mpc_period_s=1.0, mpc_min_order=5,
    mpc_iteration_cap=3, heat_flux_relax_weight=1e-2,
    noise_levels={"L": 0.1, "M": 0.5, "H": 1.0}, max_return_time_s=5000.0)


def load_config(path=None) -> RunConfig:
    """Load and validate a config file (the packaged reference when None)."""
    if path is None:
        text = resources.files("upstage.data").joinpath("reference.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    missing = []
    for key in _REQUIRED:
        try:
            _get(raw, key)
        except KeyError:
            missing.append(key)
    if missing:
        raise ConfigError("missing config keys: " + ", ".join(missing))

    env_d = raw["environment"]
    atmo = Atmosphere(float(env_d.get("atmosphere_extension_scale_height_m", 0.0)))
    env = Environment(
        mu=float(env_d["mu_m3_s2"]),
        r_earth=float(env_d["earth_radius_m"]),
        omega_earth=float(env_d["earth_rotation_rad_s"]),
        c_d=float(env_d["drag_coefficient"]),
        s_ref=float(env_d["reference_area_m2"]),
        atmosphere=atmo,
    )
    s3d = raw["vehicle"]["stage3"]
    stage3 = EngineLaw(
        burn_time=float(s3d["burn_time_s"]),
        thrust_vac0=float(s3d["thrust_vac_initial_n"]),
        thrust_vacf=float(s3d["thrust_vac_final_n"]),
        mdot0=float(s3d["mdot_initial_kg_s"]),
        mdotf=float(s3d["mdot_final_kg_s"]),
        exit_area=float(s3d["exit_area_m2"]),
    )
    s4d = raw["vehicle"]["stage4"]
    stage4 = EngineLaw(
        burn_time=float(s4d.get("max_burn_time_s", 4000.0)),
        thrust_vac0=float(s4d["thrust_vac_n"]),
        thrust_vacf=float(s4d["thrust_vac_n"]),
        mdot0=float(s4d["mdot_kg_s"]),
        mdotf=float(s4d["mdot_kg_s"]),
        exit_area=float(s4d["exit_area_m2"]),
        throttleable=True,
    )
    mis = raw["mission"]
    mission = MissionSpec(
        a_des=float(mis["semi_major_axis_m"]),
        i_des=np.deg2rad(float(mis["inclination_deg"])),
        phi_r_des=np.deg2rad(float(mis["splash_latitude_deg"])),
        qdot_max=float(mis["heat_flux_max_w_m2"]),
        m_dry3=float(s3d["dry_mass_kg"]),
        dt_coast2=float(mis["coast2_duration_s"]),
        mu=env.mu,
        r_earth=env.r_earth,
    )
    ist = raw["initial_state"]
    r0 = np.asarray(ist["position_m"], dtype=float)
    v0 = np.asarray(ist["velocity_m_s"], dtype=float)
    if r0.shape != (3,) or v0.shape != (3,):
        raise ConfigError("initial_state position/velocity must be 3-vectors")
    x0 = np.concatenate([r0, v0, [float(raw["vehicle"]["initial_mass_kg"])]])
    model = VehicleModel(env, stage3, stage4, mission, x0,
                         m_dry4=float(s4d["dry_mass_kg"]))

    mesh_d = raw.get("mesh", {})
    meshes = {}
    for i, (h, p) in _MESH_DEFAULT.items():
        entry = mesh_d.get(f"phase{i}", {})
        h_i = int(entry.get("segments", h))
        bounds = entry.get("boundaries", _BOUNDS_DEFAULT.get(i))
        if bounds is not None and len(bounds) != h_i + 1:
            bounds = None
        meshes[i] = PhaseMesh(i, h_i, int(entry.get("order", p)),
                              tuple(bounds) if bounds is not None else None)

    sc = raw.get("scvx", {})
    scvx = ScvxConfig(
        lambda_q=float(sc.get("lambda_virtual_control", 1e4)),
        lambda_w=float(sc.get("lambda_virtual_buffer", 1e4)),
        lambda_delta=float(sc.get("lambda_trust", 1e-3)),
        trust_fraction=float(sc.get("trust_radius_fraction", 0.05)),
        filter_weights=tuple(sc.get("filter_weights", (6 / 11, 3 / 11, 2 / 11))),
        eps_tol=float(sc.get("eps_tol", 1e-4)),
        eps_f=float(sc.get("eps_f", 1e-6)),
        max_iterations=int(sc.get("max_iterations", 30)),
        homotopy_steps=int(sc.get("homotopy_steps", 5)),
        backend=str(sc.get("backend", "clarabel")),
        solver_tol=float(sc.get("solver_tol", 1e-9)),
    )
    if "seed_durations_s" in sc:
        scvx.seed_durations = {int(k): float(v) for k, v in sc["seed_durations_s"].items()}
    if "duration_bounds_s" in sc:
        scvx.duration_bounds = {int(k): (float(v[0]), float(v[1]))
                                for k, v in sc["duration_bounds_s"].items()}

    cov = dict(_COV_DEFAULT)
    cov.update(raw.get("covariance", {}))
    sim = dict(_SIM_DEFAULT)
    sim.update(raw.get("simulation", {}))
    scvx.heat_flux_relax_weight = float(sim["heat_flux_relax_weight"])
    return RunConfig(raw, model, meshes, scvx, cov, sim)

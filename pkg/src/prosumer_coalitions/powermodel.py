"""Weather -> net production: power curves, loads and per-agent traces."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .weather import WeatherDataset, time_features

SOLAR_CONSTANT = 1367.0
CLEAR_SKY_TRANSMITTANCE = 0.75
MIN_SIN_ELEVATION = 0.05

RESIDENTIAL_PROFILE = (
    0.10, 0.08, 0.08, 0.08, 0.08, 0.10, 0.20, 0.35, 0.30, 0.20, 0.18, 0.20,
    0.25, 0.22, 0.18, 0.18, 0.22, 0.35, 0.50, 0.55, 0.50, 0.40, 0.25, 0.15,
)
BUSINESS_PROFILE = (
    0.05, 0.05, 0.05, 0.05, 0.05, 0.08, 0.15, 0.35, 0.55, 0.60, 0.60, 0.55,
    0.50, 0.55, 0.60, 0.60, 0.55, 0.40, 0.20, 0.10, 0.08, 0.05, 0.05, 0.05,
)


@dataclass(frozen=True)
class WindTurbineSpec:
    cut_in: float
    rated_speed: float
    cut_out: float
    rated_power: float

    def __post_init__(self):
        if not 0 < self.cut_in < self.rated_speed < self.cut_out:
            raise ConfigurationError(f"turbine speeds must satisfy 0 < cut_in < rated < cut_out: {self}")
        if self.rated_power <= 0:
            raise ConfigurationError("turbine rated_power must be > 0")


@dataclass(frozen=True)
class PVArraySpec:
    surface: float
    efficiency: float

    def __post_init__(self):
        if self.surface <= 0 or not 0 < self.efficiency <= 1:
            raise ConfigurationError(f"PV array needs surface > 0 and efficiency in (0, 1]: {self}")


@dataclass(frozen=True)
class LoadSpec:
    exchange_surface: float
    thermal_resistance: float
    target_temp: float
    max_power: float
    hourly_profile: tuple = RESIDENTIAL_PROFILE
    noise_sigma: float = 0.05

    def __post_init__(self):
        profile = tuple(float(x) for x in self.hourly_profile)
        object.__setattr__(self, "hourly_profile", profile)
        if self.exchange_surface <= 0 or self.thermal_resistance <= 0:
            raise ConfigurationError("load exchange_surface and thermal_resistance must be > 0")
        if self.max_power < 0 or self.noise_sigma < 0:
            raise ConfigurationError("load max_power and noise_sigma must be >= 0")
        if len(profile) != 24 or any(not 0 <= x <= 1 for x in profile):
            raise ConfigurationError("hourly_profile must hold 24 fractions in [0, 1]")


@dataclass(frozen=True)
class ProsumerConfig:
    agent_id: str
    zone_id: str
    turbines: tuple = ()
    pv_arrays: tuple = ()
    loads: tuple = ()

    def __post_init__(self):
        for name in ("turbines", "pv_arrays", "loads"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProsumerConfig":
        try:
            return cls(
                agent_id=str(d["agent_id"]),
                zone_id=str(d["zone_id"]),
                turbines=[WindTurbineSpec(**t) for t in d.get("turbines", [])],
                pv_arrays=[PVArraySpec(**p) for p in d.get("pv_arrays", [])],
                loads=[LoadSpec(**l) for l in d.get("loads", [])],
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad agent configuration: {exc}") from None


@dataclass(frozen=True, eq=False)
class ProductionTrace:
    """Net production of one agent. Components are kept only on request."""

    agent_id: str
    values: np.ndarray
    production: np.ndarray | None = field(default=None, repr=False)
    consumption: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# Power curves


def wind_power(spec: WindTurbineSpec, wind_speed, ramp: str = "cubic"):
    """Turbine output for a wind speed (scalar or array).

    Zero below cut-in and at/above cut-out, rated power on
    [rated_speed, cut_out), and a cubic (or linear) ramp in between.
    """
    v = np.asarray(wind_speed, dtype=float)
    if ramp == "cubic":
        frac = (v**3 - spec.cut_in**3) / (spec.rated_speed**3 - spec.cut_in**3)
    elif ramp == "linear":
        frac = (v - spec.cut_in) / (spec.rated_speed - spec.cut_in)
    else:
        raise ConfigurationError(f"unknown wind ramp {ramp!r}")
    out = spec.rated_power * np.clip(frac, 0.0, 1.0)
    out = np.where((v < spec.cut_in) | (v >= spec.cut_out), 0.0, out)
    return out if out.ndim else float(out)


def solar_sin_elevation(latitude, longitude, t):
    """Sine of the solar elevation from declination and hour angle.

    Solar time is UTC shifted by longitude/15 hours; the equation of time
    is ignored.
    """
    doy, hour = time_features(np.atleast_1d(np.asarray(t, dtype="datetime64[s]")))
    day_number = np.floor(doy) + 1.0
    decl = np.radians(23.45) * np.sin(2 * np.pi * (284.0 + day_number) / 365.0)
    solar_time = hour + longitude / 15.0
    hour_angle = np.radians(15.0 * (solar_time - 12.0))
    lat = np.radians(latitude)
    return np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)


def clear_sky_radiance(latitude, longitude, t):
    """Clear-sky radiance in W/m^2 on a horizontal surface; 0 when the sun is down."""
    if not -90 <= latitude <= 90:
        raise ValueError(f"latitude {latitude} outside [-90, 90]")
    sin_el = solar_sin_elevation(latitude, longitude, t)
    up = sin_el > 0
    air_mass = 1.0 / np.maximum(sin_el, MIN_SIN_ELEVATION)
    rad = np.where(up, SOLAR_CONSTANT * sin_el * CLEAR_SKY_TRANSMITTANCE**air_mass, 0.0)
    return rad if np.ndim(t) else float(rad[0])


def degrade_radiance(clear_sky, nebulosity):
    """Scale radiance by the cloud factor 1 - 0.75 (N/8)^3.4."""
    n = np.asarray(nebulosity, dtype=float)
    eta = 1.0 - 0.75 * (n / 8.0) ** 3.4
    out = np.asarray(clear_sky, dtype=float) * eta
    return out if out.ndim else float(out)


def pv_power(spec: PVArraySpec, radiance):
    out = spec.surface * np.asarray(radiance, dtype=float) * spec.efficiency
    return out if out.ndim else float(out)


def heating_load(spec: LoadSpec, outside_temp):
    """Conductive heating demand (B/R)(T - tau), clamped at zero."""
    gradient = spec.target_temp - np.asarray(outside_temp, dtype=float)
    out = np.maximum(0.0, spec.exchange_surface / spec.thermal_resistance * gradient)
    return out if out.ndim else float(out)


def electronic_load(spec: LoadSpec, hour_of_day, noise_draw=0.0):
    frac = np.asarray(spec.hourly_profile)[np.asarray(hour_of_day, dtype=int)]
    out = np.maximum(0.0, spec.max_power * (frac + np.asarray(noise_draw, dtype=float)))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Traces


def _agent_key(agent_id: str) -> int:
    return int.from_bytes(hashlib.sha256(str(agent_id).encode("utf-8")).digest()[:8], "little")


def noise_stream(seed: int, agent_id: str, load_index: int) -> np.random.Generator:
    """Independent generator for one load of one agent, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _agent_key(agent_id), int(load_index)]))


def simulate_traces(
    dataset: WeatherDataset,
    configs,
    seed: int = 0,
    ramp: str = "cubic",
    keep_components: bool = False,
) -> list[ProductionTrace]:
    """Net production P = production - consumption for every configured agent."""
    n_steps = len(dataset)
    _, hours = time_features(dataset.timestamps)
    hour_idx = np.floor(hours).astype(int) % 24
    radiance_cache: dict[str, np.ndarray] = {}

    def radiance(zone):
        if zone.zone_id not in radiance_cache:
            if not (math.isfinite(zone.latitude) and math.isfinite(zone.longitude)):
                raise ConfigurationError(f"zone {zone.zone_id!r} has no coordinates; PV needs them")
            clear = clear_sky_radiance(zone.latitude, zone.longitude, zone.timestamps)
            radiance_cache[zone.zone_id] = degrade_radiance(clear, zone.nebulosity)
        return radiance_cache[zone.zone_id]

    traces = []
    for cfg in configs:
        if cfg.zone_id not in dataset:
            raise ConfigurationError(f"agent {cfg.agent_id!r}: unknown zone {cfg.zone_id!r}")
        zone = dataset.zone(cfg.zone_id)
        prod = np.zeros(n_steps)
        cons = np.zeros(n_steps)
        for turbine in cfg.turbines:
            prod += wind_power(turbine, zone.wind_speed, ramp=ramp)
        for array in cfg.pv_arrays:
            prod += pv_power(array, radiance(zone))
        for j, load in enumerate(cfg.loads):
            draws = noise_stream(seed, cfg.agent_id, j).standard_normal(n_steps) * load.noise_sigma
            cons += heating_load(load, zone.temperature)
            cons += electronic_load(load, hour_idx, draws)
        net = prod - cons
        if keep_components:
            traces.append(ProductionTrace(cfg.agent_id, net, prod, cons))
        else:
            traces.append(ProductionTrace(cfg.agent_id, net))
    return traces


# ---------------------------------------------------------------------------
# Random populations


@dataclass(frozen=True)
class ConfigRanges:
    """Uniform sampling ranges for random agents (watts, m^2, m/s, degC)."""

    n_turbines: tuple = (0, 2)
    n_pv: tuple = (0, 4)
    n_loads: tuple = (1, 3)
    cut_in: tuple = (2.5, 3.5)
    rated_speed: tuple = (11.0, 13.0)
    cut_out: tuple = (24.0, 26.0)
    rated_power: tuple = (5e3, 15e3)
    pv_surface: tuple = (40.0, 80.0)
    pv_efficiency: tuple = (0.14, 0.20)
    exchange_surface: tuple = (150.0, 400.0)
    thermal_resistance: tuple = (2.0, 4.0)
    target_temp: tuple = (18.0, 21.0)
    max_power: tuple = (200.0, 600.0)
    profile_jitter: float = 0.05
    noise_sigma: tuple = (0.02, 0.08)


def random_configs(n_agents: int, zone_ids, seed: int, ranges: ConfigRanges | None = None) -> list[ProsumerConfig]:
    """Seeded random population; agent ids are ``a000``, ``a001``, ..."""
    r = ranges or ConfigRanges()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    zone_ids = list(zone_ids)

    def u(bounds):
        return float(rng.uniform(*bounds))

    configs = []
    for i in range(n_agents):
        zone = zone_ids[int(rng.integers(len(zone_ids)))]
        turbines = [
            WindTurbineSpec(u(r.cut_in), u(r.rated_speed), u(r.cut_out), u(r.rated_power))
            for _ in range(int(rng.integers(r.n_turbines[0], r.n_turbines[1] + 1)))
        ]
        pvs = [
            PVArraySpec(u(r.pv_surface), u(r.pv_efficiency))
            for _ in range(int(rng.integers(r.n_pv[0], r.n_pv[1] + 1)))
        ]
        loads = []
        for _ in range(int(rng.integers(r.n_loads[0], r.n_loads[1] + 1))):
            base = RESIDENTIAL_PROFILE if rng.random() < 0.7 else BUSINESS_PROFILE
            profile = np.clip(np.asarray(base) + rng.normal(0.0, r.profile_jitter, 24), 0.0, 1.0)
            loads.append(LoadSpec(
                u(r.exchange_surface), u(r.thermal_resistance), u(r.target_temp), u(r.max_power),
                tuple(float(x) for x in profile), u(r.noise_sigma),
            ))
        configs.append(ProsumerConfig(f"a{i:03d}", zone, turbines, pvs, loads))
    return configs

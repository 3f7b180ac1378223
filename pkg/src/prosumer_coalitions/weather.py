"""Zone weather series: CSV ingestion and a seeded synthetic generator.

Every dataset is a set of zones sharing one uniform time axis. Arrays are
stored column-wise (numpy) and frozen after construction so datasets can
be shared between workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import AlignmentError, EmptyRangeError, ValidationError, WeatherParseError

CSV_COLUMNS = ("zone_id", "timestamp", "wind_speed_ms", "nebulosity_okta", "temperature_c")
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
DEFAULT_PERIOD = np.timedelta64(3 * 3600, "s")
EARTH_RADIUS_KM = 6371.0


def as_period(period) -> np.timedelta64:
    """Coerce a timedelta, numpy timedelta64 or a number of hours to timedelta64[s]."""
    if isinstance(period, np.timedelta64):
        out = period.astype("timedelta64[s]")
    elif isinstance(period, timedelta):
        out = np.timedelta64(int(round(period.total_seconds())), "s")
    elif isinstance(period, (int, float)):
        out = np.timedelta64(int(round(period * 3600)), "s")
    else:
        raise TypeError(f"cannot interpret period {period!r}")
    if out <= np.timedelta64(0, "s"):
        raise ValueError("period must be positive")
    return out


def as_instant(t) -> np.datetime64:
    """Coerce a datetime (naive = UTC), ISO string or datetime64 to datetime64[s]."""
    if isinstance(t, np.datetime64):
        return t.astype("datetime64[s]")
    if isinstance(t, str):
        return np.datetime64(parse_timestamp(t).replace(tzinfo=None), "s")
    if isinstance(t, datetime):
        if t.tzinfo is not None:
            t = t.astimezone(timezone.utc).replace(tzinfo=None)
        return np.datetime64(t, "s")
    raise TypeError(f"cannot interpret instant {t!r}")


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    try:
        return datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)
    except ValueError:
        pass
    # also accept an explicit +00:00 offset
    parsed = datetime.fromisoformat(text)
    if parsed.utcoffset() != timedelta(0):
        raise ValueError(f"timestamp {text!r} is not UTC")
    return parsed


def format_timestamp(t: np.datetime64) -> str:
    return np.datetime_as_string(t.astype("datetime64[s]"), unit="s") + "Z"


@dataclass(frozen=True)
class WeatherSample:
    timestamp: np.datetime64
    wind_speed: float
    nebulosity: int
    temperature: float


@dataclass(frozen=True, eq=False)
class ZoneSeries:
    zone_id: str
    latitude: float
    longitude: float
    timestamps: np.ndarray
    wind_speed: np.ndarray
    nebulosity: np.ndarray
    temperature: np.ndarray
    period: np.timedelta64 = DEFAULT_PERIOD

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        wind = np.asarray(self.wind_speed, dtype=float)
        neb = np.asarray(self.nebulosity)
        temp = np.asarray(self.temperature, dtype=float)
        n = len(ts)
        if not (len(wind) == len(neb) == len(temp) == n):
            raise ValidationError(f"zone {self.zone_id!r}: column lengths differ")
        if n == 0:
            raise EmptyRangeError(f"zone {self.zone_id!r} has no samples")
        period = as_period(self.period)
        if n > 1 and np.any(np.diff(ts) != period):
            raise AlignmentError(f"zone {self.zone_id!r}: samples are not spaced by {period}")
        if not np.all(np.isfinite(wind)) or np.any(wind < 0):
            raise ValidationError(f"zone {self.zone_id!r}: wind speed must be finite and >= 0")
        if not np.all(np.isfinite(temp)):
            raise ValidationError(f"zone {self.zone_id!r}: temperature must be finite")
        if np.any(neb != np.round(neb)) or np.any((neb < 0) | (neb > 8)):
            raise ValidationError(f"zone {self.zone_id!r}: nebulosity must be an integer okta in 0..8")
        neb = neb.astype(np.int8)
        for arr in (ts, wind, neb, temp):
            arr.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "wind_speed", wind)
        object.__setattr__(self, "nebulosity", neb)
        object.__setattr__(self, "temperature", temp)
        object.__setattr__(self, "period", period)

    def __len__(self):
        return len(self.timestamps)

    @property
    def samples(self) -> list[WeatherSample]:
        return [
            WeatherSample(t, float(w), int(n), float(c))
            for t, w, n, c in zip(self.timestamps, self.wind_speed, self.nebulosity, self.temperature)
        ]


@dataclass(frozen=True, eq=False)
class WeatherDataset:
    zones: tuple[ZoneSeries, ...]
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        zones = tuple(self.zones)
        if not zones:
            raise EmptyRangeError("dataset has no zones")
        ids = [z.zone_id for z in zones]
        if len(set(ids)) != len(ids):
            raise ValidationError("zone ids must be unique")
        ref = zones[0]
        for z in zones[1:]:
            if z.period != ref.period or len(z) != len(ref) or not np.array_equal(z.timestamps, ref.timestamps):
                raise AlignmentError(
                    f"zones {ref.zone_id!r} and {z.zone_id!r} do not share the same time axis"
                )
        object.__setattr__(self, "zones", zones)
        object.__setattr__(self, "_index", {z.zone_id: z for z in zones})

    def __len__(self):
        return len(self.zones[0])

    def __contains__(self, zone_id):
        return zone_id in self._index

    def zone(self, zone_id) -> ZoneSeries:
        return self._index[zone_id]

    @property
    def zone_ids(self) -> list[str]:
        return [z.zone_id for z in self.zones]

    @property
    def timestamps(self) -> np.ndarray:
        return self.zones[0].timestamps

    @property
    def period(self) -> np.timedelta64:
        return self.zones[0].period


# ---------------------------------------------------------------------------
# CSV ingestion


def ingest_weather_csv(path, period=DEFAULT_PERIOD, coordinates=None, fill=None) -> WeatherDataset:
    """Read a weather CSV into a dataset.

    ``coordinates`` maps zone_id to ``(latitude, longitude)``; zones missing
    from it get NaN coordinates (fine for wind/temperature, rejected later if
    solar radiance is needed). ``fill="hold"`` forward-fills gaps of at most
    two missing samples; anything else leaves gaps as alignment errors.
    """
    if fill not in (None, "hold"):
        raise ValueError(f"unknown fill mode {fill!r}")
    period = as_period(period)
    coordinates = coordinates or {}
    rows: dict[str, list[tuple]] = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise WeatherParseError("empty file, header required", line=1) from None
        header = [h.strip() for h in header]
        if tuple(header) != CSV_COLUMNS:
            raise WeatherParseError(f"header must be {','.join(CSV_COLUMNS)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_COLUMNS):
                raise WeatherParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", line=line)
            zone_id = row[0].strip()
            if not zone_id:
                raise WeatherParseError("empty zone_id", line=line)
            try:
                ts = np.datetime64(parse_timestamp(row[1]).replace(tzinfo=None), "s")
                wind = float(row[2])
                neb = float(row[3])
                temp = float(row[4])
            except ValueError as exc:
                raise WeatherParseError(str(exc), line=line) from None
            if not math.isfinite(wind) or wind < 0:
                raise ValidationError(f"line {line}: wind speed {row[2]!r} must be finite and >= 0")
            if not math.isfinite(temp):
                raise ValidationError(f"line {line}: temperature {row[4]!r} must be finite")
            if neb != int(neb) or not 0 <= neb <= 8:
                raise ValidationError(f"line {line}: nebulosity {row[3]!r} outside 0..8")
            rows.setdefault(zone_id, []).append((ts, wind, int(neb), temp, line))

    if not rows:
        raise EmptyRangeError(f"{path}: no data rows")

    zones = []
    for zone_id, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        ts = np.array([r[0] for r in recs], dtype="datetime64[s]")
        steps = np.diff(ts)
        if np.any(steps == np.timedelta64(0, "s")):
            dup = ts[1:][steps == np.timedelta64(0, "s")][0]
            raise AlignmentError(f"zone {zone_id!r}: duplicate timestamp {format_timestamp(dup)}")
        cols = [np.array([r[i] for r in recs]) for i in (1, 2, 3)]
        if np.any(steps != period):
            if fill != "hold":
                raise AlignmentError(f"zone {zone_id!r}: non-uniform spacing (expected {period})")
            ts, cols = _hold_fill(zone_id, ts, cols, period)
        lat, lon = coordinates.get(zone_id, (math.nan, math.nan))
        zones.append(ZoneSeries(zone_id, float(lat), float(lon), ts, *cols, period=period))
    zones.sort(key=lambda z: z.zone_id)
    return WeatherDataset(tuple(zones))


def _hold_fill(zone_id, ts, cols, period, max_gap=2):
    steps = np.diff(ts)
    if np.any(steps % period != np.timedelta64(0, "s")):
        raise AlignmentError(f"zone {zone_id!r}: timestamps off the {period} grid")
    missing = steps // period - 1
    if np.any(missing > max_gap):
        raise AlignmentError(f"zone {zone_id!r}: gap of more than {max_gap} samples")
    # index of the last observed sample for each slot on the full grid
    counts = (missing + 1).astype(int)
    src = np.repeat(np.arange(len(ts) - 1), counts)
    src = np.append(src, len(ts) - 1)
    full_ts = ts[0] + period * np.arange(len(src))
    return full_ts, [c[src] for c in cols]


def write_weather_csv(dataset: WeatherDataset, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for z in dataset.zones:
            for t, w, n, c in zip(z.timestamps, z.wind_speed, z.nebulosity, z.temperature):
                writer.writerow([z.zone_id, format_timestamp(t), repr(float(w)), int(n), repr(float(c))])


# ---------------------------------------------------------------------------
# Synthetic weather


@dataclass(frozen=True)
class SynthParams:
    """Shape of the synthetic climate. AR coefficients are per sample step.

    Each variable has its own spatial scale: temperature anomalies are
    continental, wind is mesoscale (so distant zones decorrelate) and cloud
    cover sits in between. ``*_share`` is the variance fraction carried by
    the spatially correlated field; the rest is zone-local.
    """

    temp_mean: float = 12.0
    temp_annual_amp: float = 8.0
    temp_diurnal_amp: float = 4.0
    temp_ar: float = 0.95
    temp_noise_sd: float = 2.5
    wind_baseline: float = 7.0
    wind_seasonal_amp: float = 1.5
    wind_ar: float = 0.9
    wind_noise_sd: float = 2.0
    neb_mean: float = 4.5
    neb_seasonal_amp: float = 1.0
    neb_ar: float = 0.85
    neb_noise_sd: float = 3.0
    temp_share: float = 0.9
    temp_length_km: float = 800.0
    wind_share: float = 0.9
    wind_length_km: float = 100.0
    neb_share: float = 0.9
    neb_length_km: float = 300.0


def haversine_km(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _spatial_root(lat, lon, length_km):
    """Symmetric square root of the exponential spatial kernel."""
    d = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    kernel = np.exp(-d / length_km)
    vals, vecs = np.linalg.eigh(kernel)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _ar1(rng, root, n_steps, coef, sd, share):
    """Stationary AR(1) noise, unit-scaled by ``sd``, with a shared regional part."""
    n_zones = root.shape[0]
    regional = rng.standard_normal((n_steps, n_zones)) @ root.T
    local = rng.standard_normal((n_steps, n_zones))
    innov = math.sqrt(share) * regional + math.sqrt(1.0 - share) * local
    innov *= sd * math.sqrt(1.0 - coef**2)
    innov[0] /= math.sqrt(1.0 - coef**2)
    return lfilter([1.0], [1.0, -coef], innov, axis=0)


def time_features(timestamps):
    """Fractional day of year (0-based) and fractional UTC hour."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    year_start = ts.astype("datetime64[Y]").astype("datetime64[s]")
    day_start = ts.astype("datetime64[D]").astype("datetime64[s]")
    doy = (ts - year_start).astype(np.int64) / 86400.0
    hour = (ts - day_start).astype(np.int64) / 3600.0
    return doy, hour


def synthesize_weather(
    zone_specs: Sequence[tuple],
    start,
    n_steps: int,
    period=DEFAULT_PERIOD,
    seed: int = 0,
    params: SynthParams | None = None,
) -> WeatherDataset:
    """Generate a seeded weather dataset for ``(zone_id, latitude, longitude)`` specs.

    Each variable is a deterministic seasonal shape plus AR(1) noise whose
    innovations mix a spatially correlated regional field (exponential
    kernel on great-circle distance) with zone-local noise.
    """
    if n_steps < 1:
        raise EmptyRangeError("n_steps must be >= 1")
    p = params or SynthParams()
    ids = [str(s[0]) for s in zone_specs]
    if not ids:
        raise EmptyRangeError("no zones requested")
    if len(set(ids)) != len(ids):
        raise ValidationError("zone ids must be unique")
    lat = np.array([float(s[1]) for s in zone_specs])
    lon = np.array([float(s[2]) for s in zone_specs])
    period = as_period(period)
    ts = as_instant(start) + period * np.arange(n_steps)
    doy, hour = time_features(ts)
    annual = 2 * np.pi / 365.25

    rng = np.random.default_rng(seed)

    def noise(length_km, coef, sd, share):
        return _ar1(rng, _spatial_root(lat, lon, length_km), n_steps, coef, sd, share)

    temp_shape = (
        p.temp_mean
        + p.temp_annual_amp * np.cos(annual * (doy - 200.0))
        + p.temp_diurnal_amp * np.cos(2 * np.pi * (hour - 15.0) / 24.0)
    )
    temp = temp_shape[:, None] + noise(p.temp_length_km, p.temp_ar, p.temp_noise_sd, p.temp_share)

    wind_shape = p.wind_baseline + p.wind_seasonal_amp * np.cos(annual * (doy - 15.0))
    wind = wind_shape[:, None] + noise(p.wind_length_km, p.wind_ar, p.wind_noise_sd, p.wind_share)
    wind = np.maximum(wind, 0.0)

    neb_shape = p.neb_mean + p.neb_seasonal_amp * np.cos(annual * (doy - 15.0))
    neb = neb_shape[:, None] + noise(p.neb_length_km, p.neb_ar, p.neb_noise_sd, p.neb_share)
    neb = np.clip(np.rint(neb), 0, 8).astype(np.int8)

    zones = tuple(
        ZoneSeries(zid, lat[j], lon[j], ts, wind[:, j], neb[:, j], temp[:, j], period=period)
        for j, zid in enumerate(ids)
    )
    return WeatherDataset(zones)


def random_zone_specs(n_zones: int, seed: int, lat_range=(43.0, 50.5), lon_range=(-4.5, 7.5)) -> list[tuple]:
    """Scatter ``n_zones`` zones uniformly over a lat/lon box (mainland France by default)."""
    rng = np.random.default_rng(seed)
    lat = rng.uniform(*lat_range, size=n_zones)
    lon = rng.uniform(*lon_range, size=n_zones)
    return [(f"z{j:02d}", round(float(lat[j]), 4), round(float(lon[j]), 4)) for j in range(n_zones)]


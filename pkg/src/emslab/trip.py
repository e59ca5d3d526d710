"""Trip data: CSV ingestion, synthetic drive cycles, position bins and features.

A :class:`Trip` is stored column-wise (numpy arrays at a fixed sample time).
The synthetic generator stands in for recorded commuting data: a route is a
fixed sequence of urban/arterial/highway segments with a fixed elevation
profile, and every seed drives it with a different speed trace.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, RouteMismatch, SchemaError, SpecError, ValidationError
from .powertrain import Disturbance

TRIP_SCHEMA = "emslab-trip/1"
TRIP_COLUMNS = ("time_s", "position_m", "vehicle_speed_mps", "axle_speed_radps",
                "wheel_torque_Nm", "aux_power_W", "gear", "elevation_m")
REQUIRED_COLUMNS = TRIP_COLUMNS[:-1]

N_FEATURES = 8
FEATURE_NAMES = ("soc", "engine_status", "avg_aux_power", "fuel_consumed", "avg_speed",
                 "avg_accel", "est_time_left", "bias")


@dataclass(frozen=True)
class TripSample:
    time: float
    position: float
    axle_speed: float
    vehicle_speed: float
    wheel_torque_demand: float
    aux_power: float
    gear_index: int
    elevation: float = 0.0


@dataclass(frozen=True, eq=False)
class Trip:
    route_id: str
    trip_id: str
    time: np.ndarray
    position: np.ndarray
    vehicle_speed: np.ndarray
    axle_speed: np.ndarray
    wheel_torque: np.ndarray
    aux_power: np.ndarray
    gear: np.ndarray
    elevation: np.ndarray
    tag: str = ""

    def __post_init__(self):
        n = len(self.time)
        for name in ("position", "vehicle_speed", "axle_speed", "wheel_torque", "aux_power", "elevation"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValidationError(f"column {name} has {arr.size} rows, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        t = np.array(self.time, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "time", t)
        g = np.array(self.gear, dtype=np.int64)
        g.setflags(write=False)
        object.__setattr__(self, "gear", g)
        _validate_columns(t, self.position, self.vehicle_speed, self.axle_speed, g)

    def __len__(self) -> int:
        return self.time.size

    @property
    def sample_time(self) -> float:
        return float(self.time[1] - self.time[0]) if len(self) > 1 else 0.0

    @property
    def total_distance(self) -> float:
        return float(self.position[-1])

    @property
    def duration(self) -> float:
        return float(self.time[-1] - self.time[0])

    @property
    def acceleration(self) -> np.ndarray:
        """Causal backward-difference acceleration, 0 at the first sample."""
        a = np.zeros(len(self))
        if len(self) > 1:
            a[1:] = np.diff(self.vehicle_speed) / self.sample_time
        return a

    @property
    def samples(self) -> list[TripSample]:
        return [self.sample(i) for i in range(len(self))]

    def sample(self, i: int) -> TripSample:
        return TripSample(float(self.time[i]), float(self.position[i]), float(self.axle_speed[i]),
                          float(self.vehicle_speed[i]), float(self.wheel_torque[i]),
                          float(self.aux_power[i]), int(self.gear[i]), float(self.elevation[i]))

    def disturbance(self, i: int) -> Disturbance:
        return Disturbance(float(self.aux_power[i]), float(self.wheel_torque[i]),
                           float(self.axle_speed[i]), int(self.gear[i]))


def _validate_columns(t, pos, v, axle, gear) -> None:
    if t.size == 0:
        raise ValidationError("trip has no samples")
    if np.any(~np.isfinite(t)) or np.any(np.diff(t) <= 0):
        raise ValidationError("time column must be strictly increasing")
    if t.size > 2:
        dt = np.diff(t)
        if np.max(np.abs(dt - dt[0])) > 1e-6 * max(dt[0], 1.0):
            raise ValidationError("samples must be uniformly spaced")
    if np.any(v < 0) or np.any(axle < 0):
        raise ValidationError("speeds must be nonnegative")
    if np.any(np.diff(pos) < -1e-9):
        raise ValidationError("position must be nondecreasing")
    if np.any((gear < 1) | (gear > 6)):
        raise ValidationError("gear must be in 1..6")


# -- CSV I/O ------------------------------------------------------------------


def save_trip(trip: Trip, path) -> None:
    """Write the documented CSV layout with a one-line metadata comment."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# schema={TRIP_SCHEMA} route_id={trip.route_id} trip_id={trip.trip_id} tag={trip.tag or '-'}\n")
        w = csv.writer(fh)
        w.writerow(TRIP_COLUMNS)
        for i in range(len(trip)):
            w.writerow([repr(float(trip.time[i])), repr(float(trip.position[i])),
                        repr(float(trip.vehicle_speed[i])), repr(float(trip.axle_speed[i])),
                        repr(float(trip.wheel_torque[i])), repr(float(trip.aux_power[i])),
                        int(trip.gear[i]), repr(float(trip.elevation[i]))])


def _parse_meta(line: str) -> dict:
    meta = {}
    for tok in line.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            meta[k] = v
    return meta


def load_trip(path, sample_time: float | None = None) -> Trip:
    """Read a trip CSV; resample to ``sample_time`` when the source rate differs."""
    path = Path(path)
    meta: dict = {}
    rows = []
    with path.open(newline="") as fh:
        lines = [ln for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            meta.update(_parse_meta(ln))
        elif ln.strip():
            body.append(ln)
    if not body:
        raise ParseError(f"{path}: empty file")
    reader = csv.reader(body)
    header = [h.strip() for h in next(reader)]
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    idx = {c: header.index(c) for c in TRIP_COLUMNS if c in header}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            rows.append([float(row[idx[c]]) if c in idx else 0.0 for c in TRIP_COLUMNS])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: no data rows")
    data = np.array(rows)
    if np.any(data[:, 6] != np.round(data[:, 6])):
        raise ValidationError(f"{path}: gear must be an integer")
    t = data[:, 0]
    if np.any(np.diff(t) <= 0):
        raise ValidationError(f"{path}: time column is not strictly increasing")
    if np.any(data[:, 2] < 0) or np.any(data[:, 3] < 0):
        raise ValidationError(f"{path}: negative speed")
    route_id = meta.get("route_id", path.stem.split("_")[0])
    trip_id = meta.get("trip_id", path.stem)
    tag = meta.get("tag", "")
    cols = dict(zip(TRIP_COLUMNS, data.T))
    if sample_time is not None and len(t) > 1 and abs((t[1] - t[0]) - sample_time) > 1e-9:
        cols = _resample(cols, float(t[1] - t[0]), sample_time)
    return Trip(route_id, trip_id, cols["time_s"], cols["position_m"], cols["vehicle_speed_mps"],
                cols["axle_speed_radps"], cols["wheel_torque_Nm"], cols["aux_power_W"],
                cols["gear"].astype(int), cols["elevation_m"], "" if tag == "-" else tag)


def _resample(cols: dict, src_dt: float, dt: float) -> dict:
    """Linear interpolation onto a ``dt`` grid; each source sample covers one ``src_dt`` interval.

    Gear is held from the preceding source sample.  Values past the last
    source sample are held, so the final position (total distance) is kept.
    """
    t = cols["time_s"]
    count = int(round(len(t) * src_dt / dt))
    new_t = t[0] + dt * np.arange(count)
    out = {"time_s": new_t}
    for c, v in cols.items():
        if c in ("time_s", "gear"):
            continue
        out[c] = np.interp(new_t, t, v)
    gi = np.clip(np.searchsorted(t, new_t + 1e-9, side="right") - 1, 0, len(t) - 1)
    out["gear"] = cols["gear"][gi]
    return out


# -- synthetic generator --------------------------------------------------------


@dataclass(frozen=True)
class RoadLoad:
    """Longitudinal road-load constants used only by the generator.

    Wheel torque = r_w * (m*g*(c_rr*cos(theta) + sin(theta)) + 0.5*rho*CdA*v^2 + f_rot*m*a),
    with rolling resistance applied only while moving or launching.
    """

    mass_kg: float = 1900.0
    rolling_coeff: float = 0.0095
    drag_area_m2: float = 0.72
    air_density: float = 1.2
    wheel_radius_m: float = 0.33
    rotating_mass_factor: float = 1.05
    gravity: float = 9.81

    def wheel_torque(self, speed, accel, grade_rad):
        speed = np.asarray(speed, dtype=float)
        accel = np.asarray(accel, dtype=float)
        moving = (speed > 0) | (accel > 0)
        rolling = np.where(moving, self.mass_kg * self.gravity * self.rolling_coeff * np.cos(grade_rad), 0.0)
        climbing = np.where(moving, self.mass_kg * self.gravity * np.sin(grade_rad), 0.0)
        aero = 0.5 * self.air_density * self.drag_area_m2 * speed**2
        inertia = self.rotating_mass_factor * self.mass_kg * accel
        return self.wheel_radius_m * (rolling + climbing + aero + inertia)


SHIFT_SPEEDS = (0.0, 3.5, 7.0, 11.0, 16.0, 22.0)  # m/s at which gears 1..6 engage


def gear_for_speed(speed):
    return np.searchsorted(np.asarray(SHIFT_SPEEDS), np.asarray(speed), side="right").clip(1, 6)


@dataclass(frozen=True)
class Segment:
    kind: str  # urban | arterial | highway (label only)
    length_m: float
    cruise_speed_mps: float
    speed_std_mps: float = 1.0
    stop_spacing_m: float = 0.0  # 0 disables intermediate stops
    dwell_s: float = 15.0


@dataclass(frozen=True)
class CycleSpec:
    route_id: str
    segments: tuple[Segment, ...]
    aux_power_W: float = 600.0
    elevation_knots: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    road_load: RoadLoad = field(default_factory=RoadLoad)
    sample_time: float = 0.2
    idle_duration_s: float = 60.0  # used only when every segment has zero cruise speed

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(
            s if isinstance(s, Segment) else Segment(**s) for s in self.segments))
        object.__setattr__(self, "elevation_knots", tuple(tuple(map(float, k)) for k in self.elevation_knots))
        if isinstance(self.road_load, dict):
            object.__setattr__(self, "road_load", RoadLoad(**self.road_load))

    @property
    def total_length(self) -> float:
        return float(sum(s.length_m for s in self.segments))

    def validate(self) -> None:
        if not self.segments:
            raise SpecError("cycle spec needs at least one segment")
        if self.sample_time <= 0:
            raise SpecError("sample_time must be positive")
        for s in self.segments:
            if not s.length_m > 0:
                raise SpecError(f"segment length must be positive, got {s.length_m}")
            if s.cruise_speed_mps < 0 or s.speed_std_mps < 0 or s.stop_spacing_m < 0 or s.dwell_s < 0:
                raise SpecError(f"segment {s.kind!r} has a negative speed/spacing/dwell")
        zero = [s.cruise_speed_mps == 0 for s in self.segments]
        if any(zero) and not all(zero):
            raise SpecError("a segment with zero cruise speed can never be traversed")
        if self.aux_power_W < 0:
            raise SpecError("aux power must be nonnegative")

    @property
    def stationary(self) -> bool:
        return all(s.cruise_speed_mps == 0 for s in self.segments)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segments"] = [asdict(s) for s in self.segments]
        d["elevation_knots"] = [list(k) for k in self.elevation_knots]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CycleSpec":
        d = dict(d)
        d["segments"] = tuple(Segment(**s) for s in d["segments"])
        if "road_load" in d:
            d["road_load"] = RoadLoad(**d["road_load"])
        if "elevation_knots" in d:
            d["elevation_knots"] = tuple(tuple(k) for k in d["elevation_knots"])
        return cls(**d)


def _elevation_and_grade(spec: CycleSpec, position):
    knots = np.array(spec.elevation_knots, dtype=float)
    if knots.shape[0] == 1:
        return np.full_like(position, knots[0, 1]), np.zeros_like(position)
    elev = np.interp(position, knots[:, 0], knots[:, 1])
    slopes = np.diff(knots[:, 1]) / np.diff(knots[:, 0])
    k = np.clip(np.searchsorted(knots[:, 0], position, side="right") - 1, 0, slopes.size - 1)
    inside = (position >= knots[0, 0]) & (position <= knots[-1, 0])
    return elev, np.where(inside, np.arctan(slopes[k]), 0.0)


def _rng(route_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(route_id.encode())])


def generate_trip(spec: CycleSpec, seed: int, trip_id: str | None = None) -> Trip:
    """Drive the route once with seed-dependent traffic.

    Even seeds are tagged ``morning`` (congested first half, free second half),
    odd seeds ``afternoon`` (the reverse).  The route geometry (segments,
    stop locations, elevation) depends only on ``spec``.
    """
    spec.validate()
    ts = spec.sample_time
    trip_id = trip_id or f"{spec.route_id}-s{seed:03d}"
    rng = _rng(spec.route_id, seed)
    geo = _rng(spec.route_id, 0x5EED)
    tag = "morning" if seed % 2 == 0 else "afternoon"

    if spec.stationary:
        n = max(int(round(spec.idle_duration_s / ts)), 2)
        v = np.zeros(n)
        x = np.zeros(n)
    else:
        v, x = _drive(spec, rng, geo, tag)

    t = ts * np.arange(v.size)
    accel = np.zeros_like(v)
    accel[:-1] = np.diff(v) / ts  # torque at k produces the speed change to k+1
    elev, grade = _elevation_and_grade(spec, x)
    rl = spec.road_load
    torque = rl.wheel_torque(v, accel, grade)
    level = spec.aux_power_W * rng.uniform(0.75, 1.25)
    phase = rng.uniform(0, 2 * math.pi)
    aux = np.maximum(level * (1.0 + 0.15 * np.sin(2 * math.pi * t / 600.0 + phase)), 0.0)
    return Trip(spec.route_id, trip_id, t, x, v, v / rl.wheel_radius_m, torque, aux,
                gear_for_speed(v), elev, tag)


def _segment_bounds(spec: CycleSpec) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum([s.length_m for s in spec.segments])])


def _stop_positions(spec: CycleSpec, geo: np.random.Generator) -> np.ndarray:
    bounds = _segment_bounds(spec)
    stops = []
    for s, start in zip(spec.segments, bounds[:-1]):
        if s.stop_spacing_m <= 0:
            continue
        pos = start + s.stop_spacing_m * geo.uniform(0.6, 1.4)
        while pos < start + s.length_m - 50.0:
            stops.append(pos)
            pos += s.stop_spacing_m * geo.uniform(0.6, 1.4)
    return np.array(stops)


def _drive(spec: CycleSpec, rng: np.random.Generator, geo: np.random.Generator, tag: str):
    ts = spec.sample_time
    bounds = _segment_bounds(spec)
    total = bounds[-1]
    nseg = len(spec.segments)
    mids = 0.5 * (bounds[:-1] + bounds[1:]) / total
    congested = (mids < 0.5) if tag == "morning" else (mids >= 0.5)
    factor = np.where(congested, rng.uniform(0.55, 0.8, nseg), rng.uniform(0.9, 1.08, nseg))

    signal_stops = _stop_positions(spec, geo)
    # each signal is red for this trip with some probability
    red = rng.uniform(size=signal_stops.size) < 0.6
    stops = np.concatenate([signal_stops[red], [total]])
    dwell = {i: rng.uniform(0.4, 1.6) * spec.segments[min(np.searchsorted(bounds, p, side="right") - 1, nseg - 1)].dwell_s
             for i, p in enumerate(stops[:-1])}

    tau = 20.0
    decay = math.exp(-ts / tau)
    diffuse = math.sqrt(1 - decay**2)
    b_comf = 1.3
    v, x, noise = 0.0, 0.0, 0.0
    wait = 3.0
    k_stop = 0
    vs, xs = [0.0], [0.0]
    for _ in range(int(50 * total / ts) + 10000):
        seg = min(int(np.searchsorted(bounds, x, side="right")) - 1, nseg - 1)
        s = spec.segments[seg]
        noise = noise * decay + s.speed_std_mps * diffuse * rng.standard_normal()
        if wait > 0:
            wait -= ts
            a = 0.0
        else:
            target = max(s.cruise_speed_mps * factor[seg] + noise, 2.0)
            d = stops[k_stop] - x
            need = v * v / (2.0 * max(d, 1e-3))
            if need >= b_comf or (d < 1.0 and v > 0.6):
                a = -min(need, 4.0)
            else:
                a_max = 0.4 + 1.6 * max(1.0 - v / 35.0, 0.0)
                a = min(max(0.5 * (target - v), -1.5), a_max)
        v_new = max(v + a * ts, 0.0)
        x_new = x + 0.5 * (v + v_new) * ts
        if wait <= 0 and stops[k_stop] - x_new < 0.75 and v_new < 0.6:
            v_new = 0.0
            x_new = x + 0.5 * v * ts
            if k_stop == stops.size - 1:
                vs.append(v_new)
                xs.append(x_new)
                break
            wait = dwell[k_stop]
            k_stop += 1
        elif x_new > stops[k_stop] and k_stop < stops.size - 1:
            k_stop += 1  # rolled through
        v, x = v_new, x_new
        vs.append(v)
        xs.append(x)
    else:  # pragma: no cover - generator bug guard
        raise SpecError("drive-cycle synthesis did not reach the route end")
    vs, xs = np.array(vs), np.array(xs)
    return vs, xs * (total / xs[-1])


def standard_routes() -> list[CycleSpec]:
    """Three synthetic commuting routes with different segment orderings and terrain."""
    return [
        CycleSpec("urban-first", (
            Segment("urban", 3500.0, 13.0, 1.2, 400.0, 15.0),
            Segment("arterial", 4000.0, 18.0, 1.5, 900.0, 20.0),
            Segment("highway", 6500.0, 29.0, 2.0),
        ), aux_power_W=600.0, elevation_knots=((0.0, 20.0), (7000.0, 40.0), (14000.0, 25.0))),
        CycleSpec("highway-first", (
            Segment("highway", 7000.0, 29.0, 2.0),
            Segment("arterial", 3000.0, 17.0, 1.5, 800.0, 20.0),
            Segment("urban", 3000.0, 12.0, 1.2, 350.0, 15.0),
        ), aux_power_W=700.0, elevation_knots=((0.0, 10.0), (5000.0, 60.0), (13000.0, 30.0))),
        CycleSpec("hilly", (
            Segment("arterial", 3000.0, 17.0, 1.5, 700.0, 20.0),
            Segment("highway", 5000.0, 27.0, 2.0),
            Segment("urban", 3500.0, 12.0, 1.2, 400.0, 15.0),
        ), aux_power_W=500.0, elevation_knots=((0.0, 50.0), (3000.0, 60.0), (8000.0, 250.0), (11500.0, 150.0))),
    ]


# -- position bins ------------------------------------------------------------------


@dataclass(frozen=True)
class RouteBins:
    route_id: str
    bin_length: float
    total_distance: float
    bin_count: int

    def bin_of(self, position):
        k = np.floor(np.asarray(position, dtype=float) / self.bin_length).astype(np.int64)
        return np.minimum(np.maximum(k, 0), self.bin_count - 1)

    @property
    def centers(self) -> np.ndarray:
        edges = np.minimum(self.bin_length * np.arange(self.bin_count + 1), max(self.total_distance, 0.0))
        edges[-1] = max(self.total_distance, edges[-1])
        return 0.5 * (edges[:-1] + edges[1:])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RouteBins":
        return cls(d["route_id"], float(d["bin_length"]), float(d["total_distance"]), int(d["bin_count"]))


def make_bins(trips, bin_length: float = 100.0) -> RouteBins:
    trips = list(trips)
    if not trips:
        raise RouteMismatch("no trips given")
    if bin_length <= 0:
        raise ValueError("bin_length must be positive")
    routes = {t.route_id for t in trips}
    if len(routes) != 1:
        raise RouteMismatch(f"trips span several routes: {sorted(routes)}")
    dists = np.array([t.total_distance for t in trips])
    if dists.min() > 0 and dists.max() / dists.min() - 1.0 > 0.01 or (dists.min() == 0 < dists.max()):
        raise RouteMismatch(f"trip distances disagree by more than 1%: {dists.min():.1f}..{dists.max():.1f} m")
    total = float(dists.max())
    count = max(int(math.ceil(total / bin_length - 1e-9)), 1)
    return RouteBins(trips[0].route_id, float(bin_length), total, count)


@dataclass(frozen=True, eq=False)
class RouteStats:
    """Historical mean remaining travel time at entry to each bin."""

    bins: RouteBins
    remaining_time: np.ndarray
    mean_total_time: float

    def to_dict(self) -> dict:
        return {"remaining_time": self.remaining_time.tolist(), "mean_total_time": self.mean_total_time}

    @classmethod
    def from_dict(cls, bins: RouteBins, d: dict) -> "RouteStats":
        return cls(bins, np.asarray(d["remaining_time"], dtype=float), float(d["mean_total_time"]))


def route_stats(trips, bins: RouteBins) -> RouteStats:
    trips = list(trips)
    rem = np.zeros((len(trips), bins.bin_count))
    for r, trip in enumerate(trips):
        k = bins.bin_of(trip.position)
        t_rel = trip.time - trip.time[0]
        entry = np.full(bins.bin_count, np.nan)
        first = np.unique(k, return_index=True)
        entry[first[0]] = t_rel[first[1]]
        seen = ~np.isnan(entry)
        if not seen.all():  # bins jumped over: interpolate entry time by bin index
            entry = np.interp(np.arange(bins.bin_count), np.flatnonzero(seen), entry[seen])
        rem[r] = trip.duration - entry
    totals = [t.duration for t in trips]
    return RouteStats(bins, rem.mean(axis=0), float(np.mean(totals)))


# -- features ---------------------------------------------------------------------


@dataclass
class TripHistory:
    """Powertrain-dependent history of a run: values at samples 0..k."""

    soc: list = field(default_factory=list)
    engine_on: list = field(default_factory=list)
    fuel_consumed: list = field(default_factory=list)  # kg burned before each sample


def extract_features(trip: Trip, history: TripHistory, k: int, stats: RouteStats) -> np.ndarray:
    """Feature vector at sample ``k`` from samples 0..k only.

    Averages are cumulative means over the trip so far (current sample
    included).  Estimated time left is the route's mean remaining time at
    entry to the current bin, minus the time already spent in that bin.
    """
    kk = k + 1
    bins = stats.bins
    b = bins.bin_of(trip.position[:kk])
    entry = k
    while entry > 0 and b[entry - 1] == b[k]:
        entry -= 1
    left = max(stats.remaining_time[b[k]] - (trip.time[k] - trip.time[entry]), 0.0)
    return np.array([
        history.soc[k],
        1.0 if history.engine_on[k] else 0.0,
        float(np.mean(trip.aux_power[:kk])),
        history.fuel_consumed[k],
        float(np.mean(trip.vehicle_speed[:kk])),
        float(np.mean(trip.acceleration[:kk])),
        left,
        1.0,
    ])


def trajectory_features(trip: Trip, soc, engine_on, fuel_consumed, stats: RouteStats) -> np.ndarray:
    """Vectorized :func:`extract_features` for every sample of a run."""
    n = len(trip)
    count = np.arange(1, n + 1)
    b = stats.bins.bin_of(trip.position)
    change = np.concatenate([[True], b[1:] != b[:-1]])
    entry_idx = np.maximum.accumulate(np.where(change, np.arange(n), 0))
    left = np.maximum(stats.remaining_time[b] - (trip.time - trip.time[entry_idx]), 0.0)
    X = np.empty((n, N_FEATURES))
    X[:, 0] = soc
    X[:, 1] = np.asarray(engine_on, dtype=float)
    X[:, 2] = np.cumsum(trip.aux_power) / count
    X[:, 3] = fuel_consumed
    X[:, 4] = np.cumsum(trip.vehicle_speed) / count
    X[:, 5] = np.cumsum(trip.acceleration) / count
    X[:, 6] = left
    X[:, 7] = 1.0
    return X


class FeatureTracker:
    """Running accumulators for on-line feature extraction (O(1) per step).

    ``aux``, ``speed`` and ``last_accel`` hold the most recent sample, which
    predictors repeat under a frozen-disturbance assumption.
    """

    def __init__(self, stats: RouteStats, sample_time: float = 0.2):
        self.stats = stats
        self.sample_time = sample_time
        self.n = 0
        self.sum_aux = 0.0
        self.sum_speed = 0.0
        self.sum_accel = 0.0
        self.fuel_kg = 0.0
        self.bin = -1
        self.entry_time = 0.0
        self.time = 0.0
        self.aux = 0.0
        self.speed: float | None = None
        self.last_accel = 0.0

    def observe(self, time: float, position: float, speed: float, aux_power: float) -> None:
        accel = 0.0 if self.speed is None else (speed - self.speed) / self.sample_time
        self.speed = speed
        self.aux = aux_power
        self.last_accel = accel
        self.n += 1
        self.sum_aux += aux_power
        self.sum_speed += speed
        self.sum_accel += accel
        b = int(self.stats.bins.bin_of(position))
        if b != self.bin:
            self.bin = b
            self.entry_time = time
        self.time = time

    def add_fuel(self, kg: float) -> None:
        self.fuel_kg += kg

    def time_left(self) -> float:
        return max(float(self.stats.remaining_time[self.bin]) - (self.time - self.entry_time), 0.0)

    def features(self, soc: float, engine_on: bool) -> np.ndarray:
        n = self.n
        return np.array([soc, 1.0 if engine_on else 0.0, self.sum_aux / n, self.fuel_kg,
                         self.sum_speed / n, self.sum_accel / n, self.time_left(), 1.0])

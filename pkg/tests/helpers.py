"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from emslab.dp import DpGrid
from emslab.powertrain import PowertrainParams, PowertrainState, Table1D, Table2D, default_params
from emslab.trip import CycleSpec, Segment, Trip, gear_for_speed

WHEEL_RADIUS = 0.33


def make_trip(speed, wheel_torque, aux_power=0.0, route_id="hand", trip_id="hand-0", sample_time=0.2,
              gear=None) -> Trip:
    """Trip from explicit speed and torque traces (positions integrated with the trapezoid rule)."""
    v = np.asarray(speed, dtype=float)
    n = v.size
    torque = np.broadcast_to(np.asarray(wheel_torque, dtype=float), (n,)).copy()
    aux = np.broadcast_to(np.asarray(aux_power, dtype=float), (n,)).copy()
    t = sample_time * np.arange(n)
    x = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * sample_time)])
    g = gear_for_speed(v) if gear is None else np.broadcast_to(gear, (n,))
    return Trip(route_id, trip_id, t, x, v, v / WHEEL_RADIUS, torque, aux, g, np.zeros(n))


def toy_instance(rng: np.random.Generator, base: PowertrainParams | None = None):
    """Random small lattice problem: at most 6 stages, 7 SOC points and 5 candidates per state.

    The battery is shrunk so that single steps move the SOC across grid
    points of the narrow SOC window.
    """
    base = base or default_params()
    n = int(rng.integers(3, 8))
    v = rng.uniform(2.0, 25.0, n)
    trip = make_trip(v, rng.uniform(-300.0, 900.0, n), rng.uniform(0.0, 1500.0, n), route_id="toy",
                     trip_id=f"toy-{int(rng.integers(1 << 30))}")
    params = base.with_updates(battery_capacity=float(rng.uniform(60.0, 300.0)), soc_min=0.4, soc_max=0.6)
    grid = DpGrid.uniform(params, int(rng.integers(3, 8)), int(rng.integers(2, 5)), interpolation="nearest")
    x0 = PowertrainState(float(rng.choice(grid.soc_points)), bool(rng.integers(0, 2)))
    return trip, params, grid, x0


def constant_map_params(voc=360.0, rb=0.1, capacity=28800.0, motor_eff=0.9, engine_eff=0.35,
                        lhv=44.0e6, gear_ratios=(4.0, 4.0, 4.0, 4.0, 4.0, 4.0)) -> PowertrainParams:
    """Default parameter set with flat maps, so hand arithmetic applies directly."""
    p = default_params()
    return p.with_updates(
        voc_map=Table1D([0.0, 1.0], [voc, voc]),
        rb_map=Table1D([0.0, 1.0], [rb, rb]),
        battery_capacity=capacity,
        motor_eff_map=Table2D([-300.0, 300.0], [0.0, 1500.0], np.full((2, 2), motor_eff)),
        engine_eff_map=Table2D([0.0, 300.0], [0.0, 1000.0], np.full((2, 2), engine_eff)),
        fuel_lhv=lhv,
        gear_ratios=gear_ratios,
    )


def short_spec(route_id: str = "short") -> CycleSpec:
    """About 2.3 km: one urban stretch with signals, then a highway stretch."""
    return CycleSpec(route_id, (
        Segment("urban", 800.0, 12.0, 1.0, 400.0, 10.0),
        Segment("highway", 1500.0, 25.0, 2.0),
    ), aux_power_W=600.0)


def mid_spec() -> CycleSpec:
    """About 5.5 km mixed commute, long enough for well over 1000 DP stages."""
    return CycleSpec("commute-mid", (
        Segment("urban", 1500.0, 13.0, 1.2, 400.0, 12.0),
        Segment("arterial", 1500.0, 18.0, 1.5, 900.0, 15.0),
        Segment("highway", 2500.0, 27.0, 2.0),
    ), aux_power_W=600.0, elevation_knots=((0.0, 20.0), (3000.0, 35.0), (5500.0, 25.0)))


def flat_long_spec() -> CycleSpec:
    """Flat urban/arterial/highway loop driven twice (well over 30 minutes)."""
    segs = (Segment("urban", 3500.0, 13.0, 1.2, 400.0, 15.0),
            Segment("arterial", 4000.0, 18.0, 1.5, 900.0, 20.0),
            Segment("highway", 6500.0, 29.0, 2.0))
    return CycleSpec("long-flat", segs * 2, aux_power_W=600.0)


def cruise_spec() -> CycleSpec:
    """Flat steady cruise with no intermediate stops."""
    return CycleSpec("cruise", (Segment("arterial", 30000.0, 18.0, 0.5),), aux_power_W=600.0)


def sub_trip(trip: Trip, start: int, stop: int) -> Trip:
    """Samples ``start:stop`` of a trip, re-timed to start at 0."""
    s = slice(start, stop)
    return Trip(trip.route_id, f"{trip.trip_id}[{start}:{stop}]", trip.time[s] - trip.time[start],
                trip.position[s] - trip.position[start], trip.vehicle_speed[s], trip.axle_speed[s],
                trip.wheel_torque[s], trip.aux_power[s], trip.gear[s], trip.elevation[s], trip.tag)

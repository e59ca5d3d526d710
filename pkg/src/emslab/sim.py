"""Closed-loop simulation, fuel-economy accounting and controller comparison.

Every controller is driven through the same plant (:func:`emslab.powertrain.step`
with the spread start-up draw) and the same accounting, so the columns of a
comparison differ only in the decisions made.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .baselines import (AecmsConfig, AecmsController, CdCsConfig, CdCsController, RepresentativeSocProfile,
                        representative_profile)
from .dp import ValueTable
from .errors import MissingArtifacts, ZeroDistance
from .learn import SolvedTrip, fit, leave_one_out
from .mpc import MpcConfig, MpcController, ValueTableTerminal
from .powertrain import ControlInput, Disturbance, PowertrainParams, PowertrainState, StepOutputs, step
from .trip import RouteBins, RouteStats, Trip, TripSample, make_bins

METERS_PER_MILE = 1609.344
KWH = 3.6e6
CONTROLLERS = ("cdcs", "aecms", "proposed", "dp")


class Controller(Protocol):
    label: str

    def reset(self, trip: Trip, state: PowertrainState) -> None: ...

    def control(self, k: int, state: PowertrainState, dist: Disturbance, sample: TripSample) -> ControlInput: ...

    def update(self, outputs: StepOutputs) -> None: ...


TRACE_COLUMNS = ("time_s", "position_m", "soc", "engine_on", "engine_torque_nm", "engine_switch",
                 "motor_torque_nm", "fuel_power_w", "battery_internal_power_w", "fuel_mass_kg", "infeasible")


@dataclass(frozen=True, eq=False)
class SimResult:
    controller: str
    trip_id: str
    route_id: str
    time: np.ndarray  # (N,)
    position: np.ndarray
    soc: np.ndarray  # (N,)
    engine_on: np.ndarray  # (N,)
    engine_torque: np.ndarray  # (N-1,)
    engine_switch: np.ndarray
    motor_torque: np.ndarray
    fuel_power: np.ndarray
    internal_power: np.ndarray
    fuel_mass: np.ndarray
    infeasible: np.ndarray
    sample_time: float
    joules_per_gallon: float

    @property
    def fuel_gallons(self) -> float:
        return float(np.sum(self.fuel_power) * self.sample_time / self.joules_per_gallon)

    @property
    def fuel_kg(self) -> float:
        return float(np.sum(self.fuel_mass))

    @property
    def battery_kwh(self) -> float:
        """Signed battery energy drawn (negative when the trip ends with net charging)."""
        return float(np.sum(self.internal_power) * self.sample_time / KWH)

    @property
    def net_battery_kwh(self) -> float:
        """Battery energy drawn, with net charging credited as zero."""
        return max(0.0, self.battery_kwh)

    @property
    def distance_miles(self) -> float:
        return float(self.position[-1] - self.position[0]) / METERS_PER_MILE

    @property
    def infeasible_step_count(self) -> int:
        return int(np.sum(self.infeasible))

    @property
    def engine_start_count(self) -> int:
        return int(np.sum(~self.engine_on[:-1] & self.engine_on[1:]))

    @property
    def cost(self) -> float:
        """Summed stage cost in gallons equivalent (signed battery term)."""
        return float(np.sum(self.fuel_power + self.internal_power) * self.sample_time / self.joules_per_gallon)

    @property
    def mpge(self) -> float:
        return mpge(self)

    def summary(self) -> dict:
        return {
            "controller": self.controller, "trip_id": self.trip_id, "route_id": self.route_id,
            "fuel_gallons": self.fuel_gallons, "fuel_kg": self.fuel_kg, "battery_kwh": self.battery_kwh,
            "net_battery_kwh": self.net_battery_kwh, "distance_miles": self.distance_miles,
            "infeasible_step_count": self.infeasible_step_count, "engine_start_count": self.engine_start_count,
            "cost_gallons": self.cost, "final_soc": float(self.soc[-1]),
            "mpge": self.mpge if self.distance_miles > 0 else None,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            n = self.engine_torque.size
            for k in range(self.soc.size):
                step_vals = ([self.engine_torque[k], int(self.engine_switch[k]), self.motor_torque[k],
                              self.fuel_power[k], self.internal_power[k], self.fuel_mass[k],
                              int(self.infeasible[k])] if k < n else ["", "", "", "", "", "", ""])
                w.writerow([repr(float(self.time[k])), repr(float(self.position[k])), repr(float(self.soc[k])),
                            int(self.engine_on[k]), *[repr(float(v)) if isinstance(v, (float, np.floating)) else v
                                                       for v in step_vals]])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def mpge(result: SimResult) -> float:
    """Miles per gallon equivalent: distance over fuel plus net battery energy (33.7 kWh per gallon)."""
    miles = result.distance_miles
    if miles <= 0:
        raise ZeroDistance(f"trip {result.trip_id!r} covers no distance")
    gallons = result.fuel_gallons + result.net_battery_kwh * KWH / result.joules_per_gallon
    return miles / gallons if gallons > 0 else float("inf")


def simulate(trip: Trip, controller: Controller, params: PowertrainParams,
             x0: PowertrainState | None = None) -> SimResult:
    """Run ``controller`` through the plant over the whole trip (N - 1 steps)."""
    x0 = x0 or PowertrainState(0.5 * (params.soc_min + params.soc_max))
    n = len(trip)
    soc = np.empty(n)
    eng = np.zeros(n, dtype=bool)
    te = np.zeros(n - 1)
    sw = np.zeros(n - 1, dtype=bool)
    tm = np.zeros(n - 1)
    pf = np.zeros(n - 1)
    pq = np.zeros(n - 1)
    mf = np.zeros(n - 1)
    bad = np.zeros(n - 1, dtype=bool)
    state = x0
    controller.reset(trip, state)
    soc[0], eng[0] = state.soc, state.engine_on
    for k in range(n - 1):
        inp = controller.control(k, state, trip.disturbance(k), trip.sample(k))
        state, out = step(state, inp, trip.disturbance(k), params)
        controller.update(out)
        soc[k + 1], eng[k + 1] = state.soc, state.engine_on
        te[k], sw[k], tm[k] = out.engine_torque, inp.engine_switch, out.motor_torque
        pf[k], pq[k], mf[k], bad[k] = out.fuel_power, out.battery_internal_power, out.fuel_mass, out.infeasible
    return SimResult(getattr(controller, "label", type(controller).__name__), trip.trip_id, trip.route_id,
                     trip.time.copy(), trip.position.copy(), soc, eng, te, sw, tm, pf, pq, mf, bad,
                     params.sample_time, params.joules_per_gallon)


def dp_controller(table: ValueTable, params: PowertrainParams) -> MpcController:
    """Replays the DP policy causally: one-step minimization against the trip's own value table.

    The exact terminal cost ignores trip features, so the controller's
    feature tracker runs on a single-bin placeholder statistic.
    """
    duration = table.stage_count * params.sample_time
    bins = RouteBins(table.trip_id or "dp", 1e12, 0.0, 1)
    stats = RouteStats(bins, np.array([duration]), duration)
    ctl = MpcController(ValueTableTerminal(table), params, stats,
                        MpcConfig(torque_candidates=table.grid.torque_count, sample_time=params.sample_time))
    ctl.label = "dp"
    return ctl


# -- comparison -----------------------------------------------------------------------


@dataclass
class CompareConfig:
    bin_length: float = 100.0
    ridge_lambda: float = 1e-6
    neighbours: bool = True
    mpc: MpcConfig = field(default_factory=MpcConfig)
    cdcs: CdCsConfig = field(default_factory=CdCsConfig)
    aecms: AecmsConfig = field(default_factory=AecmsConfig)


@dataclass
class ComparisonReport:
    """Per-trip results of every controller plus route averages."""

    results: dict[str, dict[str, SimResult | None]]  # trip_id -> controller -> result
    routes: dict[str, list[str]]  # route_id -> trip ids

    def mpge_table(self) -> dict[str, dict[str, float | None]]:
        return {t: {c: (r.mpge if r is not None else None) for c, r in row.items()}
                for t, row in self.results.items()}

    def route_averages(self) -> dict[str, dict[str, float | None]]:
        out = {}
        for route, trips in self.routes.items():
            avg = {}
            for c in CONTROLLERS:
                vals = [self.results[t][c].mpge for t in trips if self.results[t].get(c) is not None]
                avg[c] = float(np.mean(vals)) if len(vals) == len(trips) and vals else None
            out[route] = avg
        return out

    def deltas(self) -> dict[str, dict[str, float | None]]:
        """Route-average MPGe of each controller minus CD-CS, in percent of CD-CS."""
        out = {}
        for route, avg in self.route_averages().items():
            base = avg["cdcs"]
            out[route] = {c: (None if avg[c] is None or base is None else 100.0 * (avg[c] - base) / base)
                          for c in CONTROLLERS if c != "cdcs"}
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["route_id", "trip_id", *[f"mpge_{c}" for c in CONTROLLERS],
                        *[f"infeasible_{c}" for c in CONTROLLERS]])
            for route, trips in self.routes.items():
                for t in trips:
                    row = self.results[t]
                    w.writerow([route, t, *[_fmt(row.get(c), "mpge") for c in CONTROLLERS],
                                *[_fmt(row.get(c), "infeasible_step_count") for c in CONTROLLERS]])
            for route, avg in self.route_averages().items():
                w.writerow([route, "mean", *["" if avg[c] is None else repr(avg[c]) for c in CONTROLLERS]])

    def plot(self, path) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        avgs = self.route_averages()
        routes = list(avgs)
        x = np.arange(len(routes))
        fig, ax = plt.subplots(figsize=(7, 4))
        for i, c in enumerate(CONTROLLERS):
            vals = [avgs[r][c] if avgs[r][c] is not None else 0.0 for r in routes]
            ax.bar(x + (i - 1.5) * 0.2, vals, 0.2, label=c)
        ax.set_xticks(x, routes)
        ax.set_ylabel("MPGe (route average)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def _fmt(result, attr):
    if result is None:
        return ""
    v = getattr(result, attr)
    return repr(float(v)) if isinstance(v, float) else v


def compare(corpus: dict[str, list[SolvedTrip]], dp_results: dict[str, SimResult], params: PowertrainParams,
            cfg: CompareConfig = CompareConfig(), x0: PowertrainState | None = None,
            progress: Callable[[str], None] | None = None) -> ComparisonReport:
    """Evaluate CD-CS, A-ECMS and the learned MPC on every trip against its DP column.

    The learned policy and the A-ECMS reference for a trip are trained on the
    other trips of the same route only.  With a single trip on a route the
    proposed controller is unavailable for it; A-ECMS then falls back to a
    reference profile built from the trip's own route bins at the start SOC.
    """
    results: dict[str, dict[str, SimResult | None]] = {}
    routes: dict[str, list[str]] = {}
    for route, solved in corpus.items():
        routes[route] = [s.trip_id for s in solved]
        for s in solved:
            if s.trip_id not in dp_results:
                raise MissingArtifacts(f"no DP result for trip {s.trip_id!r}")
            if progress:
                progress(f"{route}/{s.trip_id}")
            row: dict[str, SimResult | None] = {"dp": dp_results[s.trip_id]}
            row["cdcs"] = simulate(s.trip, CdCsController(params, cfg.cdcs), params, x0)
            if len(solved) >= 2:
                training = leave_one_out(solved, s.trip_id, cfg.bin_length, cfg.neighbours)
                policy = fit(training, cfg.ridge_lambda)
                others = [o for o in solved if o.trip_id != s.trip_id]
                profile = representative_profile(others, training.bins)
                mpc = MpcController.from_policy(policy, params, cfg.mpc)
                mpc.label = "proposed"
                row["proposed"] = simulate(s.trip, mpc, params, x0)
            else:
                bins = make_bins([s.trip], cfg.bin_length)
                start = (x0 or PowertrainState(0.5 * (params.soc_min + params.soc_max))).soc
                profile = RepresentativeSocProfile.constant(bins, start)
                row["proposed"] = None
            row["aecms"] = simulate(s.trip, AecmsController(params, profile, cfg.aecms), params, x0)
            results[s.trip_id] = row
    return ComparisonReport(results, routes)

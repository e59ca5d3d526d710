"""Backward dynamic programming over a (stage x SOC x engine-state) lattice.

Stage ``k`` uses trip sample ``k`` as its disturbance and maps the state at
sample ``k`` to the state at sample ``k + 1``, so a trip of ``N`` samples has
``N - 1`` stages and ``N`` value layers (the last one is the terminal layer).

Concurrency: cell backups within a stage read only the immutable next layer
and are computed together as one array operation; stages run strictly in
sequence.  Separate trips share nothing and may be solved in parallel
processes.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InfeasibleTrip
from .powertrain import (ControlInput, Disturbance, Driveline, PowertrainParams, PowertrainState, battery,
                         candidate_inputs, combine, driveline, lumped_hsg_power, stage_cost_value, step,
                         torque_window)
from .trip import RouteBins, RouteStats, Trip, trajectory_features

VALUE_TABLE_LAYOUT = "emslab-value-table/1"


@dataclass(frozen=True, eq=False)
class DpGrid:
    """Lattice definition.

    ``interpolation`` is ``"linear"`` (piecewise linear in SOC, the default)
    or ``"nearest"``, which snaps every successor state to the closest grid
    point.  The nearest mode defines a finite lattice problem whose optimum is
    exactly checkable by enumeration.
    """

    soc_points: np.ndarray
    torque_count: int = 21
    interpolation: str = "linear"
    terminal_soc_penalty: float = 0.0  # gal per unit SOC below terminal_soc_ref; off by default
    terminal_soc_ref: float = 0.0

    def __post_init__(self):
        pts = np.array(self.soc_points, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "soc_points", pts)
        if pts.ndim != 1 or pts.size < 2 or np.any(np.diff(pts) <= 0):
            raise ValueError("soc_points must be strictly increasing with at least 2 points")
        if self.torque_count < 2:
            raise ValueError("torque_count must be >= 2")
        if self.interpolation not in ("linear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        step = (pts[-1] - pts[0]) / (pts.size - 1)
        uniform = bool(np.all(np.abs(np.diff(pts) - step) <= 1e-12 * step))
        object.__setattr__(self, "_step", step if uniform else None)

    def cell_index(self, soc: np.ndarray) -> np.ndarray:
        """Index ``j`` of the cell ``[p_j, p_{j+1}]`` holding each SOC (clipped to the grid)."""
        pts = self.soc_points
        if self._step is not None:
            j = np.floor((soc - pts[0]) / self._step).astype(np.intp)
        else:
            j = np.searchsorted(pts, soc, side="right") - 1
        return np.minimum(np.maximum(j, 0), pts.size - 2)

    @classmethod
    def uniform(cls, params: PowertrainParams, soc_count: int = 201, torque_count: int = 21,
                **kw) -> "DpGrid":
        return cls(np.linspace(params.soc_min, params.soc_max, soc_count), torque_count, **kw)

    def check(self, params: PowertrainParams) -> None:
        if self.soc_points[0] != params.soc_min or self.soc_points[-1] != params.soc_max:
            raise ValueError("soc_points must start at soc_min and end at soc_max")

    def terminal_layer(self) -> np.ndarray:
        pen = self.terminal_soc_penalty * np.maximum(self.terminal_soc_ref - self.soc_points, 0.0)
        return np.repeat(pen[:, None], 2, axis=1)


def interpolate_layer(grid: DpGrid, layer: np.ndarray, soc, bounds=None, bound_values=None,
                      columns=None) -> np.ndarray:
    """Value of ``layer`` (shape ``(S,)`` or ``(S, C)``) at ``soc``.

    For a 2-D layer, entry ``i`` of ``soc`` is interpolated from column
    ``columns[i]`` (default: the trailing index of ``soc``).  ``bounds`` is
    the continuous feasible SOC interval ``(lower, upper)`` and
    ``bound_values`` the cost-to-go at those two points; each entry
    broadcasts against ``soc``.  Outside the interval the value is +inf; in a
    cell cut by the interval the value is interpolated between the bound and
    the feasible grid point.  Both are ignored in ``nearest`` mode.
    """
    pts = grid.soc_points
    soc = np.asarray(soc, dtype=float)
    if layer.ndim == 2 and columns is None:
        columns = np.arange(layer.shape[1])
    if columns is not None:
        columns = np.broadcast_to(columns, soc.shape)
        flat = layer.ravel()
        width = layer.shape[1]

        def at(idx):
            return flat[idx * width + columns]
    else:
        def at(idx):
            return layer[idx]

    if grid.interpolation == "nearest":
        j = np.clip(np.searchsorted(pts, soc), 1, pts.size - 1)
        return at(np.where(np.abs(soc - pts[j - 1]) <= np.abs(pts[j] - soc), j - 1, j))
    j = grid.cell_index(soc)
    x0, x1 = pts[j], pts[j + 1]
    v0, v1 = at(j), at(j + 1)
    if bounds is not None:
        lower, upper = (np.asarray(b, dtype=float) for b in bounds)
        vlo, vhi = (np.asarray(v, dtype=float) for v in bound_values)
        f0, f1 = np.isfinite(v0), np.isfinite(v1)
        # Replace an infeasible grid neighbour by the interval end on that side.
        x0, v0 = np.where(f0, x0, lower), np.where(f0, v0, vlo)
        x1, v1 = np.where(f1, x1, upper), np.where(f1, v1, vhi)
    span = x1 - x0
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(span > 0.0, (soc - x0) / np.where(span > 0.0, span, 1.0), 0.0)
        lin = (1.0 - w) * v0 + w * v1
    out = np.where(w <= 0.0, v0, np.where(w >= 1.0, v1, lin))
    if bounds is not None:
        out = np.where((soc >= lower - BOUND_TOL) & (soc <= upper + BOUND_TOL), out, np.inf)
    return out


BOUND_TOL = 1e-8  # SOC slack on the feasible interval; covers its first-order construction


def full_bounds(params: PowertrainParams) -> np.ndarray:
    """Feasible SOC interval per engine state, shape ``(2, 2)`` as ``[engine][lower, upper]``."""
    return np.array([[params.soc_min, params.soc_max]] * 2)


def snap(grid: DpGrid, soc: float) -> float:
    pts = grid.soc_points
    return float(pts[np.argmin(np.abs(pts - soc))])


class StageCandidates(NamedTuple):
    """Every candidate input of one stage, for both current engine states.

    Column ``c`` applies ``(torques[c], switches[c])`` from engine state
    ``engine[c]``; engine-off columns come first, each group in tie-break
    order.  ``dl`` is the SOC-independent driveline evaluation of each column.
    """

    engine: np.ndarray
    torques: np.ndarray
    switches: np.ndarray
    dl: Driveline

    def columns(self, engine_on: bool) -> np.ndarray:
        return np.flatnonzero(self.engine == int(engine_on))


class StageModel:
    """Per-stage disturbance arrays and SOC-independent torque windows for one trip."""

    def __init__(self, trip: Trip, params: PowertrainParams):
        self.trip = trip
        self.params = params
        self.n_stages = len(trip) - 1
        self.aux = trip.aux_power
        self.torque = trip.wheel_torque
        self.axle = trip.axle_speed
        self.ratio = params.gear_ratio(trip.gear)
        self.lo, self.hi = torque_window(params, self.torque, self.axle, self.ratio)
        self._stages: dict[tuple[int, int], StageCandidates] = {}

    def candidates(self, k: int, engine_on: bool, n: int):
        return candidate_inputs(engine_on, float(self.lo[k]), float(self.hi[k]), n)

    def stage(self, k: int, n: int) -> StageCandidates:
        """Candidate set of stage ``k`` with ``n`` engine torques (memoized; read-only afterwards)."""
        key = (k, n)
        if key not in self._stages:
            self._stages[key] = self._build_stage(k, n)
        return self._stages[key]

    def _build_stage(self, k: int, n: int) -> StageCandidates:
        t0, s0 = self.candidates(k, False, n)
        t1, s1 = self.candidates(k, True, n)
        engine = np.concatenate([np.zeros(t0.size, dtype=int), np.ones(t1.size, dtype=int)])
        torques = np.concatenate([t0, t1])
        switches = np.concatenate([s0, s1])
        on = engine.astype(bool)
        hsg = lumped_hsg_power(self.params, on, switches)
        dl = driveline(self.params, on, torques, switches, self.aux[k], self.torque[k], self.axle[k],
                       self.ratio[k], hsg)
        return StageCandidates(engine, torques, switches, dl)

    def evaluate(self, cands: StageCandidates, soc):
        """Stage cost and step outputs for every (SOC row, candidate column) pair."""
        p = self.params
        soc = np.asarray(soc, dtype=float)[:, None]
        bat = battery(p, soc, cands.dl.battery_power[None, :])
        dl = Driveline(*(np.broadcast_to(a, bat.soc_next.shape) for a in cands.dl))
        out = combine(p, dl, bat)
        return stage_cost_value(p, out.fuel_power, out.internal_power), out


class Layer(NamedTuple):
    """Value layer plus its continuous feasible SOC interval and the values at its ends."""

    values: np.ndarray  # (S, 2)
    bounds: np.ndarray  # (2, 2) [engine][lower, upper]
    edge_values: np.ndarray  # (2, 2) [engine][at lower, at upper]

    def future(self, grid: DpGrid, engine_next: np.ndarray, soc_next: np.ndarray) -> np.ndarray:
        """Cost-to-go of each successor; column ``c`` lands in engine state ``engine_next[c]``."""
        e = engine_next
        return interpolate_layer(grid, self.values, soc_next, (self.bounds[e, 0], self.bounds[e, 1]),
                                 (self.edge_values[e, 0], self.edge_values[e, 1]), columns=e)


def terminal_layer(grid: DpGrid, params: PowertrainParams) -> Layer:
    values = grid.terminal_layer()
    return Layer(values, full_bounds(params), values[[0, -1]].T.copy())


def _totals(model: StageModel, grid: DpGrid, cands: StageCandidates, soc, nxt: Layer):
    cost, out = model.evaluate(cands, soc)
    future = nxt.future(grid, cands.switches.astype(int), out.soc_next)
    return np.where(out.feasible, cost + future, np.inf), cost, out


def feasible_interval(model: StageModel, cands: StageCandidates, nxt: Layer) -> np.ndarray:
    """Continuous SOC interval per engine state from which the next layer is reachable.

    Each candidate maps ``s`` to ``s - d(s)`` with a SOC drop ``d`` that
    barely varies with ``s``, so the state landing on a successor bound ``b``
    is the fixed point of ``s = b + d(s)``.  The interval is the hull of these
    over the candidates that satisfy the SOC-independent limits.  Returns a
    ``(2, 2)`` array; an empty interval is ``(inf, -inf)``.
    """
    p = model.params
    dl = cands.dl
    sw = cands.switches.astype(int)
    targets = nxt.bounds[sw].T  # (2, C): successor lower and upper bound per column
    ok = (dl.shortfall <= 0.0) & (dl.over_torque <= 0.0) & (targets[0] <= targets[1])
    s = targets
    with np.errstate(invalid="ignore"):  # empty successor intervals carry +-inf
        for _ in range(3):  # d varies slowly, so this is at rounding level after two passes
            bat = battery(p, s, dl.battery_power)
            s = targets + (s - bat.soc_next)
    need_lo = np.where(ok & (bat.disc[0] >= 0.0), s[0], np.inf)
    need_hi = np.where(ok & (bat.disc[1] >= 0.0), s[1], -np.inf)
    out = np.empty((2, 2))
    for e in (0, 1):
        cols = cands.engine == e
        out[e] = max(p.soc_min, need_lo[cols].min()), min(p.soc_max, need_hi[cols].max())
    return out


def bellman_backup(k: int, nxt: Layer | np.ndarray, trip: Trip | StageModel, grid: DpGrid,
                   params: PowertrainParams | None = None):
    """Layer ``k`` from layer ``k + 1``.

    Returns ``(layer, arg_torque, arg_switch)``; the argmin arrays have shape
    ``(S, 2)`` indexed by (SOC point, engine state).  Cells without a feasible
    input get +inf and a zero input.  A bare ``(S, 2)`` array for ``nxt`` is
    taken as a layer feasible over the whole SOC range.
    """
    model = trip if isinstance(trip, StageModel) else StageModel(trip, params)
    if not isinstance(nxt, Layer):
        nxt = Layer(nxt, full_bounds(model.params), nxt[[0, -1]].T.copy())
    cands = model.stage(k, grid.torque_count)
    bounds = feasible_interval(model, cands, nxt)
    # the interval ends are evaluated a hair inside so rounding cannot push
    # their successors across a hard SOC limit
    nonempty = bounds[:, 0] <= bounds[:, 1]
    inset = np.where(nonempty, np.minimum(0.5 * BOUND_TOL, 0.5 * (bounds[:, 1] - bounds[:, 0])), 0.0)
    ends = np.where(nonempty[:, None], bounds, model.params.soc_min) + np.stack([inset, -inset], axis=1)
    S = grid.soc_points.size
    rows = np.concatenate([grid.soc_points, ends.ravel()])
    total, _, _ = _totals(model, grid, cands, rows, nxt)
    values = np.empty((S, 2))
    edges = np.full((2, 2), np.inf)
    arg_t = np.zeros((S, 2))
    arg_s = np.zeros((S, 2), dtype=bool)
    for e in (0, 1):
        cols = cands.columns(bool(e))
        sub = total[:, cols]
        best = np.argmin(sub, axis=1)
        cell = sub[np.arange(rows.size), best]
        values[:, e] = cell[:S]
        if nonempty[e]:
            edges[e] = cell[S + 2 * e:S + 2 * e + 2]
        ok = np.isfinite(values[:, e])
        arg_t[:, e] = np.where(ok, cands.torques[cols][best[:S]], 0.0)
        arg_s[:, e] = np.where(ok, cands.switches[cols][best[:S]], False)
    return Layer(values, bounds, edges), arg_t, arg_s


def backup_cell(table: "ValueTable", model: StageModel, k: int, soc_index: int, engine_on: bool) -> float:
    """Re-evaluate the minimization for one stored cell (consistency audit)."""
    cands = model.stage(k, table.grid.torque_count)
    total, _, _ = _totals(model, table.grid, cands, table.grid.soc_points[[soc_index]], table.layer(k + 1))
    return float(total[0, cands.columns(engine_on)].min())


@dataclass(frozen=True, eq=False)
class ValueTable:
    """Optimal cost-to-go (gallons-equivalent) for every stage, SOC point and engine state."""

    grid: DpGrid
    values: np.ndarray  # (N, S, 2), last layer terminal
    arg_torque: np.ndarray  # (N - 1, S, 2)
    arg_switch: np.ndarray  # (N - 1, S, 2)
    bounds: np.ndarray  # (N, 2, 2) feasible SOC interval per stage and engine state
    edge_values: np.ndarray  # (N, 2, 2) cost-to-go at the interval ends
    trip_id: str = ""

    @property
    def stage_count(self) -> int:
        return self.arg_torque.shape[0]

    def layer(self, k: int) -> Layer:
        return Layer(self.values[k], self.bounds[k], self.edge_values[k])

    def value_at(self, k: int, soc, engine_on) -> np.ndarray:
        """Interpolated V_k at ``soc``; engine state is exact."""
        soc = np.asarray(soc, dtype=float)
        e = np.broadcast_to(np.asarray(engine_on, dtype=int), soc.shape)
        return self.layer(k).future(self.grid, e, soc)

    def argmin_input(self, k: int, soc_index: int, engine_on: bool) -> ControlInput:
        e = int(engine_on)
        sw = bool(self.arg_switch[k, soc_index, e])
        return ControlInput(float(self.arg_torque[k, soc_index, e]) if sw else 0.0, sw)


@dataclass(eq=False)
class OptimalTrajectory:
    soc: np.ndarray  # (N,)
    engine_on: np.ndarray  # (N,)
    engine_torque: np.ndarray  # (N - 1,)
    engine_switch: np.ndarray
    motor_torque: np.ndarray
    fuel_power: np.ndarray
    internal_power: np.ndarray
    battery_power: np.ndarray
    cost: np.ndarray
    fuel_consumed: np.ndarray  # (N,) kg burned before each sample
    infeasible_steps: int = 0

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.cost))


def solve_dp(trip: Trip, params: PowertrainParams, grid: DpGrid | None = None,
             x0: PowertrainState | None = None) -> tuple[ValueTable, OptimalTrajectory]:
    """Backward pass over all stages, then a forward rollout from ``x0``."""
    grid = grid or DpGrid.uniform(params)
    grid.check(params)
    x0 = x0 or PowertrainState(0.5 * (params.soc_min + params.soc_max))
    if not params.soc_min <= x0.soc <= params.soc_max:
        raise ValueError(f"initial SOC {x0.soc} outside [{params.soc_min}, {params.soc_max}]")
    model = StageModel(trip, params)
    N = model.n_stages
    S = grid.soc_points.size
    values = np.empty((N + 1, S, 2))
    bounds = np.empty((N + 1, 2, 2))
    edges = np.empty((N + 1, 2, 2))
    arg_t = np.empty((N, S, 2))
    arg_s = np.empty((N, S, 2), dtype=bool)
    layer = terminal_layer(grid, params)
    values[N], bounds[N], edges[N] = layer
    for k in range(N - 1, -1, -1):
        layer, arg_t[k], arg_s[k] = bellman_backup(k, layer, model, grid)
        values[k], bounds[k], edges[k] = layer
    table = ValueTable(grid, values, arg_t, arg_s, bounds, edges, trip.trip_id)
    start = snap(grid, x0.soc) if grid.interpolation == "nearest" else x0.soc
    if not np.isfinite(table.value_at(0, start, x0.engine_on)):
        raise InfeasibleTrip(f"trip {trip.trip_id}: no feasible input sequence from SOC {x0.soc:.4f}")
    return table, rollout(table, model, x0)


def rollout(table: ValueTable, model: StageModel, x0: PowertrainState) -> OptimalTrajectory:
    """Forward pass re-solving each one-step minimization at the continuous state."""
    grid = table.grid
    params = model.params
    N = model.n_stages
    soc = np.empty(N + 1)
    eng = np.zeros(N + 1, dtype=bool)
    te = np.zeros(N)
    sw = np.zeros(N, dtype=bool)
    tm, pf, pq, pb, cost = (np.zeros(N) for _ in range(5))
    fuel = np.zeros(N + 1)
    bad = 0
    s, e = x0.soc, bool(x0.engine_on)
    if grid.interpolation == "nearest":
        s = snap(grid, s)
    for k in range(N):
        soc[k], eng[k] = s, e
        nxt = table.layer(k + 1)
        cands = model.stage(k, grid.torque_count)
        cols = cands.columns(e)
        total, c, out = _totals(model, grid, cands, np.array([s]), nxt)
        total, c = total[0, cols], c[0, cols]
        if np.isfinite(total).any():
            j = cols[int(np.argmin(total))]
        else:
            # steer back towards the feasible interval of the next layer
            bad += 1
            nb = nxt.bounds[cands.switches[cols].astype(int)]
            s_next = out.soc_next[0, cols]
            miss = np.maximum(nb[:, 0] - s_next, 0.0) + np.maximum(s_next - nb[:, 1], 0.0)
            j = cols[int(np.argmin(miss + out.violation[0, cols]))]
        te[k] = cands.torques[j] if cands.switches[j] else 0.0
        sw[k] = cands.switches[j]
        tm[k] = out.motor_torque[0, j]
        pf[k] = out.fuel_power[0, j]
        pq[k] = out.internal_power[0, j]
        pb[k] = out.battery_power[0, j]
        cost[k] = stage_cost_value(params, pf[k], pq[k])
        fuel[k + 1] = fuel[k] + out.fuel_rate[0, j] * params.sample_time
        s = float(np.clip(out.soc_next[0, j], params.soc_min, params.soc_max))
        if grid.interpolation == "nearest":
            s = snap(grid, s)
        e = bool(cands.switches[j])
    soc[N], eng[N] = s, e
    return OptimalTrajectory(soc, eng, te, sw, tm, pf, pq, pb, cost, fuel, bad)


def stage_cost(state: PowertrainState, inp: ControlInput, dist: Disturbance, params: PowertrainParams) -> float:
    """Gallons-equivalent cost of one step (fuel power plus internal battery power)."""
    _, out = step(state, inp, dist, params, hsg_mode="lumped")
    return float(stage_cost_value(params, out.fuel_power, out.battery_internal_power))


def enumerate_optimum(trip: Trip, params: PowertrainParams, grid: DpGrid, x0: PowertrainState) -> float:
    """Exhaustive search over every input sequence (test oracle for small trips).

    Uses the scalar plant :func:`step` with the same per-stage candidate
    torques as the DP; in ``nearest`` mode the SOC is snapped after each step
    exactly as the lattice does.  Returns the minimum total cost (inf if no
    feasible sequence exists).
    """
    model = StageModel(trip, params)
    N = model.n_stages
    terminal = grid.terminal_layer()[:, 0]
    edge_args = ((params.soc_min, params.soc_max), (terminal[0], terminal[-1]))

    def best(k: int, state: PowertrainState) -> float:
        if k == N:
            return float(interpolate_layer(grid, terminal, state.soc, *edge_args))
        dist = trip.disturbance(k)
        torques, switches = model.candidates(k, state.engine_on, grid.torque_count)
        out = np.inf
        for t, s in zip(torques, switches):
            inp = ControlInput(float(t) if s else 0.0, bool(s))
            nxt, o = step(state, inp, dist, params, hsg_mode="lumped")
            if o.infeasible:
                continue
            c = float(stage_cost_value(params, o.fuel_power, o.battery_internal_power))
            soc = snap(grid, nxt.soc) if grid.interpolation == "nearest" else nxt.soc
            out = min(out, c + best(k + 1, PowertrainState(soc, nxt.engine_on)))
        return out

    start = snap(grid, x0.soc) if grid.interpolation == "nearest" else x0.soc
    return best(0, PowertrainState(start, x0.engine_on))


# -- training samples along the optimal trajectory ------------------------------


@dataclass(eq=False)
class TrajectorySamples:
    trip_id: str
    bins: np.ndarray  # (N,) position bin per sample
    features: np.ndarray  # (N, 8)
    values: np.ndarray  # (N,)
    time_index: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.time_index is None:
            self.time_index = np.arange(self.values.size)

    def __len__(self) -> int:
        return self.values.size


def trajectory_values(table: ValueTable, traj: OptimalTrajectory) -> np.ndarray:
    """V*_k read from the table at each trajectory state (interpolated in SOC)."""
    return np.array([float(table.value_at(k, traj.soc[k], traj.engine_on[k])) for k in range(traj.soc.size)])


NEIGHBOUR_SAMPLES = ((-0.04, False), (-0.02, False), (0.02, False), (0.04, False),
                     (0.0, True), (-0.02, True), (0.02, True))


def neighbour_values(table: ValueTable, traj: OptimalTrajectory,
                     samples=NEIGHBOUR_SAMPLES) -> np.ndarray:
    """V*_k at perturbed trajectory states, shape ``(N, len(samples))``.

    Each sample ``(offset, flip)`` shifts the trajectory SOC by ``offset``
    and, if ``flip``, uses the other engine state.  Perturbed states outside
    the SOC bounds or the feasible interval get +inf.
    """
    offsets = np.array([o for o, _ in samples], dtype=float)
    flips = np.array([f for _, f in samples], dtype=bool)
    lo, hi = table.grid.soc_points[0], table.grid.soc_points[-1]
    out = np.empty((traj.soc.size, offsets.size))
    for k in range(traj.soc.size):
        soc = traj.soc[k] + offsets
        eng = np.where(flips, not traj.engine_on[k], bool(traj.engine_on[k]))
        inside = (soc >= lo) & (soc <= hi)
        out[k] = np.where(inside, table.value_at(k, np.clip(soc, lo, hi), eng), np.inf)
    return out


def values_on_trajectory(table: ValueTable | np.ndarray, traj: OptimalTrajectory, trip: Trip,
                         bins: RouteBins, stats: RouteStats) -> TrajectorySamples:
    """One (bin, features, V*) sample per trajectory state.

    ``table`` may also be the precomputed array from :func:`trajectory_values`.
    """
    vals = trajectory_values(table, traj) if isinstance(table, ValueTable) else np.asarray(table, dtype=float)
    X = trajectory_features(trip, traj.soc, traj.engine_on, traj.fuel_consumed, stats)
    return TrajectorySamples(trip.trip_id, bins.bin_of(trip.position), X, vals)


# -- persistence ------------------------------------------------------------------


def save_value_table(table: ValueTable, path) -> None:
    """Write an npz archive.

    Layout: ``header`` (JSON: layout tag, trip id, grid options, shape),
    ``soc_points``, row-major ``values[k, soc, engine]``, the argmin arrays
    and the per-layer feasible intervals with their end values.
    """
    header = {"layout": VALUE_TABLE_LAYOUT, "trip_id": table.trip_id,
              "interpolation": table.grid.interpolation, "torque_count": table.grid.torque_count,
              "terminal_soc_penalty": table.grid.terminal_soc_penalty,
              "terminal_soc_ref": table.grid.terminal_soc_ref,
              "shape": list(table.values.shape)}
    write_npz(path, header=np.array(json.dumps(header, sort_keys=True)), soc_points=table.grid.soc_points,
              values=table.values, arg_torque=table.arg_torque, arg_switch=table.arg_switch,
              bounds=table.bounds, edge_values=table.edge_values)


def write_npz(path, **arrays) -> None:
    """Compressed npz readable by ``np.load`` with fixed entry timestamps, so equal data gives equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_value_table(path) -> ValueTable:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("layout") != VALUE_TABLE_LAYOUT:
            raise ValueError(f"{path}: unknown value-table layout {header.get('layout')!r}")
        grid = DpGrid(z["soc_points"], header["torque_count"], header["interpolation"],
                      header["terminal_soc_penalty"], header["terminal_soc_ref"])
        return ValueTable(grid, z["values"], z["arg_torque"], z["arg_switch"], z["bounds"], z["edge_values"],
                          header["trip_id"])


TRAJECTORY_COLUMNS = ("k", "soc", "engine_on", "engine_torque_Nm", "engine_switch", "motor_torque_Nm",
                      "fuel_power_W", "internal_power_W", "battery_power_W", "cost_gal", "fuel_consumed_kg",
                      "value_gal")


def save_trajectory(traj: OptimalTrajectory, values: np.ndarray, path) -> None:
    """Trajectory sidecar: one row per sample; step quantities are blank on the last row."""
    n = traj.soc.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for k in range(n):
            step_cols = ([repr(float(traj.engine_torque[k])), int(traj.engine_switch[k]),
                          repr(float(traj.motor_torque[k])), repr(float(traj.fuel_power[k])),
                          repr(float(traj.internal_power[k])), repr(float(traj.battery_power[k])),
                          repr(float(traj.cost[k]))] if k < n - 1 else [""] * 7)
            w.writerow([k, repr(float(traj.soc[k])), int(traj.engine_on[k]), *step_cols,
                        repr(float(traj.fuel_consumed[k])), repr(float(values[k]))])


def load_trajectory(path) -> tuple[OptimalTrajectory, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda name, rs=rows: np.array([float(r[name]) for r in rs])  # noqa: E731
    steps = rows[:-1]
    traj = OptimalTrajectory(
        soc=col("soc"), engine_on=col("engine_on").astype(bool),
        engine_torque=col("engine_torque_Nm", steps), engine_switch=col("engine_switch", steps).astype(bool),
        motor_torque=col("motor_torque_Nm", steps), fuel_power=col("fuel_power_W", steps),
        internal_power=col("internal_power_W", steps), battery_power=col("battery_power_W", steps),
        cost=col("cost_gal", steps), fuel_consumed=col("fuel_consumed_kg"))
    return traj, col("value_gal")

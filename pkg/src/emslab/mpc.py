"""On-board receding-horizon controller with a value-function terminal cost.

Every control step enumerates the discrete input set (engine off, plus a
uniform grid over the admissible engine-torque window), predicts one step
with the disturbance held at its current value, and scores each candidate as

    stage cost + V_hat(predicted features, bin(position + v * t_s)).

Horizons longer than one step chain the same prediction with the disturbance
frozen and add V_hat after every predicted step.

The step function is pure given its arguments; :class:`MpcController` owns
the running feature history and must be advanced sequentially.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .dp import ValueTable
from .learn import PolicyParams, evaluate_vhat
from .powertrain import (ControlInput, Disturbance, PowertrainParams, PowertrainState, StepOutputs, candidate_inputs,
                         evaluate, lumped_hsg_power, stage_cost_value, torque_window)
from .trip import FeatureTracker, Trip, TripSample

TIE_EPS = 1e-12  # gallons-equivalent


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 1
    torque_candidates: int = 41
    sample_time: float = 0.2
    min_on_steps: int = 0  # engine minimum-on guard, off by default
    # No further discharge below soc_min + soc_reserve when avoidable.  None takes the
    # terminal's own default: approximate terminals cannot see the SOC floor, the DP table can.
    soc_reserve: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.torque_candidates < 2:
            raise ValueError("torque_candidates must be >= 2")
        if self.min_on_steps < 0:
            raise ValueError("min_on_steps must be >= 0")
        if self.soc_reserve is not None and self.soc_reserve < 0:
            raise ValueError("soc_reserve must be >= 0")


@dataclass(frozen=True)
class MpcStepResult:
    chosen: ControlInput
    predicted_cost: float
    candidate_count: int
    fallback_used: bool


@dataclass(frozen=True)
class PredictionContext:
    """Everything a terminal cost may read: the current sample and the history up to it."""

    k: int  # current sample index
    position: float
    speed: float
    tracker: FeatureTracker
    sample_time: float
    route_length: float

    def position_ahead(self, steps: int) -> float:
        return min(self.position + steps * self.speed * self.sample_time, self.route_length)


class TerminalCost(Protocol):
    def __call__(self, ctx: PredictionContext, steps: int, soc: np.ndarray, engine_on: np.ndarray,
                 fuel_kg: np.ndarray) -> np.ndarray:
        """Cost-to-go after ``steps`` predicted steps, one value per candidate."""


def predict_features(tracker: FeatureTracker, soc, engine_on, fuel_kg, position_next: float,
                     steps: int = 1) -> np.ndarray:
    """Feature rows after ``steps`` predicted samples, one per candidate.

    SOC, engine state and cumulative fuel come from the candidate's predicted
    step.  The exogenous averages advance by repeating the current sample
    ``steps`` times (the disturbance is frozen over the horizon); the time
    left decrements by the elapsed time, or re-anchors to the route statistic
    of the bin entered at ``position_next``.
    """
    soc = np.asarray(soc, dtype=float)
    n = tracker.n + steps
    stats = tracker.stats
    b = int(stats.bins.bin_of(position_next))
    dt = steps * tracker.sample_time
    if b == tracker.bin:
        left = max(tracker.time_left() - dt, 0.0)
    else:
        left = float(stats.remaining_time[b])
    exo = np.array([(tracker.sum_aux + steps * tracker.aux) / n,
                    (tracker.sum_speed + steps * tracker.speed) / n,
                    (tracker.sum_accel + steps * tracker.last_accel) / n,
                    left])
    X = np.empty(soc.shape + (8,))
    X[..., 0] = soc
    X[..., 1] = np.asarray(engine_on, dtype=float)
    X[..., 2] = exo[0]
    X[..., 3] = fuel_kg
    X[..., 4] = exo[1]
    X[..., 5] = exo[2]
    X[..., 6] = exo[3]
    X[..., 7] = 1.0
    return X


DEFAULT_SOC_RESERVE = 0.01


class LearnedTerminal:
    """V_hat from a trained policy, evaluated at the bin of the predicted position."""

    soc_reserve = DEFAULT_SOC_RESERVE

    def __init__(self, policy: PolicyParams):
        self.policy = policy

    def __call__(self, ctx, steps, soc, engine_on, fuel_kg):
        pos = ctx.position_ahead(steps)
        X = predict_features(ctx.tracker, soc, engine_on, fuel_kg, pos, steps)
        return evaluate_vhat(self.policy, X, int(self.policy.bins.bin_of(pos)))


class ValueTableTerminal:
    """Exact DP cost-to-go of the trip being driven, indexed by sample (not position)."""

    soc_reserve = 0.0

    def __init__(self, table: ValueTable):
        self.table = table

    def __call__(self, ctx, steps, soc, engine_on, fuel_kg):
        k = min(ctx.k + steps, self.table.values.shape[0] - 1)
        return self.table.value_at(k, soc, engine_on)


class ZeroTerminal:
    soc_reserve = DEFAULT_SOC_RESERVE

    def __call__(self, ctx, steps, soc, engine_on, fuel_kg):
        return np.zeros(np.shape(soc))


def tie_break(total: np.ndarray, torques: np.ndarray, switches: np.ndarray, eps: float = TIE_EPS) -> int:
    """Index of the chosen candidate among those within ``eps`` of the minimum.

    Engine off wins over on; then the smaller engine-torque magnitude; then
    the earlier candidate.
    """
    best = np.min(total)
    near = np.flatnonzero(total <= best + eps)
    keys = np.lexsort((near, np.abs(torques[near]), switches[near].astype(int)))
    return int(near[keys[0]])


def pending_hsg_power(state: PowertrainState, params: PowertrainParams) -> float:
    """Start-up draw the plant still owes this step from an earlier start (zero in the lumped model)."""
    if state.hsg_remaining <= 0:
        return 0.0
    return params.hsg_start_power * min(state.hsg_remaining, params.sample_time) / params.sample_time


def apply_soc_reserve(feasible: np.ndarray, soc_next: np.ndarray, switches: np.ndarray, state: PowertrainState,
                      params: PowertrainParams, reserve: float) -> np.ndarray:
    """Restrict ``feasible`` inside the reserve band ``[soc_min, soc_min + reserve]``.

    Candidates that would discharge below ``min(soc, soc_min + reserve)`` are
    dropped whenever another feasible candidate remains.  If none remains
    inside the band, the engine is started (when off) or the
    least-discharging candidate is kept (when on).
    """
    if reserve <= 0:
        return feasible
    floor = min(state.soc, params.soc_min + reserve)
    kept = feasible & (soc_next >= floor)
    if not kept.any() and feasible.any() and state.soc < params.soc_min + reserve:
        if state.engine_on:
            kept = feasible & (soc_next >= np.max(soc_next[feasible]))
        else:
            kept = feasible & switches
    return kept if kept.any() else feasible


def fallback_choice(violation: np.ndarray, torques: np.ndarray, switches: np.ndarray, engine_on: bool,
                    wheel_torque: float) -> int:
    """Candidate applied when none is feasible.

    With the engine off and a traction demand, only a start can restore
    feasibility on later steps, so the start candidate is taken; otherwise
    the least-violating candidate is applied.
    """
    if not engine_on and wheel_torque > 0 and switches.any():
        return int(np.flatnonzero(switches)[0])
    return tie_break(violation, torques, switches, eps=0.0)


class _Candidates:
    """One step's candidates evaluated from a batch of states (rows) under a frozen disturbance."""

    def __init__(self, params, dist: Disturbance, n: int):
        g = params.gear_ratio(dist.gear_index)
        lo, hi = torque_window(params, dist.wheel_torque_demand, dist.axle_speed, g)
        self.lo, self.hi, self.g = float(lo), float(hi), float(g)
        self.dist, self.params, self.n = dist, params, n
        self.sets = {e: candidate_inputs(e, self.lo, self.hi, n) for e in (False, True)}

    def evaluate(self, soc: float, engine_on: bool, pending_hsg: float = 0.0):
        torques, switches = self.sets[engine_on]
        p, d = self.params, self.dist
        hsg = lumped_hsg_power(p, engine_on, switches) + pending_hsg
        out = evaluate(p, np.float64(soc), engine_on, torques, switches, d.aux_power, d.wheel_torque_demand,
                       d.axle_speed, self.g, hsg)
        return torques, switches, out, stage_cost_value(p, out.fuel_power, out.internal_power)


def _continuation(cands: _Candidates, terminal, ctx, depth: int, horizon: int, soc: float, engine_on: bool,
                  fuel: float) -> float:
    """Best summed cost of the remaining ``horizon - depth`` predicted steps from one state."""
    torques, switches, out, cost = cands.evaluate(soc, engine_on)
    fuel_next = fuel + out.fuel_rate * cands.params.sample_time
    total = cost + terminal(ctx, depth + 1, out.soc_next, switches, fuel_next)
    total = np.where(out.feasible, total, np.inf)
    if depth + 1 < horizon:
        for j in np.flatnonzero(np.isfinite(total)):
            total[j] += _continuation(cands, terminal, ctx, depth + 1, horizon, float(out.soc_next[j]),
                                      bool(switches[j]), float(fuel_next[j]))
    return float(np.min(total))


def mpc_step(state: PowertrainState, dist: Disturbance, terminal, ctx: PredictionContext,
             params: PowertrainParams, cfg: MpcConfig = MpcConfig(), allow_off: bool = True) -> MpcStepResult:
    """Choose the input minimizing predicted stage cost plus terminal cost.

    The first predicted step includes any start-up draw still owed by the
    plant.  Near SOC_min the candidates are filtered by
    :func:`apply_soc_reserve` (see :attr:`MpcConfig.soc_reserve`).

    ``terminal`` is a :class:`TerminalCost` (learned V_hat, the DP table, or
    zero).  If no candidate is feasible the one with the least constraint
    violation is applied and ``fallback_used`` is set.
    """
    cands = _Candidates(params, dist, cfg.torque_candidates)
    torques, switches, out, cost = cands.evaluate(state.soc, state.engine_on, pending_hsg_power(state, params))
    fuel_next = ctx.tracker.fuel_kg + out.fuel_rate * params.sample_time
    total = cost + terminal(ctx, 1, out.soc_next, switches, fuel_next)
    feasible = out.feasible.copy()
    if not allow_off and state.engine_on:
        feasible &= switches
    reserve = cfg.soc_reserve if cfg.soc_reserve is not None else getattr(terminal, "soc_reserve",
                                                                             DEFAULT_SOC_RESERVE)
    feasible = apply_soc_reserve(feasible, out.soc_next, switches, state, params, reserve)
    total = np.where(feasible, total, np.inf)
    if cfg.horizon > 1:
        for j in np.flatnonzero(np.isfinite(total)):
            total[j] += _continuation(cands, terminal, ctx, 1, cfg.horizon, float(out.soc_next[j]),
                                      bool(switches[j]), float(fuel_next[j]))
    if np.isfinite(total).any():
        j = tie_break(total, torques, switches)
        fallback = False
    else:
        j = fallback_choice(out.violation, torques, switches, state.engine_on, dist.wheel_torque_demand)
        fallback = True
    chosen = ControlInput(float(torques[j]) if switches[j] else 0.0, bool(switches[j]))
    return MpcStepResult(chosen, float(total[j]), int(torques.size), fallback)


class MpcController:
    """Closed-loop wrapper: keeps the feature history and calls :func:`mpc_step` each sample."""

    label = "mpc"

    def __init__(self, terminal, params: PowertrainParams, stats, cfg: MpcConfig = MpcConfig()):
        self.terminal = terminal
        self.params = params
        self.stats = stats
        self.cfg = cfg
        self.last: MpcStepResult | None = None
        self.fallback_count = 0

    @classmethod
    def from_policy(cls, policy: PolicyParams, params: PowertrainParams, cfg: MpcConfig = MpcConfig()):
        return cls(LearnedTerminal(policy), params, policy.stats, cfg)

    def reset(self, trip: Trip, state: PowertrainState) -> None:
        self.trip_length = trip.total_distance
        self.tracker = FeatureTracker(self.stats, self.params.sample_time)
        self.on_steps = 0
        self.fallback_count = 0

    def control(self, k: int, state: PowertrainState, dist: Disturbance, sample: TripSample) -> ControlInput:
        self.tracker.observe(sample.time, sample.position, sample.vehicle_speed, sample.aux_power)
        ctx = PredictionContext(k, sample.position, sample.vehicle_speed, self.tracker, self.params.sample_time,
                                self.trip_length)
        allow_off = self.on_steps >= self.cfg.min_on_steps
        self.last = mpc_step(state, dist, self.terminal, ctx, self.params, self.cfg, allow_off)
        self.fallback_count += self.last.fallback_used
        self.on_steps = self.on_steps + 1 if self.last.chosen.engine_switch else 0
        return self.last.chosen

    def update(self, outputs: StepOutputs) -> None:
        self.tracker.add_fuel(outputs.fuel_mass)

"""Reference controllers: charge-depleting/charge-sustaining and adaptive ECMS.

Both controllers choose from the same discrete candidate set as the MPC
(engine off, or a uniform grid over the admissible engine-torque window) and
fall back to the least-violating candidate when nothing is feasible.  They
read only the current sample and their own internal state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCorpus
from .mpc import DEFAULT_SOC_RESERVE, apply_soc_reserve, fallback_choice, pending_hsg_power, tie_break
from .powertrain import (ControlInput, Disturbance, PowertrainParams, PowertrainState, StepOutputs, candidate_inputs,
                         evaluate, lumped_hsg_power, torque_window)
from .trip import RouteBins, Trip, TripSample

PROFILE_SCHEMA = "emslab-soc-profile/1"


class _StepCandidates:
    """Candidate inputs for the current state and disturbance, evaluated with the lumped start model."""

    def __init__(self, state: PowertrainState, dist: Disturbance, params: PowertrainParams, n: int):
        g = params.gear_ratio(dist.gear_index)
        lo, hi = torque_window(params, dist.wheel_torque_demand, dist.axle_speed, g)
        self.engine_on = state.engine_on
        self.wheel_torque = dist.wheel_torque_demand
        self.omega = dist.axle_speed * g
        self.engine_share = dist.wheel_torque_demand / (g * params.trans_eff * params.clutch_eff)
        self.torques, self.switches = candidate_inputs(state.engine_on, float(lo), float(hi), n)
        hsg = lumped_hsg_power(params, state.engine_on, self.switches) + pending_hsg_power(state, params)
        self.out = evaluate(params, np.float64(state.soc), state.engine_on, self.torques, self.switches,
                            dist.aux_power, dist.wheel_torque_demand, dist.axle_speed, g, hsg)

    def input(self, j: int) -> ControlInput:
        return ControlInput(float(self.torques[j]) if self.switches[j] else 0.0, bool(self.switches[j]))

    def least_violation(self) -> int:
        return fallback_choice(self.out.violation, self.torques, self.switches, self.engine_on, self.wheel_torque)


# -- CD-CS --------------------------------------------------------------------------


@dataclass(frozen=True)
class CdCsConfig:
    """Charge-depleting then charge-sustaining around ``soc_min + cs_band``.

    In the sustaining phase the engine turns on at or below ``cs_target`` and
    off at or above ``cs_target + cs_band / 2``; while on it carries the whole
    demand plus a charging power of ``charge_gain * (cs_target + cs_band/2 -
    soc)`` watts.
    """

    cs_band: float = 0.02
    charge_gain: float = 4.0e5  # W per unit SOC
    torque_candidates: int = 41

    def target(self, params: PowertrainParams) -> float:
        t = params.soc_min + self.cs_band
        if t >= params.soc_max:
            raise ValueError("cs_target must be below soc_max")
        return t


def cdcs_step(state: PowertrainState, dist: Disturbance, params: PowertrainParams, cfg: CdCsConfig,
              sustaining: bool) -> ControlInput:
    """One CD-CS decision; ``sustaining`` is the latched phase (see :class:`CdCsController`)."""
    c = _StepCandidates(state, dist, params, cfg.torque_candidates)
    feas = c.out.feasible
    if not feas.any():
        return c.input(c.least_violation())
    target = cfg.target(params)
    if sustaining:
        high = target + 0.5 * cfg.cs_band
        want_on = state.soc <= target or (state.engine_on and state.soc < high)
        if want_on:
            if not state.engine_on:
                j = 1 if feas[1] else 0  # crank
                return c.input(j if feas[j] else int(np.flatnonzero(feas)[0]))
            charge = cfg.charge_gain * max(high - state.soc, 0.0)
            t_star = c.engine_share + (charge / c.omega if c.omega > 1e-6 else 0.0)
            on = np.flatnonzero(feas & c.switches)
            if on.size:
                return c.input(int(on[np.argmin(np.abs(c.torques[on] - t_star))]))
            return c.input(int(np.flatnonzero(feas)[0]))
    # depleting (or sustaining with the engine parked): electric if possible, else least engine torque
    if feas[0] and not c.switches[0]:
        return c.input(0)
    on = np.flatnonzero(feas & c.switches)
    return c.input(int(on[0]))


class CdCsController:
    """CD-CS with the phase latched once SOC first reaches ``cs_target``."""

    label = "cdcs"

    def __init__(self, params: PowertrainParams, cfg: CdCsConfig = CdCsConfig()):
        self.params = params
        self.cfg = cfg
        self.sustaining = False

    def reset(self, trip: Trip, state: PowertrainState) -> None:
        self.sustaining = state.soc <= self.cfg.target(self.params)

    def control(self, k: int, state: PowertrainState, dist: Disturbance, sample: TripSample) -> ControlInput:
        if state.soc <= self.cfg.target(self.params):
            self.sustaining = True
        return cdcs_step(state, dist, self.params, self.cfg, self.sustaining)

    def update(self, outputs: StepOutputs) -> None:
        pass


# -- representative SOC profile and A-ECMS ------------------------------------------


@dataclass(frozen=True, eq=False)
class RepresentativeSocProfile:
    route_id: str
    bins: RouteBins
    soc: np.ndarray  # (K,) at bin centers

    def at(self, position: float) -> float:
        return float(np.interp(position, self.bins.centers, self.soc))

    @classmethod
    def constant(cls, bins: RouteBins, soc: float) -> "RepresentativeSocProfile":
        return cls(bins.route_id, bins, np.full(bins.bin_count, float(soc)))

    def to_dict(self) -> dict:
        return {"schema": PROFILE_SCHEMA, "route_id": self.route_id, "bins": self.bins.to_dict(),
                "soc": self.soc.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RepresentativeSocProfile":
        if d.get("schema") != PROFILE_SCHEMA:
            raise ValueError(f"unsupported profile schema {d.get('schema')!r}")
        return cls(d["route_id"], RouteBins.from_dict(d["bins"]), np.asarray(d["soc"], dtype=float))


def save_profile(profile: RepresentativeSocProfile, path) -> None:
    with open(path, "w") as fh:
        json.dump(profile.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_profile(path) -> RepresentativeSocProfile:
    with open(path) as fh:
        return RepresentativeSocProfile.from_dict(json.load(fh))


def representative_profile(solutions, bins: RouteBins) -> RepresentativeSocProfile:
    """Per-bin mean of the DP-optimal SOC traces, each interpolated at the bin centers.

    ``solutions`` holds objects with ``trip`` and ``trajectory`` attributes
    (e.g. :class:`emslab.learn.SolvedTrip`).
    """
    solutions = list(solutions)
    if not solutions:
        raise EmptyCorpus("representative profile needs at least one solved trip")
    centers = bins.centers
    traces = [np.interp(centers, s.trip.position, s.trajectory.soc) for s in solutions]
    return RepresentativeSocProfile(bins.route_id, bins, np.mean(traces, axis=0))


@dataclass(frozen=True)
class AecmsConfig:
    """Equivalence factor ``s = s0 + kp*e + ki*integral(e dt)``, ``e = soc_ref - soc``, kept in [0.5 s0, 2 s0]."""

    s0: float = 2.5
    kp: float = 25.0
    ki: float = 0.05
    torque_candidates: int = 41
    soc_reserve: float = DEFAULT_SOC_RESERVE  # same SOC_min guard as the MPC
    start_horizon: int = 10  # engine-on steps over which a start is assessed (2 s at 0.2 s)

    def __post_init__(self):
        if self.start_horizon < 1:
            raise ValueError("start_horizon must be >= 1")
        if self.s0 <= 0:
            raise ValueError("s0 must be positive")
        if self.kp < 0 or self.ki < 0:
            raise ValueError("gains must be nonnegative")
        if self.soc_reserve < 0:
            raise ValueError("soc_reserve must be >= 0")


def equivalence_factor(cfg: AecmsConfig, error: float, integral: float) -> float:
    return min(max(cfg.s0 + cfg.kp * error + cfg.ki * integral, 0.5 * cfg.s0), 2.0 * cfg.s0)


def aecms_costs(c: _StepCandidates, state: PowertrainState, dist: Disturbance, params: PowertrainParams,
                s: float, torque_candidates: int = 41, soc_reserve: float = 0.0,
                start_horizon: int = 1) -> np.ndarray:
    """Equivalent cost ``t_s (P_f + s P_q)`` per candidate in gallons, +inf where infeasible.

    A start produces no torque in its own step, so with the engine off the
    start candidate is scored under a frozen disturbance as its own cost plus
    ``start_horizon`` times the saving of the best engine-on input over
    staying off.  Without this a one-step rule only ever starts the engine
    when staying off is infeasible, and with a single step of payback the
    crank energy is never recovered at light load.  Near SOC_min the
    candidates are filtered by :func:`emslab.mpc.apply_soc_reserve`.
    """
    scale = params.sample_time / params.joules_per_gallon
    feasible = apply_soc_reserve(c.out.feasible, c.out.soc_next, c.switches, state, params, soc_reserve)
    cost = np.where(feasible, scale * (c.out.fuel_power + s * c.out.internal_power), np.inf)
    if not state.engine_on and c.switches.any():
        on = _StepCandidates(PowertrainState(state.soc, True), dist, params, torque_candidates)
        on_cost = np.where(on.out.feasible & on.switches,
                           scale * (on.out.fuel_power + s * on.out.internal_power), np.inf)
        crank = np.flatnonzero(c.switches)
        off = np.flatnonzero(~c.switches)
        second_off = cost[off[0]] if off.size and np.isfinite(cost[off[0]]) else np.inf
        if np.isfinite(second_off):
            cost[crank] = cost[crank] + start_horizon * (np.min(on_cost) - second_off)
    return cost


def aecms_choice(state: PowertrainState, dist: Disturbance, params: PowertrainParams, s: float,
                 torque_candidates: int = 41, soc_reserve: float = 0.0,
                 start_horizon: int = 1) -> tuple[ControlInput, float]:
    """Candidate minimizing :func:`aecms_costs`; returns the input and its internal battery power."""
    c = _StepCandidates(state, dist, params, torque_candidates)
    if not c.out.feasible.any():
        j = c.least_violation()
    else:
        cost = aecms_costs(c, state, dist, params, s, torque_candidates, soc_reserve, start_horizon)
        j = tie_break(cost, c.torques, c.switches)
    return c.input(j), float(c.out.internal_power[j])


@dataclass
class AecmsController:
    params: PowertrainParams
    profile: RepresentativeSocProfile
    cfg: AecmsConfig = field(default_factory=AecmsConfig)
    label: str = "aecms"

    def reset(self, trip: Trip, state: PowertrainState) -> None:
        self.integral = 0.0
        self.s = self.cfg.s0

    def control(self, k: int, state: PowertrainState, dist: Disturbance, sample: TripSample) -> ControlInput:
        cfg = self.cfg
        error = self.profile.at(sample.position) - state.soc
        candidate = self.integral + error * self.params.sample_time
        s = equivalence_factor(cfg, error, candidate)
        unclamped = cfg.s0 + cfg.kp * error + cfg.ki * candidate
        if s == unclamped or (unclamped > s and error < 0) or (unclamped < s and error > 0):
            self.integral = candidate  # anti-windup: only integrate when it moves s back inside
        self.s = s
        chosen, _ = aecms_choice(state, dist, self.params, s, cfg.torque_candidates, cfg.soc_reserve,
                                 cfg.start_horizon)
        return chosen

    def update(self, outputs: StepOutputs) -> None:
        pass

"""Discrete-time model of a pre-transmission parallel hybrid powertrain.

State is ``(soc, engine_on)``, input is ``(engine_torque, engine_switch)`` and
the exogenous disturbance carries auxiliary power, wheel torque demand, axle
speed and gear.  Every function here is pure; :class:`PowertrainParams` is
immutable once built and can be shared between workers.

The vectorized kernel :func:`evaluate` is the single implementation of the
physics.  The scalar helpers and :func:`step` call into it with 0-d arrays so
planners (DP, MPC, baselines) and the simulation plant share one code path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import NoFeasibleInput, PowerLimitExceeded, SchemaError

PARAMS_SCHEMA_VERSION = 1
HSG_START_DURATION = 0.5  # s, fixed


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Table1D:
    """Piecewise-linear lookup, clamped at the grid ends."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", _frozen(self.grid))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.grid.ndim != 1 or self.grid.shape != self.values.shape:
            raise SchemaError("1-D table needs matching grid and value vectors")
        if np.any(np.diff(self.grid) <= 0):
            raise SchemaError("1-D table grid must be strictly increasing")

    def __call__(self, x):
        return np.interp(x, self.grid, self.values)

    def to_dict(self) -> dict:
        return {"grid": self.grid.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Table1D":
        return cls(d["grid"], d["values"])


@dataclass(frozen=True)
class Table2D:
    """Bilinear lookup over (torque, speed), clamped at the grid edges."""

    torque_grid: np.ndarray
    speed_grid: np.ndarray
    values: np.ndarray  # shape (len(torque_grid), len(speed_grid))

    def __post_init__(self):
        object.__setattr__(self, "torque_grid", _frozen(self.torque_grid))
        object.__setattr__(self, "speed_grid", _frozen(self.speed_grid))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.shape != (self.torque_grid.size, self.speed_grid.size):
            raise SchemaError("2-D table values must be (n_torque, n_speed)")
        if np.any(np.diff(self.torque_grid) <= 0) or np.any(np.diff(self.speed_grid) <= 0):
            raise SchemaError("2-D table grids must be strictly increasing")

    def __call__(self, torque, speed):
        x, y, v = self.torque_grid, self.speed_grid, self.values
        # minimum/maximum instead of clip: same values, far less dispatch overhead on small inputs
        tq = np.minimum(np.maximum(torque, x[0]), x[-1])
        sp = np.minimum(np.maximum(speed, y[0]), y[-1])
        i = np.minimum(np.maximum(np.searchsorted(x, tq, side="right") - 1, 0), x.size - 2)
        j = np.minimum(np.maximum(np.searchsorted(y, sp, side="right") - 1, 0), y.size - 2)
        tx = (tq - x[i]) / (x[i + 1] - x[i])
        ty = (sp - y[j]) / (y[j + 1] - y[j])
        return ((1 - tx) * (1 - ty) * v[i, j] + tx * (1 - ty) * v[i + 1, j]
                + (1 - tx) * ty * v[i, j + 1] + tx * ty * v[i + 1, j + 1])

    def to_dict(self) -> dict:
        return {"torque_grid": self.torque_grid.tolist(),
                "speed_grid": self.speed_grid.tolist(),
                "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Table2D":
        return cls(d["torque_grid"], d["speed_grid"], d["values"])


@dataclass(frozen=True)
class PowertrainParams:
    """Constants and maps of the powertrain model (SI units throughout)."""

    battery_capacity: float  # A*s
    voc_map: Table1D  # SOC -> V
    rb_map: Table1D  # SOC -> ohm
    motor_eff_map: Table2D
    engine_eff_map: Table2D
    fuel_lhv: float  # J/kg
    gear_ratios: tuple[float, ...]
    trans_eff: float
    clutch_eff: float
    hsg_start_power: float  # W
    engine_torque_min_map: Table1D  # rad/s -> N*m
    engine_torque_max_map: Table1D
    motor_torque_min_map: Table1D
    motor_torque_max_map: Table1D
    soc_min: float
    soc_max: float
    sample_time: float = 0.2
    kwh_per_gallon: float = 33.7
    hsg_start_duration: float = HSG_START_DURATION

    def __post_init__(self):
        object.__setattr__(self, "gear_ratios", tuple(float(g) for g in self.gear_ratios))
        if len(self.gear_ratios) != 6 or min(self.gear_ratios) <= 0:
            raise SchemaError("gear_ratios must hold 6 positive values")
        for name in ("trans_eff", "clutch_eff"):
            val = getattr(self, name)
            if not 0 < val <= 1:
                raise SchemaError(f"{name} must lie in (0, 1], got {val}")
        for name in ("motor_eff_map", "engine_eff_map"):
            vals = getattr(self, name).values
            if np.any(vals <= 0) or np.any(vals > 1):
                raise SchemaError(f"{name} values must lie in (0, 1]")
        if not 0 <= self.soc_min < self.soc_max <= 1:
            raise SchemaError("need 0 <= soc_min < soc_max <= 1")
        if self.sample_time <= 0:
            raise SchemaError("sample_time must be positive")
        if self.hsg_start_duration != HSG_START_DURATION:
            raise SchemaError("hsg_start_duration is fixed at 0.5 s")
        if self.battery_capacity <= 0 or self.fuel_lhv <= 0:
            raise SchemaError("battery_capacity and fuel_lhv must be positive")

    @property
    def joules_per_gallon(self) -> float:
        return self.kwh_per_gallon * 3.6e6

    def gear_ratio(self, gear_index):
        return np.asarray(self.gear_ratios)[np.asarray(gear_index) - 1]

    def with_updates(self, **kw) -> "PowertrainParams":
        return replace(self, **kw)

    # -- serialization ------------------------------------------------------

    _TABLES_1D = ("voc_map", "rb_map", "engine_torque_min_map", "engine_torque_max_map",
                  "motor_torque_min_map", "motor_torque_max_map")
    _TABLES_2D = ("motor_eff_map", "engine_eff_map")
    _SCALARS = ("battery_capacity", "fuel_lhv", "trans_eff", "clutch_eff", "hsg_start_power",
                "soc_min", "soc_max", "sample_time", "kwh_per_gallon", "hsg_start_duration")

    def to_dict(self) -> dict:
        d: dict = {"schema_version": PARAMS_SCHEMA_VERSION}
        for name in self._SCALARS:
            d[name] = getattr(self, name)
        d["gear_ratios"] = list(self.gear_ratios)
        for name in self._TABLES_1D + self._TABLES_2D:
            d[name] = getattr(self, name).to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PowertrainParams":
        if d.get("schema_version") != PARAMS_SCHEMA_VERSION:
            raise SchemaError(f"unsupported params schema_version {d.get('schema_version')!r}")
        missing = [k for k in cls._SCALARS[:-3] + cls._TABLES_1D + cls._TABLES_2D + ("gear_ratios",)
                   if k not in d]
        if missing:
            raise SchemaError(f"params file missing keys: {', '.join(missing)}")
        kw = {k: d[k] for k in cls._SCALARS if k in d}
        kw["gear_ratios"] = d["gear_ratios"]
        for name in cls._TABLES_1D:
            kw[name] = Table1D.from_dict(d[name])
        for name in cls._TABLES_2D:
            kw[name] = Table2D.from_dict(d[name])
        return cls(**kw)


def save_params(params: PowertrainParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=1))


def load_params(path) -> PowertrainParams:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return PowertrainParams.from_dict(data)


def default_params() -> PowertrainParams:
    """Synthetic mid-size PHEV parameter set.

    None of these numbers come from a manufacturer; the maps are generated
    from simple loss models so that efficiencies behave plausibly (poor engine
    efficiency at low load, motor losses dominated by copper and iron terms).
    """
    soc = np.linspace(0.0, 1.0, 11)
    voc = 330.0 + 40.0 * soc + 8.0 * np.tanh((soc - 0.1) * 10.0)
    rb = 0.09 + 0.05 * (1.0 - soc) ** 3

    # motor: 60 kW, 250 N*m
    m_speed = np.linspace(0.0, 1200.0, 25)
    m_torque = np.linspace(-250.0, 250.0, 41)
    tt, ww = np.meshgrid(m_torque, m_speed, indexing="ij")
    mech = np.abs(tt * ww)
    loss = 0.04 * tt**2 + 1.2 * ww + 0.0015 * ww**2 + 150.0
    with np.errstate(invalid="ignore", divide="ignore"):
        m_eff = np.where(mech > 0, mech / (mech + loss), 0.0)
    m_eff = np.clip(m_eff, 0.5, 0.96)
    m_tmax_speed = np.linspace(0.0, 1200.0, 49)
    m_tmax = np.minimum(250.0, 60000.0 / np.maximum(m_tmax_speed, 1e-9))

    # engine: ~50 kW, Willans-style efficiency
    e_speed = np.linspace(0.0, 700.0, 29)
    e_torque = np.linspace(0.0, 240.0, 25)
    tt, ww = np.meshgrid(e_torque, e_speed, indexing="ij")
    friction = 12.0 + 0.025 * ww
    e_eff = 0.40 * tt / (tt + friction) * (1.0 - 0.15 * ((ww - 300.0) / 400.0) ** 2)
    e_eff = np.clip(e_eff, 0.05, 1.0)
    e_curve_speed = np.array([0.0, 80.0, 100.0, 150.0, 200.0, 300.0, 400.0, 500.0, 600.0, 650.0, 700.0])
    e_curve_tmax = np.array([0.0, 0.0, 110.0, 170.0, 205.0, 220.0, 220.0, 205.0, 175.0, 0.0, 0.0])

    return PowertrainParams(
        battery_capacity=36000.0,
        voc_map=Table1D(soc, voc),
        rb_map=Table1D(soc, rb),
        motor_eff_map=Table2D(m_torque, m_speed, m_eff),
        engine_eff_map=Table2D(e_torque, e_speed, e_eff),
        fuel_lhv=43.4e6,
        gear_ratios=(14.5, 8.9, 6.3, 4.7, 3.6, 2.9),
        trans_eff=0.95,
        clutch_eff=0.98,
        hsg_start_power=6000.0,
        engine_torque_min_map=Table1D([0.0, 700.0], [0.0, 0.0]),
        engine_torque_max_map=Table1D(e_curve_speed, e_curve_tmax),
        motor_torque_min_map=Table1D(m_tmax_speed, -m_tmax),
        motor_torque_max_map=Table1D(m_tmax_speed, m_tmax),
        soc_min=0.2,
        soc_max=0.9,
    )


# -- state, input, disturbance ------------------------------------------------


@dataclass(frozen=True)
class PowertrainState:
    soc: float
    engine_on: bool = False
    hsg_remaining: float = 0.0  # s of startup draw still owed; plant bookkeeping only

    def __post_init__(self):
        if not math.isfinite(self.soc):
            raise ValueError("soc must be finite")


@dataclass(frozen=True)
class ControlInput:
    engine_torque: float = 0.0
    engine_switch: bool = False

    def __post_init__(self):
        if not self.engine_switch and self.engine_torque != 0.0:
            raise ValueError("engine_torque must be 0 when engine_switch is off")


@dataclass(frozen=True)
class Disturbance:
    aux_power: float
    wheel_torque_demand: float
    axle_speed: float
    gear_index: int

    def __post_init__(self):
        if not 1 <= int(self.gear_index) <= 6:
            raise ValueError(f"gear_index must be in 1..6, got {self.gear_index}")
        if self.axle_speed < 0:
            raise ValueError("axle_speed must be nonnegative")


@dataclass(frozen=True)
class StepOutputs:
    fuel_mass: float
    fuel_power: float
    battery_terminal_power: float
    battery_internal_power: float
    motor_torque: float
    hsg_energy: float
    infeasible: bool
    engine_torque: float = 0.0


# -- vectorized kernel --------------------------------------------------------


class StepBatch(NamedTuple):
    motor_torque: np.ndarray
    motor_power: np.ndarray
    battery_power: np.ndarray
    current: np.ndarray
    internal_power: np.ndarray
    soc_next: np.ndarray
    fuel_power: np.ndarray
    fuel_rate: np.ndarray
    feasible: np.ndarray
    violation: np.ndarray
    lower_ok: np.ndarray  # constraints that hold for all engine torques above a limit
    upper_ok: np.ndarray  # constraints that hold for all engine torques below a limit


def motor_power_from_mech(mech, eta):
    """Traction divides by efficiency, regeneration multiplies by it."""
    return np.where(mech > 0, mech / eta, mech * eta)


class Driveline(NamedTuple):
    motor_torque: np.ndarray
    motor_power: np.ndarray
    battery_power: np.ndarray
    fuel_power: np.ndarray
    shortfall: np.ndarray  # motor torque requested above its upper bound, N*m
    over_torque: np.ndarray  # engine torque outside its bounds, N*m


def driveline(params: PowertrainParams, engine_on, engine_torque, engine_switch,
              aux_power, wheel_torque, axle_speed, gear_ratio, hsg_power) -> Driveline:
    """SOC-independent half of the step: torque split, motor and fuel power."""
    engine_on = np.asarray(engine_on, dtype=bool)
    coupled = engine_on & np.asarray(engine_switch, dtype=bool)
    omega = axle_speed * gear_ratio
    te = np.where(coupled, engine_torque, 0.0)

    tm_req = wheel_torque / (gear_ratio * params.trans_eff) - np.where(engine_on, params.clutch_eff * te, 0.0)
    tm_hi = params.motor_torque_max_map(omega)
    tm = np.minimum(np.maximum(tm_req, params.motor_torque_min_map(omega)), tm_hi)
    pm = motor_power_from_mech(tm * omega, params.motor_eff_map(tm, omega))
    pb = pm + hsg_power + aux_power

    pf = np.where(coupled, np.maximum(te * omega / params.engine_eff_map(te, omega), 0.0), 0.0)
    te_lo = params.engine_torque_min_map(omega)
    te_hi = params.engine_torque_max_map(omega)
    over = np.where(coupled, np.maximum(te_lo - te, 0.0) + np.maximum(te - te_hi, 0.0), 0.0)
    return Driveline(tm, pm, pb, pf, np.maximum(tm_req - tm_hi, 0.0), over)


class BatteryStep(NamedTuple):
    current: np.ndarray
    internal_power: np.ndarray
    soc_next: np.ndarray
    disc: np.ndarray
    voc: np.ndarray


def battery(params: PowertrainParams, soc, battery_power) -> BatteryStep:
    voc = params.voc_map(soc)
    rb = params.rb_map(soc)
    disc = voc * voc - 4.0 * rb * battery_power
    root = np.sqrt(np.maximum(disc, 0.0))
    # 2P/(V + sqrt(D)) equals (V - sqrt(D))/(2R) without the cancellation
    current = np.where(disc >= 0.0, 2.0 * battery_power / (voc + root), voc / (2.0 * rb))
    soc_next = soc - params.sample_time * current / params.battery_capacity
    return BatteryStep(current, voc * current, soc_next, disc, voc)


def combine(params: PowertrainParams, dl: Driveline, bat: BatteryStep) -> StepBatch:
    soc_low = np.maximum(params.soc_min - bat.soc_next, 0.0)
    soc_high = np.maximum(bat.soc_next - params.soc_max, 0.0)
    violation = (dl.shortfall / 100.0 + dl.over_torque / 100.0
                 + np.maximum(-bat.disc, 0.0) / (bat.voc * bat.voc) + 100.0 * (soc_low + soc_high))
    lower_ok = (dl.shortfall <= 0.0) & (bat.disc >= 0.0) & (soc_low <= 0.0)
    upper_ok = soc_high <= 0.0
    feasible = (dl.over_torque <= 0.0) & lower_ok & upper_ok
    return StepBatch(dl.motor_torque, dl.motor_power, dl.battery_power, bat.current, bat.internal_power,
                     bat.soc_next, dl.fuel_power, dl.fuel_power / params.fuel_lhv, feasible, violation,
                     lower_ok, upper_ok)


def evaluate(params: PowertrainParams, soc, engine_on, engine_torque, engine_switch,
             aux_power, wheel_torque, axle_speed, gear_ratio, hsg_power) -> StepBatch:
    """One model step for broadcastable arrays of states, inputs and disturbances.

    Engine torque only reaches the driveline when the engine is on now and
    stays commanded on; otherwise it is treated as 0.  Motor torque below the
    motor's lower bound is clamped (friction brakes take the rest); above the
    upper bound it is clamped and the step is flagged infeasible.
    """
    dl = driveline(params, engine_on, engine_torque, engine_switch, aux_power, wheel_torque,
                   axle_speed, gear_ratio, hsg_power)
    return combine(params, dl, battery(params, soc, dl.battery_power))


def stage_cost_value(params: PowertrainParams, fuel_power, internal_power):
    """Gallons-equivalent of one step at the given fuel and internal battery power."""
    return params.sample_time * (fuel_power + internal_power) / params.joules_per_gallon


def lumped_hsg_power(params: PowertrainParams, engine_on, engine_switch):
    """HSG draw when the whole 0.5 s startup is charged to the switching step."""
    starting = ~np.asarray(engine_on, dtype=bool) & np.asarray(engine_switch, dtype=bool)
    return np.where(starting, params.hsg_start_power * params.hsg_start_duration / params.sample_time, 0.0)


def torque_window(params: PowertrainParams, wheel_torque, axle_speed, gear_ratio):
    """State-independent engine-torque interval: engine bounds plus motor capacity.

    Returns ``(lo, hi)``; the window is empty where ``lo > hi``.
    """
    omega = axle_speed * gear_ratio
    need = (wheel_torque / (gear_ratio * params.trans_eff) - params.motor_torque_max_map(omega)) / params.clutch_eff
    lo = np.maximum(params.engine_torque_min_map(omega), need)
    hi = params.engine_torque_max_map(omega)
    return lo, hi


def candidate_inputs(engine_on: bool, lo: float, hi: float, n: int):
    """Discrete input set for one state: ``(torques, switches)``.

    Engine off: stay off, or crank (torque 0).  Engine on: switch off, or
    stay on at ``n`` torques spread uniformly over ``[lo, hi]``.  Order is
    engine-off first, then ascending torque, which is the tie-break order.
    """
    if not engine_on:
        return np.zeros(2), np.array([False, True])
    if lo > hi:
        return np.zeros(1), np.array([False])
    torques = np.concatenate([[0.0], np.linspace(lo, hi, n)])
    switches = np.concatenate([[False], np.ones(n, dtype=bool)])
    return torques, switches


# -- scalar operations ----------------------------------------------------------


def motor_torque_required(inp: ControlInput, dist: Disturbance, params: PowertrainParams,
                          engine_on: bool) -> float:
    g = params.gear_ratios[dist.gear_index - 1]
    te = inp.engine_torque if (engine_on and inp.engine_switch) else 0.0
    c_on = 1.0 if engine_on else 0.0
    return dist.wheel_torque_demand / (g * params.trans_eff) - c_on * params.clutch_eff * te


def electrical_power(motor_torque: float, motor_speed: float, hsg_power: float, aux_power: float,
                     params: PowertrainParams) -> float:
    mech = motor_torque * motor_speed
    if mech == 0.0:
        pm = 0.0
    else:
        pm = float(motor_power_from_mech(mech, params.motor_eff_map(motor_torque, motor_speed)))
    return pm + hsg_power + aux_power


def _battery_current(soc: float, battery_power: float, params: PowertrainParams) -> tuple[float, float]:
    voc = float(params.voc_map(soc))
    rb = float(params.rb_map(soc))
    disc = voc * voc - 4.0 * rb * battery_power
    if disc < 0.0:
        raise PowerLimitExceeded(
            f"battery cannot deliver {battery_power:.1f} W at SOC {soc:.4f} (max {voc * voc / (4 * rb):.1f} W)")
    return 2.0 * battery_power / (voc + math.sqrt(disc)), voc


def soc_next(soc: float, battery_power: float, params: PowertrainParams) -> float:
    current, _ = _battery_current(soc, battery_power, params)
    return soc - params.sample_time * current / params.battery_capacity


def internal_battery_power(battery_power: float, soc: float, params: PowertrainParams) -> float:
    current, voc = _battery_current(soc, battery_power, params)
    return voc * current


def fuel_outputs(engine_torque: float, engine_speed: float, engine_on: bool,
                 params: PowertrainParams) -> tuple[float, float]:
    if not engine_on:
        return 0.0, 0.0
    pf = max(engine_torque * engine_speed / float(params.engine_eff_map(engine_torque, engine_speed)), 0.0)
    return pf, pf / params.fuel_lhv


def _hsg_draw(state: PowertrainState, inp: ControlInput, params: PowertrainParams,
              hsg_mode: str) -> tuple[float, float]:
    """Return (hsg power this step, startup seconds still owed afterwards)."""
    starting = inp.engine_switch and not state.engine_on
    if hsg_mode == "lumped":
        power = params.hsg_start_power * params.hsg_start_duration / params.sample_time if starting else 0.0
        return power, 0.0
    if hsg_mode != "spread":
        raise ValueError(f"unknown hsg_mode {hsg_mode!r}")
    remaining = state.hsg_remaining + (params.hsg_start_duration if starting else 0.0)
    draw = min(remaining, params.sample_time)
    left = remaining - draw
    if left < 1e-12:
        left = 0.0
    return params.hsg_start_power * draw / params.sample_time, left


def step(state: PowertrainState, inp: ControlInput, dist: Disturbance, params: PowertrainParams,
         hsg_mode: str = "spread") -> tuple[PowertrainState, StepOutputs]:
    """Advance the plant one sample.

    Infeasible inputs do not raise: the SOC is clamped to its bounds, the
    internal power is recomputed from the clamped SOC change (so the energy
    identity still holds) and ``infeasible`` is set.
    """
    p_hsg, hsg_left = _hsg_draw(state, inp, params, hsg_mode)
    g = params.gear_ratios[dist.gear_index - 1]
    out = evaluate(params, np.float64(state.soc), state.engine_on, np.float64(inp.engine_torque),
                   inp.engine_switch, dist.aux_power, dist.wheel_torque_demand, dist.axle_speed, g, p_hsg)
    feasible = bool(out.feasible)
    nxt = float(out.soc_next)
    pq = float(out.internal_power)
    if not feasible:
        clamped = min(max(nxt, params.soc_min), params.soc_max)
        if clamped != nxt:
            nxt = clamped
            voc = float(params.voc_map(state.soc))
            pq = params.battery_capacity * voc * (state.soc - nxt) / params.sample_time
    te = inp.engine_torque if (state.engine_on and inp.engine_switch) else 0.0
    outputs = StepOutputs(
        fuel_mass=float(out.fuel_rate) * params.sample_time,
        fuel_power=float(out.fuel_power),
        battery_terminal_power=float(out.battery_power),
        battery_internal_power=pq,
        motor_torque=float(out.motor_torque),
        hsg_energy=p_hsg * params.sample_time,
        infeasible=not feasible,
        engine_torque=te,
    )
    return PowertrainState(nxt, bool(inp.engine_switch), hsg_left), outputs


# -- feasible input set -------------------------------------------------------------


@dataclass(frozen=True)
class FeasibleSet:
    """Engine-torque interval per switch value; ``None`` means infeasible."""

    intervals: dict = field(default_factory=dict)

    def is_feasible(self, switch: bool) -> bool:
        return self.intervals.get(switch) is not None

    def contains(self, inp: ControlInput, tol: float = 0.0) -> bool:
        iv = self.intervals.get(inp.engine_switch)
        return iv is not None and iv[0] - tol <= inp.engine_torque <= iv[1] + tol

    @property
    def any(self) -> bool:
        return any(v is not None for v in self.intervals.values())


def _bisect(pred, a: float, b: float, iters: int = 80) -> float:
    """Boundary of a monotone predicate with pred(a) False, pred(b) True; returns the True side."""
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if mid in (a, b):
            break
        if pred(mid):
            b = mid
        else:
            a = mid
    return b


def feasible_input_set(state: PowertrainState, dist: Disturbance, params: PowertrainParams,
                       hsg_mode: str = "spread") -> FeasibleSet:
    """Feasible engine torques for each switch value.

    With the engine off (or being switched off) the only admissible torque is
    0.  With the engine on and kept on, battery power decreases monotonically
    in engine torque, so the SOC-lower / discriminant / motor-capacity
    constraints give a lower torque limit and the SOC-upper constraint gives
    an upper limit; both are located by bisection.
    """
    g = params.gear_ratios[dist.gear_index - 1]

    def run(te: float, switch: bool):
        p_hsg, _ = _hsg_draw(state, ControlInput(te if switch else 0.0, switch), params, hsg_mode)
        return evaluate(params, np.float64(state.soc), state.engine_on, np.float64(te), switch,
                        dist.aux_power, dist.wheel_torque_demand, dist.axle_speed, g, p_hsg)

    intervals: dict = {}
    intervals[False] = (0.0, 0.0) if bool(run(0.0, False).feasible) else None
    if not state.engine_on:
        intervals[True] = (0.0, 0.0) if bool(run(0.0, True).feasible) else None
    else:
        lo, hi = torque_window(params, dist.wheel_torque_demand, dist.axle_speed, g)
        lo, hi = float(lo), float(hi)
        interval = None
        if lo <= hi:
            def low_ok(te):
                return bool(run(te, True).lower_ok)

            def high_ok(te):
                return bool(run(te, True).upper_ok)

            a = lo if low_ok(lo) else (_bisect(low_ok, lo, hi) if low_ok(hi) else None)
            b = hi if high_ok(hi) else (_bisect_upper(high_ok, lo, hi) if high_ok(lo) else None)
            if a is not None and b is not None and a <= b:
                interval = (a, b)
        intervals[True] = interval
    return FeasibleSet(intervals)


def _bisect_upper(pred, a: float, b: float, iters: int = 80) -> float:
    """Largest point of [a, b] where a monotone-decreasing predicate holds (pred(a) True)."""
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if mid in (a, b):
            break
        if pred(mid):
            a = mid
        else:
            b = mid
    return a


def require_feasible(state: PowertrainState, dist: Disturbance, params: PowertrainParams,
                     hsg_mode: str = "spread") -> FeasibleSet:
    """Like :func:`feasible_input_set` but raises when no switch value is feasible."""
    fs = feasible_input_set(state, dist, params, hsg_mode)
    if not fs.any:
        raise NoFeasibleInput(f"no feasible input at SOC {state.soc:.4f} for {dist}")
    return fs

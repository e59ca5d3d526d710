"""One-step MPC: candidate scoring, tie-breaking, reserve and fallback rules, closed loop."""

from dataclasses import replace

import numpy as np
import pytest

from emslab.dp import DpGrid, solve_dp
from emslab.learn import build_training_set, fit
from emslab.mpc import (LearnedTerminal, MpcConfig, MpcController, PredictionContext, ValueTableTerminal,
                        ZeroTerminal, apply_soc_reserve, fallback_choice, mpc_step, predict_features, tie_break)
from emslab.powertrain import (ControlInput, Disturbance, PowertrainState, candidate_inputs, stage_cost_value, step,
                               torque_window)
from emslab.sim import simulate
from emslab.trip import FeatureTracker, make_bins, route_stats

from helpers import make_trip, sub_trip

IDLE = Disturbance(0.0, 0.0, 0.0, 1)


@pytest.fixture(scope="module")
def policy(short_corpus):
    solved, _ = short_corpus
    return fit(build_training_set(solved, neighbours=True))


def context_at(trip, stats, k, fuel_kg=0.0):
    """Tracker fed with samples 0..k of ``trip``, wrapped in a prediction context."""
    tracker = FeatureTracker(stats, trip.sample_time)
    for i in range(k + 1):
        tracker.observe(trip.time[i], trip.position[i], trip.vehicle_speed[i], trip.aux_power[i])
    tracker.add_fuel(fuel_kg)
    return PredictionContext(k, float(trip.position[k]), float(trip.vehicle_speed[k]), tracker, trip.sample_time,
                             trip.total_distance)


def brute_force_totals(state, dist, terminal, ctx, params, n):
    """Candidate scores recomputed one by one through the scalar plant."""
    g = params.gear_ratio(dist.gear_index)
    lo, hi = torque_window(params, dist.wheel_torque_demand, dist.axle_speed, g)
    torques, switches = candidate_inputs(state.engine_on, float(lo), float(hi), n)
    totals = np.full(torques.size, np.inf)
    for j, (t, s) in enumerate(zip(torques, switches)):
        nxt, out = step(state, ControlInput(float(t) if s else 0.0, bool(s)), dist, params, hsg_mode="lumped")
        if out.infeasible:
            continue
        cost = stage_cost_value(params, out.fuel_power, out.battery_internal_power)
        v = terminal(ctx, 1, np.array([nxt.soc]), np.array([bool(s)]), np.array([ctx.tracker.fuel_kg + out.fuel_mass]))
        totals[j] = cost + float(np.ravel(v)[0])
    return torques, switches, totals


class TestMpcStep:
    def test_idle_prefers_engine_off(self, params, short_trip):
        stats = route_stats([short_trip], make_bins([short_trip]))
        ctx = context_at(short_trip, stats, 0)
        for on in (False, True):
            res = mpc_step(PowertrainState(0.5, on), IDLE, ZeroTerminal(), ctx, params)
            assert res.chosen == ControlInput(0.0, False)
            assert res.predicted_cost == 0.0 and not res.fallback_used

    def test_chosen_candidate_is_the_brute_force_minimum(self, params, short_trip, policy):
        terminal = LearnedTerminal(policy)
        cfg = MpcConfig(soc_reserve=0.0)
        rng = np.random.default_rng(4)
        for _ in range(25):
            k = int(rng.integers(len(short_trip) - 1))
            ctx = context_at(short_trip, policy.stats, k, fuel_kg=float(rng.uniform(0, 0.1)))
            state = PowertrainState(float(rng.uniform(0.25, 0.85)), bool(rng.integers(0, 2)))
            dist = short_trip.disturbance(k)
            res = mpc_step(state, dist, terminal, ctx, params, cfg)
            torques, switches, totals = brute_force_totals(state, dist, terminal, ctx, params, cfg.torque_candidates)
            assert res.candidate_count == torques.size
            assert res.predicted_cost == pytest.approx(np.min(totals), rel=1e-9, abs=1e-12)
            j = tie_break(totals, torques, switches, eps=1e-10)
            assert res.chosen.engine_switch == switches[j]
            if switches[j]:
                assert res.chosen.engine_torque == pytest.approx(torques[j], abs=1e-9)

    def test_constant_offset_in_terminal_shifts_cost_only(self, params, short_trip, policy):
        w = policy.weights.copy()
        w[:, -1] += 0.75
        shifted = replace(policy, weights=w)
        rng = np.random.default_rng(8)
        for _ in range(15):
            k = int(rng.integers(len(short_trip) - 1))
            ctx = context_at(short_trip, policy.stats, k)
            state = PowertrainState(float(rng.uniform(0.25, 0.85)), bool(rng.integers(0, 2)))
            a = mpc_step(state, short_trip.disturbance(k), LearnedTerminal(policy), ctx, params)
            b = mpc_step(state, short_trip.disturbance(k), LearnedTerminal(shifted), ctx, params)
            assert b.chosen == a.chosen
            assert b.predicted_cost == pytest.approx(a.predicted_cost + 0.75, abs=1e-12)

    def test_infeasible_demand_uses_fallback(self, params, short_trip):
        stats = route_stats([short_trip], make_bins([short_trip]))
        ctx = context_at(short_trip, stats, 0)
        res = mpc_step(PowertrainState(0.5), Disturbance(0.0, 10000.0, 5.0, 1), ZeroTerminal(), ctx, params)
        assert res.fallback_used
        assert res.chosen.engine_switch  # the start is the only way back to feasibility

    def test_min_on_guard_blocks_switch_off(self, params, short_trip):
        stats = route_stats([short_trip], make_bins([short_trip]))
        ctx = context_at(short_trip, stats, 0)
        res = mpc_step(PowertrainState(0.5, True), IDLE, ZeroTerminal(), ctx, params, allow_off=False)
        assert res.chosen.engine_switch

    def test_two_step_horizon(self, params, short_trip):
        stats = route_stats([short_trip], make_bins([short_trip]))
        cfg1, cfg2 = MpcConfig(soc_reserve=0.0), MpcConfig(horizon=2, soc_reserve=0.0, torque_candidates=11)
        k = 400
        ctx = context_at(short_trip, stats, k)
        dist = short_trip.disturbance(k)
        state = PowertrainState(0.5, True)
        res = mpc_step(state, dist, ZeroTerminal(), ctx, params, cfg2)
        torques, switches, first = brute_force_totals(state, dist, ZeroTerminal(), ctx, params, 11)
        best = np.inf
        for j in np.flatnonzero(np.isfinite(first)):
            nxt, _ = step(state, ControlInput(float(torques[j]) if switches[j] else 0.0, bool(switches[j])), dist,
                          params, hsg_mode="lumped")
            second = mpc_step(PowertrainState(nxt.soc, nxt.engine_on), dist, ZeroTerminal(), ctx, params,
                              replace(cfg1, torque_candidates=11))
            best = min(best, first[j] + second.predicted_cost)
        assert res.predicted_cost == pytest.approx(best, rel=1e-9)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MpcConfig(horizon=0)
        with pytest.raises(ValueError):
            MpcConfig(torque_candidates=1)
        with pytest.raises(ValueError):
            MpcConfig(min_on_steps=-1)
        with pytest.raises(ValueError):
            MpcConfig(soc_reserve=-0.1)


class TestRules:
    def test_tie_break_prefers_engine_off(self):
        assert tie_break(np.array([1.0, 1.0]), np.array([0.0, 0.0]), np.array([True, False])) == 1

    def test_tie_break_prefers_smaller_torque(self):
        total = np.array([2.0, 1.0 + 5e-13, 1.0])
        assert tie_break(total, np.array([0.0, 10.0, 80.0]), np.array([True, True, True])) == 1

    def test_tie_break_respects_tolerance(self):
        total = np.array([1.0 + 1e-9, 1.0])
        assert tie_break(total, np.array([0.0, 80.0]), np.array([False, True])) == 1

    def test_tie_break_falls_back_to_order(self):
        total = np.array([1.0, 1.0])
        assert tie_break(total, np.array([-20.0, 20.0]), np.array([True, True])) == 0

    def test_reserve_drops_discharging_candidates(self, params):
        state = PowertrainState(params.soc_min + 0.005)
        feasible = np.array([True, True, True])
        soc_next = state.soc + np.array([-1e-4, 0.0, 2e-4])
        kept = apply_soc_reserve(feasible, soc_next, np.array([False, True, True]), state, params, 0.01)
        assert kept.tolist() == [False, True, True]

    def test_reserve_starts_engine_when_nothing_stays(self, params):
        state = PowertrainState(params.soc_min + 0.005)
        soc_next = state.soc - np.array([1e-4, 3e-4])
        kept = apply_soc_reserve(np.array([True, True]), soc_next, np.array([False, True]), state, params, 0.01)
        assert kept.tolist() == [False, True]

    def test_reserve_inactive_above_band(self, params):
        state = PowertrainState(0.5)
        feasible = np.array([True, False, True])
        kept = apply_soc_reserve(feasible, np.full(3, 0.49), np.array([False, True, True]), state, params, 0.01)
        assert kept.tolist() == feasible.tolist()

    def test_fallback_choice(self):
        viol = np.array([3.0, 1.0, 2.0])
        torques, switches = np.array([0.0, 0.0, 50.0]), np.array([False, True, True])
        assert fallback_choice(viol, torques, switches, engine_on=False, wheel_torque=500.0) == 1
        assert fallback_choice(viol, torques, switches, engine_on=True, wheel_torque=500.0) == 1
        assert fallback_choice(np.array([0.5, 1.0]), np.zeros(2), np.array([False, True]), False, -100.0) == 0


class TestPredictFeatures:
    @pytest.fixture
    def tracker(self):
        trip = make_trip([0.0, 2.0, 4.0], 100.0, [500.0, 700.0, 900.0])
        stats = route_stats([make_trip(np.full(2000, 10.0), 0.0)], make_bins([make_trip(np.full(2000, 10.0), 0.0)]))
        t = FeatureTracker(stats, 0.2)
        for i in range(3):
            t.observe(trip.time[i], trip.position[i], trip.vehicle_speed[i], trip.aux_power[i])
        t.add_fuel(0.01)
        return t

    def test_frozen_disturbance_averages(self, tracker):
        X = predict_features(tracker, [0.5, 0.6], [False, True], [0.01, 0.011], position_next=1.0)
        assert X.shape == (2, 8)
        assert X[0, 2] == pytest.approx((500 + 700 + 900 + 900) / 4)
        assert X[0, 4] == pytest.approx((0 + 2 + 4 + 4) / 4)
        assert X[0, 5] == pytest.approx((0 + 10 + 10 + 10) / 4)
        assert X[:, 0].tolist() == [0.5, 0.6] and X[:, 1].tolist() == [0.0, 1.0]
        assert X[1, 3] == 0.011 and np.all(X[:, 7] == 1.0)

    def test_time_left_decrements_within_bin(self, tracker):
        X = predict_features(tracker, [0.5], [False], [0.0], position_next=1.0, steps=3)
        assert X[0, 6] == pytest.approx(tracker.time_left() - 0.6)

    def test_time_left_reanchors_in_next_bin(self, tracker):
        X = predict_features(tracker, [0.5], [False], [0.0], position_next=150.0)
        assert X[0, 6] == tracker.stats.remaining_time[1]


class TestClosedLoop:
    def test_exact_value_terminal_tracks_dp(self, params, short_trip, x0):
        trip = sub_trip(short_trip, 0, 700)
        table, traj = solve_dp(trip, params, DpGrid.uniform(params, 201), x0)
        stats = route_stats([trip], make_bins([trip]))
        ctl = MpcController(ValueTableTerminal(table), params, stats, MpcConfig(torque_candidates=21))
        res = simulate(trip, ctl, params, x0)
        assert res.cost == pytest.approx(traj.total_cost, rel=0.01)

    def test_learned_policy_stays_in_bounds(self, params, short_corpus, policy, x0):
        solved, _ = short_corpus
        res = simulate(solved[1].trip, MpcController.from_policy(policy, params), params, x0)
        ok = ~res.infeasible
        assert np.all(res.soc[1:][ok] >= params.soc_min - 1e-9)
        assert np.all(res.soc[1:][ok] <= params.soc_max + 1e-9)

    def test_min_on_steps(self, params, short_trip, policy, x0):
        ctl = MpcController.from_policy(policy, params, MpcConfig(min_on_steps=10))
        res = simulate(short_trip, ctl, params, x0)
        runs = np.diff(np.flatnonzero(np.diff(np.r_[0, res.engine_switch.astype(int), 0])))[::2]
        assert runs[:-1].min(initial=10) >= 10

"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict with the measured numbers; the
lines are printed as they are produced and again in the terminal summary.
The end-to-end ordering run (criterion 4) takes roughly 20 minutes.
"""

from __future__ import annotations

import hashlib
import time
import warnings

import numpy as np
import pytest

from emslab.baselines import AecmsController, RepresentativeSocProfile
from emslab.cli import run
from emslab.dp import (NEIGHBOUR_SAMPLES, DpGrid, StageModel, backup_cell, enumerate_optimum, neighbour_values,
                       solve_dp, trajectory_values)
from emslab.errors import InfeasibleTrip
from emslab.learn import SolvedTrip, TrainingSet, build_training_set, fit
from emslab.mpc import LearnedTerminal, MpcController, PredictionContext, ValueTableTerminal, mpc_step
from emslab.powertrain import ControlInput, Disturbance, PowertrainState, battery, soc_next, step
from emslab.sim import CompareConfig, compare, dp_controller, simulate
from emslab.trip import FeatureTracker, generate_trip, make_bins, route_stats, standard_routes

from conftest import ACCEPTANCE_LINES
from helpers import cruise_spec, flat_long_spec, mid_spec, toy_instance


def record(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


# -- 1. DP against exhaustive enumeration ------------------------------------------------


def test_c1_dp_matches_enumeration(params):
    rng = np.random.default_rng(1)
    mismatches, feasible, worst_rollout = [], 0, 0.0
    start = time.perf_counter()
    for i in range(50):
        trip, p, grid, x0 = toy_instance(rng, params)
        assert len(trip) - 1 <= 6 and grid.soc_points.size <= 7 and grid.torque_count + 1 <= 5
        expected = enumerate_optimum(trip, p, grid, x0)
        try:
            table, traj = solve_dp(trip, p, grid, x0)
        except InfeasibleTrip:
            if np.isfinite(expected):
                mismatches.append((i, "infeasible", expected))
            continue
        feasible += 1
        got = float(table.value_at(0, x0.soc, x0.engine_on))
        if got != expected:
            mismatches.append((i, got, expected))
        worst_rollout = max(worst_rollout, abs(traj.total_cost - expected) / max(abs(expected), 1e-300))
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 10.0
    record(1, ok, f"50 toy instances ({feasible} feasible), {len(mismatches)} mismatches, "
                  f"rollout rel. gap {worst_rollout:.1e}, {elapsed:.2f} s (limit 10 s)")
    assert not mismatches
    assert elapsed < 10.0


# -- 2. Bellman audit ----------------------------------------------------------------------


def test_c2_bellman_audit(params):
    trip = generate_trip(mid_spec(), 0)
    table, _ = solve_dp(trip, params, DpGrid.uniform(params, 201), PowertrainState(0.55))
    model = StageModel(trip, params)
    rng = np.random.default_rng(2)
    ks = rng.integers(0, table.stage_count, 1000)
    idx = rng.integers(0, 201, 1000)
    es = rng.integers(0, 2, 1000).astype(bool)
    bad = sum(backup_cell(table, model, int(k), int(i), bool(e)) != table.values[k, i, int(e)]
              for k, i, e in zip(ks, idx, es))
    ok = table.stage_count >= 1000 and bad == 0
    record(2, ok, f"{table.stage_count} stages x 201 SOC points, {bad}/1000 audited cells differ")
    assert table.stage_count >= 1000
    assert bad == 0


# -- 3. MPC with the exact value function --------------------------------------------------


def test_c3_mpc_with_exact_values_tracks_dp(params):
    x0 = PowertrainState(0.55)
    gaps = []
    start = time.perf_counter()
    for seed in range(10):
        trip = generate_trip(mid_spec(), seed)
        table, traj = solve_dp(trip, params, x0=x0)
        stats = route_stats([trip], make_bins([trip]))
        res = simulate(trip, MpcController(ValueTableTerminal(table), params, stats), params, x0)
        gaps.append((res.cost - traj.total_cost) / abs(traj.total_cost))
    elapsed = time.perf_counter() - start
    worst = max(abs(g) for g in gaps)
    ok = worst < 0.01 and elapsed < 120.0
    record(3, ok, f"10 trips, closed-loop vs DP rollout cost: worst {100 * worst:.3f}% "
                  f"(mean {100 * np.mean(gaps):+.3f}%), {elapsed:.1f} s (limit 120 s)")
    assert worst < 0.01
    assert elapsed < 120.0


# -- 4. Ordering on three routes with leave-one-out ----------------------------------------


@pytest.fixture(scope="module")
def ordering_run(params):
    """DP, CD-CS, A-ECMS and the learned MPC on 3 routes x 16 trips; value tables are dropped after use."""
    x0 = PowertrainState(0.55)
    start = time.perf_counter()
    corpus, dp_results = {}, {}
    for spec in standard_routes():
        solved = []
        for seed in range(16):
            trip = generate_trip(spec, seed)
            table, traj = solve_dp(trip, params, x0=x0)
            solved.append(SolvedTrip(trip, traj, trajectory_values(table, traj), NEIGHBOUR_SAMPLES,
                                     neighbour_values(table, traj)))
            dp_results[trip.trip_id] = simulate(trip, dp_controller(table, params), params, x0)
            del table
        corpus[spec.route_id] = solved
    report = compare(corpus, dp_results, params, CompareConfig(), x0)
    return report, time.perf_counter() - start


@pytest.mark.slow
def test_c4_route_average_ordering(ordering_run):
    report, elapsed = ordering_run
    averages = report.route_averages()
    failures, soft = [], []
    for route, avg in averages.items():
        trips = report.routes[route]
        infeasible = {c: sum(report.results[t][c].infeasible_step_count for t in trips) for c in avg}
        print(f"  {route}: " + "  ".join(f"{c}={v:.2f}" for c, v in avg.items())
              + "  infeasible steps: " + ", ".join(f"{c}={n}" for c, n in infeasible.items()))
        if not avg["cdcs"] <= avg["proposed"] <= avg["dp"]:
            failures.append(f"{route}: cdcs <= proposed <= dp")
        if not avg["aecms"] <= avg["dp"]:
            failures.append(f"{route}: aecms <= dp")
        if not avg["proposed"] > avg["cdcs"]:
            failures.append(f"{route}: proposed > cdcs")
        if not avg["cdcs"] < avg["aecms"] < avg["proposed"]:
            soft.append(route)
    if soft:
        warnings.warn(f"expected cdcs < aecms < proposed not met on {soft} (reported, not gating)")
    deltas = report.deltas()
    summary = "; ".join(f"{r}: proposed {deltas[r]['proposed']:+.2f}%, aecms {deltas[r]['aecms']:+.2f}%, "
                        f"dp {deltas[r]['dp']:+.2f}% vs cdcs" for r in deltas)
    ok = not failures and elapsed < 1800.0
    record(4, ok, f"{summary}; soft ordering cdcs<aecms<proposed held on {3 - len(soft)}/3 routes; "
                  f"{elapsed / 60:.1f} min (limit 30 min)" + (f"; violated: {failures}" if failures else ""))
    assert not failures
    assert elapsed < 1800.0


@pytest.mark.slow
def test_dp_dominates_each_trip(ordering_run):
    report, _ = ordering_run
    for trip_id, row in report.results.items():
        for c in ("cdcs", "aecms", "proposed"):
            assert row["dp"].mpge >= 0.99 * row[c].mpge, (trip_id, c)


# -- 5. Regression recovery ------------------------------------------------------------------


def _synthetic_training(rng, weights, rows_per_bin, noise=0.0):
    trip = generate_trip(mid_spec(), 0)
    bins = make_bins([trip])
    stats = route_stats([trip], bins)
    b = np.repeat(np.arange(bins.bin_count), rows_per_bin)
    X = np.column_stack([rng.uniform(0.2, 0.9, b.size), rng.integers(0, 2, b.size), rng.uniform(300, 2000, b.size),
                         rng.uniform(0, 0.6, b.size), rng.uniform(0, 30, b.size), rng.uniform(-0.2, 0.2, b.size),
                         rng.uniform(0, 600, b.size), np.ones(b.size)])
    y = np.einsum("ij,ij->i", X, weights[b]) + noise * rng.standard_normal(b.size)
    return TrainingSet(bins, stats, X, y, b, np.full(b.size, trip.trip_id, dtype=object), np.arange(b.size))


def test_c5_regression_recovery():
    rng = np.random.default_rng(5)
    bins = make_bins([generate_trip(mid_spec(), 0)])
    true_w = rng.normal(size=(bins.bin_count, 8)) * np.array([0.2, 1e-3, 1e-5, 0.3, 1e-3, 0.05, 1e-4, 0.1])
    policy = fit(_synthetic_training(rng, true_w, 30), ridge_lambda=0.0)
    recovery = max(np.linalg.norm(policy.raw_weights(k) - true_w[k]) / np.linalg.norm(true_w[k])
                   for k in range(bins.bin_count))

    lam = 1e-4
    noisy = _synthetic_training(rng, true_w, 25, noise=1e-3)
    ridge = fit(noisy, ridge_lambda=lam)
    Z = ridge.scale(noisy.features)
    oracle = 0.0
    for k in rng.choice(bins.bin_count, 10, replace=False):
        rows = noisy.rows(k)
        w = np.linalg.solve(Z[rows].T @ Z[rows] + lam * np.eye(8), Z[rows].T @ noisy.targets[rows])
        oracle = max(oracle, np.max(np.abs(ridge.weights[k] - w)) / max(1.0, np.max(np.abs(w))))
    ok = recovery <= 1e-8 and oracle <= 1e-10
    record(5, ok, f"{bins.bin_count} bins: recovery rel. error {recovery:.1e} (limit 1e-8), "
                  f"normal-equation gap {oracle:.1e} on 10 random bins (limit 1e-10)")
    assert recovery <= 1e-8
    assert oracle <= 1e-10


# -- 6. Physics invariants --------------------------------------------------------------------


@pytest.mark.slow
def test_c6_physics_invariants(params, ordering_run):
    rng = np.random.default_rng(6)
    socs = rng.uniform(params.soc_min, params.soc_max, 1000)
    fixed = all(soc_next(float(s), 0.0, params) == float(s) for s in socs)

    voc = params.voc_map(socs)
    p_max = voc ** 2 / (4 * params.rb_map(socs))
    powers = rng.uniform(-0.9, 0.9, socs.size) * p_max
    identity = 0.0
    for s, pb in zip(socs, powers):
        nxt, out = step(PowertrainState(float(s)), ControlInput(), Disturbance(float(pb), 0.0, 0.0, 1), params)
        stored = params.battery_capacity * float(params.voc_map(float(s))) * (float(s) - nxt.soc)
        if out.battery_internal_power != 0.0:
            identity = max(identity, abs(out.battery_internal_power * params.sample_time - stored)
                           / abs(out.battery_internal_power * params.sample_time))

    fuel_free = True
    for _ in range(1000):
        dist = Disturbance(rng.uniform(0, 2000), rng.uniform(-500, 400), rng.uniform(0, 80), int(rng.integers(1, 7)))
        state = PowertrainState(float(rng.uniform(0.3, 0.8)), bool(rng.integers(0, 2)))
        _, out = step(state, ControlInput(0.0, False), dist, params)
        fuel_free &= out.fuel_mass == 0.0 and out.fuel_power == 0.0
    try:
        ControlInput(float(rng.uniform(1, 150)), False)
        fuel_free = False  # an engine-off input carrying torque must be rejected
    except ValueError:
        pass

    report, _ = ordering_run
    out_of_bounds, runs = 0, 0
    for row in report.results.values():
        for res in row.values():
            runs += 1
            ok_steps = ~res.infeasible
            soc = res.soc[1:][ok_steps]
            out_of_bounds += int(np.sum((soc < params.soc_min - 1e-9) | (soc > params.soc_max + 1e-9)))

    s = rng.uniform(params.soc_min, params.soc_max, 10_000)
    limit = params.voc_map(s) ** 2 / (4 * params.rb_map(s))
    p1 = rng.uniform(-0.95, 0.9, s.size) * limit
    p2 = p1 + rng.uniform(1.0, 0.05 * limit)
    monotone = bool(np.all(battery(params, s, p2).soc_next < battery(params, s, p1).soc_next))

    ok = fixed and identity <= 1e-9 and fuel_free and out_of_bounds == 0 and monotone
    record(6, ok, f"fixed point exact: {fixed}; energy identity max rel. {identity:.1e} (limit 1e-9); "
                  f"engine off fuel-free: {fuel_free}; SOC bound violations {out_of_bounds} over {runs} runs; "
                  f"monotone over 1e4 samples: {monotone}")
    assert fixed and fuel_free and monotone
    assert identity <= 1e-9
    assert out_of_bounds == 0


# -- 7. A-ECMS charge sustaining --------------------------------------------------------------


def test_c7_aecms_holds_constant_reference(params):
    worst, details = 0.0, []
    for spec, seed in ((flat_long_spec(), 7), (cruise_spec(), 3)):
        trip = generate_trip(spec, seed)
        minutes = trip.duration / 60.0
        assert minutes >= 30.0
        bins = make_bins([trip])
        for ref in (0.3, 0.5, 0.7):
            ctl = AecmsController(params, RepresentativeSocProfile.constant(bins, ref))
            res = simulate(trip, ctl, params, PowertrainState(0.55))
            err = res.soc[-1] - ref
            worst = max(worst, abs(err))
            details.append(f"{spec.route_id}@{ref}: {err:+.4f}")
    ok = worst <= 0.03
    record(7, ok, f"final SOC minus reference ({', '.join(details)}); worst {worst:.4f} (limit 0.03)")
    assert worst <= 0.03


# -- 8. Real-time budget ----------------------------------------------------------------------


def test_c8_mpc_step_time(params, short_corpus):
    solved, _ = short_corpus
    policy = fit(build_training_set(solved, neighbours=True))
    terminal = LearnedTerminal(policy)
    trip = solved[0].trip
    tracker = FeatureTracker(policy.stats, params.sample_time)
    rng = np.random.default_rng(8)
    times = []
    for k in range(len(trip) - 1):
        tracker.observe(trip.time[k], trip.position[k], trip.vehicle_speed[k], trip.aux_power[k])
        ctx = PredictionContext(k, float(trip.position[k]), float(trip.vehicle_speed[k]), tracker,
                                params.sample_time, trip.total_distance)
        state = PowertrainState(float(rng.uniform(0.25, 0.85)), bool(rng.integers(0, 2)))
        t0 = time.perf_counter()
        mpc_step(state, trip.disturbance(k), terminal, ctx, params)
        times.append(time.perf_counter() - t0)
    ms = 1e3 * np.array(times[20:])  # skip warm-up
    ok = ms.mean() < 2.0
    record(8, ok, f"{ms.size} calls, 41 torque candidates: mean {ms.mean():.3f} ms, "
                  f"p95 {np.percentile(ms, 95):.3f} ms, max {ms.max():.3f} ms (limit 2 ms)")
    assert ms.mean() < 2.0


# -- 9. Determinism of the whole pipeline ------------------------------------------------------


def _tree_hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_c9_pipeline_is_bit_identical(tmp_path):
    trees = []
    for name in ("first", "second"):
        ws = str(tmp_path / name)
        routes = [r.route_id for r in standard_routes()]
        args = ["generate", "--workspace", ws, "--seeds", "0:2"]
        for r in routes:
            args += ["--route", r]
        assert run(args) == 0
        for r in routes:
            assert run(["solve-dp", "--workspace", ws, "--route", r, "--soc-points", "51"]) == 0
        assert run(["compare", "--workspace", ws, "--plot"]) == 0
        trees.append(_tree_hashes(tmp_path / name))
    differing = sorted(k for k in trees[0].keys() | trees[1].keys() if trees[0].get(k) != trees[1].get(k))
    reports = [k for k in trees[0] if k.startswith("results/compare.")]
    ok = not differing and len(reports) == 3
    record(9, ok, f"generate/solve-dp/compare run twice (3 routes x 2 trips, 51 SOC points): "
                  f"{len(trees[0])} files, {len(differing)} differ; reports {sorted(reports)}")
    assert len(reports) == 3
    assert not differing

"""Shared fixtures: parameters, a few generated trips and a small solved corpus."""

from __future__ import annotations

import numpy as np
import pytest

from emslab.dp import NEIGHBOUR_SAMPLES, neighbour_values, solve_dp, trajectory_values
from emslab.learn import SolvedTrip
from emslab.powertrain import PowertrainState, default_params
from emslab.sim import dp_controller, simulate
from emslab.trip import generate_trip

from helpers import short_spec

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def params():
    return default_params()


@pytest.fixture(scope="session")
def x0():
    return PowertrainState(0.55)


@pytest.fixture(scope="session")
def short_trip():
    return generate_trip(short_spec(), 0)


@pytest.fixture(scope="session")
def short_solution(short_trip, params, x0):
    """(ValueTable, OptimalTrajectory) of the short trip at the default grid."""
    return solve_dp(short_trip, params, x0=x0)


@pytest.fixture(scope="session")
def short_corpus(params, x0):
    """Four solved trips of the short route with perturbed-state samples, plus their DP replays."""
    solved, dp_results = [], {}
    for seed in range(4):
        trip = generate_trip(short_spec(), seed)
        table, traj = solve_dp(trip, params, x0=x0)
        solved.append(SolvedTrip(trip, traj, trajectory_values(table, traj), NEIGHBOUR_SAMPLES,
                                 neighbour_values(table, traj)))
        dp_results[trip.trip_id] = simulate(trip, dp_controller(table, params), params, x0)
    return solved, dp_results


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

"""Position-indexed linear value-function approximation.

For every position bin ``k`` of a route, the optimal cost-to-go sampled
along DP trajectories is regressed on the eight trip features::

    V_k(x) ~ sum_l r_l(k) * z_l,     z = (x - mean) / scale  (bias left as 1)

Weights, scaling, bins and the route statistics needed to build features on
board are bundled in :class:`PolicyParams`, which is the file handed from the
offline trainer to the vehicle controller.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dp import OptimalTrajectory
from .errors import BinOutOfRange, CorpusTooSmall, DegenerateBin, UnknownTrip
from .trip import N_FEATURES, RouteBins, RouteStats, Trip, make_bins, route_stats, trajectory_features

POLICY_SCHEMA = "emslab-policy/1"
MIN_BIN_ROWS = 16
FUEL_PERTURBATIONS = (-0.05, 0.05)  # kg; fuel already burned does not change the optimal cost-to-go


@dataclass(frozen=True, eq=False)
class SolvedTrip:
    """A trip with its DP-optimal trajectory and the cost-to-go sampled along it.

    ``neighbours``/``neighbour_values`` optionally carry extra cost-to-go
    samples read from the same DP table at perturbed trajectory states: one
    ``(soc_offset, engine_flipped)`` pair per column of ``neighbour_values``
    (shape ``(N, m)``, +inf where infeasible).  They are used only when
    training asks for them.
    """

    trip: Trip
    trajectory: OptimalTrajectory
    values: np.ndarray
    neighbours: tuple = ()
    neighbour_values: np.ndarray | None = None

    @property
    def trip_id(self) -> str:
        return self.trip.trip_id

    @property
    def route_id(self) -> str:
        return self.trip.route_id


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Regression rows of one route, keyed by position bin with provenance per row."""

    bins: RouteBins
    stats: RouteStats
    features: np.ndarray  # (M, 8) raw features
    targets: np.ndarray  # (M,)
    bin_index: np.ndarray  # (M,)
    trip_ids: np.ndarray  # (M,) str
    time_index: np.ndarray  # (M,)

    def __len__(self) -> int:
        return self.targets.size

    def rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.bin_index == k)

    def counts(self) -> np.ndarray:
        return np.bincount(self.bin_index, minlength=self.bins.bin_count)


def _trip_rows(solved: SolvedTrip, bins: RouteBins, stats: RouteStats, neighbours: bool):
    trip, traj = solved.trip, solved.trajectory
    X = trajectory_features(trip, traj.soc, traj.engine_on, traj.fuel_consumed, stats)
    b = bins.bin_of(trip.position)
    idx = np.arange(len(trip))
    blocks = [(X, solved.values, b, idx)]
    if neighbours:
        for dm in FUEL_PERTURBATIONS:
            Xf = X.copy()
            Xf[:, 3] = np.maximum(Xf[:, 3] + dm, 0.0)
            blocks.append((Xf, solved.values, b, idx))
    if neighbours and solved.neighbour_values is not None:
        for j, (off, flip) in enumerate(solved.neighbours):
            v = solved.neighbour_values[:, j]
            keep = np.isfinite(v)
            Xo = X[keep].copy()
            Xo[:, 0] += off
            if flip:
                Xo[:, 1] = 1.0 - Xo[:, 1]
            blocks.append((Xo, v[keep], b[keep], idx[keep]))
    X = np.concatenate([blk[0] for blk in blocks])
    y = np.concatenate([blk[1] for blk in blocks])
    keep = np.isfinite(y)
    return (X[keep], y[keep], np.concatenate([blk[2] for blk in blocks])[keep],
            np.concatenate([blk[3] for blk in blocks])[keep])


def build_training_set(solved: list[SolvedTrip], bin_length: float = 100.0,
                       neighbours: bool = False) -> TrainingSet:
    """Rows from every given trip; bins and route statistics come from these trips only.

    With ``neighbours`` the perturbed-state samples stored on each trip are
    added next to the on-trajectory rows, together with copies whose
    cumulative fuel is shifted by :data:`FUEL_PERTURBATIONS` and whose target
    is unchanged.  Both tie the controllable features to the DP value
    function itself instead of to trip-to-trip correlations.
    """
    trips = [s.trip for s in solved]
    bins = make_bins(trips, bin_length)
    stats = route_stats(trips, bins)
    parts = [_trip_rows(s, bins, stats, neighbours) for s in solved]
    ids = np.concatenate([np.full(p[1].size, s.trip_id, dtype=object) for s, p in zip(solved, parts)])
    return TrainingSet(bins, stats, np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                       np.concatenate([p[2] for p in parts]), ids, np.concatenate([p[3] for p in parts]))


def leave_one_out(corpus: list[SolvedTrip], target: str, bin_length: float = 100.0,
                  neighbours: bool = False) -> TrainingSet:
    """Training rows from every trip of ``corpus`` except ``target``."""
    ids = [s.trip_id for s in corpus]
    if target not in ids:
        raise UnknownTrip(f"trip {target!r} is not in the corpus")
    if len(corpus) < 2:
        raise CorpusTooSmall("leave-one-out needs at least 2 trips")
    return build_training_set([s for s in corpus if s.trip_id != target], bin_length, neighbours)


# -- policy -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolicyParams:
    route_id: str
    bins: RouteBins
    stats: RouteStats
    weights: np.ndarray  # (K, 8) per bin, in scaled-feature space
    feature_mean: np.ndarray  # (8,)
    feature_scale: np.ndarray  # (8,)
    sample_counts: np.ndarray  # (K,)
    fallback: np.ndarray  # (K,) bins using the route-global fit
    ridge_lambda: float
    global_weights: np.ndarray = field(default=None)

    def scale(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_scale

    def raw_weights(self, k: int) -> np.ndarray:
        """Weights of bin ``k`` expressed on unscaled features (last entry is the intercept)."""
        w = self.weights[k]
        raw = w / self.feature_scale
        raw[-1] = w[-1] - float(np.sum(w[:-1] * self.feature_mean[:-1] / self.feature_scale[:-1]))
        return raw

    def to_dict(self) -> dict:
        return {
            "schema": POLICY_SCHEMA,
            "route_id": self.route_id,
            "bins": self.bins.to_dict(),
            "route_stats": self.stats.to_dict(),
            "weights": self.weights.tolist(),
            "global_weights": None if self.global_weights is None else self.global_weights.tolist(),
            "feature_scaling": {"mean": self.feature_mean.tolist(), "scale": self.feature_scale.tolist()},
            "sample_counts": self.sample_counts.tolist(),
            "fallback": self.fallback.astype(int).tolist(),
            "ridge_lambda": self.ridge_lambda,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        if d.get("schema") != POLICY_SCHEMA:
            raise ValueError(f"unsupported policy schema {d.get('schema')!r}")
        bins = RouteBins.from_dict(d["bins"])
        gw = d.get("global_weights")
        return cls(d["route_id"], bins, RouteStats.from_dict(bins, d["route_stats"]),
                   np.asarray(d["weights"], dtype=float), np.asarray(d["feature_scaling"]["mean"], dtype=float),
                   np.asarray(d["feature_scaling"]["scale"], dtype=float),
                   np.asarray(d["sample_counts"], dtype=np.int64), np.asarray(d["fallback"], dtype=bool),
                   float(d["ridge_lambda"]), None if gw is None else np.asarray(gw, dtype=float))


def save_policy(policy: PolicyParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(policy.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_policy(path) -> PolicyParams:
    with open(path) as fh:
        return PolicyParams.from_dict(json.load(fh))


def feature_scaling(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean/unit-variance scaling; constant columns and the bias keep scale 1."""
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12 * np.maximum(np.abs(mean), 1.0), scale, 1.0)
    mean[-1], scale[-1] = 0.0, 1.0
    return mean, scale


def ridge_solve(Z: np.ndarray, y: np.ndarray, ridge_lambda: float) -> tuple[np.ndarray, int]:
    """Minimize ||Z w - y||^2 + lambda ||w||^2; returns (weights, rank of the system)."""
    n = Z.shape[1]
    if ridge_lambda > 0:
        A = np.vstack([Z, np.sqrt(ridge_lambda) * np.eye(n)])
        b = np.concatenate([y, np.zeros(n)])
    else:
        A, b = Z, y
    w, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    return w, int(rank)


def fit(training: TrainingSet, ridge_lambda: float = 1e-6, min_rows: int = MIN_BIN_ROWS) -> PolicyParams:
    """Per-bin ridge regression on scaled features with a route-global fallback.

    Bins with fewer than ``min_rows`` rows, or whose system is rank
    deficient without regularization, use the fit over all rows of the route.
    """
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    if len(training) == 0:
        raise DegenerateBin("training set is empty")
    mean, scale = feature_scaling(training.features)
    Z = (training.features - mean) / scale
    y = training.targets
    global_w, rank = ridge_solve(Z, y, ridge_lambda)
    global_ok = rank == N_FEATURES
    K = training.bins.bin_count
    weights = np.empty((K, N_FEATURES))
    counts = training.counts()
    fallback = np.zeros(K, dtype=bool)
    order = np.argsort(training.bin_index, kind="stable")
    starts = np.searchsorted(training.bin_index[order], np.arange(K + 1))
    for k in range(K):
        rows = order[starts[k]:starts[k + 1]]
        w = None
        if rows.size >= min_rows:
            w, r = ridge_solve(Z[rows], y[rows], ridge_lambda)
            if r < N_FEATURES:
                w = None
        if w is None:
            if not global_ok:
                raise DegenerateBin(f"bin {k}: {rows.size} rows and the route-global fit is rank deficient "
                                    f"(rank {rank}); use ridge_lambda > 0")
            w = global_w
            fallback[k] = True
        weights[k] = w
    return PolicyParams(training.bins.route_id, training.bins, training.stats, weights, mean, scale,
                        counts, fallback, float(ridge_lambda), global_w)


def evaluate_vhat(policy: PolicyParams, features, k) -> np.ndarray | float:
    """Approximate cost-to-go: inner product of bin ``k``'s weights with the scaled features."""
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or np.any(k_arr >= policy.bins.bin_count):
        raise BinOutOfRange(f"bin {k} outside 0..{policy.bins.bin_count - 1}")
    z = policy.scale(features)
    out = np.sum(z * policy.weights[k_arr], axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def policy_for_position(policy: PolicyParams, position: float) -> tuple[np.ndarray, int]:
    """Active weight vector and bin index at ``position`` (clamped to the route)."""
    k = int(policy.bins.bin_of(position))
    return policy.weights[k], k

"""``emslab`` command line: generate trips, solve DP, train policies, simulate, compare.

All artifacts live in one workspace directory::

    <root>/trips/<route>/<trip>.csv
    <root>/dp/<route>/<trip>.npz          value table
    <root>/dp/<route>/<trip>.traj.csv     optimal trajectory with V* along it
    <root>/policies/<route>[__excl_<trip>].json (+ .profile.json)
    <root>/results/...
    <root>/manifest.json                  provenance: content hash, input hashes, config hash

The workspace root comes from ``--workspace``, else ``$EMSLAB_WORKSPACE``,
else ``./workspace``.  Settings resolve as CLI flag > ``--config`` file >
built-in default.  Exit codes: 0 ok, 2 parse/usage, 3 validation,
4 missing artifacts, 5 infeasible.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import click

from . import __version__
from .baselines import (AecmsConfig, AecmsController, CdCsConfig, CdCsController, load_profile,
                        representative_profile, save_profile)
from .dp import (NEIGHBOUR_SAMPLES, DpGrid, enumerate_optimum, load_trajectory, load_value_table, neighbour_values,
                 save_trajectory, save_value_table, solve_dp, trajectory_values)
from .errors import EmsLabError, MissingArtifacts, ParseError, UnknownTrip, ValidationError
from .learn import SolvedTrip, build_training_set, fit, load_policy, save_policy
from .mpc import MpcConfig, MpcController
from .powertrain import PowertrainParams, PowertrainState, default_params, load_params
from .sim import CompareConfig, compare, dp_controller, simulate
from .trip import CycleSpec, generate_trip, load_trip, save_trip, standard_routes

ENV_WORKSPACE = "EMSLAB_WORKSPACE"
MANIFEST = "manifest.json"


class ProvenanceConflict(ValidationError):
    """An existing artifact was produced from different inputs or settings."""


# -- settings -----------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Pipeline settings; every field can come from ``--config`` and most from a flag."""

    x0_soc: float | None = None  # None: midpoint of the SOC window
    soc_points: int = 201
    torque_count: int = 21
    interpolation: str = "linear"
    bin_length: float = 100.0
    ridge_lambda: float = 1e-6
    neighbours: bool = True
    mpc_horizon: int = 1
    mpc_candidates: int = 41
    cs_band: float = 0.02
    aecms_s0: float = 2.5
    aecms_kp: float = 25.0
    aecms_ki: float = 0.05

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**data)

    def override(self, **flags) -> "RunConfig":
        return replace(self, **{k: v for k, v in flags.items() if v is not None})

    def x0(self, params: PowertrainParams) -> PowertrainState:
        soc = self.x0_soc if self.x0_soc is not None else 0.5 * (params.soc_min + params.soc_max)
        return PowertrainState(soc)

    def grid(self, params: PowertrainParams) -> DpGrid:
        return DpGrid.uniform(params, self.soc_points, self.torque_count, interpolation=self.interpolation)

    def mpc(self, params: PowertrainParams) -> MpcConfig:
        return MpcConfig(self.mpc_horizon, self.mpc_candidates, params.sample_time)

    def compare_config(self, params: PowertrainParams) -> CompareConfig:
        return CompareConfig(self.bin_length, self.ridge_lambda, self.neighbours, self.mpc(params),
                             CdCsConfig(self.cs_band, torque_candidates=self.mpc_candidates),
                             AecmsConfig(self.aecms_s0, self.aecms_kp, self.aecms_ki, self.mpc_candidates))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- workspace ----------------------------------------------------------------------


class Workspace:
    """Directory layout plus the provenance manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest_path = self.root / MANIFEST
        self.manifest = (json.loads(self.manifest_path.read_text()) if self.manifest_path.exists()
                         else {"tool_version": __version__, "artifacts": {}})

    trips_dir = property(lambda self: self.root / "trips")
    dp_dir = property(lambda self: self.root / "dp")
    policies_dir = property(lambda self: self.root / "policies")
    results_dir = property(lambda self: self.root / "results")

    def rel(self, path: Path) -> str:
        path = Path(path).resolve()
        try:
            return path.relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return path.as_posix()

    def trip_path(self, route: str, trip_id: str) -> Path:
        return self.trips_dir / route / f"{trip_id}.csv"

    def table_path(self, route: str, trip_id: str) -> Path:
        return self.dp_dir / route / f"{trip_id}.npz"

    def trajectory_path(self, route: str, trip_id: str) -> Path:
        return self.dp_dir / route / f"{trip_id}.traj.csv"

    def policy_path(self, route: str, exclude: str | None = None) -> Path:
        name = route if exclude is None else f"{route}__excl_{exclude}"
        return self.policies_dir / f"{name}.json"

    @staticmethod
    def profile_path(policy_path: Path) -> Path:
        return policy_path.with_suffix(".profile.json")

    def routes(self) -> list[str]:
        if not self.trips_dir.is_dir():
            return []
        return sorted(p.name for p in self.trips_dir.iterdir() if p.is_dir())

    def route_trips(self, route: str) -> list[Path]:
        paths = sorted((self.trips_dir / route).glob("*.csv"))
        if not paths:
            raise MissingArtifacts(f"no trips for route {route!r} under {self.trips_dir}")
        return paths

    def resolve_trip(self, ref: str) -> Path:
        """A trip given as a path or as an id somewhere under trips/."""
        p = Path(ref)
        if p.is_file():
            return p
        hits = sorted(self.trips_dir.glob(f"*/{ref}.csv"))
        if not hits:
            raise MissingArtifacts(f"trip {ref!r} is neither a file nor present under {self.trips_dir}")
        return hits[0]

    # provenance

    def provenance(self, inputs: list[Path], config) -> dict:
        return {"inputs": {self.rel(p): file_hash(p) for p in inputs}, "config_sha256": _digest(config)}

    def check(self, outputs: list[Path], prov: dict, force: bool) -> None:
        """Refuse to replace existing outputs whose recorded provenance differs (unless ``force``)."""
        if force:
            return
        for out in outputs:
            if not out.exists():
                continue
            entry = self.manifest["artifacts"].get(self.rel(out))
            if entry is None:
                raise ProvenanceConflict(f"{out} exists without a manifest entry; use --force to replace it")
            if entry["inputs"] != prov["inputs"] or entry["config_sha256"] != prov["config_sha256"]:
                raise ProvenanceConflict(f"{out} was produced from different inputs or settings; "
                                         f"use --force to replace it")

    def record(self, outputs: list[Path], kind: str, prov: dict) -> None:
        for out in outputs:
            self.manifest["artifacts"][self.rel(out)] = {"kind": kind, "sha256": file_hash(out), **prov}
        self.manifest["tool_version"] = __version__
        _atomic_text(self.manifest_path, json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")


def _atomic(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp-{path.name}")  # keeps the suffix for format sniffing
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _atomic_text(path: Path, text: str) -> None:
    _atomic(path, lambda p: p.write_text(text))


# -- shared loading -----------------------------------------------------------------


def _params(path: str | None) -> PowertrainParams:
    if path is None:
        return default_params()
    try:
        return load_params(path)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _params_inputs(path: str | None) -> list[Path]:
    return [Path(path)] if path else []


def _load_solved(ws: Workspace, route: str, params: PowertrainParams, on_table=None):
    """Solved trips of a route from the workspace.

    ``on_table(solved_trip, table)`` is called while each value table is loaded,
    so callers never hold more than one table in memory.
    """
    solved, inputs = [], []
    for trip_path in ws.route_trips(route):
        trip = load_trip(trip_path, params.sample_time)
        tpath = ws.table_path(route, trip.trip_id)
        jpath = ws.trajectory_path(route, trip.trip_id)
        if not tpath.exists() or not jpath.exists():
            raise MissingArtifacts(f"no DP solution for trip {trip.trip_id!r}; run `emslab solve-dp` first")
        table = load_value_table(tpath)
        traj, values = load_trajectory(jpath)
        solved.append(SolvedTrip(trip, traj, values, NEIGHBOUR_SAMPLES, neighbour_values(table, traj)))
        if on_table is not None:
            on_table(solved[-1], table)
        inputs += [trip_path, tpath, jpath]
    return solved, inputs


# -- commands -----------------------------------------------------------------------


workspace_option = click.option(
    "--workspace", "workspace", type=click.Path(file_okay=False), envvar=ENV_WORKSPACE, default="workspace",
    show_default=True, help=f"Workspace root (env: {ENV_WORKSPACE}).")
params_option = click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False),
                             help="Powertrain parameter JSON (default: built-in maps).")
config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="Pipeline settings JSON; flags override it.")
force_option = click.option("--force", is_flag=True, help="Replace outputs whose provenance differs.")


@click.group()
@click.version_option(__version__, prog_name="emslab")
def main():
    """PHEV energy-management lab: DP, learned value functions and MPC."""


def _parse_seeds(seed: tuple[int, ...], seeds: str | None) -> list[int]:
    out = list(seed)
    if seeds:
        try:
            a, b = (int(x) for x in seeds.split(":"))
        except ValueError as exc:
            raise click.BadParameter("expected START:STOP", param_hint="--seeds") from exc
        out += list(range(a, b))
    if not out:
        raise click.UsageError("give --seed and/or --seeds")
    return sorted(set(out))


@main.command()
@workspace_option
@click.option("--route", "routes", multiple=True, type=click.Choice([r.route_id for r in standard_routes()]),
              help="Built-in synthetic route (repeatable).")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), help="Cycle spec JSON.")
@click.option("--seed", type=int, multiple=True, help="Seed (repeatable).")
@click.option("--seeds", help="Seed range START:STOP.")
@force_option
def generate(workspace, routes, spec_path, seed, seeds, force):
    """Generate synthetic trips into trips/<route>/."""
    specs = [r for r in standard_routes() if r.route_id in routes]
    if spec_path:
        try:
            specs.append(CycleSpec.from_dict(json.loads(Path(spec_path).read_text())))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise ParseError(f"{spec_path}: {exc}") from exc
    if not specs:
        raise click.UsageError("give --route and/or --spec")
    seed_list = _parse_seeds(seed, seeds)
    ws = Workspace(workspace)
    # Build every trip before writing anything, so a bad spec leaves no partial output.
    trips = [(spec, s, generate_trip(spec, s)) for spec in specs for s in seed_list]
    for spec, s, trip in trips:
        path = ws.trip_path(trip.route_id, trip.trip_id)
        prov = ws.provenance([], {"spec": spec.to_dict(), "seed": s})
        ws.check([path], prov, force)
        _atomic(path, lambda p, t=trip: save_trip(t, p))
        ws.record([path], "trip", prov)
        click.echo(path)


@main.command("solve-dp")
@workspace_option
@click.argument("trips", nargs=-1)
@click.option("--route", help="Solve every trip of this route.")
@params_option
@config_option
@click.option("--x0", "x0_soc", type=float, help="Initial SOC (default: SOC-window midpoint).")
@click.option("--soc-points", type=int, help="SOC grid size (default 201).")
@click.option("--torque-count", type=int, help="Engine-torque candidates per stage (default 21).")
@click.option("--interpolation", type=click.Choice(["linear", "nearest"]), help="Successor value lookup.")
@click.option("--oracle", is_flag=True, hidden=True, help="Also run the exhaustive enumeration (toy trips).")
@force_option
def solve_dp_cmd(workspace, trips, route, params_path, config_path, x0_soc, soc_points, torque_count,
                 interpolation, oracle, force):
    """Solve trips by backward DP; writes dp/<route>/<trip>.npz and .traj.csv."""
    ws = Workspace(workspace)
    params = _params(params_path)
    cfg = RunConfig.load(config_path).override(x0_soc=x0_soc, soc_points=soc_points, torque_count=torque_count,
                                               interpolation=interpolation)
    paths = [ws.resolve_trip(t) for t in trips] + (ws.route_trips(route) if route else [])
    if not paths:
        raise click.UsageError("give trip ids/paths or --route")
    grid, x0 = cfg.grid(params), cfg.x0(params)
    settings = {"params": params.to_dict(), "grid": [cfg.soc_points, cfg.torque_count, cfg.interpolation],
                "x0": x0.soc}
    for path in paths:
        trip = load_trip(path, params.sample_time)
        outs = [ws.table_path(trip.route_id, trip.trip_id), ws.trajectory_path(trip.route_id, trip.trip_id)]
        prov = ws.provenance([path, *_params_inputs(params_path)], settings)
        ws.check(outs, prov, force)
        table, traj = solve_dp(trip, params, grid, x0)
        values = trajectory_values(table, traj)
        _atomic(outs[0], lambda p: save_value_table(table, p))
        _atomic(outs[1], lambda p: save_trajectory(traj, values, p))
        ws.record(outs, "dp", prov)
        value0 = float(table.value_at(0, x0.soc, x0.engine_on))
        click.echo(f"{trip.trip_id}: value={value0!r} rollout_cost={traj.total_cost!r} "
                   f"final_soc={traj.soc[-1]:.4f} infeasible_steps={traj.infeasible_steps}")
        if oracle:
            click.echo(f"{trip.trip_id}: oracle={enumerate_optimum(trip, params, grid, x0)!r}")


@main.command()
@workspace_option
@click.option("--route", required=True, help="Route whose solved trips form the training corpus.")
@click.option("--exclude", help="Trip id held out (leave-one-out).")
@params_option
@config_option
@click.option("--bin-length", type=float, help="Position bin length in m (default 100).")
@click.option("--ridge", "ridge_lambda", type=float, help="Ridge penalty (default 1e-6).")
@click.option("--neighbours/--no-neighbours", default=None, help="Add perturbed-state DP samples (default on).")
@force_option
def train(workspace, route, exclude, params_path, config_path, bin_length, ridge_lambda, neighbours, force):
    """Fit the position-indexed value-function policy; writes policies/<route>[__excl_<trip>].json."""
    ws = Workspace(workspace)
    params = _params(params_path)
    cfg = RunConfig.load(config_path).override(bin_length=bin_length, ridge_lambda=ridge_lambda,
                                               neighbours=neighbours)
    solved, inputs = _load_solved(ws, route, params)
    if exclude is not None:
        if exclude not in {s.trip_id for s in solved}:
            raise UnknownTrip(f"trip {exclude!r} is not in route {route!r}")
        keep = [s.trip_id != exclude for s in solved]
        solved = [s for s, k in zip(solved, keep) if k]
        inputs = [p for i, p in enumerate(inputs) if keep[i // 3]]
    training = build_training_set(solved, cfg.bin_length, cfg.neighbours)
    policy = fit(training, cfg.ridge_lambda)
    profile = representative_profile(solved, training.bins)
    out = ws.policy_path(route, exclude)
    outs = [out, ws.profile_path(out)]
    prov = ws.provenance(inputs, {"bin_length": cfg.bin_length, "ridge_lambda": cfg.ridge_lambda,
                                  "neighbours": cfg.neighbours})
    ws.check(outs, prov, force)
    _atomic(outs[0], lambda p: save_policy(policy, p))
    _atomic(outs[1], lambda p: save_profile(profile, p))
    ws.record(outs, "policy", prov)
    click.echo(f"{out}: {len(solved)} trips, {len(training)} rows, "
               f"{int(policy.fallback.sum())}/{policy.bins.bin_count} bins on the route-global fit")


@main.command("simulate")
@workspace_option
@click.argument("trip")
@click.option("--controller", type=click.Choice(["cdcs", "aecms", "mpc", "dp"]), required=True)
@click.option("--policy", "policy_path", type=click.Path(dir_okay=False),
              help="Policy JSON for mpc (default: the leave-one-out policy of this trip).")
@click.option("--profile", "profile_path", type=click.Path(dir_okay=False),
              help="SOC profile JSON for aecms (default: next to the leave-one-out policy).")
@params_option
@config_option
@click.option("--x0", "x0_soc", type=float, help="Initial SOC (default: SOC-window midpoint).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory (default results/).")
@force_option
def simulate_cmd(workspace, trip, controller, policy_path, profile_path, params_path, config_path, x0_soc,
                 out_dir, force):
    """Run one controller over one trip; writes a trace CSV and a summary JSON."""
    ws = Workspace(workspace)
    params = _params(params_path)
    cfg = RunConfig.load(config_path).override(x0_soc=x0_soc)
    trip_path = ws.resolve_trip(trip)
    tr = load_trip(trip_path, params.sample_time)
    inputs = [trip_path, *_params_inputs(params_path)]
    loo = ws.policy_path(tr.route_id, tr.trip_id)
    if controller == "cdcs":
        ctl = CdCsController(params, cfg.compare_config(params).cdcs)
    elif controller == "aecms":
        path = Path(profile_path) if profile_path else ws.profile_path(loo)
        if not path.exists():
            raise MissingArtifacts(f"no SOC profile at {path}; run `emslab train --route {tr.route_id} "
                                   f"--exclude {tr.trip_id}` or pass --profile")
        ctl = AecmsController(params, load_profile(path), cfg.compare_config(params).aecms)
        inputs.append(path)
    elif controller == "mpc":
        path = Path(policy_path) if policy_path else loo
        if not path.exists():
            raise MissingArtifacts(f"no policy at {path}; run `emslab train --route {tr.route_id} "
                                   f"--exclude {tr.trip_id}` or pass --policy")
        ctl = MpcController.from_policy(load_policy(path), params, cfg.mpc(params))
        inputs.append(path)
    else:
        path = ws.table_path(tr.route_id, tr.trip_id)
        if not path.exists():
            raise MissingArtifacts(f"no value table at {path}; run `emslab solve-dp {tr.trip_id}`")
        ctl = dp_controller(load_value_table(path), params)
        inputs.append(path)
    base = Path(out_dir) if out_dir else ws.results_dir / tr.route_id
    outs = [base / f"{tr.trip_id}.{controller}.csv", base / f"{tr.trip_id}.{controller}.json"]
    prov = ws.provenance(inputs, {"controller": controller, "config": asdict(cfg), "params": params.to_dict()})
    ws.check(outs, prov, force)
    result = simulate(tr, ctl, params, cfg.x0(params))
    _atomic(outs[0], result.write_csv)
    _atomic(outs[1], result.write_summary)
    ws.record(outs, "simulation", prov)
    s = result.summary()
    click.echo(f"{tr.trip_id} [{controller}]: mpge={s['mpge']:.3f} fuel_gal={s['fuel_gallons']:.5f} "
               f"net_battery_kwh={s['net_battery_kwh']:.4f} final_soc={s['final_soc']:.4f} "
               f"infeasible_steps={s['infeasible_step_count']}")


@main.command("compare")
@workspace_option
@click.option("--route", "routes", multiple=True, help="Route to include (default: every route in trips/).")
@params_option
@config_option
@click.option("--x0", "x0_soc", type=float, help="Initial SOC (default: SOC-window midpoint).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory (default results/).")
@click.option("--plot/--no-plot", default=False, help="Also write a bar chart of route averages.")
@force_option
def compare_cmd(workspace, routes, params_path, config_path, x0_soc, out_dir, plot, force):
    """Four-way comparison (CD-CS, A-ECMS, proposed, DP) with leave-one-out training per trip."""
    ws = Workspace(workspace)
    params = _params(params_path)
    cfg = RunConfig.load(config_path).override(x0_soc=x0_soc)
    routes = list(routes) or ws.routes()
    if not routes:
        raise MissingArtifacts(f"no trips under {ws.trips_dir}; run `emslab generate` first")
    x0 = cfg.x0(params)
    corpus, dp_results, inputs = {}, {}, list(_params_inputs(params_path))
    for route in routes:
        def run_dp(s, table):
            dp_results[s.trip_id] = simulate(s.trip, dp_controller(table, params), params, x0)

        corpus[route], route_inputs = _load_solved(ws, route, params, on_table=run_dp)
        inputs += route_inputs
    base = Path(out_dir) if out_dir else ws.results_dir
    outs = [base / "compare.csv", base / "compare.json"] + ([base / "compare.png"] if plot else [])
    prov = ws.provenance(inputs, {"config": asdict(cfg), "params": params.to_dict()})
    ws.check(outs, prov, force)
    report = compare(corpus, dp_results, params, cfg.compare_config(params), x0,
                     progress=lambda msg: click.echo(f"  {msg}", err=True))
    payload = {"route_averages": report.route_averages(), "deltas_percent": report.deltas(),
               "trips": {t: {c: (r.summary() if r is not None else None) for c, r in row.items()}
                         for t, row in report.results.items()}}
    _atomic(outs[0], report.write_csv)
    _atomic_text(outs[1], json.dumps(payload, indent=1, sort_keys=True) + "\n")
    if plot:
        _atomic(outs[2], lambda p: report.plot(p))
    ws.record(outs, "report", prov)
    for route, avg in report.route_averages().items():
        cells = "  ".join(f"{c}={'n/a' if v is None else f'{v:.2f}'}" for c, v in avg.items())
        click.echo(f"{route}: {cells}")


def run(argv=None) -> int:
    """Entry point returning the exit code (domain errors map to their class code)."""
    try:
        main.main(args=argv, prog_name="emslab", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except EmsLabError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    return 0


def entry() -> None:
    sys.exit(run())

"""Experiment runner: scaling, coverage and separation studies.

Every experiment is a grid of independent units keyed by ``(n, seed)``.  A
unit returns long-format rows ``(experiment, instance, n, seed, kind,
metric, value)``; rows are appended to ``<out>/<experiment>.csv`` as units
finish, and a JSON sidecar records the configuration, its hash and an
environment fingerprint.  Re-running with the same configuration skips the
units already on disk, and the finished CSV is rewritten in canonical
order, so the same seeds always give the same file.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy

from . import __version__
from .instances import (
    CBInstance, build_intro_example, build_lower_bound_instance, build_prop_d1_instance,
    build_reference_instance, factorize_params, load_instance, uniform_pairs,
)
from .reward_free import approx_winner_gap, build_tables, concentration_holds, truth_tables, von_neumann_winner
from .reward_learning import FitOptions, confidence_radius, estimation_errors, fit_mle
from .sampling import sample_cb_dataset
from .welfare import WelfareKind, solve_policy, statewise_argmax, welfare_table

CSV_COLUMNS = ("experiment", "instance", "n", "seed", "kind", "metric", "value", "config_hash")
SIDECAR_SCHEMA = "result-table/v1"
DEFAULT_K_GRID = tuple(np.round(np.arange(0.25, 4.0001, 0.25), 2).tolist())


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    experiment: str
    instance: str
    n_grid: list[int]
    seeds: list[int]
    kinds: list[str] = field(default_factory=list)
    k_const: float | None = 1.0  # None: calibrate first
    delta: float = 0.1
    out_dir: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.n_grid = [int(n) for n in self.n_grid]
        self.seeds = [int(s) for s in self.seeds]
        self.kinds = [WelfareKind.parse(k).value for k in self.kinds]
        self.validate()

    def validate(self) -> None:
        if not self.n_grid:
            raise ValueError("the sample-size grid is empty")
        if not self.seeds:
            raise ValueError("the seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(n < 1 for n in self.n_grid):
            raise ValueError("sample sizes must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.k_const is not None and self.k_const < 0:
            raise ValueError("k_const must be nonnegative")

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")  # where results go does not change them
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, doc: dict, out_dir=None) -> "ExperimentConfig":
        return cls(out_dir=out_dir, **doc)


def environment_fingerprint() -> dict:
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "package": __version__,
    }


@dataclass
class ResultTable:
    config: ExperimentConfig
    rows: list[dict]
    summary: dict = field(default_factory=dict)

    def sort(self) -> None:
        self.rows.sort(key=lambda r: (r["n"], r["seed"], r["kind"], r["metric"]))

    def values(self, metric: str, kind: str = "") -> np.ndarray:
        """``(len(n_grid), len(seeds))`` array of one metric (NaN if missing)."""
        ni = {n: i for i, n in enumerate(self.config.n_grid)}
        si = {s: j for j, s in enumerate(self.config.seeds)}
        out = np.full((len(ni), len(si)), np.nan)
        for r in self.rows:
            if r["metric"] == metric and r["kind"] == kind and r["n"] in ni and r["seed"] in si:
                out[ni[r["n"]], si[r["seed"]]] = r["value"]
        return out

    def csv_path(self, out_dir) -> Path:
        return Path(out_dir) / f"{self.config.experiment}.csv"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.sort()
        path = self.csv_path(out)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow(_csv_row(r))
        write_sidecar(self.config, out, self.summary)
        return path

    @classmethod
    def read(cls, csv_path) -> "ResultTable":
        csv_path = Path(csv_path)
        side = json.loads(csv_path.with_suffix(".json").read_text())
        if side.get("schema") != SIDECAR_SCHEMA:
            raise ValueError(f"unexpected sidecar schema {side.get('schema')!r}")
        cfg = ExperimentConfig.from_json(side["config"], out_dir=str(csv_path.parent))
        rows = _read_rows(csv_path, side["config_hash"])
        return cls(cfg, rows, side.get("summary", {}))


def _csv_row(r: dict) -> list:
    return [r["experiment"], r["instance"], r["n"], r["seed"], r["kind"], r["metric"],
            repr(float(r["value"])), r["config_hash"]]


def _read_rows(path: Path, config_hash: str) -> list[dict]:
    rows = []
    with path.open(newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec.get("config_hash") != config_hash or rec.get("value") in (None, ""):
                continue  # foreign or truncated line
            try:
                rec["n"], rec["seed"], rec["value"] = int(rec["n"]), int(rec["seed"]), float(rec["value"])
            except ValueError:
                continue
            rows.append(rec)
    return rows


def write_sidecar(config: ExperimentConfig, out_dir, summary=None) -> Path:
    path = Path(out_dir) / f"{config.experiment}.json"
    doc = {
        "schema": SIDECAR_SCHEMA,
        "config": config.to_json(),
        "config_hash": config.config_hash,
        "environment": environment_fingerprint(),
        "columns": list(CSV_COLUMNS),
        "summary": _plain(summary or {}),
    }
    path.write_text(json.dumps(doc, indent=1, allow_nan=True))
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# generic runner
# ---------------------------------------------------------------------------

def resolve_instance(source: str | CBInstance) -> CBInstance:
    """Fixture name (``intro``, ``reference``, ``prop-d1``, ...) or instance file."""
    if isinstance(source, CBInstance):
        return source
    name, _, arg = str(source).partition(":")
    if name == "intro":
        return build_intro_example(float(arg or 0.1))
    if name == "reference":
        return build_reference_instance()
    if name == "prop-d1":
        return build_prop_d1_instance(float(arg or 2.0))
    if name == "transitive":
        return build_transitive_instance()
    if name == "lower-bound":
        r, C, n = (arg or "9,2,1000").split(",")
        S = int(r) // 3
        return build_lower_bound_instance(int(r), float(C), int(n), np.ones(S, dtype=int))
    path = Path(source)
    if path.exists():
        inst = load_instance(path)
        if not isinstance(inst, CBInstance):
            raise ValueError("experiments need a contextual-bandit instance")
        return inst
    raise ValueError(f"unknown instance source {source!r}")


def _instance_label(source) -> str:
    return source.name if isinstance(source, CBInstance) else str(source)


UnitFn = Callable[[CBInstance, ExperimentConfig, int, int], list[tuple[str, str, float]]]


def _unit_task(args):
    fn, inst, config, n, seed = args
    return n, seed, fn(inst, config, n, seed)


def run_grid(config: ExperimentConfig, inst: CBInstance, unit: UnitFn, jobs: int = 1,
             out_dir=None) -> ResultTable:
    """Evaluate ``unit`` on every ``(n, seed)``, resuming from ``out_dir``.

    ``unit`` returns ``(kind, metric, value)`` triples.  With ``jobs > 1``
    units run in worker processes; the result does not depend on the order
    in which they finish.
    """
    out_dir = out_dir if out_dir is not None else config.out_dir
    h = config.config_hash
    label = config.instance
    rows: list[dict] = []
    done: set = set()
    fh = writer = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{config.experiment}.csv"
        side = out / f"{config.experiment}.json"
        resumable = (path.exists() and side.exists()
                     and json.loads(side.read_text()).get("config_hash") == h)
        if resumable:
            rows = _read_rows(path, h)
            # a unit is done once its completion marker is on disk
            done = {(r["n"], r["seed"]) for r in rows if r["metric"] == "_unit_done"}
            rows = [r for r in rows if (r["n"], r["seed"]) in done]
        write_sidecar(config, out)
        fh = path.open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(_csv_row(r) for r in rows)
        fh.flush()

    def emit(n, seed, triples):
        new = [dict(experiment=config.experiment, instance=label, n=n, seed=seed, kind=k,
                    metric=m, value=float(v), config_hash=h) for k, m, v in triples]
        new.append(dict(experiment=config.experiment, instance=label, n=n, seed=seed, kind="",
                        metric="_unit_done", value=1.0, config_hash=h))
        rows.extend(new)
        if writer is not None:
            writer.writerows(_csv_row(r) for r in new)
            fh.flush()

    todo = [(n, s) for n in config.n_grid for s in config.seeds if (n, s) not in done]
    try:
        if jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                for n, seed, triples in ex.map(_unit_task, [(unit, inst, config, n, s) for n, s in todo]):
                    emit(n, seed, triples)
        else:
            for n, s in todo:
                emit(n, s, unit(inst, config, n, s))
    finally:
        if fh is not None:
            fh.close()
    table = ResultTable(config, rows)
    table.sort()
    return table


def finish(table: ResultTable, summary: dict, out_dir=None) -> ResultTable:
    table.summary = summary
    out_dir = out_dir if out_dir is not None else table.config.out_dir
    if out_dir is not None:
        table.write(out_dir)
    return table


def loglog_slope(ns: Iterable[float], values: Iterable[float]) -> float:
    """Least-squares slope of ``log value`` on ``log n`` over positive values."""
    ns = np.asarray(list(ns), dtype=float)
    v = np.asarray(list(values), dtype=float)
    ok = np.isfinite(v) & (v > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(ns[ok]), np.log(v[ok]), 1)[0])


def _fit(inst, data, config, n, k_const):
    opts = FitOptions(delta=config.delta, k_const=k_const)
    return fit_mle(data, inst.features, inst.rank, inst.param_bound, opts)


def _k(config) -> float:
    return 1.0 if config.k_const is None else config.k_const


# ---------------------------------------------------------------------------
# separation example
# ---------------------------------------------------------------------------

def _separation_unit(inst, config, n, seed):
    data = sample_cb_dataset(inst, n, seed)
    R = inst.rewards()  # (2, 1, 3)
    out = []
    # (a) one reward on the union of both parties' data: M = 1, r = d
    pooled = data.pooled()
    d = inst.feature_dim
    pf = fit_mle(pooled, inst.features, d, inst.param_bound,
                 FitOptions(delta=config.delta, k_const=_k(config)))
    est = inst.features[0] @ pf.theta_hat[0]
    # identified only up to a shift, so report centred values
    est_c = est - est.mean()
    for a, v in enumerate(est_c):
        out.append(("pooled", f"estimated_reward_{a}", v))
    out.append(("pooled", "estimated_spread", float(est.max() - est.min())))
    a_pool = int(np.argmax(est))
    out.append(("pooled", "action", a_pool))
    out.append(("pooled", "average_reward", float(R[:, 0, a_pool].mean())))
    out.append(("pooled", "uniform_tie_average_reward", float(R[:, 0, :].mean())))
    # (b) the multi-party pipelines
    fit = _fit(inst, data, config, n, _k(config))
    for kind in config.kinds or ["nash", "utilitarian"]:
        sol = solve_policy(fit, inst.features, inst.initial_dist, kind, true_params=inst.party_params)
        a = int(sol.policy[0])
        out.append((kind, "action", a))
        out.append((kind, "average_reward", float(R[:, 0, a].mean())))
        out.append((kind, "pessimistic_value", sol.pessimistic_value))
    return out


def run_separation_experiment(epsilon: float = 0.1, n_grid=(10**4,), seeds=range(20), kinds=("nash", "utilitarian"),
                              k_const: float = 1.0, delta: float = 0.1, jobs: int = 1, out_dir=None) -> ResultTable:
    """Pooled single reward versus per-party rewards on the two-party example."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    cfg = ExperimentConfig("separation", f"intro:{epsilon}", list(n_grid), list(seeds), list(kinds), k_const, delta,
                           out_dir, {"epsilon": epsilon})
    inst = build_intro_example(epsilon)
    table = run_grid(cfg, inst, _separation_unit, jobs)
    summary = {}
    for n_i, n in enumerate(cfg.n_grid):
        s = {"pooled_average_reward_max": float(np.nanmax(table.values("average_reward", "pooled")[n_i])),
             "pooled_spread_max": float(np.nanmax(table.values("estimated_spread", "pooled")[n_i]))}
        for kind in cfg.kinds:
            s[f"{kind}_average_reward_min"] = float(np.nanmin(table.values("average_reward", kind)[n_i]))
            s[f"{kind}_selects_C"] = int(np.sum(table.values("action", kind)[n_i] == 2))
        summary[str(n)] = s
    return finish(table, summary)


# ---------------------------------------------------------------------------
# estimation and sub-optimality scaling
# ---------------------------------------------------------------------------

def _estimation_unit(inst, config, n, seed):
    data = sample_cb_dataset(inst, n, seed)
    fit = _fit(inst, data, config, n, _k(config))
    err = estimation_errors(fit, inst.party_params)
    return [("", "max_sigma_error", float(err.max())), ("", "mean_sigma_error", float(err.mean())),
            ("", "converged", float(fit.converged))]


def run_estimation_scaling(instance, n_grid, seeds, delta: float = 0.1, jobs: int = 1, out_dir=None) -> ResultTable:
    """``max_m ||theta_hat_m - theta*_m||_{Sigma_m}`` against ``n``."""
    inst = resolve_instance(instance)
    cfg = ExperimentConfig("estimation-scaling", _instance_label(instance), list(n_grid), list(seeds), [], 1.0,
                           delta, out_dir)
    table = run_grid(cfg, inst, _estimation_unit, jobs)
    mean = np.nanmean(table.values("max_sigma_error"), axis=1)
    return finish(table, {"mean_max_sigma_error": mean, "slope": loglog_slope(cfg.n_grid, mean)})


def _subopt_unit(inst, config, n, seed):
    data = sample_cb_dataset(inst, n, seed)
    fit = _fit(inst, data, config, n, _k(config))
    out = [("", "gamma", fit.gamma)]
    for kind in config.kinds:
        sol = solve_policy(fit, inst.features, inst.initial_dist, kind, true_params=inst.party_params)
        out += [(kind, "suboptimality", sol.suboptimality), (kind, "pessimistic_value", sol.pessimistic_value),
                (kind, "true_value", sol.true_value),
                (kind, "certified", float(sol.diagnostics["inner"].get("certified", True)))]
    return out


def run_suboptimality_scaling(instance="reference", kinds=("nash", "utilitarian", "leximin"),
                              n_grid=(250, 500, 1000, 2000, 4000, 8000), seeds=range(20), K: float = 1.0,
                              delta: float = 0.1, jobs: int = 1, out_dir=None) -> ResultTable:
    """Sample, fit, solve exactly and record ``SubOpt`` per ``(n, seed, kind)``."""
    inst = resolve_instance(instance)
    cfg = ExperimentConfig("subopt-scaling", _instance_label(instance), list(n_grid), list(seeds), list(kinds), K,
                           delta, out_dir)
    table = run_grid(cfg, inst, _subopt_unit, jobs)
    summary = {}
    for kind in cfg.kinds:
        v = table.values("suboptimality", kind)
        mean = np.nanmean(v, axis=1)
        summary[kind] = {
            "mean": mean,
            "q10": np.nanquantile(v, 0.1, axis=1),
            "median": np.nanmedian(v, axis=1),
            "q90": np.nanquantile(v, 0.9, axis=1),
            "slope": loglog_slope(cfg.n_grid, mean),
            "min": float(np.nanmin(v)),
        }
    return finish(table, summary)


# ---------------------------------------------------------------------------
# confidence coverage and K calibration
# ---------------------------------------------------------------------------

def _coverage_unit(inst, config, n, seed):
    data = sample_cb_dataset(inst, n, seed)
    fit = _fit(inst, data, config, n, 1.0)
    err = estimation_errors(fit, inst.party_params)
    g1 = confidence_radius(config.delta, n, inst.num_parties, inst.feature_dim, inst.rank, 1.0)
    in_ball = bool(np.all(np.linalg.norm(inst.party_params, axis=1) <= inst.param_bound))
    # theta* is covered at K exactly when K * Gamma(1) reaches the worst party's error
    k_crit = float(err.max() / g1) if in_ball else math.inf
    return [("", "critical_k", k_crit), ("", "max_sigma_error", float(err.max())), ("", "gamma_at_k1", g1)]


def run_coverage_study(instance="reference", delta: float = 0.1, K_grid=DEFAULT_K_GRID, seeds=range(200),
                       n: int = 1000, jobs: int = 1, out_dir=None) -> ResultTable:
    """Simultaneous coverage frequency of ``theta*_m`` for every ``K`` on the grid."""
    inst = resolve_instance(instance)
    K_grid = sorted(float(k) for k in K_grid)
    if not K_grid:
        raise ValueError("K grid is empty")
    cfg = ExperimentConfig("coverage", _instance_label(instance), [n], list(seeds), [], None, delta, out_dir,
                           {"K_grid": K_grid})
    table = run_grid(cfg, inst, _coverage_unit, jobs)
    kc = table.values("critical_k")[0]
    coverage = [float(np.mean(kc <= K * (1 + 1e-12))) for K in K_grid]
    calibrated = next((K for K, c in zip(K_grid, coverage) if c >= 1 - delta), None)
    summary = {"K_grid": K_grid, "coverage": coverage, "calibrated_k": calibrated,
               "calibrated_coverage": None if calibrated is None else coverage[K_grid.index(calibrated)]}
    return finish(table, summary)


def calibrate_k(instance="reference", delta: float = 0.1, K_grid=DEFAULT_K_GRID, seeds=range(200), n: int = 1000,
                jobs: int = 1, out_dir=None) -> tuple[float | None, float | None]:
    """Smallest grid ``K`` whose empirical coverage reaches ``1 - delta``."""
    t = run_coverage_study(instance, delta, K_grid, seeds, n, jobs, out_dir)
    return t.summary["calibrated_k"], t.summary["calibrated_coverage"]


# ---------------------------------------------------------------------------
# reward-free winners
# ---------------------------------------------------------------------------

def build_transitive_instance(gaps=(0.07, 0.15, 0.3, 0.6)) -> CBInstance:
    """Two parties, one state, ``len(gaps) + 1`` options ranked alike by both.

    Option 0 is the Condorcet winner; option ``k`` trails it by
    ``gaps[k-1]`` for the first party and by twice that for the second, so
    the averaged preference matrix is transitive with near ties at the top.
    """
    g = np.concatenate([[0.0], np.asarray(gaps, dtype=float)])
    A = g.size
    theta = np.stack([-g, -2.0 * g])
    U, alpha = factorize_params(theta, 2)
    return CBInstance(features=np.eye(A)[None], shared_factor=U, party_coeffs=alpha,
                      param_bound=max(1.0, float(np.linalg.norm(theta, axis=1).max())), feature_bound=1.0,
                      initial_dist=np.ones(1), pair_gen=uniform_pairs(1, A), name="transitive",
                      meta={"gaps": g[1:].tolist()})


def _vn_unit(inst, config, n, seed):
    data = sample_cb_dataset(inst, n, seed)
    tables = build_tables(data, inst.num_states, inst.num_actions, config.delta, truth_tables(inst))
    sol = von_neumann_winner(tables)
    per_state, agg = approx_winner_gap(sol, tables.N_star, inst.initial_dist)
    return [("", "gap", agg), ("", "gap_magnitude", max(-agg, 0.0)),
            ("", "concentration_holds", float(concentration_holds(tables)))]


def run_vn_scaling(instance="transitive", delta: float = 0.1, n_grid=(500, 1000, 2000, 4000, 8000, 16000, 32000),
                   seeds=range(20), jobs: int = 1, out_dir=None) -> ResultTable:
    """Pessimistic von Neumann winner's approximation gap against ``n``."""
    inst = resolve_instance(instance)
    cfg = ExperimentConfig("vn-scaling", _instance_label(instance), list(n_grid), list(seeds), [], None, delta,
                           out_dir)
    table = run_grid(cfg, inst, _vn_unit, jobs)
    mag = np.nanmean(table.values("gap_magnitude"), axis=1)
    summary = {"mean_gap_magnitude": mag, "slope": loglog_slope(cfg.n_grid, mag),
               "min_gap": float(np.nanmin(table.values("gap"))),
               "concentration_rate": float(np.nanmean(table.values("concentration_holds")))}
    return finish(table, summary)


def greedy_policy(fit, features, kind) -> np.ndarray:
    """State-wise argmax at the estimated parameters (no pessimism)."""
    R = np.einsum("sad,md->msa", np.asarray(features, dtype=float), fit.theta_hat)
    return statewise_argmax(welfare_table(R, kind))


EXPERIMENTS = {
    "separation": run_separation_experiment,
    "subopt-scaling": run_suboptimality_scaling,
    "coverage": run_coverage_study,
    "vn-scaling": run_vn_scaling,
    "estimation-scaling": run_estimation_scaling,
}

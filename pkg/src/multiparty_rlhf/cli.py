"""``mprlhf`` command-line front end.

Exit codes: 0 success, 2 validation error (bad arguments or inputs), 3 a
solver did not converge.  Every command writes JSON; ``--out`` selects the
directory (default: the current one).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import harness
from .instances import (
    CBInstance, MDPInstance, build_intro_example, build_lower_bound_instance, build_prop_d1_instance,
    build_reference_instance, diversity_stats, load_instance, random_instance, random_mdp_instance, save_instance,
)
from .mdp import mdp_values_and_solve
from .reward_free import (
    GameSolverError, WinnerSolution, audit_expost, build_prop_d2_profile, build_tables, rps_truth, solve_matrix_game,
    truth_tables, von_neumann_winner,
)
from .reward_learning import FitError, FitOptions, RewardFit, confidence_radius, fit_mle
from .sampling import (
    read_cb_dataset, read_mdp_dataset, sample_cb_dataset, sample_mdp_dataset, write_cb_dataset, write_mdp_dataset,
)
from .welfare import PolicySolution, SolveOptions, audit_pareto, audit_pigou_dalton, solve_policy

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3


class ConvergenceFailure(RuntimeError):
    """Raised after outputs are written when a solver reports non-convergence."""


def _ints(text: str) -> list[int]:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:  # a:b is the half-open range
            a, b = part.split(":")
            out.extend(range(int(a), int(b)))
        else:
            out.append(int(part))
    return out


def _floats(text: str) -> list[float]:
    return [float(p) for p in str(text).split(",") if p.strip()]


def _out(args, name: str) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1))
    print(f"wrote {path}")


def _load_cb(path) -> CBInstance | MDPInstance:
    try:
        return load_instance(path)
    except FileNotFoundError as e:
        raise ValueError(f"no such instance file: {path}") from e


def _table(rows, header) -> str:
    cells = [[str(c) for c in header]] + [[f"{c:.6g}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# -- instance and data commands ---------------------------------------------


def cmd_gen_instance(args):
    if args.horizon > 1:
        inst = random_mdp_instance(args.states, args.actions, args.dim, args.rank, args.parties, args.horizon,
                                   args.seed, args.param_scale)
    elif args.family == "reference":
        inst = build_reference_instance(seed=args.seed)
    else:
        inst = random_instance(args.states, args.actions, args.dim, args.rank, args.parties, args.seed,
                               args.param_scale)
    path = Path(args.output) if args.output else _out(args, f"{inst.name}.json")
    save_instance(inst, path)
    print(f"wrote {path}")


def cmd_sample(args):
    inst = _load_cb(args.instance)
    if isinstance(inst, MDPInstance):
        data = sample_mdp_dataset(inst, args.n, args.seed)
        path = Path(args.output) if args.output else _out(args, f"data-n{args.n}-s{args.seed}.jsonl")
        write_mdp_dataset(data, path)
    else:
        data = sample_cb_dataset(inst, args.n, args.seed)
        path = Path(args.output) if args.output else _out(args, f"data-n{args.n}-s{args.seed}.jsonl")
        write_cb_dataset(data, path)
    print(f"wrote {path}")


def _read_data(inst, path):
    if isinstance(inst, MDPInstance):
        return read_mdp_dataset(path, inst)
    return read_cb_dataset(path, inst)


def cmd_fit(args):
    inst = _load_cb(args.instance)
    data = _read_data(inst, args.data)
    opts = FitOptions(tol=args.tol, max_iters=args.max_iters, ridge=args.ridge, k_const=args.k_const, delta=args.delta)
    fit = fit_mle(data, inst.features, args.rank or inst.rank, args.bound or inst.param_bound, opts)
    path = Path(args.output) if args.output else _out(args, "fit.json")
    fit.save(path)
    print(f"wrote {path}")
    print(f"n={fit.n}  gamma={fit.gamma:.6g}  iterations={len(fit.loss_trace) - 1}  "
          f"final loss={fit.loss_trace[-1][1]:.10g}  converged={fit.converged}")
    if not fit.converged:
        raise ConvergenceFailure(f"fit stopped after {opts.max_iters} iterations (grad norm {fit.grad_norm:.3g})")


def cmd_solve(args):
    inst = _load_cb(args.instance)
    fit = RewardFit.load(args.fit)
    k = args.gamma_k if args.gamma_k is not None else args.k_const
    fit = fit.with_gamma(confidence_radius(fit.delta if args.delta is None else args.delta, fit.n or 1,
                                           fit.num_parties, fit.feature_dim, fit.rank, k))
    opts = SolveOptions(inner_tol=args.tol, ridge=args.ridge, start_seed=args.seed)
    if isinstance(inst, MDPInstance):
        sol = mdp_values_and_solve(inst, fit, args.welfare, args.mode, opts)
    else:
        sol = solve_policy(fit, inst.features, inst.initial_dist, args.welfare, args.mode, opts,
                           true_params=inst.party_params)
    path = Path(args.output) if args.output else _out(args, "solution.json")
    sol.save(path)
    print(f"wrote {path}")
    print(_table([[s, int(a)] for s, a in enumerate(sol.policy)], ["state", "action"]))
    rows = [["pessimistic value", sol.pessimistic_value], ["true value", sol.true_value],
            ["optimal true value", sol.optimal_true_value], ["sub-optimality", sol.suboptimality]]
    print(_table(rows, ["quantity", sol.kind]))
    if not sol.diagnostics.get("inner", {}).get("certified", True):
        raise ConvergenceFailure("inner minimisation residual above tolerance")


def cmd_von_neumann(args):
    inst = _load_cb(args.instance)
    if isinstance(inst, MDPInstance):
        raise ValueError("von-neumann expects a contextual-bandit instance")
    data = read_cb_dataset(args.data, inst)
    tables = build_tables(data, inst.num_states, inst.num_actions, args.delta, truth_tables(inst))
    sol = von_neumann_winner(tables, tol=args.tol, pessimistic=not args.no_bonus)
    path = Path(args.output) if args.output else _out(args, "winner.json")
    sol.save(path)
    print(f"wrote {path}")
    print(_table([[s] + [float(x) for x in sol.p[s]] for s in range(sol.p.shape[0])],
                 ["state"] + [f"p(a{a})" for a in range(sol.p.shape[1])]))


# -- audits ------------------------------------------------------------------


def _policy(text, S) -> np.ndarray:
    pol = np.asarray(_ints(text), dtype=int)
    if pol.shape != (S,):
        raise ValueError(f"policy must list one action for each of the {S} states")
    return pol


def _verdict_rows(verdicts):
    return [[v.state, "pass" if v.passed else "FAIL", v.tightest_tau,
             "" if v.witness is None else json.dumps(v.witness)] for v in verdicts]


def cmd_audit(args):
    inst = _load_cb(args.instance)
    if isinstance(inst, MDPInstance):
        inst = inst.embedded_cb()
    if args.audit in ("pareto", "pigou"):
        if args.policy is None and args.solution is None:
            raise ValueError("give --policy or --solution")
        pol = (PolicySolution.from_json(json.loads(Path(args.solution).read_text())).policy if args.solution
               else _policy(args.policy, inst.num_states))
        fn = audit_pareto if args.audit == "pareto" else audit_pigou_dalton
        verdicts = fn(inst, pol, args.tau)
        doc = [{"state": v.state, "passed": v.passed, "tightest_tau": v.tightest_tau, "witness": v.witness}
               for v in verdicts]
        print(_table(_verdict_rows(verdicts), ["state", "verdict", "tightest tau", "witness"]))
    elif args.audit == "expost":
        if args.winner is None:
            raise ValueError("give --winner")
        sol = WinnerSolution.from_json(json.loads(Path(args.winner).read_text()))
        Np, _ = truth_tables(inst)
        verdicts = audit_expost(sol, Np, args.tau)
        doc = [asdict(v) for v in verdicts]
        print(_table([[v.state, "pass" if v.passed else "FAIL", v.max_dominated_mass,
                       "yes" if v.in_scope else "no"] for v in verdicts],
                     ["state", "verdict", "dominated mass", "in scope"]))
    else:
        st = diversity_stats(inst, args.mc_samples, args.seed)
        doc = {"nu": st.nu, "kappa": st.kappa, "eig_min": st.eig_min, "eig_max": st.eig_max,
               "sigma_star": st.sigma_star.tolist()}
        print(_table([["nu", st.nu], ["kappa", st.kappa], ["eig_min", st.eig_min], ["eig_max", st.eig_max]],
                     ["statistic", "value"]))
    _write_json(_out(args, f"audit-{args.audit}.json"), harness._plain(doc))
    return EXIT_OK


# -- experiments and fixtures ------------------------------------------------


def cmd_experiment(args):
    seeds = _ints(args.seeds) if args.seeds else None
    grid = _ints(args.n_grid) if args.n_grid else None
    jobs, out = args.jobs, args.out
    kinds = [k for k in (args.kinds or "").split(",") if k]
    name = args.experiment
    if name == "separation":
        t = harness.run_separation_experiment(args.epsilon, grid or [10**4], seeds if seeds is not None else range(20),
                                              kinds or ("nash", "utilitarian"), args.k_const, args.delta, jobs, out)
    elif name == "subopt-scaling":
        t = harness.run_suboptimality_scaling(args.instance or "reference",
                                              kinds or ("nash", "utilitarian", "leximin"),
                                              grid or (250, 500, 1000, 2000, 4000, 8000),
                                              seeds if seeds is not None else range(20), args.k_const, args.delta,
                                              jobs, out)
    elif name in ("coverage", "calibrate-k"):
        K_grid = _floats(args.k_grid) if args.k_grid else harness.DEFAULT_K_GRID
        t = harness.run_coverage_study(args.instance or "reference", args.delta, K_grid,
                                       seeds if seeds is not None else range(200), (grid or [1000])[0], jobs, out)
        if name == "calibrate-k":
            k, c = t.summary["calibrated_k"], t.summary["calibrated_coverage"]
            print("no K on the grid reaches 1 - delta" if k is None else f"calibrated K = {k} (coverage {c:.3f})")
    elif name == "vn-scaling":
        t = harness.run_vn_scaling(args.instance or "transitive", args.delta,
                                   grid or (500, 1000, 2000, 4000, 8000, 16000, 32000),
                                   seeds if seeds is not None else range(20), jobs, out)
    else:
        raise ValueError(f"unknown experiment {name!r}")
    print(json.dumps(harness._plain(t.summary), indent=1))
    if out is None:
        print("(no --out given: results were not written)")


def cmd_fixture(args):
    name = args.fixture
    if name == "intro":
        doc = build_intro_example(args.epsilon).to_json()
    elif name == "lower-bound":
        S = args.rank // 3
        tau = np.asarray(_ints(args.tau_signs), dtype=int) if args.tau_signs else np.ones(S, dtype=int)
        doc = build_lower_bound_instance(args.rank, args.C, args.n, tau).to_json()
    elif name == "prop-d1":
        doc = build_prop_d1_instance(args.C).to_json()
    elif name == "prop-d2":
        prof = build_prop_d2_profile(args.parties)
        doc = {"schema": "prop-d2/v1", "N_party": prof.N_party.tolist(), "p": prof.p.tolist(),
               "bound": prof.bound, "target": -(args.parties - 1) / args.parties}
        print(f"certified bound {prof.bound:.9g}, target {-(args.parties - 1) / args.parties:.9g}")
    elif name == "rps":
        Np = rps_truth()
        g = solve_matrix_game(Np[0, 0])
        doc = {"schema": "rps/v1", "N": Np[0, 0].tolist(), "p": g.p.tolist(), "value": g.value}
    else:
        raise ValueError(f"unknown fixture {name!r}")
    _write_json(_out(args, f"fixture-{name}.json"), harness._plain(doc))


# -- parser ------------------------------------------------------------------


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand.

    The subcommand copy suppresses its defaults so a flag given before the
    subcommand is not overwritten.
    """
    def d(v):
        return argparse.SUPPRESS if suppress else v

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    g.add_argument("--jobs", type=int, default=d(1), help="worker processes for experiments")
    g.add_argument("--out", default=d(None), help="output directory")
    g.add_argument("--delta", type=float, default=d(0.1), help="failure probability (default 0.1)")
    g.add_argument("--k-const", type=float, default=d(1.0), help="constant K in the confidence radius")
    g.add_argument("--tol", type=float, default=d(None), help="solver tolerance")
    g.add_argument("--max-iters", type=int, default=d(5000), help="MLE iteration cap")
    g.add_argument("--ridge", type=float, default=d(1e-8), help="ridge for singular covariances")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="mprlhf", parents=[_global_flags(suppress=False)],
                                description="Multi-party offline preference learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-instance", parents=[common], help="generate an instance file")
    g.add_argument("--family", choices=["random", "reference"], default="random")
    g.add_argument("--states", type=int, default=3)
    g.add_argument("--actions", type=int, default=4)
    g.add_argument("--dim", type=int, default=8)
    g.add_argument("--rank", type=int, default=2)
    g.add_argument("--parties", type=int, default=4)
    g.add_argument("--horizon", type=int, default=1, help="> 1 makes a tabular MDP")
    g.add_argument("--param-scale", type=float, default=1.0)
    g.add_argument("--output")
    g.set_defaults(func=cmd_gen_instance)

    s = sub.add_parser("sample", parents=[common], help="sample a comparison dataset")
    s.add_argument("--instance", required=True)
    s.add_argument("--n", type=int, required=True, help="comparisons per party")
    s.add_argument("--output")
    s.set_defaults(func=cmd_sample)

    f = sub.add_parser("fit", parents=[common], help="shared-representation MLE")
    f.add_argument("--instance", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--rank", type=int, default=None)
    f.add_argument("--bound", type=float, default=None)
    f.add_argument("--output")
    f.set_defaults(func=cmd_fit)

    v = sub.add_parser("solve", parents=[common], help="pessimistic policy optimisation")
    v.add_argument("--instance", required=True)
    v.add_argument("--fit", required=True)
    v.add_argument("--welfare", choices=["nash", "util", "utilitarian", "leximin"], default="nash")
    v.add_argument("--mode", choices=["exact", "alt"], default="exact")
    v.add_argument("--gamma-k", type=float, default=None, help="K for the radius (defaults to --k-const)")
    v.add_argument("--output")
    v.set_defaults(func=cmd_solve)

    w = sub.add_parser("von-neumann", parents=[common], help="pessimistic von Neumann winner")
    w.add_argument("--instance", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--no-bonus", action="store_true", help="solve the plug-in game without the bonus")
    w.add_argument("--output")
    w.set_defaults(func=cmd_von_neumann)

    a = sub.add_parser("audit", parents=[common], help="efficiency and fairness audits")
    a.add_argument("audit", choices=["pareto", "pigou", "expost", "assumptions"])
    a.add_argument("--instance", required=True)
    a.add_argument("--policy", help="comma-separated action per state")
    a.add_argument("--solution", help="policy-solution JSON to audit")
    a.add_argument("--winner", help="vn-winner JSON (expost)")
    a.add_argument("--tau", type=float, default=0.0)
    a.add_argument("--mc-samples", type=int, default=None, help="Monte-Carlo covariance (assumptions)")
    a.set_defaults(func=cmd_audit)

    e = sub.add_parser("experiment", parents=[common], help="scaling, coverage and separation studies")
    e.add_argument("experiment", choices=["separation", "subopt-scaling", "coverage", "vn-scaling", "calibrate-k"])
    e.add_argument("--instance", help="fixture name (reference, transitive, intro:EPS, ...) or instance file")
    e.add_argument("--n-grid", help="comma-separated sample sizes")
    e.add_argument("--seeds", help="comma-separated seeds or a:b range")
    e.add_argument("--kinds", help="comma-separated welfare kinds")
    e.add_argument("--k-grid", help="comma-separated K values (coverage)")
    e.add_argument("--epsilon", type=float, default=0.1, help="separation example epsilon")
    e.set_defaults(func=cmd_experiment)

    x = sub.add_parser("fixture", parents=[common], help="write a named fixture")
    x.add_argument("fixture", choices=["intro", "lower-bound", "prop-d1", "prop-d2", "rps"])
    x.add_argument("--epsilon", type=float, default=0.1)
    x.add_argument("--rank", type=int, default=9)
    x.add_argument("--C", type=float, default=2.0)
    x.add_argument("--n", type=int, default=1000)
    x.add_argument("--tau-signs", help="comma-separated +-1 per state (lower-bound)")
    x.add_argument("--parties", type=int, default=3)
    x.set_defaults(func=cmd_fixture)
    return p


_DEFAULT_TOL = {"fit": 1e-9, "solve": 1e-7, "von-neumann": 1e-9}


def _check_globals(args) -> str | None:
    if not 0.0 < args.delta < 1.0:
        return "--delta must lie in (0, 1)"
    if args.jobs < 1:
        return "--jobs must be at least 1"
    if args.k_const < 0:
        return "--k-const must be nonnegative"
    if args.max_iters < 1:
        return "--max-iters must be at least 1"
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with status 2
        return int(e.code or 0)
    bad = _check_globals(args)
    if bad:
        print(f"error: {bad}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.tol is None:
        args.tol = _DEFAULT_TOL.get(args.command, 1e-9)
    try:
        rc = args.func(args)
    except (ConvergenceFailure, GameSolverError, FitError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return rc or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

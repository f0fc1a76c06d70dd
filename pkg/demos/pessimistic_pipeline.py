"""Sample, fit and solve on the reference instance for each welfare kind.

    python3 demos/pessimistic_pipeline.py [--n 2000] [--seed 0]
"""
import argparse

from multiparty_rlhf.instances import build_reference_instance
from multiparty_rlhf.reward_learning import estimation_errors, fit_mle
from multiparty_rlhf.sampling import sample_cb_dataset
from multiparty_rlhf.welfare import audit_pareto, solve_policy


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    inst = build_reference_instance()
    data = sample_cb_dataset(inst, args.n, args.seed)
    fit = fit_mle(data, inst.features, inst.rank, inst.param_bound)
    print(f"n={args.n}  gamma={fit.gamma:.4f}  max Sigma-error {estimation_errors(fit, inst.party_params).max():.4f}")
    for kind in ("utilitarian", "nash", "leximin"):
        sol = solve_policy(fit, inst.features, inst.initial_dist, kind, true_params=inst.party_params)
        pareto = all(v.passed for v in audit_pareto(inst, sol.policy, 0.0))
        print(f"{kind:12s} policy {sol.policy.tolist()}  pessimistic {sol.pessimistic_value:.4f}  "
              f"true {sol.true_value:.4f}  subopt {sol.suboptimality:.4f}  pareto(tau=0) {pareto}")


if __name__ == "__main__":
    main()

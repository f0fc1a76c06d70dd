"""Reward-free pessimistic von Neumann winner as the sample size grows.

    python3 demos/von_neumann_winner.py
"""
from multiparty_rlhf.harness import build_transitive_instance
from multiparty_rlhf.instances import build_intro_example
from multiparty_rlhf.reward_free import (
    approx_winner_gap, build_tables, exact_tables, rps_truth, truth_tables, von_neumann_winner,
)
from multiparty_rlhf.sampling import sample_cb_dataset


def main():
    rps = von_neumann_winner(exact_tables(rps_truth()))
    print("rock-paper-scissors winner", rps.p[0].round(6).tolist())

    inst = build_transitive_instance()
    Np, N = truth_tables(inst)
    for n in (500, 2000, 8000, 32000):
        data = sample_cb_dataset(inst, n, 0)
        sol = von_neumann_winner(build_tables(data, 1, inst.num_actions, 0.1, inst))
        gap = approx_winner_gap(sol, N)[1]
        print(f"transitive n={n:6d}  p={sol.p[0].round(3).tolist()}  gap {gap:+.4f}")

    intro = build_intro_example(0.1)
    sol = von_neumann_winner(build_tables(sample_cb_dataset(intro, 100_000, 0), 1, 3, 0.1, intro))
    print("two-party example, n=100000: mass on (A, B, C)", sol.p[0].round(4).tolist())


if __name__ == "__main__":
    main()

"""Pooled single reward versus per-party rewards on the two-party example.

    python3 demos/separation.py [--eps 0.1] [--n 10000] [--seeds 5]
"""
import argparse

import numpy as np

from multiparty_rlhf.harness import run_separation_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--eps", type=float, default=0.1)
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    t = run_separation_experiment(args.eps, [args.n], range(args.seeds))
    names = "ABC"
    for kind in ("pooled", "nash", "utilitarian"):
        acts = t.values("action", kind)[0].astype(int)
        avg = t.values("average_reward", kind)[0]
        print(f"{kind:12s} actions {''.join(names[a] for a in acts)}  mean average reward {avg.mean():.3f}")
    est = np.array([t.values(f"estimated_reward_{a}", "pooled")[0] for a in range(3)])
    print("pooled centred rewards per seed (A, B, C):")
    print(np.round(est.T, 3))


if __name__ == "__main__":
    main()

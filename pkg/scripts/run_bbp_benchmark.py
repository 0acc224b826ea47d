#!/usr/bin/env python3
"""Single-block benchmark: sweep the spike strength through the weak-recovery
threshold at lambda = 1 and print AMP MSE next to the SE prediction."""

import argparse

import numpy as np

from mvamp import amp, model, se, stability


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--rho", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    prof = model.BlockPriorProfile((model.ScalarPrior.rademacher(),), (1.0,))
    m = se.OverlapModel(prof)
    print(f"{'lambda':>7} {'nu':>7} {'verdict':>9} {'SE mse':>8} {'AMP mse':>8}")
    for lam in [0.6, 0.8, 0.95, 1.05, 1.2, 1.5, 2.0, 3.0]:
        cs = model.CouplingSet.heteroskedastic(np.array([[lam]]))
        op = se.OperatorT(cs)
        verdict = stability.classify_fixed_point(m, op, np.zeros(1))
        traj = se.run_se(m, op, np.array([[args.rho]]), max_iter=2000)
        mses = []
        for t in range(args.trials):
            seed = int(np.random.SeedSequence([args.seed, t]).generate_state(1)[0])
            X = model.sample_signal(prof, args.n, seed)
            inst = model.synthesize_symmetric(X, cs, seed, profile=prof)
            tr = amp.run_symmetric(
                inst, amp.AMPConfig(max_iter=30, rho=args.rho, seed=seed, early_stop=True)
            )
            mses.append(tr.mse[-1][0])
        print(
            f"{lam:7.2f} {verdict.nu:7.3f} {verdict.classification:>9} "
            f"{1 - traj.q_star[0]:8.4f} {np.mean(mses):8.4f}"
        )


if __name__ == "__main__":
    main()

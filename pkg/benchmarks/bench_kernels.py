"""Time the numba and numpy versions of the hot kernels side by side.

    python3 benchmarks/bench_kernels.py [--repeat N] [--episodes N]

Each kernel runs once untimed per backend (numba compilation or cache load),
then ``--repeat`` timed runs; the median is reported.
"""
import argparse
import statistics
import time

import numpy as np

from cma_planner.mdp import SolverConfig, bellman_backup, value_iteration
from cma_planner.model import default_model
from cma_planner.pbvi import PBVIConfig, default_belief_set, pbvi_solve, point_backup
from cma_planner.pomdp import build_observation_model
from cma_planner.sim import PolicyAssets, SimConfig, run_batch

BACKENDS = ("numba", "numpy")


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--episodes", type=int, default=2000)
    args = ap.parse_args(argv)

    model = default_model()
    vf = value_iteration(model)
    om = build_observation_model(0.8)
    cfg = PBVIConfig(num_expansions=2, backups_per_expansion=2, expansion_budget=20)
    alphas = pbvi_solve(model, om, cfg, vf=vf)
    beliefs = default_belief_set(model, om, PBVIConfig(), np.random.default_rng(0), vf)
    v0 = np.random.default_rng(0).normal(size=model.p.shape[1])

    cases = {
        "bellman backup (1 sweep)": lambda b: bellman_backup(v0, model, SolverConfig(), backend=b),
        "value iteration (to 1e-9)": lambda b: value_iteration(model, backend=b),
        f"point backup ({len(beliefs)} beliefs)": lambda b: point_backup(alphas, beliefs, model, om, 0.99, backend=b),
    }
    for policy in ("true_mdp", "map_mdp", "pomdp"):
        sim = SimConfig(policy=policy, p_obs=0.8, bh_cohort="P", n_episodes=args.episodes)
        assets = PolicyAssets(vf, alphas)
        cases[f"simulate {policy} ({args.episodes} episodes)"] = (
            lambda b, sim=sim, assets=assets: run_batch(sim, model, assets, om, backend=b)
        )

    print(f"{'kernel':<40} {'numba [s]':>11} {'numpy [s]':>11} {'speedup':>8}")
    for name, fn in cases.items():
        t = {b: median_time(lambda: fn(b), args.repeat) for b in BACKENDS}
        print(f"{name:<40} {t['numba']:>11.5f} {t['numpy']:>11.5f} {t['numpy'] / t['numba']:>7.1f}x")


if __name__ == "__main__":
    main()

"""Run the learning loop for several seeds and write per-seed learning curves.

    python scripts/learning_curve.py --seeds 0 1 2 --episodes 50 --out runs/curve
    python scripts/learning_curve.py --variant one-hot --cost-mode relative --out runs/rel

Each seed writes ``<out>/seed<k>/metrics.csv`` and ``learning_curve.csv``; a
summary with the median test ratio per episode goes to ``<out>/summary.csv``.
"""
import argparse
import csv
import json
import time
from pathlib import Path

import numpy as np

from neolite.driver import RunConfig, benchmark_config, run_experiment, write_learning_curve, write_metrics_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--variant", default="histogram")
    ap.add_argument("--cost-mode", default="absolute")
    ap.add_argument("--config", help="JSON RunConfig overriding the benchmark defaults")
    ap.add_argument("--out", default="runs/curve")
    args = ap.parse_args()
    out = Path(args.out)
    curves = []
    for seed in args.seeds:
        cfg = benchmark_config(seed, args.variant, args.cost_mode)
        if args.config:
            d = cfg.to_json()
            d.update(json.loads(Path(args.config).read_text()))
            cfg = RunConfig.from_json(d)
        t0 = time.time()

        def report(m, seed=seed, t0=t0):
            s = m.summary()
            print(f"seed {seed} episode {s['episode']:3d} train {s['train_mean_ratio']:.3f} "
                  f"test {s['test_mean_ratio']:.3f} regressions {s['test_regressions']} "
                  f"({time.time() - t0:.0f}s)", flush=True)

        state = run_experiment(cfg, args.episodes, on_episode=report)
        d = out / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(d / "metrics.csv", state.history)
        write_learning_curve(d / "learning_curve.csv", state.history)
        curves.append([m.mean_ratio("test") for m in state.history])
    med = np.median(np.array(curves), axis=0)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "median_test_mean_ratio"] + [f"seed{s}" for s in args.seeds])
        for ep, row in enumerate(np.array(curves).T):
            w.writerow([ep, repr(float(med[ep]))] + [repr(float(x)) for x in row])
    print(f"median test ratio at the last episode: {med[-1]:.3f}")


if __name__ == "__main__":
    main()

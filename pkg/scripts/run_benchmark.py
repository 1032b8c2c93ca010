"""Train and evaluate the loss and forward-scheme variants on the toy benchmark.

    python scripts/run_benchmark.py --seeds 0 1 2 --variants joint generative

Results are cached (see fwd2bot.experiments), so re-running only evaluates.
Writes a CSV of per-seed results to --out.
"""

import argparse
import csv
import sys
import time

import numpy as np

from fwd2bot import experiments as ex


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(ex.VARIANTS), choices=list(ex.VARIANTS) + list(ex.MODEL_VARIANTS))
    ap.add_argument("--steps", type=int, default=None, help="fine-tuning steps (default: TrainConfig.steps)")
    ap.add_argument("--out", default="benchmark.csv")
    args = ap.parse_args(argv)

    rows = []
    for seed in args.seeds:
        print(f"uncompressed baseline seed {seed}: {ex.uncompressed_baseline(seed):.4f}", flush=True)
        for v in args.variants:
            t0 = time.perf_counter()
            r = ex.run_variant(v, seed, args.steps)
            rows.append((v, seed, r.qa, r.r_at_1, r.seconds))
            print(f"{v:>16} seed {seed}: QA {r.qa:.4f}  R@1 {r.r_at_1:.4f}  train {r.seconds:.0f}s"
                  f"  (wall {time.perf_counter() - t0:.0f}s)", flush=True)

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "qa", "r_at_1", "train_seconds"])
        w.writerows((v, s, f"{q:.6f}", f"{r:.6f}", f"{t:.1f}") for v, s, q, r, t in rows)

    print("\nmeans over seeds")
    for v in args.variants:
        sel = [r for r in rows if r[0] == v]
        print(f"{v:>16}: QA {np.mean([r[2] for r in sel]):.4f}  R@1 {np.mean([r[3] for r in sel]):.4f}")


if __name__ == "__main__":
    sys.exit(main())

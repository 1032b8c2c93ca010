"""Interpretability probes and architecture ablations on a trained benchmark model.

    python scripts/run_probes.py --seed 0 --outdir probes/
    python scripts/run_probes.py --ablations   # also trains single_lora and bidirectional

Writes CSV tables (and gnuplot .dat siblings) for summary-token masking,
prefix truncation, attention coverage and adapter update norms.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from fwd2bot import experiments as ex
from fwd2bot.probes import (
    adapter_delta_norms, attention_map, chance_accuracy, coverage, mask_importance, truncation_sweep, write_outputs,
)
from fwd2bot.training import TrainConfig


def attention_coverage(model, held, n_scenes):
    """Mean coverage of vision tokens by the compression pass, and of the prefix by generation."""
    recs = held.qa_records()
    comp, gen_c, gen_u = [], [], []
    for r in recs[:n_scenes]:
        comp.append(coverage(attention_map(model, r.scene, "compression")))
        gen_c.append(coverage(attention_map(model, r.scene, "generation", r.question, "compressed")))
        gen_u.append(coverage(attention_map(model, r.scene, "generation", r.question, "uncompressed")))
    return float(np.mean(comp)), float(np.mean(gen_c)), float(np.mean(gen_u))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--outdir", default="probes")
    ap.add_argument("--attention-scenes", type=int, default=32)
    ap.add_argument("--ablations", action="store_true", help="also train and evaluate the adapter and attention variants")
    args = ap.parse_args(argv)
    sys.stdout.reconfigure(line_buffering=True)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)

    run = ex.run_variant("joint", args.seed)
    train_c, held = ex.benchmark_corpus(args.seed)
    records = held.qa_records()[: TrainConfig().eval_questions]
    print(f"joint seed {args.seed}: QA {run.qa:.4f} R@1 {run.r_at_1:.4f}")

    for g in (1, 2, 4):
        rep = mask_importance(run.model, records, g)
        write_outputs(out / f"mask_g{g}.csv", ("group", "drop"), rep.rows(), gnuplot=True)
        print(f"mask group {g}: baseline {rep.baseline:.4f}, drops " + " ".join(f"{d:+.3f}" for d in rep.drops))
    print(f"chance (majority answer per question): {chance_accuracy(train_c.records, records):.4f}")

    sweep = truncation_sweep(run.model, records)
    write_outputs(out / "prefix.csv", ("m", "qa"), sweep, gnuplot=True)
    print("prefix truncation: " + ", ".join(f"m={m} {a:.4f}" for m, a in sweep))

    c, gc, gu = attention_coverage(run.model, held, args.attention_scenes)
    write_outputs(out / "coverage.csv", ("probe", "coverage"),
                  [("compression", c), ("generation_compressed", gc), ("generation_uncompressed", gu)])
    print(f"coverage: compression {c:.3f}, generation over H^c {gc:.3f}, generation over H_v {gu:.3f}")

    norms = adapter_delta_norms(run.model)
    write_outputs(out / "norms.csv", ("set", "layer", "target", "norm"), norms)
    for s in ("compression", "generation"):
        print(f"adapter norm sum {s}: {sum(n for n_s, _, _, n in norms if n_s == s):.4f}")

    if args.ablations:
        rows = [("stage_lora_causal", run.qa, run.r_at_1)]
        for v in ex.MODEL_VARIANTS:
            r = ex.run_variant(v, args.seed)
            rows.append((v, r.qa, r.r_at_1))
            print(f"{v}: QA {r.qa:.4f} R@1 {r.r_at_1:.4f}")
        write_outputs(out / "ablations.csv", ("variant", "qa", "r_at_1"), rows)


if __name__ == "__main__":
    sys.exit(main())

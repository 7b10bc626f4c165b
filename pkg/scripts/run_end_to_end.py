#!/usr/bin/env python3
"""Drive the whole pipeline on synthetic data and print a comparison table.

Generates a labeled clip set, extracts shared feature streams once, trains
one classifier per requested modality, evaluates each on the held-out test
split, and merges the metric rows. Everything is seeded; rerunning with the
same arguments reproduces the artifacts bit-for-bit.

    python scripts/run_end_to_end.py --out runs/e2e
    python scripts/run_end_to_end.py --per-class 20 --epochs 5   # quick smoke
"""
import argparse
import sys
import time
from pathlib import Path

from crashseq.cli import main as crashseq


def run(argv):
    code = crashseq([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/e2e", help="working directory")
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=7, help="dataset seed")
    ap.add_argument("--feature-seed", type=int, default=0)
    ap.add_argument("--modalities", default="flow,rgb_concat_flow,rgb",
                    help="comma-separated subset of rgb,flow,overlay,rgb_concat_flow")
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--num-layers", type=int, default=2)
    ap.add_argument("--num-heads", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    root = Path(args.out)
    data, feats = root / "data", root / "feats"
    manifest = data / "manifest.jsonl"
    kinds = [k.strip() for k in args.modalities.split(",") if k.strip()]

    t0 = time.perf_counter()
    if manifest.exists():
        print(f"reusing dataset at {manifest}", file=sys.stderr)
    else:
        run(["synth", "--out", data, "--per-class", args.per_class,
             "--seed", args.seed, "--threads", args.threads])
    print(f"[{time.perf_counter() - t0:6.1f}s] dataset ready", file=sys.stderr)

    # one extraction pass covers rgb+flow; overlay gets its own stream
    stream_modality = ("rgb_concat_flow"
                       if set(kinds) & {"rgb", "flow", "rgb_concat_flow"}
                       else "overlay")
    run(["features", "--manifest", manifest, "--modality", stream_modality,
         "--out", feats, "--seed", args.feature_seed, "--threads", args.threads])
    if "overlay" in kinds and stream_modality != "overlay":
        run(["features", "--manifest", manifest, "--modality", "overlay",
             "--out", feats, "--seed", args.feature_seed, "--threads", args.threads])
    print(f"[{time.perf_counter() - t0:6.1f}s] features ready", file=sys.stderr)

    csvs = []
    for kind in kinds:
        model_dir = root / f"model_{kind}"
        run(["train", "--manifest", manifest, "--modality", kind,
             "--features-dir", feats, "--out", model_dir,
             "--d-model", args.d_model, "--num-layers", args.num_layers,
             "--num-heads", args.num_heads, "--epochs", args.epochs,
             "--feature-seed", args.feature_seed, "--threads", args.threads])
        out_csv = root / f"metrics_{kind}.csv"
        run(["eval", "--checkpoint", model_dir / "best", "--manifest", manifest,
             "--split", "test", "--features-dir", feats, "--out", out_csv,
             "--threads", args.threads])
        csvs.append(out_csv)
        print(f"[{time.perf_counter() - t0:6.1f}s] {kind} done", file=sys.stderr)

    print()
    run(["report", "--in", *csvs])
    print(f"\ntotal {time.perf_counter() - t0:.1f}s; artifacts in {root}/",
          file=sys.stderr)


if __name__ == "__main__":
    main()

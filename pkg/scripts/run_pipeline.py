#!/usr/bin/env python3
"""Run the full pipeline on the synthetic corpus:
synth -> train-mle -> train-scst -> decode -> score -> report.

Usage: python3 scripts/run_pipeline.py [workdir] [--seed N] [--n-clips N]
"""
import argparse
import json
import os
import sys

from capkit.cli import main as capkit


def sh(args):
    print("+ capkit " + " ".join(args), file=sys.stderr)
    status = capkit(args)
    if status != 0:
        sys.exit(status)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("workdir", nargs="?", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n-clips", type=int, default=500)
    args = ap.parse_args()

    w = args.workdir
    os.makedirs(w, exist_ok=True)
    data = os.path.join(w, "data")
    mle = os.path.join(w, "mle.ckpt")
    scst = os.path.join(w, "scst.ckpt")

    sh(["synth", "--out", data, "--n-clips", str(args.n_clips), "--seed", str(args.seed)])
    sh(["train-mle", "--data", data, "--out", mle, "--epochs", "30", "--batch", "8",
        "--seed", str(args.seed)])
    sh(["train-scst", "--data", data, "--ckpt", mle, "--out", scst, "--epochs", "10",
        "--batch", "8", "--seed", str(args.seed)])

    reports = []
    for label, ckpt in (("MLE", mle), ("SCST", scst)):
        hyps = os.path.join(w, f"hyps_{label.lower()}.jsonl")
        rep = os.path.join(w, f"report_{label.lower()}.json")
        sh(["decode", "--data", data, "--ckpt", ckpt, "--out", hyps,
            "--split", "val", "--role", "description"])
        sh(["score", "--hyps", hyps, "--refs", os.path.join(data, "samples.jsonl"),
            "--out", rep])
        reports.append((label, rep))

    sh(["report", *[r for _, r in reports],
        "--labels", *[f"{label}/synth-val" for label, _ in reports]])

    fid_index = os.path.join(data, "feature_index.json")
    sh(["fid", fid_index, fid_index])


if __name__ == "__main__":
    main()

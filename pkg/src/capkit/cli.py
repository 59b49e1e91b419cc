"""Command-line entry point: ingest, synth, train-mle, train-scst, decode,
score, fid, report.

Exit statuses: 0 success, 1 I/O error, 2 validation error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as dmod
from . import harness
from .errors import CapkitError, MalformedReport, NumericFailure
from .metrics import (
    GaussianStats,
    ScoreReport,
    build_idf,
    frechet_distance,
    gaussian_stats,
    score_all,
)
from .scst import decode_greedy, decode_sample, derive_seed, scst_train
from .seqmodel import (
    ModelConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_mle,
)
from .textproc import Caption, ROLES, Vocab, build_vocab, decode_ids

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

REPORT_COLUMNS = ("B1", "B2", "B3", "B4", "C", "M", "R")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _echo_config(args: argparse.Namespace) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    _log("config: " + json.dumps(cfg, default=str, sort_keys=True))


def _roles(arg: str):
    return list(ROLES) if arg == "both" else [arg]


# ---------------------------------------------------------------------------
# Dataset directory helpers

def _load_corpus_dir(path: str):
    samples = dmod.read_samples_jsonl(os.path.join(path, "samples.jsonl"))
    with open(os.path.join(path, "feature_index.json"), encoding="utf-8") as f:
        index = json.load(f)
    with open(os.path.join(path, "splits.json"), encoding="utf-8") as f:
        splits = json.load(f)
    clips = {cid: dmod.read_features(os.path.join(path, rel)) for cid, rel in index.items()}
    return samples, clips, splits


def _split_samples(samples, splits, split: str):
    wanted = set(splits[split])
    return [s for s in samples if s.id in wanted]


# ---------------------------------------------------------------------------
# Commands

def cmd_ingest(args) -> int:
    raws = dmod.read_annotations_jsonl(args.input)
    samples = dmod.restructure(raws)
    dmod.write_samples_jsonl(samples, args.out)
    empty = sum(1 for s in samples if not s.avoidance.tokens or not s.description.tokens)
    if empty:
        _log(f"warning: {empty} sample(s) with empty captions")
    _log(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = dmod.SynthConfig(
        n_clips=args.n_clips, noise_std=args.noise_std, seed=args.seed
    )
    corpus = dmod.synth_corpus(cfg)
    os.makedirs(os.path.join(args.out, "features"), exist_ok=True)
    index = {}
    for cid, clip in corpus.clips.items():
        rel = f"features/{cid}.avdf"
        dmod.write_features(clip, os.path.join(args.out, rel))
        index[cid] = rel
    dmod.write_samples_jsonl(corpus.samples, os.path.join(args.out, "samples.jsonl"))
    with open(os.path.join(args.out, "feature_index.json"), "w", encoding="utf-8") as f:
        json.dump(index, f, sort_keys=True)
    with open(os.path.join(args.out, "splits.json"), "w", encoding="utf-8") as f:
        json.dump(corpus.split, f)
    _log(f"synthesized {cfg.n_clips} clips into {args.out}")
    return EXIT_OK


def cmd_train_mle(args) -> int:
    samples, clips, splits = _load_corpus_dir(args.data)
    train = _split_samples(samples, splits, "train")
    roles = _roles(args.roles)
    caps = [harness.caption_for(s, r) for s in train for r in roles]
    vocab = build_vocab(caps, min_count=1)
    feature_dim = next(iter(clips.values())).D
    config = ModelConfig(
        vocab_size=len(vocab),
        feature_dim=feature_dim,
        d_model=args.d_model,
        n_heads=args.n_heads,
        max_len=args.max_len,
        seed=derive_seed(args.seed, "init", 0),
    )
    params = init_params(config)
    items = harness.mle_items(train, clips, vocab, roles, args.max_len)
    params, curve = train_mle(
        params, items, args.epochs, args.batch, derive_seed(args.seed, "mle", 0), lr=args.lr
    )
    if curve and not np.isfinite(curve).all():
        raise NumericFailure("non-finite MLE loss")
    save_checkpoint(params, args.out, extra={"vocab": list(vocab.tokens)})
    _log("epoch losses: " + " ".join(f"{x:.4f}" for x in curve))
    _log(f"saved checkpoint to {args.out}")
    return EXIT_OK


def _load_model(path: str):
    params, extra = load_checkpoint(path)
    vocab = Vocab(tokens=tuple(extra["vocab"]), min_count=1)
    return params, vocab


def cmd_train_scst(args) -> int:
    samples, clips, splits = _load_corpus_dir(args.data)
    train = _split_samples(samples, splits, "train")
    roles = _roles(args.roles)
    params, vocab = _load_model(args.ckpt)
    refs = [harness.caption_for(s, r).tokens for s in train for r in roles]
    idf = build_idf(refs)
    items = harness.scst_items(train, clips, roles)
    params, history = scst_train(
        params,
        items,
        idf,
        args.epochs,
        args.batch,
        derive_seed(args.seed, "scst", 0),
        vocab,
        lr=args.lr,
        temperature=args.temperature,
    )
    if any(not np.isfinite(h.loss) for h in history):
        raise NumericFailure("non-finite SCST loss")
    save_checkpoint(params, args.out, extra={"vocab": list(vocab.tokens)})
    with open(args.out + ".log.jsonl", "w", encoding="utf-8") as f:
        for h in history:
            f.write(json.dumps(h.to_dict()) + "\n")
    for i, h in enumerate(history):
        _log(
            f"epoch {i}: baseline {h.mean_baseline:.4f} sample {h.mean_sample:.4f} "
            f"reward {h.mean_reward:+.4f} loss {h.loss:+.5f}"
        )
    _log(f"saved checkpoint to {args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    samples, clips, splits = _load_corpus_dir(args.data)
    subset = _split_samples(samples, splits, args.split)
    params, vocab = _load_model(args.ckpt)
    roles = _roles(args.role)
    with open(args.out, "w", encoding="utf-8") as f:
        for s in subset:
            for role in roles:
                feats = harness.role_features(clips[s.id].data, role)
                if args.sample:
                    dec = decode_sample(
                        params,
                        feats,
                        seed=derive_seed(args.seed, f"{s.id}/{role}", 0),
                        temperature=args.temperature,
                    )
                else:
                    dec = decode_greedy(params, feats)
                text = " ".join(decode_ids(vocab, dec.ids))
                f.write(json.dumps({"id": s.id, "role": role, "text": text}) + "\n")
    _log(f"decoded {len(subset)} clips to {args.out}")
    return EXIT_OK


def _read_caption_jsonl(path: str, role_filter=None):
    """Read {"id","role","text"} lines; samples.jsonl-style lines are accepted
    and expanded into one entry per role."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if "text" in d:
                entries = [(d["id"], d["role"], d["text"])]
            else:
                entries = [(d["id"], r, d[r]) for r in ROLES if r in d]
            for cid, role, text in entries:
                if role_filter and role not in role_filter:
                    continue
                out[(cid, role)] = Caption.make(text, role)
    return out


def cmd_score(args) -> int:
    hyps = _read_caption_jsonl(args.hyps)
    refs = _read_caption_jsonl(args.refs)
    keys = [k for k in hyps if k in refs]
    if not keys:
        raise MalformedReport("no (id, role) pairs shared by hypotheses and references")
    keys.sort()
    h = [hyps[k] for k in keys]
    r = [refs[k] for k in keys]
    idf = build_idf([c.tokens for c in refs.values()])
    report = score_all(h, r, idf)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def _load_feature_matrixes(index_path: str):
    base = os.path.dirname(os.path.abspath(index_path))
    with open(index_path, encoding="utf-8") as f:
        index = json.load(f)
    clips = [dmod.read_features(os.path.join(base, rel)) for _, rel in sorted(index.items())]
    frames = np.vstack([c.data for c in clips])
    pooled = np.vstack([c.data.mean(axis=0) for c in clips])
    return frames, pooled


def cmd_fid(args) -> int:
    frames_a, pooled_a = _load_feature_matrixes(args.index_a)
    frames_b, pooled_b = _load_feature_matrixes(args.index_b)
    fid = frechet_distance(gaussian_stats(frames_a), gaussian_stats(frames_b))
    vid = frechet_distance(gaussian_stats(pooled_a), gaussian_stats(pooled_b))
    print(f"FID {fid:.6f}")
    print(f"VID {vid:.6f}")
    return EXIT_OK


def render_report_row(report: ScoreReport) -> list[str]:
    """Fractions print x100, CIDEr-D x10, one decimal each."""
    return [
        f"{report.b1 * 100:.1f}",
        f"{report.b2 * 100:.1f}",
        f"{report.b3 * 100:.1f}",
        f"{report.b4 * 100:.1f}",
        f"{report.cider_d * 10:.1f}",
        f"{report.meteor * 100:.1f}",
        f"{report.rouge_l * 100:.1f}",
    ]


def render_report_table(reports: list[ScoreReport], labels: list[str]) -> str:
    header = ["Framework", "Dataset", *REPORT_COLUMNS]
    rows = [header]
    for rep, label in zip(reports, labels):
        framework, _, dataset = label.partition("/")
        rows.append([framework, dataset, *render_report_row(rep)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in rows
    )


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        try:
            reports.append(ScoreReport.from_dict(d))
        except KeyError as e:
            raise MalformedReport(f"{path}: missing metric field {e}") from e
    labels = args.labels or [os.path.basename(p) for p in args.reports]
    if len(labels) != len(reports):
        raise MalformedReport("label count does not match report count")
    print(render_report_table(reports, labels))
    if args.out:
        payload = [
            {"label": lbl, "values": dict(zip(REPORT_COLUMNS, render_report_row(r)))}
            for lbl, r in zip(labels, reports)
        ]
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capkit", description=__doc__)
    p.add_argument("--config", help="JSON file of flag defaults; flags override")
    sub = p.add_subparsers(dest="command", required=True)
    p._command_parsers = []
    _add_parser = sub.add_parser

    def add_parser(*a, **kw):
        sp = _add_parser(*a, **kw)
        p._command_parsers.append(sp)
        return sp

    sub.add_parser = add_parser

    sp = sub.add_parser("ingest", help="restructure raw annotations into samples")
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("synth", help="generate the synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-clips", type=int, default=500)
    sp.add_argument("--noise-std", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train-mle", help="teacher-forced likelihood training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--max-len", type=int, default=24)
    sp.add_argument("--d-model", type=int, default=64)
    sp.add_argument("--n-heads", type=int, default=2)
    sp.add_argument("--roles", choices=["description", "avoidance", "both"], default="both")
    sp.set_defaults(func=cmd_train_mle)

    sp = sub.add_parser("train-scst", help="self-critical sequence training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--roles", choices=["description", "avoidance", "both"], default="both")
    sp.set_defaults(func=cmd_train_scst)

    sp = sub.add_parser("decode", help="generate captions for a split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"], default="val")
    sp.add_argument("--role", choices=["description", "avoidance", "both"], default="both")
    sp.add_argument("--sample", action="store_true")
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("score", help="score hypotheses against references")
    sp.add_argument("--hyps", required=True)
    sp.add_argument("--refs", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("fid", help="Frechet distance between two feature sets")
    sp.add_argument("index_a")
    sp.add_argument("index_b")
    sp.set_defaults(func=cmd_fid)

    sp = sub.add_parser("report", help="render score reports as a table")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--labels", nargs="*", help='row labels as "Framework/Dataset"')
    sp.add_argument("--out", help="also write the table rows as JSON")
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, _ = parser.parse_known_args(argv)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                file_defaults = json.load(f)
        except OSError as e:
            _log(f"I/O error: {e}")
            return EXIT_IO
        parser.set_defaults(**file_defaults)
        for sp in parser._command_parsers:
            sp.set_defaults(**file_defaults)
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        return args.func(args)
    except NumericFailure as e:
        _log(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except (OSError, FileNotFoundError) as e:
        _log(f"I/O error: {e}")
        return EXIT_IO
    except (CapkitError, ValueError, KeyError, json.JSONDecodeError) as e:
        _log(f"validation error: {type(e).__name__}: {e}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end.

Subcommands cover the full pipeline: synth (toy corpus), featurize
(log-mel cache), train, eval, predict (single file), and gradcheck.
Every subcommand accepts ``--config run.ini`` (default taken from the
SERKIT_CONFIG environment variable) plus repeatable
``--set section.key=value`` overrides.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable audio, missing cache, bad checkpoint, empty split),
3 numerical failure (non-finite loss, gradient check failure).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import metrics as me
from . import model as mo
from . import train as tr
from .audio import load_wav
from .config import RunConfig, load_config
from .errors import (
    BadCheckpoint,
    ConfigError,
    ConstantFeatures,
    ConstantSignal,
    CorruptCache,
    DegenerateFilter,
    EmptyMatrix,
    EmptySplit,
    InsufficientClassSamples,
    LabelOutOfRange,
    LengthMismatch,
    MalformedWav,
    NonFiniteLoss,
    ShapeMismatch,
    SignalTooShort,
    UnsupportedEncoding,
)
from .features import FeatureMap, featurize_waveform, write_features
from .synth import generate_corpus

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

_DATA_ERRORS = (
    MalformedWav, UnsupportedEncoding, ConstantSignal, SignalTooShort,
    DegenerateFilter, ConstantFeatures, CorruptCache, ShapeMismatch,
    BadCheckpoint, EmptySplit, InsufficientClassSamples, LabelOutOfRange,
    LengthMismatch, EmptyMatrix, FileNotFoundError, OSError,
)


def _dsp_fingerprint(cfg: RunConfig) -> bytes:
    """Stable digest of every setting that changes feature values."""
    d = cfg.dsp
    parts = (
        cfg.sample_rate, cfg.trim_db,
        d.framing.frame_ms, d.framing.hop_ms, d.framing.window,
        d.mel.n_fft, d.mel.n_mels, d.mel.fmin, d.mel.fmax, d.mel.log_floor,
        d.target_frames,
    )
    return "|".join(repr(p) for p in parts).encode()


def _featurize_file(path, cfg: RunConfig) -> FeatureMap:
    w = load_wav(path)
    return featurize_waveform(w, cfg.dsp, sample_rate=cfg.sample_rate,
                              trim_db=cfg.trim_db)


def cmd_synth(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out if args.out else cfg.paths.data_dir)
    rows = generate_corpus(out_dir, n_per_class=args.n_per_class,
                           seed=args.seed)
    print(f"wrote {len(rows)} wav files and manifest.csv to {out_dir}")
    return EXIT_OK


def cmd_featurize(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest if args.manifest else cfg.paths.manifest)
    cache_dir = Path(args.cache_dir if args.cache_dir else cfg.paths.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    rows = tr.read_manifest(manifest)
    fingerprint = _dsp_fingerprint(cfg)

    def compute(row):
        """Returns (row, cache_name, features | None, error | None).
        features is None when the cache file already exists."""
        try:
            raw = Path(row.path).read_bytes()
            name = hashlib.sha256(raw + fingerprint).hexdigest()[:24] + ".feat"
            if (cache_dir / name).exists():
                return row, name, None, None
            return row, name, _featurize_file(row.path, cfg), None
        except _DATA_ERRORS as exc:
            return row, None, None, exc

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(compute, rows))

    index: dict[str, str] = {}
    written = skipped = 0
    failures = []
    for row, name, feat, err in results:
        if err is not None:
            failures.append((row.path, err))
            continue
        target = cache_dir / name
        if feat is not None and not target.exists():
            write_features(target, feat)
            written += 1
        else:
            skipped += 1
        index[row.path] = name
    tr.write_feature_index(index, cache_dir)
    print(f"featurized {written} files, {skipped} already cached, "
          f"{len(failures)} failed; index at {cache_dir / tr.FEATURE_INDEX_NAME}")
    for path, err in failures:
        print(f"error: {path}: {err}", file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest if args.manifest else cfg.paths.manifest)
    cache_dir = Path(args.cache_dir if args.cache_dir else cfg.paths.cache_dir)
    run_dir = Path(args.out if args.out else cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    rows = tr.read_manifest(manifest)
    n_assigned = sum(1 for r in rows if r.split is not None)
    if n_assigned == 0:
        rows = tr.make_splits(rows, ratios=cfg.split.ratios,
                              seed=cfg.split.seed)
        tr.write_manifest(rows, run_dir / "split_manifest.csv")
    elif n_assigned != len(rows):
        raise ConfigError(
            f"{manifest}: {len(rows) - n_assigned} rows lack a split label; "
            "assign all rows or none")
    dataset = tr.load_dataset(rows, cache_dir)
    result = tr.train(dataset, cfg.arch, cfg.train)

    mo.save_checkpoint(result.params, run_dir / "best.ckpt")
    mo.save_checkpoint(result.final_params, run_dir / "final.ckpt")
    tr.write_train_log(result.log, run_dir / "train_log.csv")
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs "
          f"(early stop: {'yes' if result.early_stopped else 'no'}); "
          f"best epoch {result.best_epoch} val_acc {result.best_val_acc:.4f}")
    print(f"final epoch: train_loss {last.train_loss:.4f} "
          f"val_acc {last.val_acc:.4f}")
    print(f"wrote best.ckpt, final.ckpt, train_log.csv to {run_dir}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest if args.manifest else cfg.paths.manifest)
    cache_dir = Path(args.cache_dir if args.cache_dir else cfg.paths.cache_dir)
    report_dir = Path(args.out if args.out else cfg.paths.report_dir)
    ckpt = Path(args.checkpoint if args.checkpoint
                else Path(cfg.paths.run_dir) / "best.ckpt")
    report_dir.mkdir(parents=True, exist_ok=True)

    rows = tr.read_manifest(manifest)
    dataset = tr.load_dataset(rows, cache_dir)
    params = mo.load_checkpoint(ckpt, mo.param_shapes(cfg.arch))
    split = None if args.split == "all" else args.split
    report, predictions = me.evaluate(params, dataset, split, cfg.arch,
                                      batch_size=cfg.train.batch_size)

    me.write_report_json(report, report_dir / "report.json")
    me.write_confusion_csv(report.confusion, report_dir / "confusion.csv",
                           labels=report.labels)
    me.write_predictions_csv(predictions, report_dir / "predictions.csv")
    print(f"split={args.split} n={report.n_samples} "
          f"accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f}")
    print(f"wrote report.json, confusion.csv, predictions.csv to {report_dir}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    ckpt = Path(args.checkpoint if args.checkpoint
                else Path(cfg.paths.run_dir) / "best.ckpt")
    params = mo.load_checkpoint(ckpt, mo.param_shapes(cfg.arch))
    feat = _featurize_file(args.wav, cfg)
    x = feat.values[np.newaxis, np.newaxis]
    probs = mo.predict_proba(x, params, cfg.arch)[0]
    out = {
        "label": mo.LABELS[int(np.argmax(probs))],
        "probabilities": {name: float(p) for name, p in zip(mo.LABELS, probs)},
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    report = gc.run_suite(seed=args.seed, trials=args.trials)
    print(gc.format_report(report))
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serkit",
        description="Speech emotion recognition pipeline: synthesize a toy "
                    "corpus, extract log-mel features, train and evaluate a "
                    "CNN-transformer classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=os.environ.get("SERKIT_CONFIG"),
                       help="INI config file (default: $SERKIT_CONFIG)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    common(p)
    p.add_argument("--out", help="output directory (default: paths.data_dir)")
    p.add_argument("--n-per-class", type=int, default=4)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="extract features into the cache")
    common(p)
    p.add_argument("--manifest", help="manifest CSV (default: paths.manifest)")
    p.add_argument("--cache-dir", help="feature cache (default: paths.cache_dir)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel feature workers")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the classifier")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--cache-dir")
    p.add_argument("--out", help="run directory (default: paths.run_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--cache-dir")
    p.add_argument("--checkpoint", help="default: <run_dir>/best.ckpt")
    p.add_argument("--split", choices=("train", "val", "test", "all"),
                   default="test")
    p.add_argument("--out", help="report directory (default: paths.report_dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify a single wav file")
    common(p)
    p.add_argument("wav", help="path to a wav file")
    p.add_argument("--checkpoint", help="default: <run_dir>/best.ckpt")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every gradient")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100,
                   help="random trials per operation")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

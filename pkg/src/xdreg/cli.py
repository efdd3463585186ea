"""Command-line entry point.

Subcommands: gen-synth, train, eval, gradcheck, predict, table1.
Every run prints its fully resolved configuration (seed included) as
line-oriented key=value pairs before doing any work, so a run is
reproducible from its own log.  The environment variable XDR_SEED
overrides the configured seed and is echoed when used.

Exit codes: 0 success, 1 usage error, 2 data/format error,
3 assertion failure (gradcheck tolerance or table1 ordering).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataio, evaluation, gradcheck, synthbench
from .errors import XdregError
from .heads import HeadVariant, build_head
from .rng import RngStream
from .training import TrainConfig, checkpoint_to_model, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo(section: str, obj: dict):
    for key in sorted(obj):
        print(f"config {section}.{key}={obj[key]}")


def _load_configs(path):
    if path is None:
        cfg = {"synth": synthbench.SynthConfig(), "train": TrainConfig(), "seeds": None}
    else:
        cfg = dataio.load_run_config(path)
    env_seed = os.environ.get("XDR_SEED")
    if env_seed is not None:
        seed = int(env_seed)
        print(f"config seed overridden by XDR_SEED={seed}")
        cfg["synth"].seed = seed
        cfg["train"].seed = seed
        cfg["seeds"] = [seed] if cfg["seeds"] is not None else None
    _echo("synth", asdict(cfg["synth"]))
    _echo("train", asdict(cfg["train"]))
    if cfg["seeds"] is not None:
        print(f"config seeds={cfg['seeds']}")
    return cfg


def _cmd_gen_synth(args) -> int:
    cfg = _load_configs(args.config)
    train_set, test_set = synthbench.generate(cfg["synth"])
    out = Path(args.out)
    dataio.write_dataset(out / "train", train_set)
    dataio.write_dataset(out / "test", test_set)
    print(f"wrote {len(train_set)} train and {len(test_set)} test samples to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_configs(args.config)
    tc = cfg["train"]
    samples = dataio.load_dataset(args.data)
    c_m = samples[0].x_m.values.size
    c_f = samples[0].x_f.values.size
    print(f"config data.n={len(samples)} data.c_m={c_m} data.c_f={c_f}")
    variant = HeadVariant.parse(args.variant)
    init = RngStream(tc.seed).split("init", variant.value)
    model = build_head(
        variant, c_m, c_f, init, dropout_p=tc.dropout_p, dtype=np.dtype(tc.dtype)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def sink(ckpt):
        dataio.save_checkpoint(out / f"epoch_{ckpt.epoch:04d}.ckpt", ckpt)

    train(model, samples, tc, on_checkpoint=sink, keep="none", verbose=True)
    print(f"wrote {tc.epochs} checkpoints to {out}")
    return 0


def _load_checkpoint_window(directory, window):
    paths = sorted(Path(directory).glob("*.ckpt"))
    if not paths:
        raise dataio.FormatError(f"{directory}: no .ckpt files found")
    ckpts = sorted((dataio.load_checkpoint(p) for p in paths), key=lambda c: c.epoch)
    if window < 1:
        raise UsageError("--window must be >= 1")
    return ckpts[-window:]


def _cmd_eval(args) -> int:
    samples = dataio.load_dataset(args.data)
    ckpts = _load_checkpoint_window(args.checkpoints, args.window)
    print(f"config eval.window={len(ckpts)} (requested {args.window})")
    print(f"config eval.n={len(samples)}")
    window = evaluation.evaluate_window(ckpts, samples)
    final_report = window.per_checkpoint[-1]
    variant = ckpts[-1].variant
    if args.report:
        evaluation.write_summary(args.report, variant, window)
    if args.errors:
        evaluation.export_errors(final_report, args.errors)
    print(f"variant={variant} mae_kcal={window.mae:.4f} mape_pct={window.mape:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    variants = [args.variant] if args.variant else None
    c_m, c_f = args.dims
    results = gradcheck.run_suite(variants=variants, c_m=c_m, c_f=c_f)
    failed = False
    for name in sorted(results):
        err = results[name]
        ok = err < gradcheck.TOLERANCE
        failed |= not ok
        print(f"gradcheck {name} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    print(f"gradcheck tolerance={gradcheck.TOLERANCE:g} passed={not failed}")
    return 3 if failed else 0


def _cmd_predict(args) -> int:
    ckpt = dataio.load_checkpoint(args.checkpoint)
    model = checkpoint_to_model(ckpt)
    x_m = dataio.read_feature_file(args.features[0])
    x_f = dataio.read_feature_file(args.features[1])
    if x_m.domain != dataio.DOMAIN_EDM:
        raise dataio.FormatError(
            f"{args.features[0]}: expected an energy-distribution ({dataio.DOMAIN_EDM}) "
            f"feature file, got domain {x_m.domain!r}"
        )
    if x_f.domain != dataio.DOMAIN_RGB:
        raise dataio.FormatError(
            f"{args.features[1]}: expected an {dataio.DOMAIN_RGB} feature file, "
            f"got domain {x_f.domain!r}"
        )
    pred = evaluation.predict_kcal(
        model, x_m.values[None, :].astype(model.dtype), x_f.values[None, :].astype(model.dtype)
    )[0]
    print(f"{pred:.6f}")
    return 0


def _cmd_table1(args) -> int:
    cfg = _load_configs(args.config)
    seeds = cfg["seeds"] or [cfg["synth"].seed]
    report = synthbench.ordering_experiment(
        cfg["synth"], cfg["train"], seeds=seeds, max_workers=args.workers
    )
    for seed in report.seeds:
        print(f"seed={seed}")
        print(f"{'variant':<8} {'mae_kcal':>10} {'mape_pct':>10} {'ref_mae':>9} {'ref_mape':>9}")
        for row in report.rows:
            if row.seed != seed:
                continue
            ref = evaluation.REFERENCE_RESULTS[row.variant]
            print(
                f"{row.variant:<8} {row.mae:>10.2f} {row.mape:>10.2f} "
                f"{ref['mae_kcal']:>9.2f} {ref['mape_pct']:>9.2f}"
            )
        for name, ok in report.per_seed_assertions[seed].items():
            print(f"assertion seed={seed} {name}={ok}")
    counts = report.assertion_counts()
    for name in report.ASSERTION_NAMES:
        print(f"summary {name}={counts[name]}/{len(report.seeds)}")
    print(f"summary required_passes={report.required_passes} passed={report.passed()}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = report.to_dict()
        doc["reference"] = {
            "variants": evaluation.REFERENCE_RESULTS,
            "human": evaluation.HUMAN_BASELINE,
        }
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"wrote {out / 'report.json'}")
    return 0 if report.passed() else 3


def _dims(text):
    try:
        m, f = (int(t) for t in text.split(","))
        return (m, f)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'M,F' integers, got {text!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="xdreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic dual-domain benchmark")
    p.add_argument("--config", help="run-configuration JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_gen_synth)

    p = sub.add_parser("train", help="train one head variant")
    p.add_argument("--variant", required=True, choices=[v.value for v in HeadVariant])
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="run-configuration JSON")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="windowed evaluation of saved checkpoints")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--report", help="summary JSON output path")
    p.add_argument("--errors", help="per-sample error CSV output path")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--variant", choices=[v.value for v in HeadVariant])
    p.add_argument("--dims", type=_dims, default=(6, 6), help="feature widths M,F")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("predict", help="predict kCal for one feature pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--features", nargs=2, required=True, metavar=("XM_FILE", "XF_FILE")
    )
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("table1", help="run the six-variant ordering benchmark")
    p.add_argument("--config", help="run-configuration JSON")
    p.add_argument("--out", help="report output directory")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=_cmd_table1)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (XdregError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

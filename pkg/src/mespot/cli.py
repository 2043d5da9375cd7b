"""Command-line interface.

Subcommands mirror the pipeline stages: `synth` writes a corpus, `train`
fits the autoencoder, `fit-density` appends the 16 bag mixtures to the model
file, `spot` writes per-clip score curves and segment results, `eval`
produces a metrics report, and `pipeline` chains everything under one seed.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import ManifestError, NumericalError, ShapeError, TrainingDivergedError
from .evaluate import evaluate
from .manifest import load_manifest
from .modelio import load_model, save_model
from .pipeline import (
    build_training_bags,
    fit_bag_densities,
    run_pipeline,
    spot_split,
    train_autoencoder,
)
from .spotting import read_result_json
from .synthetic import SynthConfig, synth_generate

_ERRORS = (
    ValueError,
    KeyError,
    FileNotFoundError,
    ManifestError,
    ShapeError,
    TrainingDivergedError,
    NumericalError,
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--config", default=None, help="JSON file with config overrides")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-clips", type=int, default=None)
    p.add_argument("--test-clips", type=int, default=None)
    p.add_argument("--train-clip-length", type=int, default=None)
    p.add_argument("--test-clip-length", type=int, default=None)
    p.add_argument("--anomaly-rate", type=float, default=None)
    p.add_argument("--burst-amplitude", type=float, default=None)


def _synth_config(args, frame_size: int) -> SynthConfig:
    kwargs = dict(frame_size=frame_size, seed=args.seed)
    if args.train_clips is not None:
        kwargs["n_train_clips"] = args.train_clips
    if args.test_clips is not None:
        kwargs["n_test_clips"] = args.test_clips
    if args.train_clip_length is not None:
        kwargs["train_clip_length"] = args.train_clip_length
    if args.test_clip_length is not None:
        kwargs["test_clip_length"] = args.test_clip_length
    if args.anomaly_rate is not None:
        kwargs["anomaly_rate"] = args.anomaly_rate
    if args.burst_amplitude is not None:
        kwargs["burst_amplitude"] = args.burst_amplitude
    return SynthConfig(**kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mespot",
        description="Spatiotemporal anomaly spotting in facial image sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    _add_synth_flags(p)

    p = sub.add_parser("train", help="train the autoencoder on the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="output model file")
    _add_common(p)

    p = sub.add_parser("fit-density", help="fit the 16 bag mixtures and append them to the model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="model file to update")
    _add_common(p)

    p = sub.add_parser("spot", help="score clips and extract anomaly segments")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="directory for per-clip CSV/JSON results")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate spotting results against manifest labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--results", required=True, help="directory of spot JSON results")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("pipeline", help="synth + train + fit-density + spot + eval")
    p.add_argument("--out", required=True, help="working directory")
    _add_common(p)
    _add_synth_flags(p)

    return parser


def _cmd_synth(args) -> int:
    cfg = load_config(args.config, args.profile)
    path = synth_generate(_synth_config(args, cfg.frame_size), args.out)
    print(f"wrote corpus manifest {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.profile)
    manifest = load_manifest(args.manifest)
    model = train_autoencoder(manifest, cfg, args.seed)
    save_model(args.model, model)
    trace = model.loss_trace["phase2"]
    print(f"trained autoencoder ({len(trace)} steps, final loss {trace[-1]:.6f}); wrote {args.model}")
    return 0


def _cmd_fit_density(args) -> int:
    cfg = load_config(args.config, args.profile)
    manifest = load_manifest(args.manifest)
    model, _ = load_model(args.model)
    bags = build_training_bags(manifest, cfg, args.seed, block_size=model.arch.block_size)
    gmms = fit_bag_densities(model, bags, cfg, args.seed)
    save_model(args.model, model, gmms)
    print(f"fitted {len(gmms)} bag mixtures; updated {args.model}")
    return 0


def _cmd_spot(args) -> int:
    cfg = load_config(args.config, args.profile)
    manifest = load_manifest(args.manifest)
    model, gmms = load_model(args.model)
    if not gmms:
        raise ValueError(f"model {args.model} has no density section; run fit-density first")
    results = spot_split(manifest, model, gmms, cfg, split=args.split, out_dir=args.out)
    n_events = sum(0 if r.no_event else len(r.segments) for _, r in results)
    print(f"spotted {args.split} split: {len(results)} clips, {n_events} segments -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    paths = sorted(Path(args.results).glob("*.json"))
    if not paths:
        raise ValueError(f"no result JSON files in {args.results}")
    spotted = [read_result_json(p) for p in paths]
    report = evaluate(spotted, manifest)
    report.to_json(args.out)
    print(
        f"precision={report.precision:.4f} recall={report.recall:.4f} auc={report.auc:.4f} "
        f"mas={report.mas_ms:.2f}ms mad={report.mad_ms:.2f}ms -> {args.out}"
    )
    return 0


def _cmd_pipeline(args) -> int:
    cfg = load_config(args.config, args.profile)
    report = run_pipeline(
        args.out, args.seed, cfg, synth_cfg=_synth_config(args, cfg.frame_size)
    )
    print(
        f"pipeline done: precision={report.precision:.4f} recall={report.recall:.4f} "
        f"auc={report.auc:.4f} mas={report.mas_frames:.2f} frames -> {args.out}"
    )
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "fit-density": _cmd_fit_density,
    "spot": _cmd_spot,
    "eval": _cmd_eval,
    "pipeline": _cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

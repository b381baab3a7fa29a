"""Command-line driver: dataset generation, training, evaluation, map export.

Exit codes are stable API:
  0 success, 2 usage or configuration error, 3 I/O or data error,
  4 numeric abort (non-finite values), 5 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import TrainConfig
from .data import SceneSpec, generate_dataset, read_dataset, read_sample, read_manifest
from .errors import (CheckpointMismatch, ConfigError, ContractError, DataError,
                     GenerationError, NumericError, ParseError, StmtlError)
from .metrics import format_report, write_report
from . import trainer as trainer_mod
from .viz import export_sample_visualization

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"--size must look like 64x64, got {text!r}") from exc


def _parse_range(text: str) -> tuple[int, int]:
    if "-" in text.strip("-"):
        lo, hi = text.split("-", 1)
        return int(lo), int(hi)
    value = int(text)
    return value, value


def cmd_gen_data(args) -> int:
    lo_m, hi_m = _parse_range(args.movers)
    lo_s, hi_s = _parse_range(args.static)
    image_h, image_w = _parse_size(args.size)
    spec = SceneSpec(image_h=image_h, image_w=image_w, frames=args.frames,
                     movers_min=lo_m, movers_max=hi_m,
                     static_min=lo_s, static_max=hi_s,
                     noise=args.noise, seed=args.seed)
    samples = generate_dataset(spec, args.num)
    from .data import write_dataset
    write_dataset(samples, args.out, spec)
    boxes = sum(len(s.boxes) for s in samples)
    print(f"wrote {len(samples)} samples ({boxes} moving objects, "
          f"{image_w}x{image_h}, T={args.frames}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json_file(args.config)
    if args.override:
        cfg = cfg.apply_overrides(args.override)
    result = trainer_mod.train(cfg, resume=args.resume, max_steps=args.max_steps)
    print(f"finished after {result.steps} optimizer steps; "
          f"last checkpoint: {result.last_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, _ = trainer_mod.load_model(args.checkpoint)
    samples = read_dataset(args.data)
    if not samples:
        raise DataError(f"dataset {args.data} is empty")
    metrics = trainer_mod.evaluate(model, samples, cfg)
    print(format_report(metrics))
    if args.out:
        write_report(metrics, args.out)
    return EXIT_OK


def cmd_viz_attn(args) -> int:
    model, cfg, _ = trainer_mod.load_model(args.checkpoint)
    manifest = read_manifest(args.data)
    if args.sample not in manifest["samples"]:
        raise DataError(f"sample {args.sample!r} not in {args.data}")
    sample = read_sample(args.data, args.sample)
    frames, flows = trainer_mod.prepare_inputs(sample, cfg)
    prediction = model.predict(frames, flows)
    written = export_sample_visualization(prediction, frames[-1],
                                          cfg.grid_h, cfg.grid_w, args.out)
    print(f"wrote {len(written)} files to {args.out}: {', '.join(written)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stmtl",
        description="moving-object detection + segmentation on synthetic clips")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--num", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", default="64x64")
    gen.add_argument("--frames", type=int, default=2)
    gen.add_argument("--movers", default="1-2", help="count or lo-hi range")
    gen.add_argument("--static", default="1", help="count or lo-hi range")
    gen.add_argument("--noise", type=float, default=0.02)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train from a JSON config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--override", action="append", default=[],
                    metavar="KEY=VALUE")
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    tr.add_argument("--max-steps", type=int, default=0)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="report metrics for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", default=None, help="also write metrics JSON here")
    ev.set_defaults(func=cmd_eval)

    vz = sub.add_parser("viz-attn", help="export attention maps for one sample")
    vz.add_argument("--checkpoint", required=True)
    vz.add_argument("--data", required=True)
    vz.add_argument("--sample", required=True)
    vz.add_argument("--out", required=True)
    vz.set_defaults(func=cmd_viz_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ContractError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: gradcheck, oracle-test, flops, generate, train, eval,
ablate, dump-features.  Verification commands exit 0 iff every check
passes; the others exit non-zero on configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np


def _load(config_path: str):
    from frameprop.config import load_config

    return load_config(config_path)


def cmd_gradcheck(args) -> int:
    from frameprop.checks import run_gradient_checks

    results = run_gradient_checks()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_oracle_test(args) -> int:
    from frameprop.checks import run_oracle_checks

    results = run_oracle_checks(cases=args.cases)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_flops(args) -> int:
    from frameprop.flops import model_report
    from frameprop.network import build_schedule

    config = _load(args.config)
    schedule = build_schedule(args.frames, config.keyframe_interval)
    report = model_report(
        config.model_config(), (config.height, config.width), schedule,
        counting_mode=args.mode,
    )
    print(report.table())
    if args.csv:
        report.write_csv(args.csv)
        print(f"wrote {args.csv}")
    return 0


def cmd_generate(args) -> int:
    from PIL import Image

    from frameprop.data import generate_sequence

    config = _load(args.config)
    seq = generate_sequence(config.sequence_params(), config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = min(args.frames, len(seq.frames))
    for t in range(count):
        rgb = np.round(seq.frames[t].transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(out / f"frame{t:03d}.png")
        lab = seq.seg_labels[t].astype(np.float64)
        lab_img = np.round(lab / max(1, lab.max()) * 255).astype(np.uint8)
        Image.fromarray(lab_img, mode="L").save(out / f"label{t:03d}.png")
        dep = seq.depth_maps[t]
        dep_img = np.round((dep - dep.min()) / max(1e-12, dep.max() - dep.min()) * 255)
        Image.fromarray(dep_img.astype(np.uint8), mode="L").save(out / f"depth{t:03d}.png")
    print(f"wrote {count} frame/label/depth triples to {out}")
    return 0


def cmd_train(args) -> int:
    from frameprop.experiment import run_experiment

    config = _load(args.config)
    target = run_experiment(config, out_dir=args.out)
    print(f"results in {target}")
    return 0


def cmd_eval(args) -> int:
    from frameprop.experiment import evaluate_checkpoint

    config = _load(args.config)
    target = evaluate_checkpoint(config, args.checkpoint, out_dir=args.out)
    print(f"metrics in {target / 'metrics.csv'}")
    return 0


def cmd_ablate(args) -> int:
    from frameprop.experiment import ablate

    config = _load(args.config)
    out_path = ablate(config, args.axis, out_dir=args.out)
    print(f"wrote {out_path}")
    return 0


def cmd_dump_features(args) -> int:
    from frameprop.experiment import dump_task_features

    config = _load(args.config)
    paths = dump_task_features(
        config, args.checkpoint, args.frame, out_dir=args.out,
        sequence_seed=args.sequence_seed,
    )
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frameprop",
        description="local-attention feature propagation benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-test", help="attention vs brute-force oracle")
    p.add_argument("--cases", type=int, default=20)
    p.set_defaults(func=cmd_oracle_test)

    p = sub.add_parser("flops", help="analytic cost report")
    p.add_argument("--config", required=True)
    p.add_argument("--frames", type=int, default=30, help="schedule length to average")
    p.add_argument("--mode", choices=["mac_as_1", "mac_as_2"], default="mac_as_1")
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("generate", help="dataset preview images")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=4)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train + evaluate one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config's output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a stored checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="override the config's output_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="config sweeps (loss / window / keyframe)")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=["loss", "window", "keyframe"], required=True)
    p.add_argument("--out", help="override the config's output_dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="per-task feature images")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", help="override the config's output_dir")
    p.add_argument("--sequence-seed", type=int, default=None)
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

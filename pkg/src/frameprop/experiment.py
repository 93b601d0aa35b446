"""Experiment orchestration: data, training loop, evaluation, artifacts.

A run trains the model per its config, evaluates with offset averaging
and leaves behind a results directory: metrics.csv (one row per keyframe
offset plus the mean), loss_log.csv, two SVG plots, the checkpoint and
the round-trippable config.  metrics.csv is byte-identical across runs
with the same config and seed; loss_log.csv carries wall-clock times and
is not.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from frameprop import svg
from frameprop.checkpoint import load_checkpoint, save_checkpoint
from frameprop.config import ExperimentConfig, save_config
from frameprop.data import SyntheticSequence, downsample_map, generate_sequence
from frameprop.metrics import depth_errors, miou, pixel_accuracy
from frameprop.network import SlowFastModel, eval_offset_averaged
from frameprop.training import Adam, Discriminator, TrainClip, train_step

OUTPUT_ROOT_ENV = "FRAMEPROP_OUTPUT_ROOT"

METRIC_COLUMNS = ["offset", "miou", "pixel_acc", "depth_abs", "depth_rel", "gflops_per_frame"]
LOG_COLUMNS = ["step", "segmentation", "depth", "l1", "adversarial", "d_accuracy", "wall_ms"]

TRAIN_SEED_OFFSET = 1000
EVAL_SEED_OFFSET = 7919


def resolve_output_dir(config: ExperimentConfig, override: Optional[str] = None) -> Path:
    raw = Path(override) if override else Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not raw.is_absolute():
        raw = Path(root) / raw
    return raw


def make_train_sequences(config: ExperimentConfig) -> List[SyntheticSequence]:
    params = config.sequence_params()
    base = config.seed * TRAIN_SEED_OFFSET
    return [generate_sequence(params, base + i) for i in range(config.train_sequences)]


def make_eval_sequences(config: ExperimentConfig) -> List[SyntheticSequence]:
    params = config.sequence_params()
    base = config.seed * TRAIN_SEED_OFFSET + EVAL_SEED_OFFSET
    return [generate_sequence(params, base + i) for i in range(config.eval_sequences)]


class EvalClip:
    """Frames plus ground truth of the annotated (final) frame."""

    def __init__(self, sequence: SyntheticSequence, annotated: int):
        self.frames = sequence.frames[: annotated + 1]
        self.seg_label = sequence.seg_labels[annotated]
        self.depth_map = sequence.depth_maps[annotated]


def make_eval_clips(config: ExperimentConfig) -> List[EvalClip]:
    annotated = config.frames_per_sequence - 1
    return [EvalClip(seq, annotated) for seq in make_eval_sequences(config)]


def sample_clip(sequence: SyntheticSequence, start: int, length: int) -> TrainClip:
    return TrainClip(
        frames=sequence.frames[start : start + length],
        seg_labels=sequence.seg_labels[start : start + length],
        depth_maps=sequence.depth_maps[start : start + length],
    )


def train(
    config: ExperimentConfig,
    log_rows: Optional[List[Dict[str, float]]] = None,
) -> Tuple[SlowFastModel, Discriminator]:
    """Train a fresh model per config; optionally collect the loss log."""
    model = SlowFastModel(config.model_config(), seed=config.seed)
    disc = Discriminator(
        config.channels,
        hidden=config.disc_hidden,
        rng=np.random.default_rng(config.seed + 1),
    )
    loss_cfg = config.loss_config()
    model_opt = Adam(
        model.named_parameters(),
        lr=config.lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        epsilon=config.adam_epsilon,
    )
    disc_opt = Adam(
        disc.named_parameters(),
        lr=config.lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        epsilon=config.adam_epsilon,
    )
    sequences = make_train_sequences(config)
    rng = np.random.default_rng(config.seed + 2)
    max_start = config.frames_per_sequence - config.clip_length
    for step in range(config.steps):
        seq = sequences[int(rng.integers(0, len(sequences)))]
        start = int(rng.integers(0, max_start + 1))
        clip = sample_clip(seq, start, config.clip_length)
        breakdown = train_step(clip, model, disc, model_opt, disc_opt, loss_cfg)
        if log_rows is not None:
            row = {"step": step}
            row.update(breakdown)
            log_rows.append(row)
    return model, disc


def make_metrics_fn(config: ExperimentConfig):
    """Per-clip metric evaluation at feature resolution."""
    stride = config.model_config().feature_stride
    num_classes = config.num_classes

    def metrics_fn(preds, clip: EvalClip) -> Dict[str, float]:
        out: Dict[str, float] = {}
        gt_seg = downsample_map(clip.seg_label, stride)
        gt_depth = downsample_map(clip.depth_map, stride)
        if "segmentation" in preds:
            pred_seg = np.argmax(preds["segmentation"].data[0], axis=0)
            out["miou"] = miou(pred_seg, gt_seg, num_classes)
            out["pixel_acc"] = pixel_accuracy(pred_seg, gt_seg)
        if "depth" in preds:
            pred_depth = preds["depth"].data[0, 0]
            abs_err, rel_err = depth_errors(
                pred_depth, gt_depth, np.ones_like(gt_depth, dtype=bool)
            )
            out["depth_abs"] = abs_err
            out["depth_rel"] = rel_err
        return out

    return metrics_fn


def evaluate(model: SlowFastModel, config: ExperimentConfig):
    clips = make_eval_clips(config)
    return eval_offset_averaged(
        model, clips, config.keyframe_interval, make_metrics_fn(config)
    )


def _fmt(value: float) -> str:
    return repr(float(value))


def write_metrics_csv(path, per_offset: Dict[int, Dict[str, float]], mean: Dict[str, float]) -> None:
    # depth_rel is reported as a percentage in the CSV
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for d in sorted(per_offset):
            row = per_offset[d]
            writer.writerow(
                [d] + [
                    _fmt(row[c] * 100.0 if c == "depth_rel" else row[c])
                    for c in METRIC_COLUMNS[1:]
                ]
            )
        writer.writerow(
            ["mean"] + [
                _fmt(mean[c] * 100.0 if c == "depth_rel" else mean[c])
                for c in METRIC_COLUMNS[1:]
            ]
        )


def read_metrics_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_loss_log(path, rows: List[Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["step"]] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None) -> Path:
    """Full protocol: train, evaluate offset-averaged, write artifacts."""
    target = resolve_output_dir(config, out_dir)
    target.mkdir(parents=True, exist_ok=True)
    log_rows: List[Dict[str, float]] = []
    model, disc = train(config, log_rows)
    per_offset, mean = evaluate(model, config)

    write_metrics_csv(target / "metrics.csv", per_offset, mean)
    write_loss_log(target / "loss_log.csv", log_rows)
    arrays = {name: p.data for name, p in model.named_parameters()}
    arrays.update({name: p.data for name, p in disc.named_parameters()})
    save_checkpoint(target / "checkpoint.bin", arrays)
    save_config(config, target / "config.txt")

    steps = [row["step"] for row in log_rows]
    svg.line_plot(
        target / "loss_curve.svg",
        {
            "total": (steps, [r["total"] for r in log_rows]),
            "segmentation": (steps, [r["segmentation"] for r in log_rows]),
            "depth": (steps, [r["depth"] for r in log_rows]),
            "l1": (steps, [r["l1"] for r in log_rows]),
        },
        title="training loss",
        xlabel="step",
        ylabel="loss",
    )
    offsets = sorted(per_offset)
    svg.line_plot(
        target / "metrics_vs_offset.svg",
        {
            "miou": (offsets, [per_offset[d].get("miou", 0.0) for d in offsets]),
            "pixel_acc": (offsets, [per_offset[d].get("pixel_acc", 0.0) for d in offsets]),
        },
        title="metrics by keyframe offset",
        xlabel="offset",
        ylabel="metric",
    )
    return target


def evaluate_checkpoint(config: ExperimentConfig, checkpoint_path, out_dir: Optional[str] = None) -> Path:
    """Evaluation-only entry point for a stored checkpoint."""
    target = resolve_output_dir(config, out_dir)
    target.mkdir(parents=True, exist_ok=True)
    model = SlowFastModel(config.model_config(), seed=config.seed)
    model.load_state_dict(load_checkpoint(checkpoint_path))
    per_offset, mean = evaluate(model, config)
    write_metrics_csv(target / "metrics.csv", per_offset, mean)
    return target


LOSS_ABLATION = [
    ("none", dict(alpha=0.0, beta=0.0)),
    ("l1", dict(alpha=1.0, beta=0.0)),
    ("l1+adv", dict(alpha=1.0, beta=1.0)),
]


def ablate(config: ExperimentConfig, axis: str, out_dir: Optional[str] = None) -> Path:
    """Run a small config sweep and emit one comparable row per variant."""
    import dataclasses

    target = resolve_output_dir(config, out_dir)
    target.mkdir(parents=True, exist_ok=True)
    if axis == "loss":
        variants = [
            (label, dataclasses.replace(config, **overrides))
            for label, overrides in LOSS_ABLATION
        ]
    elif axis == "window":
        variants = [
            (f"window{wname}", dataclasses.replace(config, window=w, global_attention=g))
            for wname, w, g in (("3", 3, False), ("5", 5, False), ("7", 7, False),
                                ("-global", config.window, True))
        ]
    elif axis == "keyframe":
        ks = [k for k in (1, 5, 10) if k + 1 <= config.frames_per_sequence]
        variants = [
            (f"k{k}", dataclasses.replace(config, keyframe_interval=k)) for k in ks
        ]
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")

    rows = []
    for label, variant in variants:
        model, _ = train(variant)
        _, mean = evaluate(model, variant)
        row = {"variant": label}
        row.update({c: mean[c] for c in METRIC_COLUMNS[1:]})
        rows.append(row)
    out_path = target / f"ablation_{axis}.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant"] + METRIC_COLUMNS[1:])
        for row in rows:
            writer.writerow(
                [row["variant"]] + [
                    _fmt(row[c] * 100.0 if c == "depth_rel" else row[c])
                    for c in METRIC_COLUMNS[1:]
                ]
            )
    return out_path


def dump_task_features(
    config: ExperimentConfig,
    checkpoint_path,
    frame_index: int,
    out_dir: Optional[str] = None,
    sequence_seed: Optional[int] = None,
) -> List[Path]:
    """Write per-task SE-output channel means as grayscale PNGs.

    Maps are min-max normalized to the full range; a constant map comes
    out mid-gray.
    """
    from PIL import Image

    from frameprop.autodiff import no_grad, tensor
    from frameprop.network import build_schedule

    target = resolve_output_dir(config, out_dir)
    target.mkdir(parents=True, exist_ok=True)
    model = SlowFastModel(config.model_config(), seed=config.seed)
    model.load_state_dict(load_checkpoint(checkpoint_path))
    params = config.sequence_params()
    seed = sequence_seed if sequence_seed is not None else config.seed * TRAIN_SEED_OFFSET + EVAL_SEED_OFFSET
    sequence = generate_sequence(params, seed)
    if not 0 <= frame_index < len(sequence.frames):
        raise ValueError(f"frame index {frame_index} out of range")
    schedule = build_schedule(frame_index + 1, config.keyframe_interval)
    state = model.new_state()
    with no_grad():
        for entry in schedule:
            frame = tensor(sequence.frames[entry.frame_index][None])
            model.forward_frame(frame, entry, state)
    paths = []
    for m, branch in enumerate(model.branches):
        feats = state.prev_feats[m].data[0]  # SE output cached for this frame
        channel_mean = feats.mean(axis=0)
        lo, hi = channel_mean.min(), channel_mean.max()
        if hi - lo < 1e-12:
            image = np.full(channel_mean.shape, 128, dtype=np.uint8)
        else:
            image = np.round((channel_mean - lo) / (hi - lo) * 255).astype(np.uint8)
        path = target / f"features_task{m}_{branch.spec.name}_frame{frame_index}.png"
        Image.fromarray(image, mode="L").save(path)
        paths.append(path)
    return paths

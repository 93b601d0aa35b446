"""Shared fixtures: the trend benchmark trains once per session."""

import dataclasses

import numpy as np
import pytest

from frameprop.config import ExperimentConfig
from frameprop.experiment import evaluate, make_eval_clips, train
from frameprop.network import SlowFastModel
from frameprop.training import feature_gap

TREND_SEEDS = (0, 1, 2)

# the fixed synthetic benchmark behind the ablation-trend criteria; small
# images and a width-bottlenecked fast branch keep runs short while giving
# keyframe propagation real information to add
TREND_BASE = dict(
    channels=8,
    slow_depth=6,
    fast_depth=2,
    fast_width=2,
    decoder_width1=16,
    decoder_width2=8,
    window=5,
    keyframe_interval=5,
    steps=800,
    clip_length=6,
    lr=3e-3,
    height=32,
    width=48,
    num_shapes=3,
    max_speed=2,
    noise=0.25,
    train_sequences=8,
    eval_sequences=8,
    frames_per_sequence=6,
    disc_hidden=8,
)

LOSS_VARIANTS = {
    "noprop": dict(propagation=False, alpha=0.0, beta=0.0),
    "attention": dict(alpha=0.0, beta=0.0),
    "attention_l1": dict(alpha=1.0, beta=0.0),
    "full": dict(alpha=1.0, beta=1.0),
}

WINDOW_VARIANTS = {
    "w3": dict(window=3),
    "w5": dict(),  # shares results with the "full" loss variant
    "w7": dict(window=7),
    "global": dict(global_attention=True),
}


def trend_config(seed: int, **overrides) -> ExperimentConfig:
    merged = dict(TREND_BASE)
    merged.update(overrides)
    return ExperimentConfig(seed=seed, output_dir="unused", **merged)


def nonkey_miou(per_offset) -> float:
    return float(np.mean([per_offset[d]["miou"] for d in per_offset if d > 0]))


def run_trend_variant(seed: int, **overrides):
    """Train one benchmark variant; returns the numbers the criteria need."""
    config = trend_config(seed, **overrides)
    clips = make_eval_clips(config)
    keyframes = [c.frames[0] for c in clips]
    init_gap = feature_gap(SlowFastModel(config.model_config(), seed=seed), keyframes)
    model, _ = train(config)
    per_offset, mean = evaluate(model, config)
    return {
        "nonkey_miou": nonkey_miou(per_offset),
        "mean_miou": mean["miou"],
        "per_offset": per_offset,
        "gap": feature_gap(model, keyframes),
        "init_gap": init_gap,
        "gflops": mean["gflops_per_frame"],
    }


@pytest.fixture(scope="session")
def trend_results():
    """All benchmark runs for the ablation-trend criteria, trained once."""
    results = {}
    for name, overrides in LOSS_VARIANTS.items():
        for seed in TREND_SEEDS:
            results[(name, seed)] = run_trend_variant(seed, **overrides)
    full = LOSS_VARIANTS["full"]
    for name, overrides in WINDOW_VARIANTS.items():
        if name == "w5":
            for seed in TREND_SEEDS:
                results[(name, seed)] = results[("full", seed)]
            continue
        for seed in TREND_SEEDS:
            results[(name, seed)] = run_trend_variant(seed, **{**full, **overrides})
    return results


def variant_means(results, name, key="nonkey_miou"):
    return float(np.mean([results[(name, s)][key] for s in TREND_SEEDS]))


def variant_values(results, name, key="nonkey_miou"):
    return [results[(name, s)][key] for s in TREND_SEEDS]

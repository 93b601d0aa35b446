"""Losses and optimization.

Task supervision is pixel-wise cross-entropy for segmentation plus masked
mean absolute error for depth, equally weighted by default.  The feature
mimicking objective combines a mean-L1 term between the two encoders'
features on the same frame with an adversarial term: a small conv
discriminator learns to tell the branches apart while a gradient-reversal
layer pushes the fast branch to fool it, all in one joint backward pass.
The slow features are stop-gradient inputs to the discriminator term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from frameprop.autodiff import (
    Tensor,
    absolute,
    clamp,
    conv2d,
    global_avg_pool,
    gradient_reversal,
    log,
    log_softmax,
    relu,
    reshape,
    sigmoid,
    tensor,
    tmean,
    tsum,
)
from frameprop.data import downsample_map
from frameprop.network import SLOW, SlowFastModel, build_schedule

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 1.0            # L1 mimic weight
    beta: float = 1.0             # adversarial weight
    task_weights: Dict[str, float] = field(default_factory=dict)
    grl_lambda: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")

    def weight(self, task: str) -> float:
        return self.task_weights.get(task, 1.0)


class Discriminator:
    """Three 3x3 convs, pooled to one sigmoid probability per input.

    The rectifications sit between the convs; the last conv feeds the
    pooled logit directly so the output can move both ways from 0.5.
    """

    def __init__(self, in_channels: int, hidden: int = 16,
                 rng: Optional[np.random.Generator] = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.convs = []
        sizes = [(in_channels, hidden), (hidden, hidden), (hidden, 1)]
        for i, (cin, cout) in enumerate(sizes):
            w = tensor(
                rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9)),
                requires_grad=True,
            )
            b = tensor(np.zeros(cout), requires_grad=True)
            self.convs.append((f"conv{i}", w, b))

    def forward(self, feats: Tensor) -> Tensor:
        """Probability in (0,1) per batch item, shape [B]."""
        x = feats
        for i, (_, w, b) in enumerate(self.convs):
            x = conv2d(x, w, b, stride=1, padding=1)
            if i < len(self.convs) - 1:
                x = relu(x)
        pooled = global_avg_pool(x)
        return reshape(sigmoid(pooled), (feats.shape[0],))

    __call__ = forward

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for name, w, b in self.convs:
            out.append((f"disc.{name}.weight", w))
            out.append((f"disc.{name}.bias", b))
        return out


def segmentation_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel-wise cross-entropy; labels are integer class maps."""
    b, num_classes, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b, h, w):
        raise ValueError(f"labels shape {labels.shape} != {(b, h, w)}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"label index out of range [0, {num_classes}): max {labels.max()}"
        )
    onehot = np.zeros(logits.shape)
    bb, ii, jj = np.meshgrid(range(b), range(h), range(w), indexing="ij")
    onehot[bb, labels, ii, jj] = 1.0
    picked = tsum(log_softmax(logits, axis=1) * tensor(onehot))
    return picked * (-1.0 / (b * h * w))


def depth_loss(pred: Tensor, target: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Masked mean absolute error; ``pred`` is [B,1,h,w]."""
    b, c, h, w = pred.shape
    if c != 1:
        raise ValueError(f"depth prediction must have 1 channel, got {c}")
    target = np.asarray(target, dtype=float).reshape(b, 1, h, w)
    if mask is None:
        mask = np.ones((b, 1, h, w), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(b, 1, h, w)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("fully-masked depth map")
    diff = absolute(pred - tensor(target)) * tensor(mask.astype(float))
    return tsum(diff) * (1.0 / count)


def task_loss(
    preds: Dict[str, Tensor],
    labels: Dict[str, np.ndarray],
    config: LossConfig,
    task_kinds: Dict[str, str],
) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of per-task losses plus the unweighted parts."""
    total = None
    parts: Dict[str, float] = {}
    for name, pred in preds.items():
        kind = task_kinds[name]
        if kind == "segmentation":
            term = segmentation_loss(pred, labels[name])
        else:
            term = depth_loss(pred, labels[name], labels.get(f"{name}_mask"))
        parts[name] = term.item()
        weighted = term * config.weight(name)
        total = weighted if total is None else total + weighted
    return total, parts


def mimic_loss(
    slow_feats: Tensor,
    fast_feats: Tensor,
    discriminator: Discriminator,
    config: LossConfig,
) -> Tuple[Tensor, Dict[str, float]]:
    """alpha * mean|slow - fast| + beta * discriminator loss, GRL-wired.

    The discriminator term is
    -(log D(stopgrad(slow)) + log(1 - D(reverse(fast)))), so one backward
    trains D to discriminate while the reversed gradient drives the fast
    encoder to fool it.  Slow features receive no discriminator gradient.
    """
    if slow_feats.shape != fast_feats.shape:
        raise ValueError(
            f"feature shapes differ: {slow_feats.shape} vs {fast_feats.shape}"
        )
    l1 = tmean(absolute(slow_feats - fast_feats))
    d_slow = clamp(discriminator(slow_feats.detach()), PROB_EPS, 1.0 - PROB_EPS)
    d_fast = clamp(
        discriminator(gradient_reversal(fast_feats, config.grl_lambda)),
        PROB_EPS,
        1.0 - PROB_EPS,
    )
    adv = -1.0 * (tmean(log(d_slow)) + tmean(log(1.0 - d_fast)))
    total = l1 * config.alpha + adv * config.beta
    correct = float((d_slow.data > 0.5).sum() + (d_fast.data < 0.5).sum())
    parts = {
        "l1": l1.item(),
        "adversarial": adv.item(),
        "d_accuracy": correct / (2 * slow_feats.shape[0]),
    }
    return total, parts


class Adam:
    """Standard bias-corrected Adam over named parameters."""

    def __init__(
        self,
        params: Sequence[Tuple[str, Tensor]],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.99,
        epsilon: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.moments = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params
        }

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if np.any(np.isnan(g)):
                raise ValueError(f"NaN gradient for parameter {name}")
            m, v = self.moments[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


@dataclass
class TrainClip:
    """One training sample: a short consecutive frame sequence with labels."""

    frames: List[np.ndarray]       # [3,H,W] each
    seg_labels: List[np.ndarray]   # [H,W] int
    depth_maps: List[np.ndarray]   # [H,W] float


def train_step(
    clip: TrainClip,
    model: SlowFastModel,
    discriminator: Discriminator,
    model_opt: Adam,
    disc_opt: Adam,
    config: LossConfig,
) -> Dict[str, float]:
    """One joint update over a clip; returns the loss breakdown.

    Keyframes inside the clip are encoded by both branches to form the
    mimicking pairs; a single backward drives both optimizers.
    """
    stride = model.config.feature_stride
    schedule = build_schedule(
        len(clip.frames),
        model.config.keyframe_interval,
        route_previous_frame=model.config.route_previous_frame,
    )
    state = model.new_state()
    kinds = {t.name: t.kind for t in model.config.tasks}
    started = time.perf_counter()

    task_total = None
    task_parts_acc: Dict[str, float] = {}
    mimic_total = None
    mimic_parts_acc = {"l1": 0.0, "adversarial": 0.0, "d_accuracy": 0.0}
    num_keyframes = 0
    for entry in schedule:
        frame = tensor(clip.frames[entry.frame_index][None])
        preds = model.forward_frame(frame, entry, state)
        labels = {}
        for t in model.config.tasks:
            if t.kind == "segmentation":
                labels[t.name] = downsample_map(
                    clip.seg_labels[entry.frame_index], stride
                )[None]
            else:
                labels[t.name] = downsample_map(
                    clip.depth_maps[entry.frame_index], stride
                )[None]
        frame_loss, parts = task_loss(preds, labels, config, kinds)
        task_total = frame_loss if task_total is None else task_total + frame_loss
        for k, val in parts.items():
            task_parts_acc[k] = task_parts_acc.get(k, 0.0) + val
        if entry.branch == SLOW:
            slow_feats = model.encode(frame, "slow")
            fast_feats = model.encode(frame, "fast")
            pair_loss, mparts = mimic_loss(slow_feats, fast_feats, discriminator, config)
            mimic_total = pair_loss if mimic_total is None else mimic_total + pair_loss
            for k in mimic_parts_acc:
                mimic_parts_acc[k] += mparts[k]
            num_keyframes += 1

    n = len(schedule)
    total = task_total * (1.0 / n)
    breakdown = {k: v / n for k, v in task_parts_acc.items()}
    if num_keyframes:
        total = total + mimic_total * (1.0 / num_keyframes)
        for k in mimic_parts_acc:
            breakdown[k] = mimic_parts_acc[k] / num_keyframes
    else:
        breakdown.update({"l1": 0.0, "adversarial": 0.0, "d_accuracy": 0.5})
    breakdown["total"] = total.item()

    model_opt.zero_grad()
    disc_opt.zero_grad()
    total.backward()
    model_opt.step()
    disc_opt.step()
    breakdown["wall_ms"] = (time.perf_counter() - started) * 1e3
    return breakdown


def reconstruct_total(breakdown: Dict[str, float], config: LossConfig,
                      task_names: Sequence[str]) -> float:
    """Reassemble the reported total from the weighted parts."""
    total = sum(config.weight(name) * breakdown[name] for name in task_names)
    total += config.alpha * breakdown["l1"] + config.beta * breakdown["adversarial"]
    return total


def feature_gap(model: SlowFastModel, frames: Sequence[np.ndarray]) -> float:
    """Mean |slow - fast| encoder feature distance over the given frames."""
    from frameprop.autodiff import no_grad

    gaps = []
    with no_grad():
        for frame in frames:
            f = tensor(frame[None])
            slow_feats = model.encode(f, "slow")
            fast_feats = model.encode(f, "fast")
            gaps.append(float(np.mean(np.abs(slow_feats.data - fast_feats.data))))
    return float(np.mean(gaps))

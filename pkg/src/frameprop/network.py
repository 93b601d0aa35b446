"""Two-branch multi-task video model.

A deep ``slow`` conv stack encodes keyframes and a shallow ``fast`` stack
encodes every other frame; both end at the same resolution and channel
count.  Each task owns a squeeze-excitation block, two attention edges
(one fed from the last keyframe, one from the previous frame) and a small
conv decoder over the concatenation [current, from-keyframe, from-previous].
Missing propagation sources are self-filled with the current features so
decoder shapes never change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from frameprop.attention import AttentionConfig, LocalAttention
from frameprop.autodiff import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    global_avg_pool,
    no_grad,
    relu,
    sigmoid,
    tensor,
)

SLOW = "slow"
FAST = "fast"


@dataclass
class TaskSpec:
    name: str
    kind: str  # "segmentation" or "depth"
    out_channels: int

    def __post_init__(self):
        if self.kind not in ("segmentation", "depth"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")


def default_slow_stages(channels: int) -> List[Tuple[int, int]]:
    c = channels
    return [(c, 2), (c, 1), (c, 1), (c, 2), (c, 1), (c, 1)]


def default_fast_stages(channels: int) -> List[Tuple[int, int]]:
    c = channels
    return [(c, 2), (c, 2)]


@dataclass
class ModelConfig:
    channels: int = 16
    slow_stages: List[Tuple[int, int]] = field(default_factory=list)
    fast_stages: List[Tuple[int, int]] = field(default_factory=list)
    se_reduction: int = 4
    window: int = 5
    use_global_attention: bool = False
    decoder_widths: Tuple[int, int] = (0, 0)
    tasks: List[TaskSpec] = field(default_factory=list)
    keyframe_interval: int = 5
    propagate: bool = True
    route_previous_frame: bool = True

    def __post_init__(self):
        if not self.slow_stages:
            self.slow_stages = default_slow_stages(self.channels)
        if not self.fast_stages:
            self.fast_stages = default_fast_stages(self.channels)
        if self.decoder_widths == (0, 0):
            self.decoder_widths = (2 * self.channels, self.channels)
        if not self.tasks:
            self.tasks = [
                TaskSpec("segmentation", "segmentation", 4),
                TaskSpec("depth", "depth", 1),
            ]
        if self.keyframe_interval < 1:
            raise ValueError("keyframe_interval must be >= 1")
        slow_stride = int(np.prod([s for _, s in self.slow_stages]))
        fast_stride = int(np.prod([s for _, s in self.fast_stages]))
        if slow_stride != fast_stride:
            raise ValueError(
                f"branches end at different strides: {slow_stride} vs {fast_stride}"
            )
        if self.slow_stages[-1][0] != self.fast_stages[-1][0]:
            raise ValueError("branches must end at the same channel count")
        if self.slow_stages[-1][0] != self.channels:
            raise ValueError("final stage channels must equal config.channels")
        deeper = len(self.slow_stages) > len(self.fast_stages)
        wider = sum(c for c, _ in self.slow_stages) > sum(c for c, _ in self.fast_stages)
        if not (deeper or wider):
            raise ValueError("slow branch must have strictly more stages or channels")

    @property
    def feature_stride(self) -> int:
        return int(np.prod([s for _, s in self.slow_stages]))


@dataclass
class ScheduleEntry:
    frame_index: int
    branch: str
    keyframe_source: Optional[int] = None
    previous_source: Optional[int] = None


def build_schedule(
    num_frames: int,
    keyframe_interval: int,
    mode: str = "periodic",
    offset: Optional[int] = None,
    route_previous_frame: bool = True,
) -> List[ScheduleEntry]:
    """Branch assignment and propagation sources for a frame sequence.

    ``periodic``: frame i is a keyframe iff i % K == 0; keyframes receive
    the previous frame, non-keyframes receive both the last keyframe and
    the previous frame.  ``eval_clip`` with offset d builds the d+1 frame
    clip whose frame 0 is the keyframe and whose last frame is evaluated.

    ``route_previous_frame=False`` switches the previous-frame source to
    the last non-keyframe instead (an alternate reading of the routing;
    no fidelity claim either way).
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    k = keyframe_interval
    if k < 1:
        raise ValueError("keyframe_interval must be >= 1")
    if mode == "eval_clip":
        if offset is None or not 0 <= offset <= k - 1:
            raise ValueError(f"eval_clip offset must be in [0, {k - 1}], got {offset}")
        if num_frames != offset + 1:
            raise ValueError(
                f"eval_clip({offset}) needs exactly {offset + 1} frames, got {num_frames}"
            )
        entries = [ScheduleEntry(0, SLOW)]
        for i in range(1, num_frames):
            entries.append(ScheduleEntry(i, FAST, keyframe_source=0, previous_source=i - 1))
        return entries
    if mode != "periodic":
        raise ValueError(f"unknown schedule mode {mode!r}")
    entries = []
    last_key: Optional[int] = None
    last_nonkey: Optional[int] = None
    for i in range(num_frames):
        is_key = i % k == 0
        prev = i - 1 if i > 0 else None
        if not route_previous_frame:
            prev = last_nonkey
        if is_key:
            entries.append(ScheduleEntry(i, SLOW, keyframe_source=None, previous_source=prev))
            last_key = i
        else:
            entries.append(
                ScheduleEntry(i, FAST, keyframe_source=last_key, previous_source=prev)
            )
            last_nonkey = i
    return entries


def stage_kernel(stride: int) -> int:
    """3x3 / 4x4 / 6x6 for strides 1 / 2 / 4: keeps even extents integral."""
    kernels = {1: 3, 2: 4, 4: 6}
    if stride not in kernels:
        raise ValueError(f"unsupported stage stride {stride}")
    return kernels[stride]


class ConvStack:
    """Sequence of conv + relu blocks; the trunk of either branch.

    Width-preserving stride-1 stages carry a residual skip so deep stacks
    stay trainable from scratch.
    """

    def __init__(self, name: str, in_channels: int, stages: Sequence[Tuple[int, int]],
                 rng: np.random.Generator):
        self.name = name
        self.stages = []
        cin = in_channels
        for cout, stride in stages:
            k = stage_kernel(stride)
            scale = np.sqrt(2.0 / (cin * k * k))
            w = tensor(rng.standard_normal((cout, cin, k, k)) * scale, requires_grad=True)
            b = tensor(np.zeros(cout), requires_grad=True)
            self.stages.append((w, b, stride, stride == 1 and cin == cout))
            cin = cout

    def forward(self, x: Tensor) -> Tensor:
        for w, b, stride, residual in self.stages:
            y = conv2d(x, w, b, stride=stride, padding=1)
            x = relu(y + x) if residual else relu(y)
        return x

    def parameters(self):
        out = []
        for i, (w, b, _, _) in enumerate(self.stages):
            out.append((f"{self.name}.stage{i}.weight", w))
            out.append((f"{self.name}.stage{i}.bias", b))
        return out


class SEBlock:
    """Channel gate from pooled statistics; gate strictly inside (0,1)."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        mid = max(1, channels // reduction)
        self.reduce_w = tensor(
            rng.standard_normal((mid, channels, 1, 1)) * np.sqrt(2.0 / channels),
            requires_grad=True,
        )
        self.reduce_b = tensor(np.zeros(mid), requires_grad=True)
        self.expand_w = tensor(
            rng.standard_normal((channels, mid, 1, 1)) * np.sqrt(2.0 / mid),
            requires_grad=True,
        )
        self.expand_b = tensor(np.zeros(channels), requires_grad=True)

    def gate(self, x: Tensor) -> Tensor:
        squeezed = global_avg_pool(x)
        hidden = relu(conv2d(squeezed, self.reduce_w, self.reduce_b))
        return sigmoid(conv2d(hidden, self.expand_w, self.expand_b))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)

    def parameters(self):
        return [
            ("se.reduce.weight", self.reduce_w),
            ("se.reduce.bias", self.reduce_b),
            ("se.expand.weight", self.expand_w),
            ("se.expand.bias", self.expand_b),
        ]


class TaskBranch:
    """SE block, two attention edges and the fuse-and-decode conv stack."""

    def __init__(self, spec: TaskSpec, config: ModelConfig, rng: np.random.Generator):
        self.spec = spec
        c = config.channels
        self.se = SEBlock(c, config.se_reduction, rng)
        attn_cfg = AttentionConfig(window=config.window, channels=c)
        self.key_edge = LocalAttention(attn_cfg, rng)
        self.prev_edge = LocalAttention(attn_cfg, rng)
        w1, w2 = config.decoder_widths
        self.convs = []
        specs = [
            ("decode0", 3 * c, w1, 3, 1),
            ("decode1", w1, w2, 1, 0),
            ("decode2", w2, w2, 1, 0),
            ("head", w2, spec.out_channels, 1, 0),
        ]
        for name, cin, cout, k, pad in specs:
            w = tensor(
                rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k)),
                requires_grad=True,
            )
            b = tensor(np.zeros(cout), requires_grad=True)
            self.convs.append((name, w, b, pad))
        self.use_global = config.use_global_attention

    def _attend(self, edge: LocalAttention, source: Tensor, query: Tensor) -> Tensor:
        if self.use_global:
            return edge.global_attention(source, query)
        return edge.forward(source, query)

    def decode(self, fused: Tensor) -> Tensor:
        x = fused
        for i, (name, w, b, pad) in enumerate(self.convs):
            x = conv2d(x, w, b, stride=1, padding=pad)
            if i < len(self.convs) - 1:
                x = relu(x)
        return x

    def parameters(self):
        out = [(f"{self.spec.name}.{n}", t) for n, t in self.se.parameters()]
        for edge_name, edge in (("key_edge", self.key_edge), ("prev_edge", self.prev_edge)):
            for n, t in edge.parameters():
                out.append((f"{self.spec.name}.{edge_name}.{n}", t))
        for name, w, b, _ in self.convs:
            out.append((f"{self.spec.name}.{name}.weight", w))
            out.append((f"{self.spec.name}.{name}.bias", b))
        return out


class PropagationState:
    """Per-task feature caches for the routing; never holds future frames."""

    def __init__(self, num_tasks: int):
        self.keyframe_feats: List[Optional[Tensor]] = [None] * num_tasks
        self.keyframe_index: Optional[int] = None
        self.prev_feats: List[Optional[Tensor]] = [None] * num_tasks
        self.prev_index: Optional[int] = None
        # only populated under the alternate last-non-keyframe routing
        self.nonkey_feats: List[Optional[Tensor]] = [None] * num_tasks
        self.nonkey_index: Optional[int] = None

    def lookup(self, task: int, index: int) -> Optional[Tensor]:
        for feats, idx in (
            (self.prev_feats, self.prev_index),
            (self.keyframe_feats, self.keyframe_index),
            (self.nonkey_feats, self.nonkey_index),
        ):
            if idx == index and feats[task] is not None:
                return feats[task]
        return None


class SlowFastModel:
    """The full multi-branch multi-task network over frame sequences."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.slow = ConvStack("slow", 3, config.slow_stages, rng)
        self.fast = ConvStack("fast", 3, config.fast_stages, rng)
        self.branches = [TaskBranch(t, config, rng) for t in config.tasks]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = list(self.slow.parameters()) + list(self.fast.parameters())
        for i, branch in enumerate(self.branches):
            out.extend((f"task{i}.{n}", t) for n, t in branch.parameters())
        return out

    def new_state(self) -> PropagationState:
        return PropagationState(len(self.branches))

    def encode(self, frame: Tensor, branch: str) -> Tensor:
        if frame.data.ndim != 4 or frame.shape[1] != 3:
            raise ShapeError(f"frame must be [B,3,H,W], got {frame.shape}")
        if branch == SLOW:
            return self.slow.forward(frame)
        if branch == FAST:
            return self.fast.forward(frame)
        raise ValueError(f"unknown branch {branch!r}")

    def forward_frame(
        self,
        frame: Tensor,
        entry: ScheduleEntry,
        state: PropagationState,
    ) -> Dict[str, Tensor]:
        """Predictions for one frame; updates the propagation caches."""
        encoded = self.encode(frame, entry.branch)
        preds: Dict[str, Tensor] = {}
        new_feats: List[Tensor] = []
        for m, branch in enumerate(self.branches):
            current = branch.se.forward(encoded)
            from_key = from_prev = current  # self-fill boot rule
            if self.config.propagate and entry.keyframe_source is not None:
                cached = state.lookup(m, entry.keyframe_source)
                if cached is None:
                    raise RuntimeError(
                        f"frame {entry.frame_index}: no cached features for "
                        f"keyframe source {entry.keyframe_source}"
                    )
                from_key = branch._attend(branch.key_edge, cached, current)
            if self.config.propagate and entry.previous_source is not None:
                cached = state.lookup(m, entry.previous_source)
                if cached is None:
                    raise RuntimeError(
                        f"frame {entry.frame_index}: no cached features for "
                        f"previous-frame source {entry.previous_source}"
                    )
                from_prev = branch._attend(branch.prev_edge, cached, current)
            fused = concat([current, from_key, from_prev], axis=1)
            preds[branch.spec.name] = branch.decode(fused)
            new_feats.append(current)
        for m, feats in enumerate(new_feats):
            state.prev_feats[m] = feats
            if entry.branch == SLOW:
                state.keyframe_feats[m] = feats
            else:
                state.nonkey_feats[m] = feats
        state.prev_index = entry.frame_index
        if entry.branch == SLOW:
            state.keyframe_index = entry.frame_index
        else:
            state.nonkey_index = entry.frame_index
        return preds

    def forward_sequence(
        self,
        frames: Sequence[Tensor],
        schedule: Optional[List[ScheduleEntry]] = None,
    ) -> List[Dict[str, Tensor]]:
        if not frames:
            raise ValueError("empty frame sequence")
        if schedule is None:
            schedule = build_schedule(
                len(frames),
                self.config.keyframe_interval,
                route_previous_frame=self.config.route_previous_frame,
            )
        if len(schedule) != len(frames):
            raise ValueError("schedule length does not match frame count")
        state = self.new_state()
        return [self.forward_frame(f, e, state) for f, e in zip(frames, schedule)]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter {name}")
            if state[name].shape != p.data.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {state[name].shape} "
                    f"!= model shape {p.data.shape}"
                )
            p.data[...] = state[name]


def eval_offset_averaged(model: SlowFastModel, clips, keyframe_interval: int, metrics_fn):
    """Evaluate annotated clips at every keyframe offset and average.

    Each clip supplies at least K frames of history before its annotated
    final frame (shorter history falls back to the self-fill boot rule via
    clip truncation).  Returns per-offset metric dicts (plus gflops) and
    their unweighted mean.
    """
    from frameprop import flops as flops_mod

    clips = list(clips)
    if not clips:
        raise ValueError("empty evaluation dataset")
    k = keyframe_interval
    h, w = clips[0].frames[0].shape[-2:]
    per_offset: Dict[int, Dict[str, float]] = {}
    for d in range(k):
        schedule = build_schedule(d + 1, k, mode="eval_clip", offset=d)
        gflops = flops_mod.per_frame_gflops(model.config, (h, w), schedule)
        rows = []
        with no_grad():
            for clip in clips:
                t = len(clip.frames) - 1
                if t - d < 0:
                    raise ValueError(
                        f"clip too short for offset {d}: {len(clip.frames)} frames"
                    )
                window = [
                    tensor(clip.frames[i][None]) for i in range(t - d, t + 1)
                ]
                preds = model.forward_sequence(window, schedule)[-1]
                rows.append(metrics_fn(preds, clip))
        agg = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}
        agg["gflops_per_frame"] = gflops
        per_offset[d] = agg
    mean = {
        key: float(np.mean([per_offset[d][key] for d in per_offset]))
        for key in per_offset[0]
    }
    return per_offset, mean

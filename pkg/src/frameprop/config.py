"""Experiment configuration: flat ``key = value`` text files.

Lines hold one assignment each; ``#`` starts a comment; unknown keys are
rejected.  Parsing then serializing then parsing again yields an equal
config.  Encoder stage lists are derived from depth counts with a fixed
stride-4 recipe so the file stays flat.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

from frameprop.data import SequenceParams
from frameprop.network import ModelConfig, TaskSpec
from frameprop.training import LossConfig

VALID_TASKS = ("segmentation", "depth")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/experiment"
    # model geometry
    channels: int = 16
    slow_depth: int = 6
    fast_depth: int = 2
    fast_width: int = 0  # width of all but the last fast stage; 0 = channels
    se_reduction: int = 4
    decoder_width1: int = 0  # 0 = derive from channels
    decoder_width2: int = 0
    window: int = 5
    global_attention: bool = False
    keyframe_interval: int = 5
    propagation: bool = True
    route_previous_frame: bool = True
    tasks: Tuple[str, ...] = ("segmentation", "depth")
    # losses
    alpha: float = 1.0
    beta: float = 1.0
    seg_weight: float = 1.0
    depth_weight: float = 1.0
    # optimizer
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_epsilon: float = 1e-8
    disc_hidden: int = 16
    # training
    steps: int = 300
    clip_length: int = 6
    # dataset
    height: int = 48
    width: int = 64
    num_shapes: int = 3
    train_sequences: int = 6
    eval_sequences: int = 3
    frames_per_sequence: int = 12
    max_speed: int = 2
    noise: float = 0.1
    color_contrast: float = 1.0

    def __post_init__(self):
        if self.slow_depth < 2:
            raise ValueError("slow_depth must be >= 2")
        if self.fast_depth < 1:
            raise ValueError("fast_depth must be >= 1")
        if self.slow_depth <= self.fast_depth:
            raise ValueError("slow_depth must exceed fast_depth")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.clip_length < 1 or self.clip_length > self.frames_per_sequence:
            raise ValueError("clip_length must be in [1, frames_per_sequence]")
        if self.frames_per_sequence < self.keyframe_interval + 1:
            raise ValueError("frames_per_sequence must exceed keyframe_interval")
        if not self.tasks:
            raise ValueError("at least one task required")
        for t in self.tasks:
            if t not in VALID_TASKS:
                raise ValueError(f"unknown task {t!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        # dataset and loss bounds are enforced by SequenceParams/LossConfig;
        # build them eagerly so a bad file fails at load time
        self.sequence_params()
        self.loss_config()
        self.model_config()

    @property
    def num_classes(self) -> int:
        return self.num_shapes + 1

    def _stages(self, depth: int, width: int = 0) -> List[Tuple[int, int]]:
        # stride-4 recipe: one stride-4 patchify stage when depth is 1,
        # otherwise stride 2 at the first and the middle stage
        if depth == 1:
            return [(self.channels, 4)]
        strides = [1] * depth
        strides[0] = 2
        strides[depth // 2] = 2
        widths = [width or self.channels] * (depth - 1) + [self.channels]
        return list(zip(widths, strides))

    def model_config(self) -> ModelConfig:
        widths = (
            self.decoder_width1 or 2 * self.channels,
            self.decoder_width2 or self.channels,
        )
        tasks = []
        for t in self.tasks:
            if t == "segmentation":
                tasks.append(TaskSpec("segmentation", "segmentation", self.num_classes))
            else:
                tasks.append(TaskSpec("depth", "depth", 1))
        return ModelConfig(
            channels=self.channels,
            slow_stages=self._stages(self.slow_depth),
            fast_stages=self._stages(self.fast_depth, self.fast_width),
            se_reduction=self.se_reduction,
            window=self.window,
            use_global_attention=self.global_attention,
            decoder_widths=widths,
            tasks=tasks,
            keyframe_interval=self.keyframe_interval,
            propagate=self.propagation,
            route_previous_frame=self.route_previous_frame,
        )

    def sequence_params(self) -> SequenceParams:
        return SequenceParams(
            height=self.height,
            width=self.width,
            num_shapes=self.num_shapes,
            num_frames=self.frames_per_sequence,
            max_speed=self.max_speed,
            noise=self.noise,
            color_contrast=self.color_contrast,
            window=self.window,
            feature_stride=4,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            beta=self.beta,
            task_weights={"segmentation": self.seg_weight, "depth": self.depth_weight},
        )


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, field_type):
    raw = raw.strip()
    if field_type is bool:
        if raw not in ("true", "false"):
            raise ValueError(f"boolean must be 'true' or 'false', got {raw!r}")
        return raw == "true"
    if field_type is int:
        return int(raw)
    if field_type is float:
        return float(raw)
    if field_type is str:
        return raw
    # tuple of task names
    return tuple(part.strip() for part in raw.split(",") if part.strip())


_FIELD_TYPES = {
    f.name: (bool if f.type == "bool" else
             int if f.type == "int" else
             float if f.type == "float" else
             str if f.type == "str" else tuple)
    for f in dataclasses.fields(ExperimentConfig)
}


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw, _FIELD_TYPES[key])
    return ExperimentConfig(**values)


def serialize_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(ExperimentConfig):
        lines.append(f"{f.name} = {_format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(serialize_config(config))

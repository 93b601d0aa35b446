"""Synthetic moving-shape video sequences with dense labels.

Each sequence renders a handful of axis-aligned rectangles and circles
with distinct colors, constant integer pixel velocities and constant
per-object depth over a noise-textured background.  Rendering is
occlusion-consistent: color, class label and depth at every pixel come
from the nearest object (or the background).  Generation is a pure
function of (params, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

BACKGROUND_DEPTH = 10.0

# saturated, mutually distant colors for up to 8 object classes
PALETTE = [
    (0.9, 0.15, 0.15),
    (0.15, 0.8, 0.2),
    (0.2, 0.3, 0.95),
    (0.95, 0.85, 0.1),
    (0.85, 0.2, 0.85),
    (0.1, 0.85, 0.85),
    (0.95, 0.55, 0.1),
    (0.55, 0.3, 0.05),
]


@dataclass
class SequenceParams:
    height: int = 48
    width: int = 64
    num_shapes: int = 3
    num_frames: int = 12
    max_speed: int = 2
    noise: float = 0.1
    # contrast < 1 pulls object colors toward mid-gray, making per-pixel
    # class identity harder to read through the noise
    color_contrast: float = 1.0
    # motion must stay capturable by the attention window at feature scale
    window: int = 5
    feature_stride: int = 4

    def __post_init__(self):
        if not 1 <= self.num_shapes <= 8:
            raise ValueError(f"num_shapes must be in [1, 8], got {self.num_shapes}")
        if self.height < 32 or self.width < 32:
            raise ValueError("height and width must be >= 32")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        cap = (self.window // 2) * self.feature_stride
        if self.max_speed < 0 or self.max_speed > cap:
            raise ValueError(
                f"max_speed {self.max_speed} outside [0, {cap}] "
                f"(window {self.window}, stride {self.feature_stride})"
            )
        if self.noise < 0 or self.noise > 0.5:
            raise ValueError("noise must be in [0, 0.5]")
        if not 0.05 <= self.color_contrast <= 1.0:
            raise ValueError("color_contrast must be in [0.05, 1]")


@dataclass
class SyntheticSequence:
    frames: List[np.ndarray]        # [3,H,W] float64 in [0,1]
    seg_labels: List[np.ndarray]    # [H,W] int64, 0 = background
    depth_maps: List[np.ndarray]    # [H,W] float64, nearer = smaller
    velocities: List[Tuple[int, int]]  # (rows, cols) pixels per frame
    seed: int = 0
    params: SequenceParams = field(default_factory=SequenceParams)


def _shape_mask(kind, center_i, center_j, size_a, size_b, height, width):
    ii, jj = np.mgrid[0:height, 0:width]
    if kind == "rect":
        return (
            (np.abs(ii - center_i) <= size_a) & (np.abs(jj - center_j) <= size_b)
        )
    return (ii - center_i) ** 2 + (jj - center_j) ** 2 <= size_a**2


def generate_sequence(params: SequenceParams, seed: int) -> SyntheticSequence:
    """Deterministic sequence for a given (params, seed)."""
    rng = np.random.default_rng(seed)
    h, w, s = params.height, params.width, params.num_shapes

    background = 0.45 + rng.uniform(-params.noise, params.noise, (3, h, w))
    noise_field = rng.uniform(-params.noise / 2, params.noise / 2, (3, h, w))

    # class identity is carried by shape kind and depth, which are fixed
    # across sequences (odd classes are rectangles, even ones circles);
    # colors are distinct within a sequence but reshuffled between
    # sequences, so per-pixel color never identifies the class
    kinds = ["rect" if cls % 2 == 1 else "circle" for cls in range(1, s + 1)]
    sizes = []
    for kind in kinds:
        if kind == "rect":
            sizes.append((int(rng.integers(h // 6, h // 3)), int(rng.integers(w // 6, w // 3))))
        else:
            sizes.append((int(rng.integers(h // 6, h // 4 + 1)), 0))
    centers = [
        (int(rng.integers(h // 4, 3 * h // 4)), int(rng.integers(w // 4, 3 * w // 4)))
        for _ in range(s)
    ]
    velocities = [
        (
            int(rng.integers(-params.max_speed, params.max_speed + 1)),
            int(rng.integers(-params.max_speed, params.max_speed + 1)),
        )
        for _ in range(s)
    ]
    k = params.color_contrast
    palette = [PALETTE[i] for i in rng.permutation(len(PALETTE))[:s]]
    colors = [tuple(0.5 + (ch - 0.5) * k for ch in c) for c in palette]
    depths = np.linspace(1.5, 4.5, s) if s > 1 else np.array([2.0])

    frames, labels, depth_maps = [], [], []
    for t in range(params.num_frames):
        frame = background.copy()
        label = np.zeros((h, w), dtype=np.int64)
        depth = np.full((h, w), BACKGROUND_DEPTH)
        # paint far-to-near so the nearest object wins every pixel
        order = np.argsort(-depths)
        for obj in order:
            ci = centers[obj][0] + t * velocities[obj][0]
            cj = centers[obj][1] + t * velocities[obj][1]
            mask = _shape_mask(kinds[obj], ci, cj, sizes[obj][0], sizes[obj][1], h, w)
            for ch in range(3):
                frame[ch][mask] = colors[obj][ch]
            label[mask] = obj + 1
            depth[mask] = depths[obj]
        frame = np.clip(frame + noise_field, 0.0, 1.0)
        frames.append(frame)
        labels.append(label)
        depth_maps.append(depth)
    return SyntheticSequence(
        frames=frames,
        seg_labels=labels,
        depth_maps=depth_maps,
        velocities=velocities,
        seed=seed,
        params=params,
    )


def downsample_map(arr: np.ndarray, stride: int) -> np.ndarray:
    """Center-sample a [H,W] map to feature resolution (nearest neighbor)."""
    off = stride // 2
    return arr[off::stride, off::stride]

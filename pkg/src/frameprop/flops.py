"""Analytic multiply-accumulate, FLOP and parameter accounting.

Counting conventions (documented, test-pinned):
  - a conv/linear layer contributes H'*W'*Cout*Cin*kh*kw MACs and
    Cout*Cin*kh*kw + Cout parameters;
  - attention contributes its shared-conv MACs on both maps plus two
    dense-window terms (logit inner products and the weighted gather),
    counted over all window offsets including masked boundary ones;
  - softmax exponentials and divides are 1 FLOP each, kept out of MACs;
  - pooling and pointwise activations are not counted;
  - FLOPs = MACs * mode multiplier (+ softmax FLOPs for attention rows),
    with mode ``mac_as_1`` by default and ``mac_as_2`` available.

Published cost figures for the optical-flow and spatially-variant-conv
propagation alternatives are carried as labeled constants, never computed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

MODE_MULTIPLIER = {"mac_as_1": 1, "mac_as_2": 2}

# Published reference costs for feature-propagation alternatives at input
# size 258x512 (and the local-attention figure reported alongside them).
PUBLISHED_PROPAGATION_COSTS = [
    ("optical-flow @258x512", 7.5, 23, "38M"),
    ("svc @258x512", 5.4, 3, "3M"),
    ("local-attention @258x512", 0.2, 1, "0.2M"),
]
PUBLISHED_NOTE = "published, not computed"


@dataclass
class FlopEntry:
    name: str
    macs: int
    flops: int
    params: int


@dataclass
class FlopReport:
    entries: List[FlopEntry] = field(default_factory=list)
    counting_mode: str = "mac_as_1"
    per_frame_macs: Optional[float] = None
    per_frame_flops: Optional[float] = None
    schedule_note: str = ""

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    def table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [len("per-frame average")]) + 2
        lines = [f"{'layer':<{width}}{'macs':>14}{'flops':>14}{'params':>10}"]
        lines.append("-" * (width + 38))
        for e in self.entries:
            lines.append(f"{e.name:<{width}}{e.macs:>14}{e.flops:>14}{e.params:>10}")
        lines.append("-" * (width + 38))
        lines.append(
            f"{'total':<{width}}{self.total_macs:>14}{self.total_flops:>14}"
            f"{self.total_params:>10}"
        )
        if self.per_frame_flops is not None:
            lines.append(
                f"{'per-frame average':<{width}}{self.per_frame_macs:>14.1f}"
                f"{self.per_frame_flops:>14.1f}{'':>10}  [{self.schedule_note}]"
            )
            lines.append(
                f"{'per-frame average':<{width}} {self.per_frame_flops / 1e9:.6f} GFLOPs"
            )
        lines.append("")
        lines.append(f"reference propagation costs ({PUBLISHED_NOTE}):")
        for name, gflops, convs, params in PUBLISHED_PROPAGATION_COSTS:
            lines.append(
                f"  {name:<28}{gflops:>6} GFLOPs{convs:>5} conv{params:>8} params"
            )
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "macs", "flops", "params"])
            for e in self.entries:
                writer.writerow([e.name, e.macs, e.flops, e.params])
            writer.writerow(["total", self.total_macs, self.total_flops, self.total_params])
            for name, gflops, convs, params in PUBLISHED_PROPAGATION_COSTS:
                writer.writerow([f"{name} [{PUBLISHED_NOTE}]", f"{gflops} GFLOPs", f"{convs} conv", params])


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ValueError(f"invalid conv geometry: size {size}, kernel {kernel}, "
                         f"stride {stride}, padding {padding}")
    return span // stride + 1


def count_conv(
    h: int, w: int, cin: int, cout: int, kh: int, kw: int,
    stride: int = 1, padding: int = 0,
) -> Tuple[int, int]:
    """(MACs, params) of one conv layer, bias included in params."""
    if min(h, w, cin, cout, kh, kw) < 1 or stride < 1 or padding < 0:
        raise ValueError("conv dimensions must be positive")
    ho = conv_out(h, kh, stride, padding)
    wo = conv_out(w, kw, stride, padding)
    macs = ho * wo * cout * cin * kh * kw
    params = cout * cin * kh * kw + cout
    return macs, params


def count_local_attention(h: int, w: int, c: int, window: int) -> Tuple[int, int]:
    """(MACs, params) of one windowed attention edge.

    The shared 3x3 conv runs on both maps; the two window terms (logits
    and gather) each cost H*W*L^2*C.  Softmax FLOPs are reported by
    ``attention_softmax_flops`` and are not MACs.
    """
    if min(h, w, c) < 1:
        raise ValueError("dimensions must be positive")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    conv_macs, conv_params = count_conv(h, w, c, c, 3, 3, stride=1, padding=1)
    attn_macs = 2 * h * w * window * window * c
    return 2 * conv_macs + attn_macs, conv_params


def attention_softmax_flops(h: int, w: int, window: int) -> int:
    """One exp and one divide per window position per pixel."""
    return 2 * h * w * window * window


def count_global_attention(h: int, w: int, c: int) -> int:
    """MACs of dense all-pairs attention (same shared-conv embedding)."""
    if min(h, w, c) < 1:
        raise ValueError("dimensions must be positive")
    conv_macs, _ = count_conv(h, w, c, c, 3, 3, stride=1, padding=1)
    return 2 * conv_macs + 2 * (h * w) ** 2 * c


def global_softmax_flops(h: int, w: int) -> int:
    return 2 * (h * w) ** 2


def count_local_attention_terms(h: int, w: int, c: int, window: int) -> int:
    """Just the two window terms, without the shared conv."""
    return 2 * h * w * window * window * c


def count_global_attention_terms(h: int, w: int, c: int) -> int:
    return 2 * (h * w) ** 2 * c


def model_report(
    model_config,
    input_shape: Tuple[int, int],
    schedule,
    counting_mode: str = "mac_as_1",
) -> FlopReport:
    """Per-layer cost rows plus the per-frame average over a schedule.

    ``model_config`` is a ``frameprop.network.ModelConfig``; ``schedule``
    is a list of ``frameprop.network.ScheduleEntry``.  Entry rows carry
    the cost of one invocation of each distinct layer; the per-frame
    average walks the schedule and sums the layers active on each frame.
    """
    if counting_mode not in MODE_MULTIPLIER:
        raise ValueError(f"unknown counting mode {counting_mode}")
    mult = MODE_MULTIPLIER[counting_mode]
    h, w = input_shape
    cfg = model_config
    report = FlopReport(counting_mode=counting_mode)

    def add(name, macs, params, softmax_flops=0):
        report.entries.append(
            FlopEntry(name=name, macs=macs, flops=macs * mult + softmax_flops, params=params)
        )

    from frameprop.network import stage_kernel

    branch_costs = {}
    for branch_name, stages in (("slow", cfg.slow_stages), ("fast", cfg.fast_stages)):
        cin = 3
        hh, ww = h, w
        total = 0
        for i, (cout, stride) in enumerate(stages):
            k = stage_kernel(stride)
            macs, params = count_conv(hh, ww, cin, cout, k, k, stride=stride, padding=1)
            add(f"{branch_name}.stage{i}", macs, params)
            total += macs
            hh, ww = conv_out(hh, k, stride, 1), conv_out(ww, k, stride, 1)
            cin = cout
        branch_costs[branch_name] = total
    fh, fw = hh, ww  # both branches end at the same feature resolution
    c = cfg.channels

    mid = max(1, c // cfg.se_reduction)
    task_fixed = {}   # per-task cost always paid (SE + decoder + head)
    task_edge = {}    # cost of one attention edge
    for m, task in enumerate(cfg.tasks):
        fixed = 0
        macs, params = count_conv(1, 1, c, mid, 1, 1)
        add(f"task{m}.se.reduce", macs, params)
        fixed += macs
        macs, params = count_conv(1, 1, mid, c, 1, 1)
        add(f"task{m}.se.expand", macs, params)
        fixed += macs
        if cfg.use_global_attention:
            edge_macs = count_global_attention(fh, fw, c)
            edge_soft = global_softmax_flops(fh, fw)
            _, edge_params = count_conv(fh, fw, c, c, 3, 3, stride=1, padding=1)
        else:
            edge_macs, edge_params = count_local_attention(fh, fw, c, cfg.window)
            edge_soft = attention_softmax_flops(fh, fw, cfg.window)
        add(f"task{m}.key_edge", edge_macs, edge_params, softmax_flops=edge_soft)
        add(f"task{m}.prev_edge", edge_macs, edge_params, softmax_flops=edge_soft)
        task_edge[m] = edge_macs * mult + edge_soft
        w1, w2 = cfg.decoder_widths
        macs, params = count_conv(fh, fw, 3 * c, w1, 3, 3, stride=1, padding=1)
        add(f"task{m}.decode0", macs, params)
        fixed += macs
        macs, params = count_conv(fh, fw, w1, w2, 1, 1)
        add(f"task{m}.decode1", macs, params)
        fixed += macs
        macs, params = count_conv(fh, fw, w2, w2, 1, 1)
        add(f"task{m}.decode2", macs, params)
        fixed += macs
        macs, params = count_conv(fh, fw, w2, task.out_channels, 1, 1)
        add(f"task{m}.head", macs, params)
        fixed += macs
        task_fixed[m] = fixed

    if cfg.use_global_attention:
        edge_mac = count_global_attention(fh, fw, c)
    else:
        edge_mac = count_local_attention(fh, fw, c, cfg.window)[0]

    if schedule:
        total_flops = 0
        total_macs = 0
        for entry in schedule:
            edges = (entry.keyframe_source is not None) + (
                entry.previous_source is not None
            )
            frame_macs = branch_costs[entry.branch]
            frame_flops = branch_costs[entry.branch] * mult
            for m in range(len(cfg.tasks)):
                frame_macs += task_fixed[m] + edges * edge_mac
                frame_flops += task_fixed[m] * mult + edges * task_edge[m]
            total_flops += frame_flops
            total_macs += frame_macs
        report.per_frame_flops = total_flops / len(schedule)
        report.per_frame_macs = total_macs / len(schedule)
        report.schedule_note = f"{len(schedule)} frames"
    return report


def per_frame_gflops(model_config, input_shape, schedule, counting_mode="mac_as_1") -> float:
    rep = model_report(model_config, input_shape, schedule, counting_mode)
    return (rep.per_frame_flops or 0.0) / 1e9

"""Naive loop-based reference kernels.

These are deliberately slow, share no code with the vectorized ops, and
serve two purposes: value oracles for the fast implementations and
instrumented multiply-accumulate counting for the cost model.  Counting
operates on explicitly zero-padded arrays, so boundary positions are
counted like interior ones, matching the dense-window cost formulas.
"""

from __future__ import annotations

from typing import Optional

import numpy as np


class MacCounter:
    """Mutable multiply-accumulate tally threaded through the naive kernels."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def naive_conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: int = 0,
    counter: Optional[MacCounter] = None,
) -> np.ndarray:
    """Direct nested-loop cross-correlation on [B,Cin,H,W]."""
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"input channels ({cin}) != kernel in_channels ({cin_w})")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError("invalid conv geometry")
    ho = span_h // stride + 1
    wo = span_w // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[n, c, i * stride + u, j * stride + v]
                                    * weight[o, c, u, v]
                                )
                    out[n, o, i, j] = acc
            if bias is not None:
                out[n, o] += bias[o]
    if counter is not None:
        counter.add(b * cout * ho * wo * cin * kh * kw)
    return out

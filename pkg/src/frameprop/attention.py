"""Inter-frame local attention.

For every pixel of a query feature map, similarity logits are computed
against an odd LxL window of a source feature map (channel inner products
of a shared 3x3 conv embedding of both maps), normalized with a masked
softmax over in-bounds offsets, and used as weights for a gathered sum of
the source features.  A brute-force loop oracle and a dense global
variant back the vectorized path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from frameprop.autodiff import (
    ShapeError,
    Tensor,
    bmm,
    conv2d,
    permute,
    reshape,
    softmax,
    tensor,
    window_inner,
    window_offsets,
    window_valid_mask,
    window_weighted_sum,
)
from frameprop.reference import MacCounter, naive_conv2d

GLOBAL_PIXEL_CAP = 64 * 64


@dataclass
class AttentionConfig:
    """Window size (odd), channel count preserved by the shared embedding."""

    window: int = 5
    channels: int = 16

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 1, got {self.window}")
        if self.channels < 1:
            raise ValueError("channels must be positive")


@dataclass
class AttentionWeights:
    """Per-pixel window weights [B, L*L, H, W] plus the in-bounds mask."""

    values: Tensor
    valid_mask: np.ndarray
    window: int


class LocalAttention:
    """Windowed cross-frame attention with one shared 3x3 C->C embedding conv.

    The conv is applied to both the query and the source map (the sharing
    is structural: one parameter set per module instance).
    """

    def __init__(self, config: AttentionConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        c = config.channels
        if rng is None:
            rng = np.random.default_rng(0)
        scale = np.sqrt(2.0 / (c * 9))
        self.weight = tensor(rng.standard_normal((c, c, 3, 3)) * scale, requires_grad=True)
        self.bias = tensor(np.zeros(c), requires_grad=True)

    def parameters(self):
        return [("conv.weight", self.weight), ("conv.bias", self.bias)]

    def _check(self, query: Tensor, source: Tensor) -> Tuple[int, int, int, int]:
        if query.shape != source.shape:
            raise ShapeError(f"query shape {query.shape} != source shape {source.shape}")
        if query.data.ndim != 4:
            raise ShapeError(f"expected [B,C,H,W], got {query.shape}")
        b, c, h, w = query.shape
        if c != self.config.channels:
            raise ShapeError(f"channels {c} != configured {self.config.channels}")
        if self.config.window > 2 * min(h, w) - 1:
            raise ShapeError(
                f"window {self.config.window} degenerate for {h}x{w} map"
            )
        return b, c, h, w

    def embed(self, feats: Tensor) -> Tensor:
        return conv2d(feats, self.weight, self.bias, stride=1, padding=1)

    def compute_weights(self, query: Tensor, source: Tensor) -> AttentionWeights:
        """Normalized window weights for propagating ``source`` onto ``query``."""
        b, _, h, w = self._check(query, source)
        L = self.config.window
        logits = window_inner(self.embed(query), self.embed(source), L)
        mask = window_valid_mask(b, h, w, L)
        values = softmax(logits, axis=1, mask=mask)
        return AttentionWeights(values=values, valid_mask=mask, window=L)

    @staticmethod
    def propagate(source: Tensor, weights: AttentionWeights) -> Tensor:
        """Weighted gather of ``source`` under precomputed window weights."""
        return window_weighted_sum(weights.values, source, weights.window)

    def forward(self, source: Tensor, query: Tensor) -> Tensor:
        """Propagate ``source`` features onto the ``query`` frame's grid."""
        return self.propagate(source, self.compute_weights(query, source))

    __call__ = forward

    # -- independent oracle --------------------------------------------------

    def reference(
        self,
        source: Tensor,
        query: Tensor,
        counter: Optional[MacCounter] = None,
    ) -> np.ndarray:
        """Direct nested-loop evaluation of the same contract.

        Shares only the convolution contract with the fast path (and uses
        the naive conv at that).  With ``counter`` given, tallies one MAC
        per scalar multiply-add over the dense (zero-padded) window, which
        is the convention of the analytic cost model.
        """
        b, c, h, w = self._check(query, source)
        L = self.config.window
        r = L // 2
        e_q = naive_conv2d(query.data, self.weight.data, self.bias.data, 1, 1, counter)
        e_s = naive_conv2d(source.data, self.weight.data, self.bias.data, 1, 1, counter)
        pad = ((0, 0), (0, 0), (r, r), (r, r))
        e_s_pad = np.pad(e_s, pad)
        src_pad = np.pad(source.data, pad)
        offsets = window_offsets(L)
        out = np.zeros_like(source.data)
        for n in range(b):
            for i in range(h):
                for j in range(w):
                    logits = np.empty(L * L)
                    valid = np.zeros(L * L, dtype=bool)
                    for idx, (di, dj) in enumerate(offsets):
                        acc = 0.0
                        for ch in range(c):
                            acc += e_q[n, ch, i, j] * e_s_pad[n, ch, i + di + r, j + dj + r]
                        logits[idx] = acc
                        valid[idx] = 0 <= i + di < h and 0 <= j + dj < w
                    if counter is not None:
                        counter.add(L * L * c)
                    m = logits[valid].max()
                    weights = np.zeros(L * L)
                    weights[valid] = np.exp(logits[valid] - m)
                    weights /= weights[valid].sum()
                    for ch in range(c):
                        acc = 0.0
                        for idx, (di, dj) in enumerate(offsets):
                            acc += weights[idx] * src_pad[n, ch, i + di + r, j + dj + r]
                        out[n, ch, i, j] = acc
                    if counter is not None:
                        counter.add(L * L * c)
        return out

    # -- dense variant ---------------------------------------------------------

    def global_attention(self, source: Tensor, query: Tensor) -> Tensor:
        """Attention over all pixel pairs (no window bound).

        Cost grows as (H*W)^2 * C, so maps above GLOBAL_PIXEL_CAP pixels
        are refused.
        """
        b, c, h, w = self._check(query, source)
        if h * w > GLOBAL_PIXEL_CAP:
            raise ShapeError(
                f"global attention refused for {h}x{w} map (> {GLOBAL_PIXEL_CAP} pixels)"
            )
        n = h * w
        e_q = reshape(self.embed(query), (b, c, n))
        e_s = reshape(self.embed(source), (b, c, n))
        logits = bmm(permute(e_q, (0, 2, 1)), e_s)  # [B, N_query, N_source]
        weights = softmax(logits, axis=2)
        gathered = bmm(weights, permute(reshape(source, (b, c, n)), (0, 2, 1)))
        return reshape(permute(gathered, (0, 2, 1)), (b, c, h, w))

    def global_weights(self, query: Tensor, source: Tensor) -> Tensor:
        """Dense [B, N, N] weight rows (each row sums to 1)."""
        b, c, h, w = self._check(query, source)
        n = h * w
        e_q = reshape(self.embed(query), (b, c, n))
        e_s = reshape(self.embed(source), (b, c, n))
        return softmax(bmm(permute(e_q, (0, 2, 1)), e_s), axis=2)

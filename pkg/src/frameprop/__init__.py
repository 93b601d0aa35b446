"""frameprop: local-attention feature propagation for slow/fast video inference.

A small self-contained stack: a numpy-backed autodiff engine, an
inter-frame local attention operator with independent oracles, a
two-branch multi-task video model, adversarial feature-mimicking
training, analytic FLOP accounting, and a benchmark CLI over synthetic
moving-shape videos.
"""

from frameprop.autodiff import Tensor, tensor, no_grad, finite_difference_check

__all__ = ["Tensor", "tensor", "no_grad", "finite_difference_check"]
__version__ = "0.1.0"

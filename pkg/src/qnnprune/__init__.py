"""Structured pruning for quantized neural networks.

Quantized models (binary and 2-bit) are pruned at kernel and filter level
using distances between real-valued weights and their quantized images,
with per-layer pruning ratios chosen by Gaussian-process Bayesian
optimization.  A small CPU inference/training engine evaluates and
fine-tunes the pruned models.
"""

from qnnprune.errors import QnnError

__version__ = "0.1.0"

__all__ = ["QnnError", "__version__"]

"""Quadratic neurons, quadratic depthwise convolution and QuadraNet on CPU.

Modules
-------
tensor, autograd   float64 array ops and a tape-based reverse-mode engine
quadneuron         full-rank and low-rank quadratic neurons
quadconv           quadratic depthwise/pointwise convolution and its backward
blocks, network    QuadraBlock and friends, the four-stage pyramid, snapshots
costmodel          parameters, MACs, intermediate states, proxy latency
nas                latency-constrained regularized evolution
data, train        datasets, IDX files, AdamW and the epoch loop
cli                the ``quadranet`` command
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]

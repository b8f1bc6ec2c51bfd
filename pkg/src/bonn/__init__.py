"""1-bit CNN training with Bayesian kernel and feature losses.

Training runs on a dense float path with hand-written backward passes;
deployment uses bit-packed kernels and XNOR/popcount convolution.
"""

__version__ = "0.1.0"

"""bicubicpp: a CPU-scale x3 super-resolution toolkit.

Train a small downscale-then-superresolve network, structurally prune its
channels against validation PSNR, strip convolution biases, and benchmark
the result against plain bicubic upscaling.
"""

__version__ = "0.1.0"

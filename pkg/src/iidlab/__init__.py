"""Desk-scale intrinsic image decomposition laboratory.

Modules: imagecore (rasters and I/O), priors (physics/statistics priors),
synthgen (procedural Lambertian scenes), autodiff (reverse-mode tensor
kernel), signet (the progressive network and training loop), losses,
metrics, and cli.
"""

__version__ = "0.1.0"

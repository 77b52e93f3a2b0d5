"""Patho-realistic IVUS image simulation.

Pipeline: tissue echogenicity maps -> pseudo B-mode speckle simulation in
the polar domain -> low-resolution adversarial refinement -> high-resolution
adversarial upsampling -> Cartesian scan conversion, plus the region-wise
speckle-statistics evaluation tooling.

The GAN modules (:mod:`ivusim.models`, :mod:`ivusim.training`) import torch
and are intentionally not imported here; everything else is NumPy/SciPy.
"""
from .backend import KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]

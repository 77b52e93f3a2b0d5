"""Image containers and the coordinate-domain operations shared by all stages.

Conventions
-----------
Polar images: rows index the radial (depth) axis, columns the angular axis.
Row ``i`` sits at radius ``i / n_radial * R`` so row 0 is the catheter
center; column ``j`` sits at angle ``2*pi*j / n_angular`` and the angular
axis wraps around. Wave propagation in the speckle simulator runs along
rows ("vertically").

Cartesian images: square grids with pixel (i, j) centered at
``(i + 0.5, j + 0.5)``, the vessel center at ``(side/2, side/2)`` and the
valid field of view the inscribed disk of radius ``side/2``; everything
outside is exactly 0. Angles increase from the +x axis toward +y (rows).

Intensities are stored as float64 in [0, 1]; quantization to 8 bit happens
only in the PNG I/O helpers. Filenames carry a ``.polar.`` / ``.cart.``
domain tag by convention (see README).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import backend


class TissueClass(enum.IntEnum):
    """The three vessel regions delimited by the lumen and EEL contours."""

    LUMEN = 0
    MEDIA = 1
    EXTERNA = 2


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.isfinite(data).sum())
        raise ValueError(f"{what} contains {bad} non-finite values")


@dataclass(frozen=True)
class PolarImage:
    """2D intensity grid in polar coordinates (rows = radius, cols = angle)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"polar image must be 2D, got shape {data.shape}")
        _check_finite(data, "polar image")
        object.__setattr__(self, "data", data)

    @property
    def n_radial(self) -> int:
        return self.data.shape[0]

    @property
    def n_angular(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CartesianImage:
    """Square intensity grid; pixels outside the inscribed disk are 0."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValueError(f"cartesian image must be square, got shape {data.shape}")
        _check_finite(data, "cartesian image")
        object.__setattr__(self, "data", data)

    @property
    def side(self) -> int:
        return self.data.shape[0]

    @property
    def valid_radius(self) -> float:
        return self.side / 2.0


def polar_to_cartesian(img: PolarImage, side: int) -> CartesianImage:
    """Scan-convert a polar image onto a side x side Cartesian grid.

    Output pixel at radius r, angle a bilinearly samples the polar grid at
    (r / valid_radius * n_radial, a / 2pi * n_angular) with angular
    wraparound; pixels outside the inscribed disk are 0.
    """
    if side < 2:
        raise ValueError(f"side must be >= 2, got {side}")
    return CartesianImage(backend.scan_polar_to_cart(img.data, side))


def cartesian_to_polar(img: CartesianImage, n_radial: int, n_angular: int) -> PolarImage:
    """Inverse scan conversion: bilinear sampling along rays from the center.

    Row 0 (radius 0) replicates the center pixel across all angles.
    """
    if n_radial < 2 or n_angular < 2:
        raise ValueError(
            f"polar dims must be >= 2, got ({n_radial}, {n_angular})"
        )
    return PolarImage(backend.scan_cart_to_polar(img.data, n_radial, n_angular))


def normalize_intensity(data: np.ndarray) -> np.ndarray:
    """Affinely rescale to [0, 1]; a constant image maps to all zeros."""
    data = np.asarray(data, dtype=np.float64)
    if not np.any(np.isfinite(data)):
        raise ValueError("cannot normalize: no finite pixels")
    _check_finite(data, "image")
    lo = data.min()
    hi = data.max()
    if hi == lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def _area_weights(n_src: int, n_tgt: int) -> np.ndarray:
    # Target cell t covers [t*n_src/n_tgt, (t+1)*n_src/n_tgt) in source-index
    # space; weights are fractional overlaps normalized to sum to 1 per row.
    scale = n_src / n_tgt
    w = np.zeros((n_tgt, n_src))
    for t in range(n_tgt):
        lo = t * scale
        hi = (t + 1) * scale
        s0 = int(np.floor(lo))
        s1 = min(int(np.ceil(hi)), n_src)
        for s in range(s0, s1):
            w[t, s] = (min(hi, s + 1) - max(lo, s)) / scale
    return w


def _linear_weights(n_src: int, n_tgt: int) -> np.ndarray:
    # Pixel-center aligned linear interpolation, clamped at the ends.
    w = np.zeros((n_tgt, n_src))
    x = (np.arange(n_tgt) + 0.5) * n_src / n_tgt - 0.5
    x = np.clip(x, 0.0, n_src - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    f = x - i0
    w[np.arange(n_tgt), i0] += 1.0 - f
    w[np.arange(n_tgt), i1] += f
    return w


def _resample_axis(data: np.ndarray, n_tgt: int, axis: int) -> np.ndarray:
    n_src = data.shape[axis]
    if n_tgt == n_src:
        return data
    # Integer-factor downsampling reduces to an exact block mean.
    if n_tgt < n_src and n_src % n_tgt == 0:
        k = n_src // n_tgt
        moved = np.moveaxis(data, axis, 0)
        blocked = moved.reshape(n_tgt, k, *moved.shape[1:]).mean(axis=1)
        return np.moveaxis(blocked, 0, axis)
    w = _area_weights(n_src, n_tgt) if n_tgt < n_src else _linear_weights(n_src, n_tgt)
    return np.moveaxis(w @ np.moveaxis(data, axis, 0), 0, axis)


def resize(img: PolarImage, n_radial: int, n_angular: int) -> PolarImage:
    """Resample per axis: area averaging when shrinking, bilinear when growing."""
    if n_radial < 2 or n_angular < 2:
        raise ValueError(f"target dims must be >= 2, got ({n_radial}, {n_angular})")
    data = _resample_axis(img.data, n_radial, axis=0)
    data = _resample_axis(data, n_angular, axis=1)
    return PolarImage(data)


# ---------------------------------------------------------------------------
# 8-bit grayscale PNG I/O. The domain tag lives in the filename by
# convention: `<stem>.polar.png` or `<stem>.cart.png`.

def write_png(path, data: np.ndarray) -> None:
    """Quantize [0, 1] intensities to 8 bit and write a grayscale PNG."""
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, "image")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError(
            f"intensities must be in [0, 1] before quantization, "
            f"got range [{data.min():.4g}, {data.max():.4g}]"
        )
    q = np.round(data * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG back into float64 intensities in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_mask_png(path, labels: np.ndarray) -> None:
    """Write tissue class ids (0/1/2) losslessly as an 8-bit PNG."""
    labels = np.asarray(labels)
    if not np.isin(labels, [int(c) for c in TissueClass]).all():
        raise ValueError("mask contains values outside the tissue classes")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        labels = np.asarray(im, dtype=np.uint8)
    if not np.isin(labels, [int(c) for c in TissueClass]).all():
        raise ValueError(f"{path} is not a tissue class mask")
    return labels

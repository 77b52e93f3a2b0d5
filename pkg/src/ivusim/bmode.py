"""Speckle-bearing pseudo B-mode simulation in the polar domain.

A dense field of per-pixel scatterers (zero-mean Gaussian amplitudes scaled
by the echogenicity map) is correlated with a separable, space-invariant
point spread function; the axial direction is the row axis, matching wave
propagation "down" the polar grid. Envelope detection takes the analytic
signal magnitude along each column and log compression maps the result into
[0, 1] display range.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from . import backend
from .dataset import EchogenicityMap
from .imaging import PolarImage

DEFAULT_DYNAMIC_RANGE_DB = 40.0


@dataclass(frozen=True)
class ScattererField:
    """Signed scatterer amplitudes on the polar grid."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"scatterer field must be 2D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("scatterer field contains non-finite values")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class RFImage:
    """Pre-envelope radio-frequency-like image (signed)."""

    data: np.ndarray


@dataclass(frozen=True)
class PSFParams:
    """Separable Gaussian-modulated point spread function.

    f0 is the axial carrier in cycles/pixel, sigmas in pixels; the kernel is
    truncated at +-3 sigma per axis.
    """

    f0: float = 0.25
    sigma_axial: float = 2.0
    sigma_lateral: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.f0 < 0.5:
            raise ValueError(f"f0 must be in (0, 0.5) cycles/pixel, got {self.f0}")
        if self.sigma_axial <= 0 or self.sigma_lateral <= 0:
            raise ValueError(
                f"degenerate PSF sigmas ({self.sigma_axial}, {self.sigma_lateral})"
            )


@dataclass(frozen=True)
class PsfKernel:
    """1D axial/lateral factors (each unit L2 norm is not guaranteed
    individually; their outer product has unit L2 norm)."""

    axial: np.ndarray
    lateral: np.ndarray

    @property
    def kernel2d(self) -> np.ndarray:
        return np.outer(self.axial, self.lateral)


def psf_kernel(params: PSFParams) -> PsfKernel:
    """Build the separable PSF: Gaussian-windowed cosine along the axial
    axis, plain Gaussian laterally, outer product normalized to unit L2.
    """
    ha = int(np.ceil(3.0 * params.sigma_axial))
    hl = int(np.ceil(3.0 * params.sigma_lateral))
    r = np.arange(-ha, ha + 1, dtype=np.float64)
    c = np.arange(-hl, hl + 1, dtype=np.float64)
    axial = np.exp(-(r**2) / (2.0 * params.sigma_axial**2)) * np.cos(
        2.0 * np.pi * params.f0 * r
    )
    lateral = np.exp(-(c**2) / (2.0 * params.sigma_lateral**2))
    axial /= np.sqrt((axial**2).sum())
    lateral /= np.sqrt((lateral**2).sum())
    return PsfKernel(axial, lateral)


def generate_scatterers(emap: EchogenicityMap, seed: int) -> ScattererField:
    """amplitude(p) = echogenicity(p) * g(p), g iid standard normal."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(emap.data.shape)
    return ScattererField(emap.data * g)


def convolve_rf(field: ScattererField, kernel) -> RFImage:
    """Correlate the scatterer field with the PSF (axial axis = rows).

    Zero padding, same-size output, correlation convention (no kernel flip).
    Separable kernels take the fast backend path; a raw 2D array kernel is
    handled directly.
    """
    data = field.data
    if isinstance(kernel, PsfKernel):
        ka, kl = kernel.axial.size, kernel.lateral.size
        if ka >= data.shape[0] or kl >= data.shape[1]:
            raise ValueError(
                f"kernel ({ka}x{kl}) must be smaller than the field {data.shape}"
            )
        return RFImage(backend.correlate_separable(data, kernel.axial, kernel.lateral))
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape[0] >= data.shape[0] or kernel.shape[1] >= data.shape[1]:
        raise ValueError(
            f"kernel {kernel.shape} must be smaller than the field {data.shape}"
        )
    return RFImage(ndimage.correlate(data, kernel, mode="constant", cval=0.0))


def envelope(rf: RFImage) -> np.ndarray:
    """Per-column analytic-signal magnitude |x + i H(x)| along rows."""
    data = np.asarray(rf.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("RF image contains non-finite values")
    return np.abs(signal.hilbert(data, axis=0))


def log_compress(env: np.ndarray, dynamic_range_db: float = DEFAULT_DYNAMIC_RANGE_DB) -> PolarImage:
    """20*log10(env/max) clipped to [-DR, 0], mapped affinely onto [0, 1]."""
    if dynamic_range_db <= 0:
        raise ValueError(f"dynamic range must be positive, got {dynamic_range_db}")
    env = np.asarray(env, dtype=np.float64)
    peak = env.max()
    if peak <= 0.0:
        return PolarImage(np.zeros_like(env))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(env / peak)
    db = np.clip(db, -dynamic_range_db, 0.0)
    return PolarImage((db + dynamic_range_db) / dynamic_range_db)


def simulate_envelope(
    emap: EchogenicityMap, params: PSFParams | None = None, seed: int = 0
) -> np.ndarray:
    """Pre-compression pipeline: scatterers -> RF -> envelope."""
    params = params or PSFParams()
    field = generate_scatterers(emap, seed)
    rf = convolve_rf(field, psf_kernel(params))
    return envelope(rf)


def simulate(
    emap: EchogenicityMap,
    params: PSFParams | None = None,
    dynamic_range_db: float = DEFAULT_DYNAMIC_RANGE_DB,
    seed: int = 0,
) -> PolarImage:
    """Full pseudo B-mode chain; deterministic for a given seed."""
    return log_compress(simulate_envelope(emap, params, seed), dynamic_range_db)

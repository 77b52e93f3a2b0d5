"""Pure-NumPy fallback for the compiled kernels in ``ivusim._kernels``.

Formulas must stay in lockstep with the Cython versions; the test suite
asserts parity between the two backends whenever both are importable.
"""
import numpy as np
from scipy import ndimage

TWO_PI = 2.0 * np.pi


def scan_polar_to_cart(polar, side):
    """Resample a polar image (rows = radius, cols = angle) onto a square
    Cartesian grid of the given side; pixels outside the inscribed disk are 0.
    """
    polar = np.ascontiguousarray(polar, dtype=np.float64)
    n_radial, n_angular = polar.shape
    cx = side / 2.0
    radius = side / 2.0

    coords = np.arange(side, dtype=np.float64) + 0.5 - cx
    dx = coords[np.newaxis, :]
    dy = coords[:, np.newaxis]
    r = np.sqrt(dx * dx + dy * dy)
    inside = r <= radius
    alpha = np.arctan2(dy, dx) + np.zeros_like(r)
    alpha[alpha < 0.0] += TWO_PI

    p = np.minimum(r / radius * n_radial, n_radial - 1)
    q = alpha / TWO_PI * n_angular
    q[q >= n_angular] -= n_angular

    i0 = np.floor(p).astype(np.intp)
    fi = p - i0
    i1 = np.minimum(i0 + 1, n_radial - 1)
    j0 = np.floor(q).astype(np.intp)
    fj = q - j0
    j1 = np.where(j0 + 1 == n_angular, 0, j0 + 1)

    out = ((1.0 - fi) * (1.0 - fj) * polar[i0, j0]
           + (1.0 - fi) * fj * polar[i0, j1]
           + fi * (1.0 - fj) * polar[i1, j0]
           + fi * fj * polar[i1, j1])
    out[~inside] = 0.0
    return out


def scan_cart_to_polar(cart, n_radial, n_angular):
    """Sample a square Cartesian image along rays from its center onto a
    (n_radial, n_angular) polar grid; row 0 replicates the center value.
    """
    cart = np.ascontiguousarray(cart, dtype=np.float64)
    side = cart.shape[0]
    cx = side / 2.0
    radius = side / 2.0

    r = (np.arange(n_radial, dtype=np.float64) / n_radial * radius)[:, np.newaxis]
    alpha = (TWO_PI * np.arange(n_angular, dtype=np.float64) / n_angular)[np.newaxis, :]
    x = cx + r * np.cos(alpha)
    y = cx + r * np.sin(alpha)
    u = np.clip(y - 0.5, 0.0, side - 1)
    v = np.clip(x - 0.5, 0.0, side - 1)

    u0 = np.floor(u).astype(np.intp)
    fu = u - u0
    u1 = np.minimum(u0 + 1, side - 1)
    v0 = np.floor(v).astype(np.intp)
    fv = v - v0
    v1 = np.minimum(v0 + 1, side - 1)

    return ((1.0 - fu) * (1.0 - fv) * cart[u0, v0]
            + (1.0 - fu) * fv * cart[u0, v1]
            + fu * (1.0 - fv) * cart[u1, v0]
            + fu * fv * cart[u1, v1])


def correlate_separable(field, axial, lateral):
    """Correlate with a separable kernel: axial factor along rows, lateral
    factor along columns. Zero padding, output same size, no kernel flip.
    Both 1D factors must have odd length.
    """
    field = np.asarray(field, dtype=np.float64)
    axial = np.asarray(axial, dtype=np.float64)
    lateral = np.asarray(lateral, dtype=np.float64)
    tmp = ndimage.correlate1d(field, axial, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(tmp, lateral, axis=1, mode="constant", cval=0.0)

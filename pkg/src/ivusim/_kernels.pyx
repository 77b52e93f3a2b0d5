# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: bilinear scan conversion and separable correlation.

The math here must stay in lockstep with :mod:`ivusim._kernels_py`, the
pure-NumPy fallback selected at import when this extension is missing.
Geometry conventions (pixel centers at index + 0.5 on the Cartesian grid,
polar row i at radius i/n_radial * R, polar column j at angle
2*pi*j/n_angular) are documented in :mod:`ivusim.imaging`.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, cos, floor, sin, sqrt

cnp.import_array()

cdef double TWO_PI = 6.283185307179586476925287


def scan_polar_to_cart(double[:, ::1] polar, Py_ssize_t side):
    """Resample a polar image (rows = radius, cols = angle) onto a square
    Cartesian grid of the given side; pixels outside the inscribed disk are 0.
    """
    cdef Py_ssize_t n_radial = polar.shape[0]
    cdef Py_ssize_t n_angular = polar.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((side, side))
    cdef double[:, ::1] o = out
    cdef double cx = side / 2.0
    cdef double radius = side / 2.0
    cdef Py_ssize_t i, j, i0, i1, j0, j1
    cdef double dx, dy, r, alpha, p, q, fi, fj

    for i in range(side):
        dy = (i + 0.5) - cx
        for j in range(side):
            dx = (j + 0.5) - cx
            r = sqrt(dx * dx + dy * dy)
            if r > radius:
                continue
            alpha = atan2(dy, dx)
            if alpha < 0.0:
                alpha += TWO_PI
            p = r / radius * n_radial
            if p > n_radial - 1:
                p = n_radial - 1
            q = alpha / TWO_PI * n_angular
            if q >= n_angular:
                q -= n_angular
            i0 = <Py_ssize_t>floor(p)
            fi = p - i0
            i1 = i0 + 1
            if i1 > n_radial - 1:
                i1 = n_radial - 1
            j0 = <Py_ssize_t>floor(q)
            fj = q - j0
            j1 = j0 + 1
            if j1 == n_angular:
                j1 = 0
            o[i, j] = ((1.0 - fi) * (1.0 - fj) * polar[i0, j0]
                       + (1.0 - fi) * fj * polar[i0, j1]
                       + fi * (1.0 - fj) * polar[i1, j0]
                       + fi * fj * polar[i1, j1])
    return out


def scan_cart_to_polar(double[:, ::1] cart, Py_ssize_t n_radial,
                       Py_ssize_t n_angular):
    """Sample a square Cartesian image along rays from its center onto a
    (n_radial, n_angular) polar grid; row 0 replicates the center value.
    """
    cdef Py_ssize_t side = cart.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n_radial, n_angular))
    cdef double[:, ::1] o = out
    cdef double cx = side / 2.0
    cdef double radius = side / 2.0
    cdef Py_ssize_t i, j, u0, u1, v0, v1
    cdef double r, alpha, x, y, u, v, fu, fv

    for i in range(n_radial):
        r = <double>i / n_radial * radius
        for j in range(n_angular):
            alpha = TWO_PI * j / n_angular
            x = cx + r * cos(alpha)
            y = cx + r * sin(alpha)
            u = y - 0.5
            v = x - 0.5
            if u < 0.0:
                u = 0.0
            elif u > side - 1:
                u = side - 1
            if v < 0.0:
                v = 0.0
            elif v > side - 1:
                v = side - 1
            u0 = <Py_ssize_t>floor(u)
            fu = u - u0
            u1 = u0 + 1
            if u1 > side - 1:
                u1 = side - 1
            v0 = <Py_ssize_t>floor(v)
            fv = v - v0
            v1 = v0 + 1
            if v1 > side - 1:
                v1 = side - 1
            o[i, j] = ((1.0 - fu) * (1.0 - fv) * cart[u0, v0]
                       + (1.0 - fu) * fv * cart[u0, v1]
                       + fu * (1.0 - fv) * cart[u1, v0]
                       + fu * fv * cart[u1, v1])
    return out


def correlate_separable(double[:, ::1] field, double[::1] axial,
                        double[::1] lateral):
    """Correlate with a separable kernel: axial factor along rows, lateral
    factor along columns. Zero padding, output same size, no kernel flip.
    Both 1D factors must have odd length.
    """
    cdef Py_ssize_t nr = field.shape[0]
    cdef Py_ssize_t nc = field.shape[1]
    cdef Py_ssize_t ka = axial.shape[0]
    cdef Py_ssize_t kl = lateral.shape[0]
    cdef Py_ssize_t ha = ka // 2
    cdef Py_ssize_t hl = kl // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=2] tmp = np.zeros((nr, nc))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((nr, nc))
    cdef double[:, ::1] t = tmp
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, u, v, src
    cdef double acc

    for i in range(nr):
        for j in range(nc):
            acc = 0.0
            for u in range(ka):
                src = i + u - ha
                if 0 <= src < nr:
                    acc += field[src, j] * axial[u]
            t[i, j] = acc
    for i in range(nr):
        for j in range(nc):
            acc = 0.0
            for v in range(kl):
                src = j + v - hl
                if 0 <= src < nc:
                    acc += t[i, src] * lateral[v]
            o[i, j] = acc
    return out

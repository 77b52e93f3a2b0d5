"""Selects the kernel backend at import time.

The compiled Cython extension is preferred; the pure-NumPy twin is used
when the extension is unavailable. Set ``IVUSIM_KERNELS=python`` or
``IVUSIM_KERNELS=cython`` to force a backend (forcing ``cython`` raises if
the extension was not built).
"""
import os

_choice = os.environ.get("IVUSIM_KERNELS", "auto").lower()

if _choice not in ("auto", "cython", "python"):
    raise ValueError(
        f"IVUSIM_KERNELS must be 'auto', 'cython' or 'python', got {_choice!r}"
    )

if _choice == "python":
    from . import _kernels_py as _impl
    KERNEL_BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        KERNEL_BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "IVUSIM_KERNELS=cython but the ivusim._kernels extension is "
                "not built; install the package (pip install -e . "
                "--no-build-isolation) or unset IVUSIM_KERNELS"
            ) from None
        from . import _kernels_py as _impl
        KERNEL_BACKEND = "python"

scan_polar_to_cart = _impl.scan_polar_to_cart
scan_cart_to_polar = _impl.scan_cart_to_polar
correlate_separable = _impl.correlate_separable

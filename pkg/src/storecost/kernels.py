"""Dispatch layer for the numeric hot kernels.

The compiled extension (``storecost._ckernels``) is preferred when it
imports; otherwise the numpy fallback is used. ``STORECOST_PURE_KERNELS=1``
forces the fallback. Both backends consume identical inputs, so a given
installation is fully deterministic; across backends, results can differ by
float summation order at the last ulp.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build environment
    _ckernels = None


def _select_backend():
    if os.environ.get("STORECOST_PURE_KERNELS", "") == "1" or _ckernels is None:
        return _kernels_py, "pure"
    return _ckernels, "compiled"


_impl, _impl_name = _select_backend()


def active_backend() -> str:
    """Name of the kernel backend in use: 'compiled' or 'pure'."""
    return _impl_name


def get_backend(name: str):
    """Explicit backend module by name, for tests and benchmarks."""
    if name == "pure":
        return _kernels_py
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernel extension is not available")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def kl_bits_rows(p_log2, q_log2, impl=None) -> np.ndarray:
    """Row-wise KL(p || q) in bits for matrices of log2 probabilities."""
    p_log2 = np.ascontiguousarray(p_log2, dtype=np.float64)
    q_log2 = np.ascontiguousarray(q_log2, dtype=np.float64)
    if p_log2.shape != q_log2.shape or p_log2.ndim != 2:
        raise ValueError("kl_bits_rows expects two equal-shape 2-D arrays")
    return np.asarray((impl or _impl).kl_bits_rows(p_log2, q_log2))


def signflip_sums(values, flips, impl=None) -> np.ndarray:
    """Signed sums of `values` under a 0/1 flip-pattern matrix."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    flips = np.ascontiguousarray(flips, dtype=np.uint8)
    if flips.ndim != 2 or flips.shape[1] != values.shape[0]:
        raise ValueError("flips must be (iterations, len(values))")
    return np.asarray((impl or _impl).signflip_sums(values, flips))

"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``STORECOST_PURE_KERNELS=1`` is set.
"""

import numpy as np


def kl_bits_rows(p_log2: np.ndarray, q_log2: np.ndarray) -> np.ndarray:
    """Row-wise KL divergence in bits between log2-probability matrices."""
    p = np.exp2(p_log2)
    terms = np.where(p > 0.0, p * (p_log2 - q_log2), 0.0)
    return terms.sum(axis=1)


def signflip_sums(values: np.ndarray, flips: np.ndarray) -> np.ndarray:
    """Signed sums for a block of sign-flip patterns (flips: uint8 0/1)."""
    signed = np.where(flips.astype(bool), -values, values)
    return signed.sum(axis=1)

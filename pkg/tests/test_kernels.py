"""Both kernel backends agree and match direct arithmetic."""

import math

import numpy as np
import pytest

from storecost import kernels

BACKENDS = ["pure"]
if kernels._ckernels is not None:
    BACKENDS.append("compiled")


@pytest.fixture(params=BACKENDS)
def impl(request):
    return kernels.get_backend(request.param)


def test_kl_bits_rows_matches_direct_sum(impl):
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(16), size=5)
    q = rng.dirichlet(np.ones(16), size=5)
    got = kernels.kl_bits_rows(np.log2(p), np.log2(q), impl=impl)
    want = (p * (np.log2(p) - np.log2(q))).sum(axis=1)
    assert np.allclose(got, want, atol=1e-12)


def test_kl_zero_rows_and_identity(impl):
    p = np.log2(np.array([[0.25, 0.75]]))
    assert kernels.kl_bits_rows(p, p, impl=impl)[0] == pytest.approx(0.0, abs=1e-15)
    # p entry of exactly zero contributes nothing even against a tiny q
    p_zero = np.array([[0.0, -1074.0]])
    q = np.log2(np.array([[0.5, 0.5]]))
    got = kernels.kl_bits_rows(p_zero, q, impl=impl)[0]
    assert got == pytest.approx(1.0, abs=1e-12)


def test_signflip_sums_dyadic_agreement():
    # dyadic values: both summation orders are exact, so backends must agree
    rng = np.random.default_rng(1)
    values = rng.integers(-8, 9, size=37).astype(np.float64) / 4.0
    flips = rng.integers(0, 2, size=(256, 37), dtype=np.uint8)
    results = [
        kernels.signflip_sums(values, flips, impl=kernels.get_backend(name))
        for name in BACKENDS
    ]
    for other in results[1:]:
        assert np.array_equal(results[0], other)
    signed = np.where(flips.astype(bool), -values, values).sum(axis=1)
    assert np.array_equal(results[0], signed)


def test_signflip_identity_row(impl):
    values = np.array([1.0, -2.0, 3.5])
    flips = np.zeros((1, 3), dtype=np.uint8)
    assert kernels.signflip_sums(values, flips, impl=impl)[0] == pytest.approx(2.5)


def test_dispatcher_validates_shapes():
    with pytest.raises(ValueError):
        kernels.kl_bits_rows(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        kernels.signflip_sums(np.zeros(3), np.zeros((2, 4), dtype=np.uint8))


def test_active_backend_reports_a_known_name():
    assert kernels.active_backend() in ("pure", "compiled")

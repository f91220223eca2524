"""Compiled and numpy kernels must agree to roundoff."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradflows import _pykernels as py
from gradflows._backend import BACKEND, kernels

ck = pytest.importorskip("gradflows._ckernels")

RTOL = 1e-12


def _faces(rng, shape):
    return [np.ascontiguousarray(rng.standard_normal(shape[:k] + (shape[k] - 1,) + shape[k + 1:]))
            for k in range(len(shape))]


def _positive(rng, shape):
    x = rng.uniform(0.1, 1.0, shape)
    return x / x.sum()


def _fp_inputs(rng, shape, perturbed):
    dim = len(shape)
    rho = _positive(rng, shape)
    cl = [np.ascontiguousarray(rng.uniform(0.5, 1.5, f.shape)) for f in _faces(rng, shape)]
    cr = [np.ascontiguousarray(rng.uniform(0.5, 1.5, c.shape)) for c in cl]
    logref = np.ascontiguousarray(rng.standard_normal(shape))
    refmask = np.ascontiguousarray(rng.uniform(size=shape) > 0.05)
    pnode = np.ascontiguousarray(rng.standard_normal((dim, *shape)) * perturbed)
    pface = [np.ascontiguousarray(0.5 * (np.take(pnode[k], range(shape[k] - 1), axis=k)
                                         + np.take(pnode[k], range(1, shape[k]), axis=k)))
             for k in range(dim)]
    spacing = tuple(rng.uniform(0.05, 0.2, dim))
    steps = 7
    an = np.ascontiguousarray(rng.uniform(0, 0.5, steps + 1))
    am = np.ascontiguousarray(rng.uniform(0, 0.5, steps))
    return rho, cl, cr, logref, refmask, pface, pnode, spacing, an, am


def test_backend_selected():
    assert BACKEND == "cython"
    assert kernels is ck


@pytest.mark.parametrize("shape", [(50,), (12, 17)])
class TestParity:
    @given(seed=st.integers(0, 2 ** 32))
    def test_upwind_step(self, shape, seed):
        rng = np.random.default_rng(seed)
        rho = _positive(rng, shape)
        faces = _faces(rng, shape)
        spacing = tuple(rng.uniform(0.5, 1.0, len(shape)))
        a = py.upwind_step(rho.copy(), faces, spacing, 0.01)
        b = ck.upwind_step(rho.copy(), faces, spacing, 0.01)
        np.testing.assert_allclose(b, a, rtol=RTOL, atol=1e-18)

    @given(seed=st.integers(0, 2 ** 32), amp=st.floats(-1, 1))
    def test_feedback_cost(self, shape, seed, amp):
        rng = np.random.default_rng(seed)
        rho, _, _, logref, refmask, _, pnode, spacing, _, _ = _fp_inputs(rng, shape, 1.0)
        a = py.feedback_cost(rho, logref, refmask, pnode, amp, spacing)
        b = ck.feedback_cost(rho, logref, refmask, pnode, amp, spacing)
        assert b == pytest.approx(a, rel=RTOL)

    @pytest.mark.parametrize("perturbed", [0.0, 1.0])
    def test_fp_advance(self, shape, perturbed):
        rng = np.random.default_rng(11)
        rho, cl, cr, logref, refmask, pface, pnode, spacing, an, am = _fp_inputs(
            rng, shape, perturbed)
        dt = 1e-4
        ra, rb = rho.copy(), rho.copy()
        acc_a = py.fp_advance(ra, cl, cr, logref, refmask, pface, pnode, spacing, dt, an, am)
        acc_b = ck.fp_advance(rb, cl, cr, logref, refmask, pface, pnode, spacing, dt, an, am)
        np.testing.assert_allclose(rb, ra, rtol=RTOL, atol=1e-18)
        assert acc_b == pytest.approx(acc_a, rel=RTOL)


@given(seed=st.integers(0, 2 ** 32), dt=st.floats(1e-4, 1.0))
def test_product_implicit_parity(seed, dt):
    rng = np.random.default_rng(seed)
    rt, r = _positive(rng, (64,)), _positive(rng, (64,))
    a = py.product_implicit_1d(rt, r, 0.1, dt)
    b = ck.product_implicit_1d(rt, r, 0.1, dt)
    for x, y in zip(a, b):
        np.testing.assert_allclose(y, x, rtol=1e-10, atol=1e-15)


def test_fp_advance_requires_contiguous():
    rng = np.random.default_rng(0)
    rho, cl, cr, logref, refmask, pface, pnode, spacing, an, am = _fp_inputs(rng, (40,), 0.0)
    strided = np.repeat(rho, 2)[::2]
    with pytest.raises((ValueError, TypeError)):
        ck.fp_advance(strided, cl, cr, logref, refmask, pface, pnode, spacing, 1e-4, an, am)


def test_env_var_forces_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, GRADFLOWS_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from gradflows._backend import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


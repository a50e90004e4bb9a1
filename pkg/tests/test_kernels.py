import math

import numpy as np
import pytest

from neural_reserve import kernels
from neural_reserve.kernels import _numpy

requires_numba = pytest.mark.skipif("numba" not in kernels.available_backends(),
                                    reason="numba not installed")


def _inputs(rng, dtype):
    x = rng.normal(size=(7, 12)).astype(dtype)
    return {
        "layer_norm_fwd": (x, rng.normal(size=12).astype(dtype), rng.normal(size=12).astype(dtype), 1e-5),
        "gelu_fwd": (x,),
        "gelu_bwd": (x, rng.normal(size=x.shape).astype(dtype)),
        "softmax_fwd": (x,),
        "nll_rows": (x, rng.integers(0, 12, size=7).astype(np.int64)),
        "head_grad_scores": (rng.normal(size=(12, 36)).astype(dtype),
                             rng.normal(size=(12, 12)).astype(dtype), 3, 1),
    }


@requires_numba
@pytest.mark.parametrize("dtype,rtol", [(np.float64, 1e-12), (np.float32, 2e-5)])
def test_backends_agree(dtype, rtol):
    from neural_reserve.kernels import _numba

    rng = np.random.default_rng(0)
    for name, args in _inputs(rng, dtype).items():
        a = getattr(_numpy, name)(*args)
        b = getattr(_numba, name)(*args)
        for x, y in zip(np.atleast_1d(a) if not isinstance(a, tuple) else a,
                        np.atleast_1d(b) if not isinstance(b, tuple) else b):
            np.testing.assert_allclose(x, y, rtol=rtol, atol=rtol, err_msg=name)


@requires_numba
def test_backward_kernels_agree():
    from neural_reserve.kernels import _numba

    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 9))
    gamma = rng.normal(size=9)
    dy = rng.normal(size=(5, 9))
    _, mean, rstd = _numpy.layer_norm_fwd(x, gamma, np.zeros(9), 1e-5)
    for u, v in zip(_numpy.layer_norm_bwd(dy, x, mean, rstd, gamma),
                    _numba.layer_norm_bwd(dy, x, mean, rstd, gamma)):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
    y = _numpy.softmax_fwd(x)
    np.testing.assert_allclose(_numpy.softmax_bwd(y, dy), _numba.softmax_bwd(y, dy), rtol=1e-12, atol=1e-14)


def test_gelu_is_tanh_approximation(backend):
    x = np.linspace(-4, 4, 33)
    want = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(kernels.gelu_fwd(x), want, rtol=1e-13, atol=1e-15)


def test_nll_rows_matches_log_softmax(backend):
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 10)) * 4
    t = rng.integers(0, 10, size=6).astype(np.int64)
    nll, probs = kernels.nll_rows(z, t)
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    np.testing.assert_allclose(nll, lse - z[np.arange(6), t], rtol=1e-12)
    np.testing.assert_allclose(probs.sum(1), 1.0, rtol=1e-12)


@pytest.mark.parametrize("power", [1, 2])
def test_head_grad_scores_slices(backend, power):
    # Oracle: build each head's slice explicitly from the q, k, v blocks.
    rng = np.random.default_rng(3)
    d, nh = 8, 4
    hd = d // nh
    g_attn = rng.normal(size=(d, 3 * d))
    g_proj = rng.normal(size=(d, d))
    got = kernels.head_grad_scores(g_attn, g_proj, nh, power)
    for h in range(nh):
        q = g_attn[:, h * hd:(h + 1) * hd]
        k = g_attn[:, d + h * hd:d + (h + 1) * hd]
        v = g_attn[:, 2 * d + h * hd:2 * d + (h + 1) * hd]
        rows = g_proj[h * hd:(h + 1) * hd]
        blocks = np.concatenate([q.ravel(), k.ravel(), v.ravel(), rows.ravel()])
        want = np.abs(blocks).sum() if power == 1 else (blocks ** 2).sum()
        assert got[h] == pytest.approx(want, rel=1e-12)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")

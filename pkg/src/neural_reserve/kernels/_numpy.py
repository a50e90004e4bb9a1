"""Pure-numpy reference kernels.

Every function takes and returns 2-D C-contiguous arrays (rows x features)
except where noted; callers reshape.
"""

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layer_norm_bwd(dy, x, mean, rstd, gamma):
    d = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = (
        dxhat
        - dxhat.sum(axis=1, keepdims=True) / d
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / d
    ) * rstd[:, None]
    return dx, dgamma, dbeta


def gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, dy):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_fwd(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def nll_rows(logits, targets):
    """Per-row negative log-likelihood and the row softmax."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (np.log(s) + m)[:, 0]
    nll = lse - logits[np.arange(logits.shape[0]), targets]
    return nll, e / s


def head_grad_scores(g_attn, g_proj, n_head, power):
    """Per-head gradient magnitude from one layer's projection gradients.

    ``g_attn`` is the fused query/key/value weight gradient ``[d, 3d]``;
    ``g_proj`` is the output projection gradient ``[d, d]``. ``power`` 1
    gives the L1 sum, 2 the squared sum (callers take the root).
    """
    d = g_proj.shape[0]
    hd = d // n_head
    out = np.empty(n_head, dtype=np.float64)
    for h in range(n_head):
        cols = np.r_[h * hd:(h + 1) * hd, d + h * hd:d + (h + 1) * hd,
                     2 * d + h * hd:2 * d + (h + 1) * hd]
        a = g_attn[:, cols].astype(np.float64)
        p = g_proj[h * hd:(h + 1) * hd, :].astype(np.float64)
        if power == 1:
            out[h] = np.abs(a).sum() + np.abs(p).sum()
        else:
            out[h] = (a * a).sum() + (p * p).sum()
    return out

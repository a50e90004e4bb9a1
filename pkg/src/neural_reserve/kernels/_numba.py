"""numba-compiled kernels mirroring :mod:`neural_reserve.kernels._numpy`.

Row loops run serially so reductions happen in a fixed order regardless of
the thread count; results are deterministic per dtype.
"""

import math

import numpy as np
from numba import njit

_GELU_C = math.sqrt(2.0 / math.pi)


@njit(cache=True)
def layer_norm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mean = np.empty(n, dtype=x.dtype)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        v = 0.0
        for j in range(d):
            c = x[i, j] - mu
            v += c * c
        r = 1.0 / math.sqrt(v / d + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gamma[j] + beta[j]
    return y, mean, rstd


@njit(cache=True)
def layer_norm_bwd(dy, x, mean, rstd, gamma):
    n, d = x.shape
    dx = np.empty_like(x)
    dgamma = np.zeros(d, dtype=x.dtype)
    dbeta = np.zeros(d, dtype=x.dtype)
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * r
            g = dy[i, j] * gamma[j]
            s1 += g
            s2 += g * xh
            dgamma[j] += dy[i, j] * xh
            dbeta[j] += dy[i, j]
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dx[i, j] = (dy[i, j] * gamma[j] - s1 / d - xh * s2 / d) * r
    return dx, dgamma, dbeta


# 0.5 * v * (1 + tanh(z)) equals v * sigmoid(2z); the scalar exp is much cheaper than tanh here.
@njit(cache=True)
def gelu_fwd(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        u = 2.0 * _GELU_C * (v + 0.044715 * v * v * v)
        out[i] = v - v / (math.exp(u) + 1.0)
    return out.reshape(x.shape)


@njit(cache=True)
def gelu_bwd(x, dy):
    flat = x.ravel()
    gflat = dy.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        v2 = v * v
        u = 2.0 * _GELU_C * (v + 0.044715 * v2 * v)
        q = 1.0 / (math.exp(u) + 1.0)  # 1 - sigmoid(u)
        s = 1.0 - q
        du = 2.0 * _GELU_C * (1.0 + 3.0 * 0.044715 * v2)
        out[i] = gflat[i] * (s + v * s * q * du)
    return out.reshape(x.shape)


@njit(cache=True)
def softmax_fwd(z):
    n, d = z.shape
    y = np.empty_like(z)
    for i in range(n):
        m = z[i, 0]
        for j in range(1, d):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(z[i, j] - m)
            y[i, j] = e
            s += e
        for j in range(d):
            y[i, j] = y[i, j] / s
    return y


@njit(cache=True)
def softmax_bwd(y, dy):
    n, d = y.shape
    dx = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += dy[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (dy[i, j] - s)
    return dx


@njit(cache=True)
def nll_rows(logits, targets):
    n, d = logits.shape
    nll = np.empty(n, dtype=logits.dtype)
    probs = np.empty_like(logits)
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, d):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(logits[i, j] - m)
            probs[i, j] = e
            s += e
        for j in range(d):
            probs[i, j] = probs[i, j] / s
        nll[i] = math.log(s) + m - logits[i, targets[i]]
    return nll, probs


@njit(cache=True)
def head_grad_scores(g_attn, g_proj, n_head, power):
    d = g_proj.shape[0]
    hd = d // n_head
    out = np.zeros(n_head, dtype=np.float64)
    for h in range(n_head):
        acc = 0.0
        for i in range(d):
            for blk in range(3):
                base = blk * d + h * hd
                for j in range(hd):
                    v = float(g_attn[i, base + j])
                    acc += abs(v) if power == 1 else v * v
        for i in range(h * hd, (h + 1) * hd):
            for j in range(d):
                v = float(g_proj[i, j])
                acc += abs(v) if power == 1 else v * v
        out[h] = acc
    return out

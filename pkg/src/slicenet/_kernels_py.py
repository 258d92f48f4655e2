"""Pure numpy implementations of the hot kernels.

These are the reference path and the fallback used whenever the compiled
``_kernels`` extension is unavailable. Every function here has a twin with
the same signature in ``_kernels.pyx``.

All convolutions are "valid" over an already padded input of shape
``[batch, length_padded, channels]`` with stride 1 and dilation ``d``.
"""

import numpy as np


def depthwise_fwd(x, w, d):
    k = w.shape[0]
    t_out = x.shape[1] - (k - 1) * d
    out = x[:, 0:t_out, :] * w[0]
    for j in range(1, k):
        s = j * d
        out += x[:, s : s + t_out, :] * w[j]
    return out


def depthwise_bwd(x, w, d, g):
    k = w.shape[0]
    t_out = g.shape[1]
    dx = np.zeros_like(x)
    dw = np.empty_like(w)
    for j in range(k):
        s = j * d
        dx[:, s : s + t_out, :] += g * w[j]
        dw[j] = np.einsum("btc,btc->c", g, x[:, s : s + t_out, :])
    return dx, dw


def conv_fwd(x, w, d):
    k, c_in, c_out = w.shape
    b = x.shape[0]
    t_out = x.shape[1] - (k - 1) * d
    out = np.zeros((b * t_out, c_out))
    for j in range(k):
        s = j * d
        out += x[:, s : s + t_out, :].reshape(b * t_out, c_in) @ w[j]
    return out.reshape(b, t_out, c_out)


def conv_bwd(x, w, d, g):
    k, c_in, c_out = w.shape
    b, t_out, _ = g.shape
    g2 = g.reshape(b * t_out, c_out)
    dx = np.zeros_like(x)
    dw = np.empty_like(w)
    for j in range(k):
        s = j * d
        xs = x[:, s : s + t_out, :].reshape(b * t_out, c_in)
        dw[j] = xs.T @ g2
        dx[:, s : s + t_out, :] += (g2 @ w[j].T).reshape(b, t_out, c_in)
    return dx, dw


def layernorm_fwd(x, gain, bias, eps):
    """Return (out, xhat, inv_sigma) with statistics over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_sigma
    return xhat * gain + bias, xhat, inv_sigma


def layernorm_bwd(g, xhat, inv_sigma, gain):
    dgain = float(np.sum(g * xhat))
    dbias = float(np.sum(g))
    gx = g * gain
    mean_g = gx.mean(axis=-1, keepdims=True)
    mean_gx = (gx * xhat).mean(axis=-1, keepdims=True)
    dx = (gx - mean_g - xhat * mean_gx) * inv_sigma
    return dx, dgain, dbias


def softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))

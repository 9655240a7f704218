"""Compiled inner loops for the hot paths of the tensor engine.

All loops run in a fixed index order so results are bit-reproducible.
"""
import numpy as np
from numba import njit


@njit(cache=True, fastmath=True, error_model="numpy")
def dwconv_forward(xp, w, out):
    # xp: (N, C, H + k - 1, W + k - 1) padded input, w: (C, k, k), out (N, C, H, W)
    N, C, H, W = out.shape
    k = w.shape[1]
    row = np.empty(W, dtype=out.dtype)
    for n in range(N):
        for c in range(C):
            for h in range(H):
                row[:] = 0
                for i in range(k):
                    for j in range(k):
                        wv = w[c, i, j]
                        for q in range(W):
                            row[q] += wv * xp[n, c, h + i, q + j]
                for q in range(W):
                    out[n, c, h, q] = row[q]


@njit(cache=True, fastmath=True, error_model="numpy")
def dwconv_backward_input(g, w, dxp):
    N, C, H, W = g.shape
    k = w.shape[1]
    for n in range(N):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    for h in range(H):
                        for q in range(W):
                            dxp[n, c, h + i, q + j] += wv * g[n, c, h, q]


@njit(cache=True, fastmath=True, error_model="numpy")
def dwconv_backward_weight(g, xp, dw):
    # float32 dot products per output row, summed in float64
    N, C, H, W = g.shape
    k = dw.shape[1]
    acc = np.zeros((k, k), dtype=np.float64)
    for c in range(C):
        acc[:] = 0
        for n in range(N):
            for h in range(H):
                for i in range(k):
                    for j in range(k):
                        s = np.float32(0)
                        for q in range(W):
                            s += g[n, c, h, q] * xp[n, c, h + i, q + j]
                        acc[i, j] += s
        for i in range(k):
            for j in range(k):
                dw[c, i, j] = acc[i, j]


_S2PI = np.float32(np.sqrt(2.0 / np.pi))
_GELU_C = np.float32(0.044715)
_TANH_CLAMP = np.float32(7.90531110763549805)
# rational minimax approximation of tanh on [-7.9, 7.9], float32 accurate
_TA = (np.float32(-2.76076847742355e-16), np.float32(2.00018790482477e-13),
       np.float32(-8.60467152213735e-11), np.float32(5.12229709037114e-08),
       np.float32(1.48572235717979e-05), np.float32(6.37261928875436e-04),
       np.float32(4.89352455891786e-03))
_TB = (np.float32(1.19825839466702e-06), np.float32(1.18534705686654e-04),
       np.float32(2.26843463243900e-03), np.float32(4.89352518554385e-03))
_HALF = np.float32(0.5)
_ONE = np.float32(1.0)
_THREE_C = np.float32(3.0 * 0.044715)


@njit(inline="always", fastmath=True, error_model="numpy")
def _tanh_f32(u):
    # odd function: evaluate on |u| and restore the sign
    s = np.float32(np.copysign(_ONE, u))
    a = min(abs(u), _TANH_CLAMP)
    u2 = a * a
    p = _TA[0]
    p = p * u2 + _TA[1]
    p = p * u2 + _TA[2]
    p = p * u2 + _TA[3]
    p = p * u2 + _TA[4]
    p = p * u2 + _TA[5]
    p = p * u2 + _TA[6]
    q = _TB[0]
    q = q * u2 + _TB[1]
    q = q * u2 + _TB[2]
    q = q * u2 + _TB[3]
    t = min(p * a / q, _ONE)
    # saturate exactly so that 1 - t*t vanishes in the GELU derivative tail
    t = _ONE if a >= _TANH_CLAMP else t
    return s * t


@njit(cache=True, fastmath=True, error_model="numpy")
def gelu_forward_f32(x, out):
    # flat float32 arrays
    for i in range(x.size):
        v = x[i]
        t = _tanh_f32(_S2PI * (v + _GELU_C * v * v * v))
        out[i] = _HALF * v * (_ONE + t)


@njit(cache=True, fastmath=True, error_model="numpy")
def gelu_backward_f32(x, g, out):
    # tanh is recomputed rather than stored to halve the forward's memory traffic
    for i in range(x.size):
        v = x[i]
        t = _tanh_f32(_S2PI * (v + _GELU_C * v * v * v))
        d = _HALF * (_ONE + t) + _HALF * v * (_ONE - t * t) * _S2PI * (_ONE + _THREE_C * v * v)
        out[i] = g[i] * d


@njit(cache=True)
def layer_norm_cf_forward(x, gamma, beta, eps, y, xhat, rstd):
    # x: (N, C, L) contiguous; per (n, l) normalisation over c
    N, C, L = x.shape
    for n in range(N):
        mu = np.zeros(L, dtype=np.float64)
        var = np.zeros(L, dtype=np.float64)
        for c in range(C):
            for p in range(L):
                mu[p] += x[n, c, p]
        for p in range(L):
            mu[p] /= C
        for c in range(C):
            for p in range(L):
                d = x[n, c, p] - mu[p]
                var[p] += d * d
        for p in range(L):
            rstd[n, p] = 1.0 / np.sqrt(var[p] / C + eps)
        for c in range(C):
            gm = gamma[c]
            bt = beta[c]
            for p in range(L):
                v = (x[n, c, p] - mu[p]) * rstd[n, p]
                xhat[n, c, p] = v
                y[n, c, p] = v * gm + bt


@njit(cache=True)
def layer_norm_cf_backward(g, xhat, rstd, gamma, dx, dgamma, dbeta):
    N, C, L = g.shape
    for c in range(C):
        sg = 0.0
        sb = 0.0
        for n in range(N):
            for p in range(L):
                sg += g[n, c, p] * xhat[n, c, p]
                sb += g[n, c, p]
        dgamma[c] = sg
        dbeta[c] = sb
    for n in range(N):
        m1 = np.zeros(L, dtype=np.float64)
        m2 = np.zeros(L, dtype=np.float64)
        for c in range(C):
            gm = gamma[c]
            for p in range(L):
                gh = g[n, c, p] * gm
                m1[p] += gh
                m2[p] += gh * xhat[n, c, p]
        for p in range(L):
            m1[p] /= C
            m2[p] /= C
        for c in range(C):
            gm = gamma[c]
            for p in range(L):
                gh = g[n, c, p] * gm
                dx[n, c, p] = rstd[n, p] * (gh - m1[p] - xhat[n, c, p] * m2[p])

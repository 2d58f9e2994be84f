"""Numba kernel backend.

Same public functions as numpy_ops, compiled with @njit. fastmath stays
off so the compiler cannot contract or reorder the float64 accumulations;
each output element accumulates in the documented index order.

Layout strategy: convolutions go through an im2col patch matrix and a
row-blocked matmul kernel that vectorizes across independent output
lanes while keeping the reduction index of every single element strictly
ascending.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(xp, KH, KW, stride, OH, OW, cols):
    N, Cin = xp.shape[0], xp.shape[1]
    for n in range(N):
        m = n * OH * OW
        for oh in range(OH):
            ih0 = oh * stride
            for ow in range(OW):
                iw0 = ow * stride
                j = 0
                for ci in range(Cin):
                    for kh in range(KH):
                        row = xp[n, ci, ih0 + kh]
                        for kw in range(KW):
                            cols[m, j] = row[iw0 + kw]
                            j += 1
                m += 1
    return cols


@njit(cache=True)
def _matmul_bias(cols, wt, b, out):
    # out[m, :] = b + sum_j cols[m, j] * wt[j, :], j ascending per element.
    # Four-row blocking reuses each wt row from registers/L1.
    M, K = cols.shape
    Cout = wt.shape[1]
    m = 0
    while m + 4 <= M:
        a0 = out[m]
        a1 = out[m + 1]
        a2 = out[m + 2]
        a3 = out[m + 3]
        a0[:] = b
        a1[:] = b
        a2[:] = b
        a3[:] = b
        for j in range(K):
            w_row = wt[j]
            v0 = cols[m, j]
            v1 = cols[m + 1, j]
            v2 = cols[m + 2, j]
            v3 = cols[m + 3, j]
            for co in range(Cout):
                wv = w_row[co]
                a0[co] += v0 * wv
                a1[co] += v1 * wv
                a2[co] += v2 * wv
                a3[co] += v3 * wv
        m += 4
    while m < M:
        acc = out[m]
        acc[:] = b
        for j in range(K):
            v = cols[m, j]
            w_row = wt[j]
            for co in range(Cout):
                acc[co] += v * w_row[co]
        m += 1
    return out


@njit(cache=True)
def _grad_weights(cols, g_mat, gw):
    # gw[co, j] = sum_m g_mat[m, co] * cols[m, j], m ascending per element.
    M, K = cols.shape
    Cout = g_mat.shape[1]
    for m in range(M):
        c_row = cols[m]
        g_row = g_mat[m]
        for co in range(Cout):
            v = g_row[co]
            w_row = gw[co]
            for j in range(K):
                w_row[j] += v * c_row[j]
    return gw


@njit(cache=True)
def _grad_cols(g_mat, wflat, dcols):
    # dcols[m, j] = sum_co g_mat[m, co] * wflat[co, j], co ascending.
    M = g_mat.shape[0]
    Cout, K = wflat.shape
    for m in range(M):
        row = dcols[m]
        g_row = g_mat[m]
        for co in range(Cout):
            v = g_row[co]
            w_row = wflat[co]
            for j in range(K):
                row[j] += v * w_row[j]
    return dcols


@njit(cache=True)
def _col2im_add(dcols, KH, KW, stride, OH, OW, gxp):
    N, Cin = gxp.shape[0], gxp.shape[1]
    for n in range(N):
        m = n * OH * OW
        for oh in range(OH):
            ih0 = oh * stride
            for ow in range(OW):
                iw0 = ow * stride
                j = 0
                for ci in range(Cin):
                    for kh in range(KH):
                        row = gxp[n, ci, ih0 + kh]
                        for kw in range(KW):
                            row[iw0 + kw] += dcols[m, j]
                            j += 1
                m += 1
    return gxp


@njit(cache=True)
def _grad_bias(g, gb):
    N, Cout, OH, OW = g.shape
    for n in range(N):
        for co in range(Cout):
            s = gb[co]
            plane = g[n, co]
            for oh in range(OH):
                for ow in range(OW):
                    s += plane[oh, ow]
            gb[co] = s
    return gb


@njit(cache=True)
def _maxpool_fwd(x, out, idx):
    N, C, H, W = x.shape
    OH, OW = H // 2, W // 2
    for n in range(N):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    h0 = 2 * oh
                    w0 = 2 * ow
                    best = x[n, c, h0, w0]
                    k = 0
                    v = x[n, c, h0, w0 + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[n, c, h0 + 1, w0]
                    if v > best:
                        best = v
                        k = 2
                    v = x[n, c, h0 + 1, w0 + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[n, c, oh, ow] = best
                    idx[n, c, oh, ow] = k
    return out


@njit(cache=True)
def _maxpool_bwd(g, idx, gx):
    N, C, OH, OW = g.shape
    for n in range(N):
        for c in range(C):
            for oh in range(OH):
                for ow in range(OW):
                    k = idx[n, c, oh, ow]
                    gx[n, c, 2 * oh + k // 2, 2 * ow + k % 2] = g[n, c, oh, ow]
    return gx


def _pad(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x, w, b, stride=1, padding=0):
    """Cross-correlation of x (N,Cin,H,W) with w (Cout,Cin,KH,KW) plus bias."""
    N, Cin, H, W = x.shape
    Cout, _, KH, KW = w.shape
    OH = (H + 2 * padding - KH) // stride + 1
    OW = (W + 2 * padding - KW) // stride + 1
    xp = _pad(x, padding)
    K = Cin * KH * KW
    cols = np.empty((N * OH * OW, K))
    _im2col(xp, KH, KW, stride, OH, OW, cols)
    wt = np.ascontiguousarray(w.reshape(Cout, K).T)
    out = np.empty((N * OH * OW, Cout))
    _matmul_bias(cols, wt, b, out)
    return np.ascontiguousarray(out.reshape(N, OH, OW, Cout).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, stride, padding, g, need_gx=True):
    """Gradients of conv2d_forward. Returns (gx, gw, gb); gx None if skipped."""
    N, Cin, H, W = x.shape
    Cout, _, KH, KW = w.shape
    _, _, OH, OW = g.shape
    K = Cin * KH * KW
    xp = _pad(x, padding)
    cols = np.empty((N * OH * OW, K))
    _im2col(xp, KH, KW, stride, OH, OW, cols)
    g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N * OH * OW, Cout)

    gw = np.zeros((Cout, K))
    _grad_weights(cols, g_mat, gw)
    gw = gw.reshape(Cout, Cin, KH, KW)
    gb = np.zeros(Cout)
    _grad_bias(g, gb)

    gx = None
    if need_gx:
        wflat = np.ascontiguousarray(w.reshape(Cout, K))
        dcols = np.zeros((N * OH * OW, K))
        _grad_cols(g_mat, wflat, dcols)
        Hp, Wp = H + 2 * padding, W + 2 * padding
        gxp = np.zeros((N, Cin, Hp, Wp))
        _col2im_add(dcols, KH, KW, stride, OH, OW, gxp)
        p = padding
        gx = np.ascontiguousarray(gxp[:, :, p:p + H, p:p + W]) if p else gxp
    return gx, gw, gb


def dense_forward(x, w, b):
    """Affine map x (N,Din) @ w.T + b via the shared matmul kernel."""
    Dout = w.shape[0]
    wt = np.ascontiguousarray(w.T)
    out = np.empty((x.shape[0], Dout))
    _matmul_bias(x, wt, b, out)
    return out


def dense_backward(x, w, g, need_gx=True):
    """Gradients of dense_forward. Returns (gx, gw, gb)."""
    N, Din = x.shape
    Dout = w.shape[0]
    gw = np.zeros((Dout, Din))
    _grad_weights(x, g, gw)
    gb = np.zeros(Dout)
    _grad_bias(g.reshape(N, Dout, 1, 1), gb)
    gx = None
    if need_gx:
        gx = np.zeros((N, Din))
        _grad_cols(g, w, gx)
    return gx, gw, gb


def maxpool2x2_forward(x):
    """2x2/stride-2 max pooling; ties keep the first maximum in window order."""
    N, C, H, W = x.shape
    out = np.empty((N, C, H // 2, W // 2))
    idx = np.empty((N, C, H // 2, W // 2), dtype=np.int64)
    _maxpool_fwd(x, out, idx)
    return out, idx


def maxpool2x2_backward(g, idx, H, W):
    """Scatter g back to the argmax positions recorded by the forward pass."""
    N, C = g.shape[0], g.shape[1]
    gx = np.zeros((N, C, H, W))
    _maxpool_bwd(g, idx, gx)
    return gx

"""Pure-numpy kernel backend.

Reference implementations of the hot kernels. Slower than the numba
backend but dependency-free, and the accumulation orders match the
numba kernels wherever bitwise agreement is asserted (see the package
docstring in ``kernels/__init__.py`` for the exact contract).

All kernels take and return C-contiguous float64 arrays. Shape and
dtype validation happens one level up, in the tensor ops.
"""

import numpy as np


def _pad(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp, KH, KW, stride, OH, OW):
    # Patch matrix of shape (N*OH*OW, Cin*KH*KW); column index j runs over
    # (ci, kh, kw) in ascending order, matching the numba fill order.
    N, Cin = xp.shape[0], xp.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (KH, KW), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(N * OH * OW, Cin * KH * KW)


def conv2d_forward(x, w, b, stride=1, padding=0):
    """Cross-correlation of x (N,Cin,H,W) with w (Cout,Cin,KH,KW) plus bias.

    Each output element starts at its bias and accumulates contributions in
    ascending patch-column index j = (ci, kh, kw).
    """
    N, Cin, H, W = x.shape
    Cout, _, KH, KW = w.shape
    OH = (H + 2 * padding - KH) // stride + 1
    OW = (W + 2 * padding - KW) // stride + 1
    xp = _pad(x, padding)
    cols = _im2col(xp, KH, KW, stride, OH, OW)
    K = Cin * KH * KW
    wt = w.reshape(Cout, K).T
    out = np.empty((N * OH * OW, Cout))
    out[:] = b
    for j in range(K):
        out += cols[:, j, None] * wt[j]
    return np.ascontiguousarray(out.reshape(N, OH, OW, Cout).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, stride, padding, g, need_gx=True):
    """Gradients of conv2d_forward w.r.t. input, weights, and bias.

    g has the output shape (N,Cout,OH,OW). Returns (gx, gw, gb); gx is None
    when need_gx is false.
    """
    N, Cin, H, W = x.shape
    Cout, _, KH, KW = w.shape
    _, _, OH, OW = g.shape
    K = Cin * KH * KW
    xp = _pad(x, padding)
    cols = _im2col(xp, KH, KW, stride, OH, OW)
    g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N * OH * OW, Cout)

    gw = np.einsum("mc,mk->ck", g_mat, cols).reshape(Cout, Cin, KH, KW)
    gb = g.sum(axis=(0, 2, 3))

    gx = None
    if need_gx:
        # Two phases: fold the Cout sum into patch space (ascending co),
        # then scatter patches back (ascending kh, kw per input element).
        wflat = w.reshape(Cout, K)
        dcols = np.zeros((N * OH * OW, K))
        for co in range(Cout):
            dcols += g_mat[:, co, None] * wflat[co]
        dc = dcols.reshape(N, OH, OW, Cin, KH, KW)
        Hp, Wp = H + 2 * padding, W + 2 * padding
        gxp = np.zeros((N, Cin, Hp, Wp))
        sOH, sOW = stride * OH, stride * OW
        for kh in range(KH):
            for kw in range(KW):
                gxp[:, :, kh:kh + sOH:stride, kw:kw + sOW:stride] += (
                    dc[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
                )
        p = padding
        gx = np.ascontiguousarray(gxp[:, :, p:p + H, p:p + W]) if p else gxp
    return gx, gw, gb


def dense_forward(x, w, b):
    """Affine map x (N,Din) @ w.T (Din,Dout) + b, accumulated in ascending j."""
    N, Din = x.shape
    Dout = w.shape[0]
    out = np.empty((N, Dout))
    out[:] = b
    for j in range(Din):
        out += x[:, j, None] * w[:, j]
    return out


def dense_backward(x, w, g, need_gx=True):
    """Gradients of dense_forward. Returns (gx, gw, gb)."""
    N, Din = x.shape
    Dout = w.shape[0]
    gw = np.zeros((Dout, Din))
    gb = np.zeros(Dout)
    for n in range(N):
        gw += g[n, :, None] * x[n]
        gb += g[n]
    gx = None
    if need_gx:
        gx = np.zeros((N, Din))
        for co in range(Dout):
            gx += g[:, co, None] * w[co]
    return gx, gw, gb


def maxpool2x2_forward(x):
    """2x2/stride-2 max pooling.

    Returns (out, idx) where idx holds the window-local argmax in
    [0,4) with window elements ordered (0,0),(0,1),(1,0),(1,1); ties go
    to the first maximum.
    """
    N, C, H, W = x.shape
    OH, OW = H // 2, W // 2
    win = x.reshape(N, C, OH, 2, OW, 2).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(N, C, OH, OW, 4)
    idx = win.argmax(axis=-1).astype(np.int64)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(g, idx, H, W):
    """Scatter g back to the argmax positions recorded by the forward pass."""
    N, C, OH, OW = g.shape
    buf = np.zeros((N, C, OH, OW, 4))
    np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
    gx = buf.reshape(N, C, OH, OW, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx).reshape(N, C, H, W)

"""Vectorized numpy implementations of the network's hot kernels.

All arrays are NCHW, float32 or float64. Convolutions are stride-1 with
'same' zero padding and an odd kernel size; pooling and upsampling work on
even spatial dimensions with a fixed factor of 2.
"""

import numpy as np


def conv2d_forward(x, w, b):
    """y[n,f] = b[f] + sum_c x[n,c] * w[f,c] (cross-correlation, same padding)."""
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2 or k % 2 != 1:
        raise ValueError(f"kernel shape {w.shape} incompatible with input {x.shape}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    y = np.zeros((n, f, h * wd), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            xs = np.ascontiguousarray(xp[:, :, i : i + h, j : j + wd])
            y += np.matmul(w[:, :, i, j][None], xs.reshape(n, c, h * wd))
    y += b.reshape(1, f, 1)
    return y.reshape(n, f, h, wd)


def conv2d_backward(x, w, dy):
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    dyf = dy.reshape(n, f, h * wd)

    db = dy.sum(axis=(0, 2, 3))
    dw = np.zeros_like(w)
    wm = w.reshape(f, c * k * k)
    dcols = np.matmul(wm.T[None], dyf)  # (n, c*k*k, h*wd)
    dcols = dcols.reshape(n, c, k, k, h, wd)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            xs = np.ascontiguousarray(xp[:, :, i : i + h, j : j + wd])
            dw[:, :, i, j] = np.tensordot(dyf, xs.reshape(n, c, h * wd), axes=([0, 2], [0, 2]))
            dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, i, j]
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    return np.ascontiguousarray(dx), dw, db


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; returns pooled values and block-local argmax.

    Ties resolve to the first maximum in row-major block order, matching the
    compiled backend.
    """
    n, c, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ValueError(f"pooling needs even spatial dims, got {h}x{wd}")
    blocks = x.reshape(n, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, wd // 2, 4)
    idx = blocks.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(dy, idx):
    """Scatter pooled gradients back to the argmax positions."""
    n, c, ho, wo = dy.shape
    dblocks = np.zeros((n, c, ho, wo, 4), dtype=dy.dtype)
    np.put_along_axis(dblocks, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = dblocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(n, c, ho * 2, wo * 2))


def upsample2_forward(x):
    """Nearest-neighbour 2x upsampling."""
    return np.ascontiguousarray(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3))


def upsample2_backward(dy):
    """Adjoint of nearest 2x upsampling: sum each 2x2 block."""
    n, c, h, wd = dy.shape
    return dy.reshape(n, c, h // 2, 2, wd // 2, 2).sum(axis=(3, 5))

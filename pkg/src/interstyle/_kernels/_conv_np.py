"""Numpy convolution backend: im2col + batched BLAS matmul.

API-compatible with the compiled backend: the forward pass returns the
padded input, and the kernel-gradient pass rebuilds the column matrix
from it.
"""

import numpy as np


def _out_hw(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _pad(x, padding):
    if padding == 0:
        return x
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride,
                                  j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d_forward(x, kernel, bias, stride, padding, fuse_relu=False):
    """Returns (out[B,Cout,Ho,Wo], xp) with the padded input retained for
    the backward passes."""
    cout, cin, kh, kw = kernel.shape
    ho, wo = _out_hw(x.shape[2], x.shape[3], kh, kw, stride, padding)
    xp = _pad(x, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = kernel.reshape(cout, -1) @ cols
    out = out.reshape(x.shape[0], cout, ho, wo)
    out += bias.reshape(1, cout, 1, 1)
    if fuse_relu:
        np.maximum(out, 0, out=out)
    return out, xp


def conv2d_backward_kernel(xp, grad_out, kernel_shape, stride):
    """d(loss)/d(kernel) from the retained padded input."""
    b, cout, ho, wo = grad_out.shape
    _, _, kh, kw = kernel_shape
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    g = grad_out.reshape(b, cout, ho * wo)
    dk = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
    return np.ascontiguousarray(dk.reshape(kernel_shape))


def conv2d_backward_input(kernel, grad_out, x_shape, stride, padding):
    b, cin, h, w = x_shape
    cout, _, kh, kw = kernel.shape
    _, _, ho, wo = grad_out.shape
    g = grad_out.reshape(b, cout, ho * wo)
    dcols = kernel.reshape(cout, -1).T @ g                # [B, Cin*kh*kw, M]
    dcols = dcols.reshape(b, cin, kh, kw, ho, wo)
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((b, cin, hp, wp), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride,
                j:j + stride * wo:stride] += dcols[:, :, i, j]
    if padding == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, padding:padding + h,
                                    padding:padding + w])

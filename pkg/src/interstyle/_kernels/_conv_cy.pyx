# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution backend.

Each batch element is lowered to a small column matrix that stays cache
resident: im2col / col2im and the BLAS contraction (sgemm/dgemm) run
per sample inside OpenMP loops over the batch. The forward pass retains
only the padded input, which the kernel-gradient pass re-lowers on the
fly; nothing batch-sized beyond the activations themselves is kept.
"""

cimport cython
cimport openmp
from cython.parallel import prange, threadid
from scipy.linalg.cython_blas cimport dgemm, sgemm

import numpy as np

ctypedef fused real:
    float
    double


def _pad(x, int padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def conv2d_forward(x, kernel, bias, int stride, int padding, bint fuse_relu=False):
    """Returns (out[B,Cout,Ho,Wo], xp) with the padded input retained for
    the backward passes."""
    cdef Py_ssize_t b = x.shape[0], cin = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t cout = kernel.shape[0], kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    cdef int nthreads = openmp.omp_get_max_threads()
    xp = _pad(x, padding)
    out = np.empty((b, cout, ho, wo), dtype=x.dtype)
    scratch = np.empty((nthreads, cin * kh * kw, ho * wo), dtype=x.dtype)
    _forward_impl(xp, np.ascontiguousarray(kernel), np.ascontiguousarray(bias),
                  stride, out, scratch, fuse_relu)
    return out, xp


def conv2d_backward_kernel(xp, grad_out, kernel_shape, int stride):
    """d(loss)/d(kernel) from the retained padded input."""
    cdef Py_ssize_t cout = grad_out.shape[1]
    cdef Py_ssize_t kh = kernel_shape[2], kw = kernel_shape[3]
    cdef Py_ssize_t cin = xp.shape[1]
    cdef Py_ssize_t l = cin * kh * kw
    cdef int nthreads = openmp.omp_get_max_threads()
    g = np.ascontiguousarray(grad_out.reshape(grad_out.shape[0], cout, -1))
    partials = np.zeros((nthreads, cout, l), dtype=grad_out.dtype)
    scratch = np.empty((nthreads, l, g.shape[2]), dtype=grad_out.dtype)
    _backward_kernel_impl(xp, g, partials, scratch, stride,
                          grad_out.shape[2], grad_out.shape[3], kh, kw)
    return partials.sum(axis=0).reshape(kernel_shape)


def conv2d_backward_input(kernel, grad_out, x_shape, int stride, int padding):
    cdef Py_ssize_t b = x_shape[0], cin = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t cout = kernel.shape[0], kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    cdef int nthreads = openmp.omp_get_max_threads()
    dxp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    scratch = np.empty((nthreads, cin * kh * kw, ho * wo), dtype=grad_out.dtype)
    _backward_input_impl(np.ascontiguousarray(kernel),
                         np.ascontiguousarray(grad_out.reshape(b, cout, -1)),
                         dxp, scratch, stride, ho, wo)
    if padding == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])


cdef inline void _im2col_one(real[:, :, :, ::1] xp, Py_ssize_t b, int stride,
                             Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t ho,
                             Py_ssize_t wo, real[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t cin = xp.shape[1]
    cdef Py_ssize_t ci, i, j, p, q, row
    for ci in range(cin):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for p in range(ho):
                    for q in range(wo):
                        cols[row, p * wo + q] = xp[b, ci, p * stride + i,
                                                   q * stride + j]


def _forward_impl(real[:, :, :, ::1] xp, real[:, :, :, ::1] k, real[::1] bias,
                  int stride, real[:, :, :, ::1] out, real[:, :, ::1] scratch,
                  bint fuse_relu):
    cdef Py_ssize_t b_n = xp.shape[0]
    cdef Py_ssize_t cout = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef int m = <int> (ho * wo), n = <int> cout
    cdef int kk = <int> (k.shape[1] * kh * kw)
    cdef Py_ssize_t b, co, p, q
    cdef int t
    cdef real one = 1.0, zero = 0.0
    cdef real *kp = &k[0, 0, 0, 0]
    for b in prange(b_n, nogil=True, schedule='static'):
        t = threadid()
        _im2col_one(xp, b, stride, kh, kw, ho, wo, scratch[t])
        # row-major out[b](Cout,M) = k(Cout,K) @ cols(K,M), phrased
        # column-major as out[b]^T = cols^T @ k^T
        if real is float:
            sgemm("N", "N", &m, &n, &kk, <float *> &one, <float *> &scratch[t, 0, 0],
                  &m, <float *> kp, &kk, <float *> &zero, <float *> &out[b, 0, 0, 0], &m)
        else:
            dgemm("N", "N", &m, &n, &kk, <double *> &one, <double *> &scratch[t, 0, 0],
                  &m, <double *> kp, &kk, <double *> &zero, <double *> &out[b, 0, 0, 0], &m)
        for co in range(cout):
            for p in range(ho):
                for q in range(wo):
                    out[b, co, p, q] += bias[co]
                    if fuse_relu and out[b, co, p, q] < 0:
                        out[b, co, p, q] = 0


def _backward_kernel_impl(real[:, :, :, ::1] xp, real[:, :, ::1] g,
                          real[:, :, ::1] partials, real[:, :, ::1] scratch,
                          int stride, Py_ssize_t ho, Py_ssize_t wo,
                          Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t b_n = g.shape[0], cout = g.shape[1]
    cdef int m = <int> g.shape[2], n = <int> cout, l = <int> partials.shape[2]
    cdef Py_ssize_t b
    cdef int t
    cdef real one = 1.0
    # dk(Cout,L) += g[b](Cout,M) @ cols(L,M)^T accumulated per thread and
    # reduced in fixed order by the caller
    for b in prange(b_n, nogil=True, schedule='static'):
        t = threadid()
        _im2col_one(xp, b, stride, kh, kw, ho, wo, scratch[t])
        if real is float:
            sgemm("T", "N", &l, &n, &m, <float *> &one, <float *> &scratch[t, 0, 0],
                  &m, <float *> &g[b, 0, 0], &m, <float *> &one,
                  <float *> &partials[t, 0, 0], &l)
        else:
            dgemm("T", "N", &l, &n, &m, <double *> &one, <double *> &scratch[t, 0, 0],
                  &m, <double *> &g[b, 0, 0], &m, <double *> &one,
                  <double *> &partials[t, 0, 0], &l)


def _backward_input_impl(real[:, :, :, ::1] k, real[:, :, ::1] g,
                         real[:, :, :, ::1] dxp, real[:, :, ::1] scratch,
                         int stride, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t b_n = g.shape[0], cin = k.shape[1]
    cdef Py_ssize_t cout = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef int m = <int> (ho * wo), n = <int> (cin * kh * kw), c_i = <int> cout
    cdef Py_ssize_t b, ci, i, j, p, q, row
    cdef int t
    cdef real one = 1.0, zero = 0.0
    cdef real *kp = &k[0, 0, 0, 0]
    for b in prange(b_n, nogil=True, schedule='static'):
        t = threadid()
        # row-major dcols(L,M) = k(Cout,L)^T @ g[b](Cout,M); column-major
        # dcols^T(M,L) = g[b]^T(M,Cout) @ k(Cout,L) with k via transb='T'
        if real is float:
            sgemm("N", "T", &m, &n, &c_i, <float *> &one, <float *> &g[b, 0, 0],
                  &m, <float *> kp, &n, <float *> &zero, <float *> &scratch[t, 0, 0], &m)
        else:
            dgemm("N", "T", &m, &n, &c_i, <double *> &one, <double *> &g[b, 0, 0],
                  &m, <double *> kp, &n, <double *> &zero, <double *> &scratch[t, 0, 0], &m)
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for p in range(ho):
                        for q in range(wo):
                            dxp[b, ci, p * stride + i, q * stride + j] += \
                                scratch[t, row, p * wo + q]

# 3x3 same-padding convolution kernels: per-sample im2col + BLAS GEMM.
# Deterministic by construction (no cross-thread reductions); float32 and
# float64 via fused types. Built by setup.py; fallback.py is the numpy twin.

cimport cython
from libc.string cimport memset

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef void _gemm(char ta, char tb, int m, int n, int k,
                real* a, int lda, real* b, int ldb,
                real beta, real* c, int ldc) noexcept nogil:
    cdef real alpha = 1
    if real is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _im2col(const real* x, real* col, int C, int H, int W) noexcept nogil:
    # col[(c*9 + ky*3 + kx), oh*W + ow] = x[c, oh+ky-1, ow+kx-1], 0 outside.
    cdef int c, ky, kx, oh, ow, ih, ow0, ow1
    cdef const real* src
    cdef real* dst
    memset(col, 0, <size_t>(C * 9 * H * W) * sizeof(real))
    for c in range(C):
        for ky in range(3):
            for kx in range(3):
                ow0 = 1 - kx if kx < 1 else 0
                ow1 = W if kx < 2 else W - 1
                dst = col + (<size_t>(c * 9 + ky * 3 + kx)) * H * W
                for oh in range(H):
                    ih = oh + ky - 1
                    if ih < 0 or ih >= H:
                        continue
                    src = x + (<size_t>c * H + ih) * W + (kx - 1)
                    for ow in range(ow0, ow1):
                        dst[oh * W + ow] = src[ow]


cdef void _col2im_add(const real* col, real* x, int C, int H, int W) noexcept nogil:
    cdef int c, ky, kx, oh, ow, ih, ow0, ow1
    cdef const real* src
    cdef real* dst
    for c in range(C):
        for ky in range(3):
            for kx in range(3):
                ow0 = 1 - kx if kx < 1 else 0
                ow1 = W if kx < 2 else W - 1
                src = col + (<size_t>(c * 9 + ky * 3 + kx)) * H * W
                for oh in range(H):
                    ih = oh + ky - 1
                    if ih < 0 or ih >= H:
                        continue
                    dst = x + (<size_t>c * H + ih) * W + (kx - 1)
                    for ow in range(ow0, ow1):
                        dst[ow] += src[oh * W + ow]


def conv3x3_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w):
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int O = w.shape[0], C9 = C * 9, HW = H * W
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((N, O, H, W), dtype=dtype)
    col_arr = np.empty((C9, HW), dtype=dtype)
    cdef real[:, :, :, ::1] y = y_arr
    cdef real[:, ::1] col = col_arr
    cdef int n
    with nogil:
        for n in range(N):
            _im2col(&x[n, 0, 0, 0], &col[0, 0], C, H, W)
            # yT (HW,O) = colT (HW,C9) @ w2T (C9,O), all as Fortran views.
            _gemm(c'N', c'N', HW, O, C9,
                  &col[0, 0], HW, &w[0, 0, 0, 0], C9,
                  <real>0, &y[n, 0, 0, 0], HW)
    return y_arr


def conv3x3_backward_input(real[:, :, :, ::1] w, real[:, :, :, ::1] gy):
    cdef int O = w.shape[0], C = w.shape[1]
    cdef int N = gy.shape[0], H = gy.shape[2], W = gy.shape[3]
    cdef int C9 = C * 9, HW = H * W
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((N, C, H, W), dtype=dtype)
    dcol_arr = np.empty((C9, HW), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, ::1] dcol = dcol_arr
    cdef int n
    with nogil:
        for n in range(N):
            # dcolT (HW,C9) = gyT (HW,O) @ w2 (O,C9)
            _gemm(c'N', c'T', HW, C9, O,
                  &gy[n, 0, 0, 0], HW, &w[0, 0, 0, 0], C9,
                  <real>0, &dcol[0, 0], HW)
            _col2im_add(&dcol[0, 0], &gx[n, 0, 0, 0], C, H, W)
    return gx_arr


def conv3x3_backward_weight(real[:, :, :, ::1] x, real[:, :, :, ::1] gy):
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int O = gy.shape[1], C9 = C * 9, HW = H * W
    dtype = np.float32 if real is float else np.float64
    gw_arr = np.zeros((O, C, 3, 3), dtype=dtype)
    col_arr = np.empty((C9, HW), dtype=dtype)
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[:, ::1] col = col_arr
    cdef int n
    with nogil:
        for n in range(N):
            _im2col(&x[n, 0, 0, 0], &col[0, 0], C, H, W)
            # gw2T (C9,O) += col (C9,HW) @ gyT (HW,O)
            _gemm(c'T', c'N', C9, O, HW,
                  &col[0, 0], HW, &gy[n, 0, 0, 0], HW,
                  <real>1, &gw[0, 0, 0, 0], C9)
    return gw_arr

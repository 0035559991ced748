# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: max pooling, LRN and the cascade window scan.

Mirrors ``facepipe._pykernels`` function for function.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport pow, powf, sqrt, sqrtf

cnp.import_array()


def maxpool_forward(floating[:, :, :, ::1] x, int kernel, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - kernel) // stride + 1
    cdef Py_ssize_t wo = (w - kernel) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int32)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef int[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, oy, ox, dy, dx, y0, x0
    cdef floating best, v
    cdef int best_i
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    y0 = oy * stride
                    for ox in range(wo):
                        x0 = ox * stride
                        best = x[b, ch, y0, x0]
                        best_i = 0
                        for dy in range(kernel):
                            for dx in range(kernel):
                                v = x[b, ch, y0 + dy, x0 + dx]
                                if v > best:
                                    best = v
                                    best_i = <int>(dy * kernel + dx)
                        out[b, ch, oy, ox] = best
                        arg[b, ch, oy, ox] = best_i
    return out_arr, arg_arr


def maxpool_backward(floating[:, :, :, ::1] grad_out, int[:, :, :, ::1] arg,
                     tuple in_shape, int kernel, int stride):
    dtype = np.float32 if floating is float else np.float64
    grad_arr = np.zeros(in_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] grad_in = grad_arr
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    cdef Py_ssize_t b, ch, oy, ox
    cdef int a
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        a = arg[b, ch, oy, ox]
                        grad_in[b, ch, oy * stride + a // kernel, ox * stride + a % kernel] += grad_out[b, ch, oy, ox]
    return grad_arr


cdef inline floating _pow(floating v, double e) noexcept nogil:
    # the default beta gets a sqrt form, which vectorises where pow does not
    if e == 0.75:
        if floating is float:
            return sqrtf(v * sqrtf(v))
        return sqrt(v * sqrt(v))
    if e == -0.75:
        if floating is float:
            return 1 / sqrtf(v * sqrtf(v))
        return 1 / sqrt(v * sqrt(v))
    if floating is float:
        return powf(v, <float>e)
    return pow(v, e)


cdef void _window_sum(floating[:, :, ::1] v, floating[:, :, ::1] out, Py_ssize_t half) noexcept nogil:
    """Channel-window sum of one image, in the same order as the numpy fallback."""
    cdef Py_ssize_t c = v.shape[0], hw = v.shape[1] * v.shape[2]
    cdef floating *src
    cdef floating *dst
    cdef Py_ssize_t i, off, p
    for i in range(c):
        dst = &out[i, 0, 0]
        src = &v[i, 0, 0]
        for p in range(hw):
            dst[p] = src[p]
    for off in range(1, half + 1):
        if off >= c:
            break
        for i in range(off, c):
            dst = &out[i, 0, 0]
            src = &v[i - off, 0, 0]
            for p in range(hw):
                dst[p] += src[p]
        for i in range(c - off):
            dst = &out[i, 0, 0]
            src = &v[i + off, 0, 0]
            for p in range(hw):
                dst[p] += src[p]


def lrn_forward(floating[:, :, :, ::1] x, double k, int n, double alpha, double beta):
    cdef Py_ssize_t nb = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t half = n // 2, hw = h * w
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((nb, c, h, w), dtype=dtype)
    den_arr = np.empty((nb, c, h, w), dtype=dtype)
    sq_arr = np.empty((c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating[:, :, :, ::1] den = den_arr
    cdef floating[:, :, ::1] sq = sq_arr
    cdef floating ka = <floating>k, al = <floating>alpha
    cdef floating *xp
    cdef floating *dp
    cdef floating *op
    cdef floating *qp
    cdef Py_ssize_t b, i, p
    with nogil:
        for b in range(nb):
            for i in range(c):
                xp = &x[b, i, 0, 0]
                qp = &sq[i, 0, 0]
                for p in range(hw):
                    qp[p] = xp[p] * xp[p]
            _window_sum(sq, den[b], half)
            for i in range(c):
                xp = &x[b, i, 0, 0]
                dp = &den[b, i, 0, 0]
                op = &out[b, i, 0, 0]
                for p in range(hw):
                    dp[p] = ka + al * dp[p]
                    op[p] = xp[p] / _pow(dp[p], beta)
    return out_arr, den_arr


def lrn_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] den,
                 floating[:, :, :, ::1] grad_out, double k, int n, double alpha, double beta):
    cdef Py_ssize_t nb = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t half = n // 2, hw = h * w
    dtype = np.float32 if floating is float else np.float64
    grad_arr = np.empty((nb, c, h, w), dtype=dtype)
    tmp_arr = np.empty((c, h, w), dtype=dtype)
    sc_arr = np.empty((c, h, w), dtype=dtype)
    inner_arr = np.empty((c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] grad_in = grad_arr
    cdef floating[:, :, ::1] tmp = tmp_arr
    cdef floating[:, :, ::1] sc = sc_arr
    cdef floating[:, :, ::1] inner = inner_arr
    cdef floating coef = <floating>(2.0 * alpha * beta)
    cdef floating *xp
    cdef floating *dp
    cdef floating *gp
    cdef floating *tp
    cdef floating *sp
    cdef floating *ip
    cdef floating *rp
    cdef Py_ssize_t b, i, p
    with nogil:
        for b in range(nb):
            for i in range(c):
                xp = &x[b, i, 0, 0]
                dp = &den[b, i, 0, 0]
                gp = &grad_out[b, i, 0, 0]
                tp = &tmp[i, 0, 0]
                sp = &sc[i, 0, 0]
                for p in range(hw):
                    sp[p] = _pow(dp[p], -beta)
                    tp[p] = gp[p] * xp[p] * sp[p] / dp[p]
            _window_sum(tmp, inner, half)
            for i in range(c):
                xp = &x[b, i, 0, 0]
                gp = &grad_out[b, i, 0, 0]
                sp = &sc[i, 0, 0]
                ip = &inner[i, 0, 0]
                rp = &grad_in[b, i, 0, 0]
                for p in range(hw):
                    rp[p] = gp[p] * sp[p] - coef * xp[p] * ip[p]
    return grad_arr


cdef inline long long _box(const long long[:, ::1] t, Py_ssize_t x, Py_ssize_t y,
                           Py_ssize_t w, Py_ssize_t h) noexcept nogil:
    return t[y + h, x + w] - t[y + h, x] - t[y, x + w] + t[y, x]


def scan_scale(const long long[:, ::1] ii, const long long[:, ::1] sq,
               const long long[::1] xs, const long long[::1] ys,
               tuple equ, double inv_area,
               const long long[:, :, ::1] rects, const double[:, ::1] weights,
               const long long[::1] node_feature, const double[::1] node_threshold,
               const long long[::1] node_left, const long long[::1] node_right,
               const long long[::1] clf_node_start, const long long[::1] clf_leaf_start,
               const double[::1] leaves,
               const long long[::1] stage_clf_start, const double[::1] stage_threshold,
               double min_variance):
    cdef Py_ssize_t ex = equ[0], ey = equ[1], ew = equ[2], eh = equ[3]
    cdef Py_ssize_t nx = xs.shape[0], ny = ys.shape[0]
    cdef Py_ssize_t n_stages = stage_threshold.shape[0]
    cdef Py_ssize_t n_rects = rects.shape[1]
    cdef Py_ssize_t cap = nx * ny
    out_x_arr = np.empty(cap, dtype=np.int64)
    out_y_arr = np.empty(cap, dtype=np.int64)
    out_m_arr = np.empty(cap, dtype=np.float64)
    cdef long long[::1] out_x = out_x_arr
    cdef long long[::1] out_y = out_y_arr
    cdef double[::1] out_m = out_m_arr
    cdef Py_ssize_t count = 0
    cdef Py_ssize_t iy, ix, st, ci, r, f
    cdef long long x, y, node, nxt
    cdef double s, s2, mean, var, std, total, val, margin
    cdef bint ok
    with nogil:
        for iy in range(ny):
            y = ys[iy]
            for ix in range(nx):
                x = xs[ix]
                s = <double>_box(ii, x + ex, y + ey, ew, eh)
                s2 = <double>_box(sq, x + ex, y + ey, ew, eh)
                mean = s * inv_area
                var = s2 * inv_area - mean * mean
                if var < min_variance:
                    continue
                std = sqrt(var)
                ok = True
                margin = 0.0
                for st in range(n_stages):
                    total = 0.0
                    for ci in range(stage_clf_start[st], stage_clf_start[st + 1]):
                        node = clf_node_start[ci]
                        while True:
                            f = node_feature[node]
                            val = 0.0
                            for r in range(n_rects):
                                if rects[f, r, 2] > 0:
                                    val += weights[f, r] * <double>_box(
                                        ii, x + rects[f, r, 0], y + rects[f, r, 1],
                                        rects[f, r, 2], rects[f, r, 3])
                            if val < node_threshold[node] * std:
                                nxt = node_left[node]
                            else:
                                nxt = node_right[node]
                            if nxt <= 0:
                                total += leaves[clf_leaf_start[ci] - nxt]
                                break
                            node = clf_node_start[ci] + nxt
                    if total < stage_threshold[st]:
                        ok = False
                        break
                    margin = total - stage_threshold[st]
                if ok:
                    out_x[count] = x
                    out_y[count] = y
                    out_m[count] = margin
                    count += 1
    return out_x_arr[:count].copy(), out_y_arr[:count].copy(), out_m_arr[:count].copy()

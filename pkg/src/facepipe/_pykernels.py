"""Pure numpy implementations of the hot kernels.

These are the fallback used when the compiled ``_ckernels`` extension is not
available. Signatures and results must match the extension exactly up to
floating point summation order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def maxpool_forward(x, kernel, stride):
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo].reshape(n, c, ho, wo, kernel * kernel)
    # argmax returns the first maximum, i.e. row-major tie breaking
    arg = win.argmax(axis=-1).astype(np.int32)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(grad_out, arg, in_shape, kernel, stride):
    n, c, h, w = in_shape
    ho, wo = grad_out.shape[2:]
    grad_in = np.zeros(in_shape, dtype=grad_out.dtype)
    for a in range(kernel * kernel):
        dy, dx = divmod(a, kernel)
        sel = np.where(arg == a, grad_out, 0)
        grad_in[:, :, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride] += sel
    return grad_in


def _window_sum(v, half):
    """Sum of ``v`` over channel offsets -half..half, clamped at the edges."""
    c = v.shape[1]
    out = v.copy()
    for off in range(1, half + 1):
        if off >= c:
            break
        out[:, off:] += v[:, :-off]
        out[:, :-off] += v[:, off:]
    return out


def lrn_forward(x, k, n, alpha, beta):
    half = n // 2
    denom = k + alpha * _window_sum(x * x, half)
    return x / denom ** beta, denom


def lrn_backward(x, denom, grad_out, k, n, alpha, beta):
    half = n // 2
    scaled = denom ** -beta
    inner = _window_sum(grad_out * x * scaled / denom, half)
    return grad_out * scaled - (2.0 * alpha * beta) * x * inner


def scan_scale(ii, sq, xs, ys, equ, inv_area, rects, weights,
               node_feature, node_threshold, node_left, node_right,
               clf_node_start, clf_leaf_start, leaves,
               stage_clf_start, stage_threshold, min_variance):
    """Vectorised cascade evaluation of every window origin ``(x, y)``.

    Returns ``(accepted_x, accepted_y, margin)`` where margin is the final
    stage sum minus its threshold.
    """
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    wx = gx.ravel().astype(np.int64)
    wy = gy.ravel().astype(np.int64)
    if wx.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)

    ex, ey, ew, eh = equ

    def box(table, x0, y0, rw, rh):
        return (table[y0 + rh, x0 + rw] - table[y0 + rh, x0]
                - table[y0, x0 + rw] + table[y0, x0])

    s = box(ii, wx + ex, wy + ey, ew, eh).astype(np.float64)
    s2 = box(sq, wx + ex, wy + ey, ew, eh).astype(np.float64)
    mean = s * inv_area
    var = s2 * inv_area - mean * mean
    keep = var >= min_variance
    wx, wy = wx[keep], wy[keep]
    std = np.sqrt(var[keep])
    margin = np.zeros(wx.size)

    n_stages = stage_threshold.shape[0]
    for st in range(n_stages):
        if wx.size == 0:
            break
        total = np.zeros(wx.size)
        for ci in range(stage_clf_start[st], stage_clf_start[st + 1]):
            node = np.full(wx.size, clf_node_start[ci], dtype=np.int64)
            leaf = np.full(wx.size, -1, dtype=np.int64)
            active = np.ones(wx.size, dtype=bool)
            while active.any():
                idx = np.nonzero(active)[0]
                nd = node[idx]
                f = node_feature[nd]
                val = np.zeros(idx.size)
                for r in range(rects.shape[1]):
                    rw_ = rects[f, r, 2]
                    wgt = weights[f, r]
                    sel = rw_ > 0
                    if not sel.any():
                        continue
                    part = box(ii, wx[idx] + rects[f, r, 0], wy[idx] + rects[f, r, 1],
                               rw_, rects[f, r, 3]).astype(np.float64)
                    val += np.where(sel, part * wgt, 0.0)
                go_left = val < node_threshold[nd] * std[idx]
                nxt = np.where(go_left, node_left[nd], node_right[nd])
                done = nxt <= 0
                leaf[idx[done]] = clf_leaf_start[ci] - nxt[done]
                node[idx[~done]] = clf_node_start[ci] + nxt[~done]
                active[idx[done]] = False
            total += leaves[leaf]
        passed = total >= stage_threshold[st]
        margin = (total - stage_threshold[st])[passed]
        wx, wy, std = wx[passed], wy[passed], std[passed]
    return wx, wy, margin

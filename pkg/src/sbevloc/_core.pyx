# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Every function here has a numpy twin in ``_pure.py`` with the same signature
and the same floating-point accumulation order wherever the public contract
depends on exact values (FAST scores, NMS order).
"""
import numpy as np

from libc.math cimport fabs

cdef int CIRCLE_R[16]
cdef int CIRCLE_C[16]
CIRCLE_R[:] = [-3, -3, -2, -1, 0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3]
CIRCLE_C[:] = [0, 1, 2, 3, 3, 3, 2, 1, 0, -1, -2, -3, -3, -3, -2, -1]


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[::1] b):
    """Stride-1 same-padded convolution, channels last."""
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], O = w.shape[3], p = k // 2
    out_arr = np.empty((B, H, W, O), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, i, j, di, dj, c, o, ii, jj
    cdef double v
    cdef double* acc
    cdef double* xp
    cdef double* wp
    cdef double* w0 = &w[0, 0, 0, 0]
    for n in range(B):
        for i in range(H):
            for j in range(W):
                acc = &out[n, i, j, 0]
                for o in range(O):
                    acc[o] = b[o]
                for di in range(k):
                    ii = i + di - p
                    if ii < 0 or ii >= H:
                        continue
                    for dj in range(k):
                        jj = j + dj - p
                        if jj < 0 or jj >= W:
                            continue
                        xp = &x[n, ii, jj, 0]
                        wp = w0 + (di * k + dj) * C * O
                        for c in range(C):
                            v = xp[c]
                            if v != 0.0:
                                for o in range(O):
                                    acc[o] += v * wp[o]
                            wp += O
    return out_arr


def conv2d_backward(double[:, :, :, ::1] g, double[:, :, :, ::1] x,
                    double[:, :, :, ::1] w, bint need_input_grad):
    """Gradients of :func:`conv2d_forward` w.r.t. weights, bias and input.

    Output pixels whose gradient is entirely zero are skipped; after the
    REM max only one rotation branch carries gradient per element.
    """
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], O = w.shape[3], p = k // 2
    gw_arr = np.zeros((k, k, C, O), dtype=np.float64)
    gb_arr = np.zeros(O, dtype=np.float64)
    # (k, k, O, C) so the input-gradient update runs over contiguous channels
    wt_arr = np.ascontiguousarray(np.swapaxes(np.asarray(w), 2, 3))
    cdef double[:, :, :, ::1] wt = wt_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, :, :, ::1] gx
    gx_arr = None
    if need_input_grad:
        gx_arr = np.zeros((B, H, W, C), dtype=np.float64)
        gx = gx_arr
    cdef Py_ssize_t n, i, j, di, dj, c, o, ii, jj
    cdef double v, gv
    cdef bint nz
    cdef double* gp
    cdef double* xp
    cdef double* gxp
    cdef double* wtp
    cdef double* gwp
    cdef double* wt0 = &wt[0, 0, 0, 0]
    cdef double* gw0 = &gw[0, 0, 0, 0]
    for n in range(B):
        for i in range(H):
            for j in range(W):
                gp = &g[n, i, j, 0]
                nz = False
                for o in range(O):
                    if gp[o] != 0.0:
                        nz = True
                        gb[o] += gp[o]
                if not nz:
                    continue
                for di in range(k):
                    ii = i + di - p
                    if ii < 0 or ii >= H:
                        continue
                    for dj in range(k):
                        jj = j + dj - p
                        if jj < 0 or jj >= W:
                            continue
                        xp = &x[n, ii, jj, 0]
                        gwp = gw0 + (di * k + dj) * C * O
                        for c in range(C):
                            v = xp[c]
                            if v != 0.0:
                                for o in range(O):
                                    gwp[o] += v * gp[o]
                            gwp += O
                        if need_input_grad:
                            gxp = &gx[n, ii, jj, 0]
                            wtp = wt0 + (di * k + dj) * O * C
                            for o in range(O):
                                gv = gp[o]
                                if gv != 0.0:
                                    for c in range(C):
                                        gxp[c] += gv * wtp[c]
                                wtp += C
    return gw_arr, gb_arr, gx_arr


cdef double _segment_score(double* d, double t, int arc) nogil:
    cdef int cls[16]
    cdef int q, start, pos, length, cur, m
    cdef double s, best = 0.0
    cdef bint uniform = True
    for q in range(16):
        if d[q] > t:
            cls[q] = 1
        elif d[q] < -t:
            cls[q] = -1
        else:
            cls[q] = 0
        if cls[q] != cls[0]:
            uniform = False
    if uniform:
        if cls[0] == 0:
            return 0.0
        s = 0.0
        for q in range(16):
            s += fabs(d[q]) - t
        return s
    start = 0
    while cls[start] == cls[(start + 15) % 16]:
        start += 1
    pos = 0
    while pos < 16:
        q = (start + pos) % 16
        cur = cls[q]
        length = 0
        while pos + length < 16 and cls[(start + pos + length) % 16] == cur:
            length += 1
        if cur != 0 and length >= arc:
            s = 0.0
            for m in range(length):
                s += fabs(d[(start + pos + m) % 16]) - t
            if s > best:
                best = s
        pos += length
    return best


def fast_scores(double[:, ::1] img, double threshold, int arc):
    """Segment-test score per pixel; 0 for non-corners and the 3-px border."""
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], i, j
    cdef int q
    cdef double center
    cdef double d[16]
    out_arr = np.zeros((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(3, H - 3):
        for j in range(3, W - 3):
            center = img[i, j]
            for q in range(16):
                d[q] = img[i + CIRCLE_R[q], j + CIRCLE_C[q]] - center
            out[i, j] = _segment_score(d, threshold, arc)
    return out_arr


def nms_greedy(long long[::1] rows, long long[::1] cols, Py_ssize_t H, Py_ssize_t W,
               int radius, Py_ssize_t max_keep):
    """Greedy suppression over candidates already in priority order.

    Returns the indices of kept candidates; a candidate is dropped when a
    kept one lies within Chebyshev distance ``radius``.
    """
    taken_arr = np.zeros((H, W), dtype=np.uint8)
    cdef unsigned char[:, ::1] taken = taken_arr
    keep_arr = np.empty(rows.shape[0], dtype=np.int64)
    cdef long long[::1] keep = keep_arr
    cdef Py_ssize_t n = 0, idx, r, c, rr, cc
    cdef bint blocked
    for idx in range(rows.shape[0]):
        if n >= max_keep:
            break
        r = rows[idx]
        c = cols[idx]
        blocked = False
        for rr in range(max(r - radius, 0), min(r + radius + 1, H)):
            for cc in range(max(c - radius, 0), min(c + radius + 1, W)):
                if taken[rr, cc]:
                    blocked = True
                    break
            if blocked:
                break
        if not blocked:
            taken[r, c] = 1
            keep[n] = idx
            n += 1
    return keep_arr[:n].copy()

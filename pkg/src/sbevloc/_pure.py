"""Numpy implementations of the kernels in ``_core.pyx``.

Used when the extension is not built or ``SBEVLOC_BACKEND=python`` is set.
Convolution results agree with the compiled path to rounding; FAST scores
and NMS selections are bit-identical because both sum in the same order.
"""
import numpy as np

CIRCLE = (
    (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
    (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
)


def conv2d_forward(x, w, b):
    B, H, W, C = x.shape
    k, O = w.shape[0], w.shape[3]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.empty((B * H * W, O))
    out[:] = b
    for di in range(k):
        for dj in range(k):
            tap = xp[:, di:di + H, dj:dj + W, :].reshape(-1, C)
            out += tap @ w[di, dj]
    return out.reshape(B, H, W, O)


def conv2d_backward(g, x, w, need_input_grad):
    B, H, W, C = x.shape
    k, O = w.shape[0], w.shape[3]
    p = k // 2
    g2 = g.reshape(-1, O)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    gw = np.empty_like(w)
    gxp = np.zeros((B, H + 2 * p, W + 2 * p, C)) if need_input_grad else None
    for di in range(k):
        for dj in range(k):
            tap = xp[:, di:di + H, dj:dj + W, :].reshape(-1, C)
            gw[di, dj] = tap.T @ g2
            if need_input_grad:
                gxp[:, di:di + H, dj:dj + W, :] += (g2 @ w[di, dj].T).reshape(B, H, W, C)
    gb = g2.sum(axis=0)
    gx = gxp[:, p:p + H, p:p + W, :].copy() if need_input_grad else None
    return gw, gb, gx


def _segment_score(d, t, arc):
    cls = [1 if v > t else (-1 if v < -t else 0) for v in d]
    if all(c == cls[0] for c in cls):
        if cls[0] == 0:
            return 0.0
        s = 0.0
        for v in d:
            s += abs(v) - t
        return s
    start = 0
    while cls[start] == cls[(start + 15) % 16]:
        start += 1
    best = 0.0
    pos = 0
    while pos < 16:
        cur = cls[(start + pos) % 16]
        length = 0
        while pos + length < 16 and cls[(start + pos + length) % 16] == cur:
            length += 1
        if cur != 0 and length >= arc:
            s = 0.0
            for m in range(length):
                s += abs(d[(start + pos + m) % 16]) - t
            if s > best:
                best = s
        pos += length
    return best


def fast_scores(img, threshold, arc):
    H, W = img.shape
    out = np.zeros((H, W))
    if H < 7 or W < 7:
        return out
    inner = img[3:H - 3, 3:W - 3]
    diffs = np.stack([img[3 + dr:H - 3 + dr, 3 + dc:W - 3 + dc] - inner for dr, dc in CIRCLE])
    # A run of `arc` same-sign pixels needs at least `arc` of them in total.
    maybe = ((diffs > threshold).sum(0) >= arc) | ((diffs < -threshold).sum(0) >= arc)
    for i, j in zip(*np.nonzero(maybe)):
        d = [float(v) for v in diffs[:, i, j]]
        out[i + 3, j + 3] = _segment_score(d, threshold, arc)
    return out


def nms_greedy(rows, cols, H, W, radius, max_keep):
    taken = np.zeros((H, W), dtype=bool)
    keep = []
    for idx, (r, c) in enumerate(zip(rows.tolist(), cols.tolist())):
        if len(keep) >= max_keep:
            break
        if taken[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1].any():
            continue
        taken[r, c] = True
        keep.append(idx)
    return np.asarray(keep, dtype=np.int64)

"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and tie-breaking; used when the extension is unavailable
or ``SUA_PURE_PYTHON=1`` is set.
"""
import numpy as np


def potts_rows(data, gamma):
    data = np.ascontiguousarray(data, dtype=np.float64)
    m, n = data.shape
    c1 = np.concatenate([np.zeros((m, 1)), np.cumsum(data, axis=1)], axis=1)
    c2 = np.concatenate([np.zeros((m, 1)), np.cumsum(data * data, axis=1)], axis=1)
    B = np.empty((m, n))
    J = np.empty((m, n), dtype=np.int64)
    # all rows advance together; candidates indexed by segment start l
    for r in range(n):
        ls = np.arange(r + 1)
        length = (r + 1 - ls).astype(np.float64)
        s1 = c1[:, r + 1:r + 2] - c1[:, ls]
        s2 = c2[:, r + 1:r + 2] - c2[:, ls]
        d = np.maximum(s2 - s1 * s1 / length, 0.0)
        prev = np.empty((m, r + 1))
        prev[:, 0] = 0.0
        if r > 0:
            prev[:, 1:] = B[:, :r] + gamma
        cand = prev + d
        k = np.argmin(cand, axis=1)
        J[:, r] = k
        B[:, r] = cand[np.arange(m), k]

    labels = np.empty((m, n), dtype=np.int64)
    recon = np.empty((m, n))
    for i in range(m):
        starts = []
        r = n - 1
        while r >= 0:
            starts.append(J[i, r])
            r = J[i, r] - 1
        starts.reverse()
        bounds = starts + [n]
        for seg, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            labels[i, lo:hi] = seg
            recon[i, lo:hi] = data[i, lo:hi].mean()
    return labels, recon


def bilinear_sample(stack, x, y):
    stack = np.asarray(stack, dtype=np.float64)
    _, h, w = stack.shape
    px = np.clip(x, 0.0, w - 1)
    py = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(px).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    top = (1.0 - fx) * stack[:, y0, x0] + fx * stack[:, y0, x1]
    bot = (1.0 - fx) * stack[:, y1, x0] + fx * stack[:, y1, x1]
    return (1.0 - fy) * top + fy * bot

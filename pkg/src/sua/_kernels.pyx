# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: row-wise exact 1D Potts and bilinear resampling."""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def potts_rows(double[:, ::1] data, double gamma):
    """Exact 1D Potts segmentation of every row of ``data``.

    Returns per-row segment labels (0, 1, ... left to right) and the
    piecewise-constant reconstruction.
    """
    cdef Py_ssize_t m = data.shape[0], n = data.shape[1]
    cdef Py_ssize_t i, r, l, k
    cdef double s1, s2, d, cand, best
    labels_arr = np.empty((m, n), dtype=np.int64)
    recon_arr = np.empty((m, n), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] labels = labels_arr
    cdef double[:, ::1] recon = recon_arr
    cdef double[::1] B = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] J = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] starts = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t nseg, lo, hi, seg

    for i in range(m):
        for r in range(n):
            s1 = 0.0
            s2 = 0.0
            best = 1e300
            J[r] = r
            l = r
            while l >= 0:
                s1 += data[i, l]
                s2 += data[i, l] * data[i, l]
                d = s2 - s1 * s1 / (r - l + 1)
                if d < 0.0:
                    d = 0.0
                if d > best:
                    break
                if l == 0:
                    cand = d
                else:
                    cand = B[l - 1] + gamma + d
                if cand <= best:
                    best = cand
                    J[r] = l
                l -= 1
            B[r] = best

        # backtrack segment starts right to left
        nseg = 0
        r = n - 1
        while r >= 0:
            starts[nseg] = J[r]
            nseg += 1
            r = J[r] - 1
        for seg in range(nseg):
            lo = starts[nseg - 1 - seg]
            hi = starts[nseg - 2 - seg] if seg < nseg - 1 else n
            s1 = 0.0
            for k in range(lo, hi):
                s1 += data[i, k]
            s1 /= (hi - lo)
            for k in range(lo, hi):
                labels[i, k] = seg
                recon[i, k] = s1
    return labels_arr, recon_arr


def bilinear_sample(double[:, :, ::1] stack, double[:, ::1] x, double[:, ::1] y):
    """Sample each channel of ``stack`` at (x, y) with border clamping."""
    cdef Py_ssize_t c = stack.shape[0], h = stack.shape[1], w = stack.shape[2]
    cdef Py_ssize_t oh = x.shape[0], ow = x.shape[1]
    cdef Py_ssize_t ch, i, j, x0, y0, x1, y1
    cdef double px, py, fx, fy
    out_arr = np.empty((c, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for i in range(oh):
        for j in range(ow):
            px = x[i, j]
            py = y[i, j]
            if px < 0.0:
                px = 0.0
            elif px > w - 1:
                px = w - 1
            if py < 0.0:
                py = 0.0
            elif py > h - 1:
                py = h - 1
            x0 = <Py_ssize_t>floor(px)
            y0 = <Py_ssize_t>floor(py)
            if x0 > w - 2:
                x0 = w - 2 if w > 1 else 0
            if y0 > h - 2:
                y0 = h - 2 if h > 1 else 0
            x1 = x0 + 1 if w > 1 else 0
            y1 = y0 + 1 if h > 1 else 0
            fx = px - x0
            fy = py - y0
            for ch in range(c):
                out[ch, i, j] = ((1.0 - fy) * ((1.0 - fx) * stack[ch, y0, x0] + fx * stack[ch, y0, x1])
                                 + fy * ((1.0 - fx) * stack[ch, y1, x0] + fx * stack[ch, y1, x1]))
    return out_arr

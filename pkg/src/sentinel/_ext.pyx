# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Same signatures and results as ``_fallback``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

NAME = "cython"


def conv2d(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
           const double[::1] b, Py_ssize_t stride):
    cdef Py_ssize_t h = x.shape[0], wd = x.shape[1], cin = x.shape[2]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (wd - kw) // stride + 1
    out_arr = np.zeros((oh, ow, cout), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, o, di, dj, c, r0, c0
    cdef double v
    # per output element the sum still runs kernel row, column, channel;
    # the output channel loop is innermost so it walks contiguous memory
    for i in range(oh):
        r0 = i * stride
        for j in range(ow):
            c0 = j * stride
            for di in range(kh):
                for dj in range(kw):
                    for c in range(cin):
                        v = x[r0 + di, c0 + dj, c]
                        for o in range(cout):
                            out[i, j, o] += v * w[di, dj, c, o]
            for o in range(cout):
                out[i, j, o] += b[o]
    return out_arr


def maxpool2d(const double[:, :, ::1] x, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t oh = x.shape[0] // ph, ow = x.shape[1] // pw, ch = x.shape[2]
    out_arr = np.empty((oh, ow, ch), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, c, di, dj
    cdef double best, v
    for i in range(oh):
        for j in range(ow):
            for c in range(ch):
                best = x[i * ph, j * pw, c]
                for di in range(ph):
                    for dj in range(pw):
                        v = x[i * ph + di, j * pw + dj, c]
                        if v > best:
                            best = v
                out[i, j, c] = best
    return out_arr


def dense(const double[::1] x, const double[:, ::1] w, const double[::1] b):
    cdef Py_ssize_t n_out = w.shape[0], n_in = w.shape[1]
    out_arr = np.empty(n_out, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, tail = n_in - n_in % 4
    cdef double a0, a1, a2, a3
    for i in range(n_out):
        # four interleaved partial sums
        a0 = a1 = a2 = a3 = 0.0
        for j in range(0, tail, 4):
            a0 += w[i, j] * x[j]
            a1 += w[i, j + 1] * x[j + 1]
            a2 += w[i, j + 2] * x[j + 2]
            a3 += w[i, j + 3] * x[j + 3]
        for j in range(tail, n_in):
            a0 += w[i, j] * x[j]
        out[i] = (a0 + a1) + (a2 + a3) + b[i]
    return out_arr


cdef inline double _iou(const double[:, ::1] bx, Py_ssize_t a, Py_ssize_t c) nogil:
    cdef double iw = min(bx[a, 2], bx[c, 2]) - max(bx[a, 0], bx[c, 0])
    cdef double ih = min(bx[a, 3], bx[c, 3]) - max(bx[a, 1], bx[c, 1])
    cdef double inter, union
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = ((bx[a, 2] - bx[a, 0]) * (bx[a, 3] - bx[a, 1])
             + (bx[c, 2] - bx[c, 0]) * (bx[c, 3] - bx[c, 1]) - inter)
    if union <= 0.0:
        return 0.0
    return inter / union


def greedy_nms(const double[:, ::1] boxes, const cnp.int64_t[::1] class_ids,
               const cnp.int64_t[::1] order, double iou_threshold):
    """Indices kept by greedy suppression, visiting candidates in ``order``."""
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t p, q, i, j
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = suppressed_arr
    keep = []
    for p in range(n):
        if suppressed[p]:
            continue
        i = order[p]
        keep.append(i)
        for q in range(p + 1, n):
            if suppressed[q]:
                continue
            j = order[q]
            if class_ids[j] == class_ids[i] and _iou(boxes, i, j) > iou_threshold:
                suppressed[q] = 1
    return keep

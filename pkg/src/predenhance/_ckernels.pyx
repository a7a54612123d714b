# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the numeric kernels in ``_pykernels``."""

import math

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, ceil, floor

cnp.import_array()

cdef double CUBIC_A = -0.5


cdef inline double _cubic(double x) nogil:
    cdef double a = CUBIC_A
    x = fabs(x)
    if x <= 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return 0.0


cdef tuple _taps(Py_ssize_t in_len, Py_ssize_t out_len):
    cdef double scale = <double>in_len / <double>out_len
    cdef double stretch = scale if scale > 1.0 else 1.0
    cdef double support = 2.0 * stretch
    cdef Py_ssize_t width = <Py_ssize_t>(2 * support) + 3
    idx_arr = np.zeros((out_len, width), dtype=np.intp)
    w_arr = np.zeros((out_len, width), dtype=np.float64)
    cnt_arr = np.zeros(out_len, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] wts = w_arr
    cdef Py_ssize_t[::1] cnt = cnt_arr
    cdef Py_ssize_t i, j, lo, hi, n, t, jj
    cdef double center, w, total
    for i in range(out_len):
        center = (i + 0.5) * scale - 0.5
        lo = <Py_ssize_t>ceil(center - support)
        hi = <Py_ssize_t>floor(center + support)
        n = 0
        total = 0.0
        for j in range(lo, hi + 1):
            w = _cubic((j - center) / stretch)
            if w == 0.0:
                continue
            jj = j
            if jj < 0:
                jj = 0
            elif jj > in_len - 1:
                jj = in_len - 1
            idx[i, n] = jj
            wts[i, n] = w
            total += w
            n += 1
        for t in range(n):
            wts[i, t] /= total
        cnt[i] = n
    return idx_arr, w_arr, cnt_arr


def bicubic_resize(src, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef double[:, :, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1], c = s.shape[2]
    ri, rw, rc = _taps(h, out_h)
    ci, cw, cc = _taps(w, out_w)
    cdef Py_ssize_t[:, ::1] r_idx = ri
    cdef double[:, ::1] r_w = rw
    cdef Py_ssize_t[::1] r_n = rc
    cdef Py_ssize_t[:, ::1] c_idx = ci
    cdef double[:, ::1] c_w = cw
    cdef Py_ssize_t[::1] c_n = cc
    tmp_arr = np.zeros((out_h, w, c))
    out_arr = np.zeros((out_h, out_w, c))
    cdef double[:, :, ::1] tmp = tmp_arr
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, t, src_i
    cdef double wt
    with nogil:
        for i in range(out_h):
            for t in range(r_n[i]):
                src_i = r_idx[i, t]
                wt = r_w[i, t]
                for j in range(w):
                    for k in range(c):
                        tmp[i, j, k] += wt * s[src_i, j, k]
        for i in range(out_h):
            for j in range(out_w):
                for t in range(c_n[j]):
                    src_i = c_idx[j, t]
                    wt = c_w[j, t]
                    for k in range(c):
                        out[i, j, k] += wt * tmp[i, src_i, k]
    return out_arr


def gaussian_filter_valid(img, kernel):
    cdef double[:, ::1] a = np.ascontiguousarray(img, dtype=np.float64)
    cdef double[::1] g = np.ascontiguousarray(kernel, dtype=np.float64)
    cdef Py_ssize_t k = g.shape[0], h = a.shape[0], w = a.shape[1]
    if h < k or w < k:
        raise ValueError("image smaller than filter window")
    cdef Py_ssize_t oh = h - k + 1, ow = w - k + 1
    tmp_arr = np.zeros((oh, w))
    out_arr = np.zeros((oh, ow))
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, t
    cdef double acc
    with nogil:
        for i in range(oh):
            for j in range(w):
                acc = 0.0
                for t in range(k):
                    acc += g[t] * a[i + t, j]
                tmp[i, j] = acc
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for t in range(k):
                    acc += g[t] * tmp[i, j + t]
                out[i, j] = acc
    return out_arr


def iou_matrix(a, b):
    cdef double[:, ::1] p = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cdef double[:, ::1] q = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t n = p.shape[0], m = q.shape[0], i, j
    out_arr = np.zeros((n, m))
    cdef double[:, ::1] out = out_arr
    cdef double iw, ih, inter, area_p, area_q
    with nogil:
        for i in range(n):
            area_p = (p[i, 2] - p[i, 0]) * (p[i, 3] - p[i, 1])
            for j in range(m):
                iw = min(p[i, 2], q[j, 2]) - max(p[i, 0], q[j, 0])
                ih = min(p[i, 3], q[j, 3]) - max(p[i, 1], q[j, 1])
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                area_q = (q[j, 2] - q[j, 0]) * (q[j, 3] - q[j, 1])
                out[i, j] = inter / (area_p + area_q - inter)
    return out_arr


def greedy_match(ious, double thresh):
    cdef double[:, ::1] m = np.ascontiguousarray(ious, dtype=np.float64)
    cdef Py_ssize_t n_pred = m.shape[0], n_ref = m.shape[1], i, j, best
    cdef double best_iou
    taken_arr = np.zeros(n_ref, dtype=np.uint8)
    out_arr = np.full(n_pred, -1, dtype=np.int64)
    cdef unsigned char[::1] taken = taken_arr
    cdef long long[::1] out = out_arr
    with nogil:
        for i in range(n_pred):
            best = -1
            best_iou = -1.0
            for j in range(n_ref):
                if not taken[j] and m[i, j] > best_iou:
                    best = j
                    best_iou = m[i, j]
            if best >= 0 and best_iou >= thresh:
                taken[best] = 1
                out[i] = best
    return out_arr


def pr_points(confidences, is_tp, Py_ssize_t n_refs):
    cdef double[::1] conf = np.ascontiguousarray(confidences, dtype=np.float64)
    cdef unsigned char[::1] flags = np.ascontiguousarray(is_tp, dtype=np.uint8)
    cdef Py_ssize_t n = conf.shape[0], i, k = 0
    rec_arr = np.zeros(n)
    prec_arr = np.zeros(n)
    cdef double[::1] rec = rec_arr
    cdef double[::1] prec = prec_arr
    cdef long tp = 0, fp = 0
    for i in range(n):
        if flags[i]:
            tp += 1
        else:
            fp += 1
        if i + 1 < n and conf[i + 1] == conf[i]:
            continue
        rec[k] = <double>tp / <double>n_refs
        prec[k] = <double>tp / <double>(tp + fp)
        k += 1
    return rec_arr[:k].copy(), prec_arr[:k].copy()


def average_precision_sorted(confidences, is_tp, Py_ssize_t n_refs, int n_points=11):
    if n_refs <= 0:
        return math.nan
    rec_arr, prec_arr = pr_points(confidences, is_tp, n_refs)
    cdef double[::1] rec = rec_arr
    cdef double[::1] prec = prec_arr
    cdef Py_ssize_t n = rec.shape[0], i, k
    cdef double total = 0.0, level, best
    if n_points > 1:
        for k in range(n_points):
            level = <double>k / <double>(n_points - 1)
            best = 0.0
            for i in range(n):
                if rec[i] >= level and prec[i] > best:
                    best = prec[i]
            total += best
        return total / n_points
    mrec = np.concatenate([[0.0], rec_arr, [1.0]])
    mpre = np.concatenate([[0.0], prec_arr, [0.0]])
    cdef double[::1] r = mrec
    cdef double[::1] p = mpre
    for i in range(p.shape[0] - 2, -1, -1):
        if p[i + 1] > p[i]:
            p[i] = p[i + 1]
    for i in range(1, r.shape[0]):
        total += (r[i] - r[i - 1]) * p[i]
    return total

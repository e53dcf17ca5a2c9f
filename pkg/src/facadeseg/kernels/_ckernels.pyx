# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_fallback.py``.

Results must match the fallback bit for bit, so no fast-math and the same
accumulation order everywhere.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport ceil

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int h, int w):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, kh, kw, h, w), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t a, b, i, j, y, x
    with nogil:
        for a in range(n):
            for b in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(h):
                            for x in range(w):
                                cols[a, b, i, j, y, x] = xp[a, b, i + y, j + x]
    return out


def col2im(real[:, :, :, :, :, ::1] cols, int hp, int wp):
    cdef Py_ssize_t n = cols.shape[0], c = cols.shape[1]
    cdef Py_ssize_t kh = cols.shape[2], kw = cols.shape[3]
    cdef Py_ssize_t h = cols.shape[4], w = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    res = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = res
    cdef Py_ssize_t a, b, i, j, y, x
    with nogil:
        for a in range(n):
            for b in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(h):
                            for x in range(w):
                                out[a, b, i + y, j + x] += cols[a, b, i, j, y, x]
    return res


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if real is float else np.float64
    pooled_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef real[:, :, :, ::1] pooled = pooled_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t a, b, y, xx, r, q, best_r, best_q
    cdef real best, v
    with nogil:
        for a in range(n):
            for b in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        best_r = 2 * y
                        best_q = 2 * xx
                        best = x[a, b, best_r, best_q]
                        for r in range(2 * y, 2 * y + 2):
                            for q in range(2 * xx, 2 * xx + 2):
                                v = x[a, b, r, q]
                                if v > best:
                                    best = v
                                    best_r = r
                                    best_q = q
                        pooled[a, b, y, xx] = best
                        idx[a, b, y, xx] = best_r * w + best_q
    return pooled_arr, idx_arr


def unpool2x2(real[:, :, :, ::1] vals, cnp.int64_t[:, :, :, ::1] idx, int h, int w):
    cdef Py_ssize_t n = vals.shape[0], c = vals.shape[1]
    cdef Py_ssize_t ho = vals.shape[2], wo = vals.shape[3]
    dtype = np.float32 if real is float else np.float64
    res = np.zeros((n, c, h * w), dtype=dtype)
    cdef real[:, :, ::1] out = res
    cdef Py_ssize_t a, b, y, x
    with nogil:
        for a in range(n):
            for b in range(c):
                for y in range(ho):
                    for x in range(wo):
                        out[a, b, idx[a, b, y, x]] = vals[a, b, y, x]
    return res.reshape(n, c, h, w)


cdef inline cnp.int32_t _find(cnp.int32_t[::1] parent, cnp.int32_t i) noexcept nogil:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


cdef inline void _union(cnp.int32_t[::1] parent, cnp.int32_t a, cnp.int32_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label_components(binary):
    img_arr = np.ascontiguousarray(binary, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] img = img_arr
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] labels = labels_arr
    parent_arr = np.zeros(h * w + 2, dtype=np.int32)
    cdef cnp.int32_t[::1] parent = parent_arr
    remap_arr = np.zeros(h * w + 2, dtype=np.int32)
    cdef cnp.int32_t[::1] remap = remap_arr
    cdef cnp.int32_t nxt = 1, lab, other, root, count = 0
    cdef Py_ssize_t y, x, dy, dx, yy, xx
    with nogil:
        # first pass: provisional labels from the already-visited neighbours
        for y in range(h):
            for x in range(w):
                if not img[y, x]:
                    continue
                lab = 0
                for dy in range(-1, 1):
                    yy = y + dy
                    if yy < 0:
                        continue
                    for dx in range(-1, 2):
                        if dy == 0 and dx >= 0:
                            continue
                        xx = x + dx
                        if xx < 0 or xx >= w:
                            continue
                        other = labels[yy, xx]
                        if other:
                            if lab == 0:
                                lab = other
                            else:
                                _union(parent, lab, other)
                if lab == 0:
                    lab = nxt
                    parent[nxt] = nxt
                    nxt += 1
                labels[y, x] = lab
        # second pass: resolve roots, numbering in raster order of first pixel
        for y in range(h):
            for x in range(w):
                lab = labels[y, x]
                if lab:
                    root = _find(parent, lab)
                    if remap[root] == 0:
                        count += 1
                        remap[root] = count
                    labels[y, x] = remap[root]
    return labels_arr, int(count)


def fill_polygon(xs, ys, int h, int w):
    cdef double[::1] px = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] py = np.ascontiguousarray(ys, dtype=np.float64)
    cdef Py_ssize_t m = px.shape[0]
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    hits_arr = np.empty(m + 1, dtype=np.float64)
    cdef double[::1] hits = hits_arr
    cdef Py_ssize_t r, k, nh, p, q, c0, c1, col
    cdef double yc, x0, y0, x1, y1, tmp
    with nogil:
        for r in range(h):
            yc = r + 0.5
            nh = 0
            for k in range(m):
                x0 = px[k]
                y0 = py[k]
                x1 = px[(k + 1) % m]
                y1 = py[(k + 1) % m]
                if (y0 <= yc) != (y1 <= yc):
                    hits[nh] = x0 + (yc - y0) * (x1 - x0) / (y1 - y0)
                    nh += 1
            # insertion sort; rings are short
            for p in range(1, nh):
                tmp = hits[p]
                q = p - 1
                while q >= 0 and hits[q] > tmp:
                    hits[q + 1] = hits[q]
                    q -= 1
                hits[q + 1] = tmp
            p = 0
            while p + 1 < nh:
                c0 = <Py_ssize_t>ceil(hits[p] - 0.5)
                c1 = <Py_ssize_t>ceil(hits[p + 1] - 0.5)
                if c0 < 0:
                    c0 = 0
                if c1 > w:
                    c1 = w
                for col in range(c0, c1):
                    out[r, col] = 1
                p += 2
    return out_arr

"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` and must return
bit-identical results; ``tests/test_kernels.py`` holds them to that.
"""
import math
from collections import deque

import numpy as np


def im2col(xp, kh, kw, h, w):
    """Gather shifted windows of a padded (N, C, Hp, Wp) array.

    Returns an array of shape (N, C, kh, kw, h, w).
    """
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, h, w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols


def col2im(cols, hp, wp):
    """Scatter-add (N, C, kh, kw, h, w) columns back into a padded image.

    Accumulation order is kernel row, then kernel column.
    """
    n, c, kh, kw, h, w = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return out


def maxpool2x2(x):
    """2x2/stride-2 max pooling over an (N, C, H, W) array with even H, W.

    Returns the pooled array and the flat (row * W + col) argmax index of
    each window; ties go to the first position in row-major order.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = np.argmax(win, axis=-1)
    pooled = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + arg // 2
    cols = 2 * np.arange(wo)[None, :] + arg % 2
    idx = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(pooled), idx


def unpool2x2(vals, idx, h, w):
    """Scatter pooled values to their recorded argmax positions."""
    n, c = vals.shape[:2]
    out = np.zeros((n, c, h * w), dtype=vals.dtype)
    np.put_along_axis(out, idx.reshape(n, c, -1), vals.reshape(n, c, -1), axis=-1)
    return out.reshape(n, c, h, w)


def label_components(binary):
    """8-connected component labelling.

    Labels are 1..n in raster order of each component's first pixel;
    background is 0.
    """
    img = np.asarray(binary, dtype=bool)
    h, w = img.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for r, c in zip(*np.nonzero(img)):
        if labels[r, c]:
            continue
        count += 1
        labels[r, c] = count
        queue = deque([(r, c)])
        while queue:
            y, x = queue.popleft()
            for dy in (-1, 0, 1):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                for dx in (-1, 0, 1):
                    xx = x + dx
                    if 0 <= xx < w and img[yy, xx] and not labels[yy, xx]:
                        labels[yy, xx] = count
                        queue.append((yy, xx))
    return labels, count


def fill_polygon(xs, ys, h, w):
    """Even-odd scanline fill sampled at pixel centres.

    Pixel (r, c) is inside when its centre (c + 0.5, r + 0.5) is inside the
    ring. Vertices may lie outside the image; the result is clipped.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    out = np.zeros((h, w), dtype=np.uint8)
    m = len(xs)
    for r in range(h):
        yc = r + 0.5
        hits = []
        for k in range(m):
            x0, y0 = xs[k], ys[k]
            x1, y1 = xs[(k + 1) % m], ys[(k + 1) % m]
            if (y0 <= yc) != (y1 <= yc):
                hits.append(x0 + (yc - y0) * (x1 - x0) / (y1 - y0))
        hits.sort()
        for a, b in zip(hits[0::2], hits[1::2]):
            c0 = max(int(math.ceil(a - 0.5)), 0)
            c1 = min(int(math.ceil(b - 0.5)), w)
            if c1 > c0:
                out[r, c0:c1] = 1
    return out

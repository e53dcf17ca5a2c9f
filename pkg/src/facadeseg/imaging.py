"""Sampling and homography helpers shared by extraction, augmentation and inference."""
import numpy as np


class SingularHomographyError(ValueError):
    pass


def bilinear_sample(img, xs, ys, wrap_x=False):
    """Sample ``img`` (H, W[, C]) at continuous index coordinates.

    Integer coordinates hit pixel values exactly. With ``wrap_x`` the
    horizontal axis is periodic (panoramas); otherwise coordinates are
    clamped to the image. Returns float64 values of shape xs.shape[+ (C,)].
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    if wrap_x:
        xs = np.mod(xs, w)
    else:
        xs = np.clip(xs, 0.0, w - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    if wrap_x:
        x0 = np.mod(x0, w)
        x1 = np.mod(x0 + 1, w)
    else:
        x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    src = img.astype(np.float64, copy=False)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def to_uint8(values):
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def check_homography(hmat):
    hmat = np.asarray(hmat, dtype=np.float64)
    if hmat.shape != (3, 3):
        raise SingularHomographyError(f"homography must be 3x3, got {hmat.shape}")
    det = np.linalg.det(hmat)
    if not np.isfinite(det) or abs(det) <= 1e-12:
        raise SingularHomographyError(f"homography is not invertible (|det| = {abs(det):.3g})")
    return hmat


def inverse_map(hmat, h, w):
    """Source coordinates for every output pixel of an (h, w) warp by ``hmat``."""
    hinv = np.linalg.inv(check_homography(hmat))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    den = hinv[2, 0] * xx + hinv[2, 1] * yy + hinv[2, 2]
    sx = (hinv[0, 0] * xx + hinv[0, 1] * yy + hinv[0, 2]) / den
    sy = (hinv[1, 0] * xx + hinv[1, 1] * yy + hinv[1, 2]) / den
    return sx, sy, den > 0


def warp_image(img, hmat, out_shape=None, eps=1e-9):
    """Inverse-warp ``img`` through ``hmat`` with bilinear sampling.

    Returns (warped uint8 image, validity mask). Output pixels whose source
    falls outside the image are black and marked invalid.
    """
    img = np.asarray(img)
    h, w = out_shape or img.shape[:2]
    sx, sy, front = inverse_map(hmat, h, w)
    sh, sw = img.shape[:2]
    valid = front & (sx >= -eps) & (sx <= sw - 1 + eps) & (sy >= -eps) & (sy <= sh - 1 + eps)
    vals = bilinear_sample(img, np.where(valid, sx, 0), np.where(valid, sy, 0))
    out = to_uint8(vals) if img.dtype == np.uint8 else vals.astype(img.dtype)
    out[~valid] = 0
    return out, valid


def warp_nearest(labels, hmat, fill, out_shape=None):
    """Nearest-neighbour inverse warp of a label array (..., H, W)."""
    labels = np.asarray(labels)
    h, w = out_shape or labels.shape[-2:]
    sh, sw = labels.shape[-2:]
    sx, sy, front = inverse_map(hmat, h, w)
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    valid = front & (ix >= 0) & (ix < sw) & (iy >= 0) & (iy < sh)
    out = labels[..., np.where(valid, iy, 0), np.where(valid, ix, 0)]
    out = np.where(valid, out, fill).astype(labels.dtype)
    return out, valid


def fit_homography(src, dst):
    """Exact homography mapping four ``src`` points onto four ``dst`` points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        b.append(u)
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.append(v)
    sol = np.linalg.solve(np.array(a), np.array(b))
    return np.append(sol, 1.0).reshape(3, 3)


def is_convex_quad(pts):
    """True if the four points form a strictly convex quadrilateral in order."""
    pts = np.asarray(pts, dtype=np.float64)
    signs = []
    for i in range(4):
        a, b, c = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        signs.append(np.sign(cross))
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)


def resize_bilinear(img, out_h, out_w):
    """Resize (H, W[, C]) with pixel-centre-aligned bilinear interpolation.

    Same-size calls return an exact copy.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    vals = bilinear_sample(img, xx, yy)
    return to_uint8(vals) if img.dtype == np.uint8 else vals.astype(img.dtype)


def resize_nearest(labels, out_h, out_w):
    """Nearest-neighbour resize over the last two axes (categorical data)."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    iy = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    ix = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return labels[..., iy[:, None], ix[None, :]]

"""Whole-image prediction by overlapping tiles, plus map and label-image output."""
from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import autograd as ag
from .imaging import resize_bilinear
from .labels import LABEL_NAMES, NEG, NUM_LABELS, POS
from .training import normalize_image
from .weights_io import atomic_write_bytes

TILE = 512
MIN_OVERLAP = 16


@dataclass(frozen=True)
class TileLayout:
    width: int
    offsets: tuple
    tile: int = TILE
    pad: int = 0
    scale: float = 1.0

    @property
    def padded_width(self):
        return self.width + self.pad

    def overlaps(self):
        return [self.offsets[k] + self.tile - self.offsets[k + 1] for k in range(len(self.offsets) - 1)]


def plan_tiles(width, tile=TILE, min_overlap=MIN_OVERLAP, scale=1.0):
    """Fewest ``tile``-wide windows covering ``width`` with >= ``min_overlap`` px overlap.

    Offsets are spread evenly from 0 to width - tile and rounded half up.
    Images narrower than one tile get a single tile, mirror-padded on the right.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    if min_overlap >= tile:
        raise ValueError("overlap must be smaller than the tile")
    if width <= tile:
        return TileLayout(width, (0,), tile, tile - width, scale)
    stride = tile - min_overlap
    n = 1 + math.ceil((width - tile) / stride)
    span = width - tile
    offsets = tuple(int(math.floor(k * span / (n - 1) + 0.5)) for k in range(n))
    return TileLayout(width, offsets, tile, 0, scale)


def tile_image(image, layout):
    """Cut an (H, W, ...) array into the layout's tiles (mirror padding if needed)."""
    image = np.asarray(image)
    if image.shape[1] != layout.width:
        raise ValueError(f"image width {image.shape[1]} does not match layout width {layout.width}")
    if layout.pad:
        pads = [(0, 0), (0, layout.pad)] + [(0, 0)] * (image.ndim - 2)
        image = np.pad(image, pads, mode="symmetric")
    return [image[:, o:o + layout.tile] for o in layout.offsets]


def merge_tiles(tiles, layout):
    """Average (C, H, tile) outputs back onto the (C, H, width) image grid."""
    tiles = [np.asarray(t, dtype=np.float64) for t in tiles]
    c, h, _ = tiles[0].shape
    acc = np.zeros((c, h, layout.padded_width))
    hits = np.zeros(layout.padded_width)
    for t, o in zip(tiles, layout.offsets):
        acc[:, :, o:o + layout.tile] += t
        hits[o:o + layout.tile] += 1
    return (acc / hits)[:, :, :layout.width]


@dataclass
class ProbabilityMaps:
    classes: tuple
    scale: float
    raw: np.ndarray | None = None  # (classes, 4, H, W)
    joint: np.ndarray | None = None  # (joint labels, H, W) for the baseline head
    joint_labels: tuple = ()
    pos: np.ndarray | None = None  # renormalised POS', (classes, H, W)
    flagged: np.ndarray | None = None

    def pos_map(self, name):
        return self.pos[self.classes.index(name)]


def renormalize_pos_neg(raw):
    """POS' = POS / (POS + NEG) per pixel; (0.5, flagged) where both vanish.

    ``raw`` has the label axis third from the end: (..., 4, H, W).
    Returns (POS', NEG', flagged).
    """
    raw = np.asarray(raw, dtype=np.float64)
    pos = raw[..., POS, :, :]
    neg = raw[..., NEG, :, :]
    s = pos + neg
    flagged = s == 0
    safe = np.where(flagged, 1.0, s)
    pos_r = np.where(flagged, 0.5, pos / safe)
    neg_r = np.where(flagged, 0.5, 1.0 - pos_r)
    return pos_r, neg_r, flagged


def scaled_size(h, w, target_h):
    return target_h, max(1, int(math.floor(w * target_h / h + 0.5)))


def predict_image(image, net, batch=4):
    """Per-class probability maps for a whole image at network-height scale."""
    spec = net.spec
    if spec.head == "baseline":
        if not spec.joint_labels:
            raise ValueError("network has an empty label vocabulary")
    elif not spec.classes:
        raise ValueError("network has an empty class vocabulary")
    image = np.asarray(image)
    th, tw = spec.input_size
    h, w = image.shape[:2]
    sh, sw = scaled_size(h, w, th)
    scaled = resize_bilinear(image, sh, sw)
    layout = plan_tiles(sw, tile=tw, min_overlap=min(MIN_OVERLAP, tw // 2), scale=th / h)
    tiles = tile_image(scaled, layout)
    outs = []
    with ag.no_grad():
        for k in range(0, len(tiles), batch):
            x = normalize_image(np.stack(tiles[k:k + batch]))
            outs.extend(net.forward(x, training=False)[-1].data.astype(np.float64))
    merged = merge_tiles(outs, layout)
    if spec.head == "baseline":
        merged /= merged.sum(axis=0, keepdims=True)
        return ProbabilityMaps(spec.classes, layout.scale, joint=merged, joint_labels=spec.joint_labels)
    raw = merged.reshape(len(spec.classes), NUM_LABELS, sh, sw)
    raw /= raw.sum(axis=1, keepdims=True)
    pos, _, flagged = renormalize_pos_neg(raw)
    return ProbabilityMaps(spec.classes, layout.scale, raw=raw, pos=pos, flagged=flagged)


def composite_single_label(pos, classes, order, base="background"):
    """Painter's-order single-label image from POS' maps.

    Returns (labels, legend) where legend[k] names label value k; value 0 is
    ``base`` and each class in ``order`` paints pixels with POS' > 0.5.
    """
    order = tuple(order)
    if not order:
        raise ValueError("composite order must be non-empty")
    pos = np.asarray(pos)
    legend = [base] + [c for c in order if c != base]
    out = np.zeros(pos.shape[1:], dtype=np.int64)
    for name in order:
        if name not in classes:
            raise ValueError(f"composite class {name!r} is not in the vocabulary")
        out[pos[classes.index(name)] > 0.5] = legend.index(name)
    return out, legend


def joint_argmax(maps):
    return np.argmax(maps.joint, axis=0)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def _tiff_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.float32), mode="F").save(buf, format="TIFF")
    return buf.getvalue()


def save_probability_maps(maps, directory, stem="pred"):
    """One float32 TIFF per class and label value, plus POS' and a JSON header."""
    os.makedirs(directory, exist_ok=True)
    header = {"scale": maps.scale, "files": []}
    if maps.raw is not None:
        for ci, name in enumerate(maps.classes):
            for li, label in enumerate(LABEL_NAMES):
                fname = f"{stem}.{name}.{label}.tif"
                atomic_write_bytes(os.path.join(directory, fname), _tiff_bytes(maps.raw[ci, li]))
                header["files"].append(fname)
            fname = f"{stem}.{name}.POS_renorm.tif"
            atomic_write_bytes(os.path.join(directory, fname), _tiff_bytes(maps.pos[ci]))
            header["files"].append(fname)
        header["flagged_pixels"] = int(maps.flagged.sum())
    else:
        for li, name in enumerate(maps.joint_labels):
            fname = f"{stem}.{name}.tif"
            atomic_write_bytes(os.path.join(directory, fname), _tiff_bytes(maps.joint[li]))
            header["files"].append(fname)
    atomic_write_bytes(os.path.join(directory, f"{stem}.maps.json"), json.dumps(header, indent=2).encode())
    return header


def read_float_tiff(path):
    with Image.open(path) as im:
        return np.array(im, dtype=np.float32)


def palette(n, seed=7):
    rng = np.random.default_rng(seed)
    cols = rng.integers(40, 256, size=(n, 3))
    cols[0] = 0
    return cols.astype(np.uint8)


def save_label_image(labels, legend, path):
    """Paletted PNG with a JSON legend next to it (``<path>.json``)."""
    labels = np.asarray(labels)
    if labels.max(initial=0) >= 256 or labels.min(initial=0) < 0:
        raise ValueError("label values must lie in 0..255")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    pal = palette(len(legend))
    im.putpalette(pal.reshape(-1).tolist())
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
    doc = {"legend": {str(k): name for k, name in enumerate(legend)},
           "palette": {name: [int(v) for v in pal[k]] for k, name in enumerate(legend)}}
    atomic_write_bytes(path + ".json", json.dumps(doc, indent=2).encode())


def load_label_image(path):
    with Image.open(path) as im:
        return np.array(im)

"""Multi-label ground truth: rasterisation, class statistics and augmentation."""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels
from .imaging import fit_homography, is_convex_quad, warp_image, warp_nearest
from .labels import CMP_CLASSES, EDG, NEG, NUM_LABELS, POS, UNK

FOOT = 0.3048


class AnnotationError(ValueError):
    pass


class MaskFormatError(ValueError):
    pass


@dataclass
class AnnotationSet:
    image_id: str
    width: int
    height: int
    mpp: float
    shapes: list = field(default_factory=list)  # (class_name, ring)
    unknown_regions: list = field(default_factory=list)

    def validate(self, vocabulary):
        vocab = set(vocabulary)
        for k, (name, ring) in enumerate(self.shapes):
            if name not in vocab:
                raise AnnotationError(f"{self.image_id}: shape {k} has unknown class {name!r}")
            if len(ring) < 3:
                raise AnnotationError(f"{self.image_id}: shape {k} ({name}) has fewer than 3 vertices")
        for k, ring in enumerate(self.unknown_regions):
            if len(ring) < 3:
                raise AnnotationError(f"{self.image_id}: unknown region {k} has fewer than 3 vertices")
        if self.width < 1 or self.height < 1 or self.mpp <= 0:
            raise AnnotationError(f"{self.image_id}: size and mpp must be positive")

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "mpp": self.mpp,
            "shapes": [{"class": c, "ring": [list(map(float, p)) for p in r]} for c, r in self.shapes],
            "unknown_regions": [[list(map(float, p)) for p in r] for r in self.unknown_regions],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(
                image_id=str(doc["image_id"]),
                width=int(doc["width"]),
                height=int(doc["height"]),
                mpp=float(doc["mpp"]),
                shapes=[(s["class"], [tuple(p) for p in s["ring"]]) for s in doc.get("shapes", [])],
                unknown_regions=[[tuple(p) for p in r] for r in doc.get("unknown_regions", [])],
            )
        except KeyError as exc:
            raise AnnotationError(f"annotation is missing field {exc.args[0]!r}") from None


def load_annotations(path):
    with open(path) as fh:
        return AnnotationSet.from_dict(json.load(fh))


@dataclass
class MultiLabelMask:
    labels: np.ndarray  # (classes, H, W) uint8 in {NEG, UNK, POS, EDG}
    classes: tuple
    mpp: float = 0.0
    image_id: str = ""

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if not self.classes:
            raise MaskFormatError("mask vocabulary must be non-empty")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3 or self.labels.shape[0] != len(self.classes):
            raise MaskFormatError(
                f"labels shape {self.labels.shape} does not match {len(self.classes)} classes"
            )

    @property
    def shape(self):
        return self.labels.shape[1:]

    def layer(self, name):
        return self.labels[self.classes.index(name)]

    def __eq__(self, other):
        return (
            isinstance(other, MultiLabelMask)
            and self.classes == other.classes
            and self.labels.shape == other.labels.shape
            and bool(np.array_equal(self.labels, other.labels))
        )


@dataclass(frozen=True)
class EdgeBandRules:
    band_m: float = 0.10
    vertical_only_classes: tuple = ("facade", "wall")
    vertical_band_m: float = FOOT

    def band_px(self, name, mpp):
        if name in self.vertical_only_classes:
            return int(round(self.vertical_band_m / mpp))
        return int(round(self.band_m / mpp))


def segment_band(h, w, a, b, band):
    """Pixels whose centre lies within ``band`` px of segment a-b (inclusive)."""
    out = np.zeros((h, w), dtype=bool)
    if band <= 0:
        return out
    (ax, ay), (bx, by) = a, b
    c0 = max(int(np.floor(min(ax, bx) - band - 1)), 0)
    c1 = min(int(np.ceil(max(ax, bx) + band + 1)), w)
    r0 = max(int(np.floor(min(ay, by) - band - 1)), 0)
    r1 = min(int(np.ceil(max(ay, by) + band + 1)), h)
    if c1 <= c0 or r1 <= r0:
        return out
    px = np.arange(c0, c1, dtype=np.float64)[None, :] + 0.5
    py = np.arange(r0, r1, dtype=np.float64)[:, None] + 0.5
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0:
        t = np.zeros_like(px * py)
    else:
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0)
    dist = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
    out[r0:r1, c0:c1] = dist <= band
    return out


def _is_vertical(a, b):
    return abs(b[1] - a[1]) > abs(b[0] - a[0])


def fill_ring(ring, h, w):
    xs = [float(p[0]) for p in ring]
    ys = [float(p[1]) for p in ring]
    return kernels.fill_polygon(xs, ys, h, w).astype(bool)


def rasterize_multilabel(ann, vocabulary=CMP_CLASSES, rules=EdgeBandRules(), size=None):
    """Per-class NEG/UNK/POS/EDG images for one annotated image.

    Priority is UNK over EDG over POS over NEG. Polygons reaching outside
    the frame are clipped.
    """
    vocabulary = tuple(vocabulary)
    if not vocabulary:
        raise MaskFormatError("vocabulary must be non-empty")
    ann.validate(vocabulary)
    w, h = size or (ann.width, ann.height)
    if (w, h) != (ann.width, ann.height):
        raise AnnotationError(f"{ann.image_id}: size {(w, h)} differs from annotated {(ann.width, ann.height)}")
    labels = np.full((len(vocabulary), h, w), NEG, dtype=np.uint8)
    for ci, name in enumerate(vocabulary):
        rings = [ring for cname, ring in ann.shapes if cname == name]
        if not rings:
            continue
        pos = np.zeros((h, w), dtype=bool)
        edg = np.zeros((h, w), dtype=bool)
        band = rules.band_px(name, ann.mpp)
        vertical_only = name in rules.vertical_only_classes
        for ring in rings:
            pos |= fill_ring(ring, h, w)
            pts = [(float(x), float(y)) for x, y in ring]
            for a, b in zip(pts, pts[1:] + pts[:1]):
                if vertical_only and not _is_vertical(a, b):
                    continue
                edg |= segment_band(h, w, a, b, band)
        labels[ci][pos] = POS
        labels[ci][edg] = EDG
    if ann.unknown_regions:
        unk = np.zeros((h, w), dtype=bool)
        for ring in ann.unknown_regions:
            unk |= fill_ring(ring, h, w)
        labels[:, unk] = UNK
    return MultiLabelMask(labels, vocabulary, ann.mpp, ann.image_id)


# ---------------------------------------------------------------------------
# statistics and weights
# ---------------------------------------------------------------------------

@dataclass
class ClassStats:
    classes: tuple
    counts: np.ndarray  # (classes, 4) int64, columns NEG/UNK/POS/EDG

    @classmethod
    def empty(cls, classes):
        return cls(tuple(classes), np.zeros((len(classes), NUM_LABELS), dtype=np.int64))

    @classmethod
    def from_mask(cls, mask):
        flat = mask.labels.reshape(len(mask.classes), -1)
        counts = np.stack([np.bincount(row, minlength=NUM_LABELS)[:NUM_LABELS] for row in flat])
        return cls(mask.classes, counts.astype(np.int64))

    def merge(self, other):
        if self.classes != other.classes:
            raise ValueError("cannot merge statistics over different vocabularies")
        return ClassStats(self.classes, self.counts + other.counts)

    @property
    def frequencies(self):
        """Share of known pixels that belong to each class (POS or EDG)."""
        known = self.counts.sum(axis=1) - self.counts[:, UNK]
        hit = self.counts[:, POS] + self.counts[:, EDG]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(known > 0, hit / np.maximum(known, 1), 0.0)


def corpus_stats(masks):
    masks = list(masks)
    if not masks:
        raise ValueError("no masks given")
    stats = ClassStats.empty(masks[0].classes)
    for m in masks:
        stats = stats.merge(ClassStats.from_mask(m))
    return stats


def median_frequency_weights(stats):
    """weight_c = median(freq) / freq_c; an even count uses the midpoint median."""
    freq = stats.frequencies
    for name, f in zip(stats.classes, freq):
        if f <= 0:
            raise ValueError(f"class {name!r} has zero frequency; its weight is undefined")
    return float(np.median(freq)) / freq


def stats_to_json(stats, weights=None):
    freq = stats.frequencies
    doc = {}
    for i, name in enumerate(stats.classes):
        entry = {"frequency": float(freq[i]), "counts": [int(v) for v in stats.counts[i]]}
        if weights is not None:
            entry["weight"] = float(weights[i])
        doc[name] = entry
    return doc


# ---------------------------------------------------------------------------
# joint labels for the single-softmax baseline
# ---------------------------------------------------------------------------

IGNORE = -1


def joint_label(mask, order=None):
    """Disjoint label image: 0 is background, class i maps to i + 1.

    Classes later in ``order`` (default: vocabulary order) win overlaps. Pixels
    that are EDG in any class take the label of the nearest pixel free of
    EDG; UNK pixels are ``IGNORE``.
    """
    classes = mask.classes
    order = classes if order is None else tuple(order)
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int64)
    for name in order:
        out[mask.layer(name) == POS] = classes.index(name) + 1
    edg = (mask.labels == EDG).any(axis=0)
    unk = (mask.labels == UNK).any(axis=0)
    clear = ~edg & ~unk
    if edg.any() and clear.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~clear, return_indices=True)
        out[edg] = out[iy[edg], ix[edg]]
    elif edg.any():
        out[edg] = IGNORE
    out[unk] = IGNORE
    return out


def joint_stats(joint_images, n_labels):
    """ClassStats over joint labels (each label as a one-vs-rest layer)."""
    counts = np.zeros((n_labels, NUM_LABELS), dtype=np.int64)
    for img in joint_images:
        img = np.asarray(img)
        valid = img >= 0
        per = np.bincount(img[valid], minlength=n_labels)[:n_labels]
        counts[:, POS] += per
        counts[:, NEG] += valid.sum() - per
        counts[:, UNK] += (~valid).sum()
    return ClassStats(tuple(range(n_labels)), counts)


# ---------------------------------------------------------------------------
# perspective augmentation
# ---------------------------------------------------------------------------

@dataclass
class WarpSample:
    homography: np.ndarray
    seed: int
    displacements: np.ndarray  # (4, 2) corner offsets in px


def sample_warp(width, height, max_disp_frac=0.20, seed=0, retries=100):
    """Random corner-displacement homography; identity after ``retries`` failures."""
    if max_disp_frac < 0:
        raise ValueError("max_disp_frac must be >= 0")
    corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)
    if max_disp_frac == 0:
        return WarpSample(np.eye(3), seed, np.zeros((4, 2)))
    rng = np.random.default_rng(seed)
    lim = max_disp_frac * width
    for _ in range(retries):
        disp = rng.uniform(-lim, lim, size=(4, 2))
        moved = corners + disp
        if is_convex_quad(moved):
            try:
                hmat = fit_homography(corners, moved)
            except np.linalg.LinAlgError:
                continue
            if abs(np.linalg.det(hmat)) > 1e-12:
                return WarpSample(hmat, seed, disp)
    return WarpSample(np.eye(3), seed, np.zeros((4, 2)))


def augment_perspective(image, mask, max_disp_frac=0.20, seed=0):
    """Warp image (bilinear) and mask (nearest); out-of-frame pixels become UNK."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if mask.shape != (h, w):
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    sample = sample_warp(w, h, max_disp_frac, seed)
    if max_disp_frac == 0 or np.array_equal(sample.homography, np.eye(3)):
        return image.copy(), MultiLabelMask(mask.labels.copy(), mask.classes, mask.mpp, mask.image_id)
    warped, valid_img = warp_image(image, sample.homography)
    labels, valid_lab = warp_nearest(mask.labels, sample.homography, UNK)
    labels[:, ~(valid_img & valid_lab)] = UNK
    return warped, MultiLabelMask(labels, mask.classes, mask.mpp, mask.image_id)


# ---------------------------------------------------------------------------
# mask files
# ---------------------------------------------------------------------------

def _png_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def manifest_name(image_id):
    return f"{image_id}.mask.json"


def encode_mask(mask):
    """Mask as {filename: bytes}: one PNG per class plus a JSON manifest."""
    files = {}
    for name, layer in zip(mask.classes, mask.labels):
        files[f"{mask.image_id}.{name}.png"] = _png_bytes(np.ascontiguousarray(layer))
    h, w = mask.shape
    manifest = {
        "image_id": mask.image_id,
        "width": int(w),
        "height": int(h),
        "mpp": mask.mpp,
        "classes": list(mask.classes),
    }
    files[manifest_name(mask.image_id)] = json.dumps(manifest, indent=2, sort_keys=True).encode()
    return files


def decode_mask(files, image_id=None, vocabulary=None):
    """Inverse of :func:`encode_mask`, validating names, values and sizes."""
    if image_id is None:
        names = [k for k in files if k.endswith(".mask.json")]
        if len(names) != 1:
            raise MaskFormatError("expected exactly one mask manifest")
        image_id = names[0][: -len(".mask.json")]
    try:
        manifest = json.loads(files[manifest_name(image_id)])
    except KeyError:
        raise MaskFormatError(f"missing manifest for {image_id!r}") from None
    classes = tuple(manifest.get("classes", ()))
    if not classes:
        raise MaskFormatError(f"{image_id}: vocabulary must be non-empty")
    if vocabulary is not None:
        for name in classes:
            if name not in vocabulary:
                raise MaskFormatError(f"{image_id}: unknown class {name!r}")
    h, w = int(manifest["height"]), int(manifest["width"])
    layers = []
    for name in classes:
        key = f"{image_id}.{name}.png"
        if key not in files:
            raise MaskFormatError(f"{image_id}: missing layer for class {name!r}")
        with Image.open(io.BytesIO(files[key])) as im:
            if im.mode != "L":
                raise MaskFormatError(f"{image_id}: class {name!r} layer is mode {im.mode}, expected L")
            arr = np.array(im)
        if arr.shape != (h, w):
            raise MaskFormatError(f"{image_id}: class {name!r} layer is {arr.shape}, manifest says {(h, w)}")
        bad = np.argwhere(arr > EDG)
        if len(bad):
            r, c = bad[0]
            raise MaskFormatError(
                f"{image_id}: class {name!r} has value {arr[r, c]} at pixel (x={c}, y={r}); allowed 0..3"
            )
        layers.append(arr)
    return MultiLabelMask(np.stack(layers), classes, float(manifest.get("mpp", 0.0)), image_id)


def save_mask(mask, directory):
    from .weights_io import atomic_write_bytes

    os.makedirs(directory, exist_ok=True)
    for name, data in encode_mask(mask).items():
        atomic_write_bytes(os.path.join(directory, name), data)


def load_mask(directory, image_id, vocabulary=None):
    prefix = f"{image_id}."
    files = {}
    for fname in os.listdir(directory):
        if fname.startswith(prefix):
            with open(os.path.join(directory, fname), "rb") as fh:
                files[fname] = fh.read()
    return decode_mask(files, image_id, vocabulary)

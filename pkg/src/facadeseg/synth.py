"""Procedural facades with polygon annotations, used as a desk-scale corpus."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import AnnotationSet, fill_ring


@dataclass(frozen=True)
class SynthConfig:
    width: int = 64
    height: int = 64
    mpp: float = 0.1
    floor_height_m: float = 3.0
    column_pitch_m: float = 2.2
    balconies: bool = True
    balcony_rate: float = 0.35
    doors: bool = True
    noise: float = 6.0

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("synthetic facades need at least 8x8 pixels")
        if self.mpp <= 0:
            raise ValueError("mpp must be positive")
        if not 0 <= self.balcony_rate <= 1:
            raise ValueError("balcony_rate must lie in [0, 1]")


def _rect(x0, y0, x1, y1):
    return [(float(x0), float(y0)), (float(x1), float(y0)), (float(x1), float(y1)), (float(x0), float(y1))]


def _paint(img, ring, colour, rng=None, jitter=0.0):
    h, w = img.shape[:2]
    m = fill_ring(ring, h, w)
    col = np.asarray(colour, dtype=np.float64)
    if rng is not None and jitter:
        col = col + rng.normal(0, jitter, 3)
    img[m] = col
    return m


def generate_facade(seed, config=SynthConfig(), image_id=None):
    """One synthetic facade: (uint8 RGB image, AnnotationSet)."""
    config.validate()
    rng = np.random.default_rng(seed)
    w, h, mpp = config.width, config.height, config.mpp
    image_id = image_id or f"synth{seed}"

    n_floors = max(1, int(round(h * mpp / config.floor_height_m)))
    n_cols = max(1, int(round(w * mpp / config.column_pitch_m)))
    fh = h / n_floors
    pitch = w / n_cols

    wall = rng.uniform(120, 220, 3)
    glass = rng.uniform(20, 70, 3) + np.array([0, 10, 30])
    frame = rng.uniform(200, 250, 3)
    sill_col = rng.uniform(170, 210) * np.ones(3)
    rail = rng.uniform(30, 70) * np.ones(3)
    door_col = np.array([90, 55, 30]) + rng.uniform(-15, 15, 3)

    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = wall
    shapes = [("facade", _rect(0, 0, w, h))]

    door_floor = n_floors - 1
    door_col_idx = int(rng.integers(n_cols)) if config.doors else -1

    win_w = max(3, int(round(pitch * rng.uniform(0.40, 0.50))))
    win_h = max(4, int(round(fh * rng.uniform(0.45, 0.55))))
    sill_h = max(3, int(round(0.35 / mpp)))

    windows = []
    for f in range(n_floors):
        top = f * fh
        for c in range(n_cols):
            cx = (c + 0.5) * pitch + rng.uniform(-0.06, 0.06) * pitch
            if f == door_floor and c == door_col_idx:
                dw = max(3, int(round(1.0 / mpp)))
                dh = min(int(round(2.2 / mpp)), int(fh) - 1)
                x0 = int(round(cx - dw / 2))
                ring = _rect(x0, h - dh, x0 + dw, h)
                _paint(img, ring, door_col, rng, 6)
                shapes.append(("door", ring))
                continue
            x0 = int(round(cx - win_w / 2))
            y0 = int(round(top + fh * 0.22 + rng.uniform(-0.03, 0.03) * fh))
            ring = _rect(x0, y0, x0 + win_w, y0 + win_h)
            _paint(img, _rect(x0 - 1, y0 - 1, x0 + win_w + 1, y0 + win_h + 1), frame, rng, 4)
            _paint(img, ring, glass, rng, 8)
            shapes.append(("window", ring))
            windows.append((x0, y0, x0 + win_w, y0 + win_h, f))

    with_balcony = set()
    if config.balconies and windows:
        upper = [i for i, win in enumerate(windows) if win[4] != door_floor] or list(range(len(windows)))
        for i in upper:
            if rng.random() < config.balcony_rate:
                with_balcony.add(i)
        if not with_balcony:
            with_balcony.add(int(rng.choice(upper)))

    for i, (x0, y0, x1, y1, _) in enumerate(windows):
        if i in with_balcony:
            continue
        ring = _rect(x0 - 1, y1, x1 + 1, y1 + sill_h)
        _paint(img, ring, sill_col, rng, 4)
        shapes.append(("sill", ring))

    for i in sorted(with_balcony):
        x0, y0, x1, y1, _ = windows[i]
        bx0, bx1 = x0 - 2, x1 + 2
        by0 = y1 - max(2, int(round((y1 - y0) * 0.4)))
        by1 = y1 + max(1, int(round(0.2 / mpp)))
        ring = _rect(bx0, by0, bx1, by1)
        m = fill_ring(ring, h, w)
        bars = np.zeros_like(m)
        bars[:, ::2] = True
        bars[by0:by0 + 1, :] = True
        img[m & bars] = rail
        shapes.append(("balcony", ring))

    img += rng.normal(0, config.noise, img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return pixels, AnnotationSet(image_id, w, h, mpp, shapes, [])


def generate_corpus(n, seed, config=SynthConfig()):
    """``n`` facades with per-image seeds spawned from ``seed``."""
    if n < 1:
        raise ValueError("n_images must be at least 1")
    children = np.random.SeedSequence(seed).generate_state(n)
    return [generate_facade(int(s), config, image_id=f"synth{seed}_{k:04d}") for k, s in enumerate(children)]

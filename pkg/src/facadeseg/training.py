"""Schedules, the SGD training loop and checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from . import autograd as ag
from .architectures import ArchitectureSpec, build
from .dataset import augment_perspective
from .losses import LossConfig, total_loss
from .optim import sgd_step, zero_grad
from .weights_io import atomic_write_bytes, decode_weights, encode_weights

log = logging.getLogger(__name__)

BASE_PREFIXES = ("enc", "dec", "head")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, message, snapshot=None):
        super().__init__(f"training diverged at iteration {iteration}: {message}")
        self.iteration = iteration
        self.snapshot = snapshot


@dataclass
class Phase:
    name: str = "main"
    iterations: int | None = None
    epochs: float | None = None
    lr: float | None = None
    lr_mult: dict = field(default_factory=dict)
    frozen: tuple = ()

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        if (self.iterations is None) == (self.epochs is None):
            raise ValueError(f"phase {self.name!r}: give exactly one of iterations or epochs")
        if (self.iterations or 0) < 0 or (self.epochs or 0) < 0:
            raise ValueError(f"phase {self.name!r}: length must be >= 0")

    def length(self, n_tiles, batch_size):
        if self.iterations is not None:
            return int(self.iterations)
        # one epoch is one pass over the tile set
        return int(np.ceil(self.epochs * n_tiles / batch_size))


@dataclass
class TrainSchedule:
    lr: float = 1e-6
    weight_decay: float = 0.0
    batch_size: int = 4
    seed: int = 0
    phases: list = field(default_factory=lambda: [Phase(iterations=1000)])
    augment: float = 0.0  # max corner displacement fraction, 0 disables

    def __post_init__(self):
        self.phases = [p if isinstance(p, Phase) else Phase(**p) for p in self.phases]
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        for p in d["phases"]:
            p["frozen"] = list(p["frozen"])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def load_preset(name):
    """A shipped JSON preset: ``{"architecture": {...}, "schedule": {...}, ...}``."""
    path = resources.files("facadeseg") / "presets" / f"{name}.json"
    if not path.is_file():
        raise ValueError(f"unknown preset {name!r}")
    return json.loads(path.read_text())


def preset_names():
    root = resources.files("facadeseg") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def normalize_image(img):
    """uint8 (H, W, 3) or (N, H, W, 3) to float (…, 3, H, W) around zero."""
    arr = np.asarray(img, dtype=np.float64)
    arr = (arr - 127.5) / 64.0
    return np.moveaxis(arr, -1, -3)


class TileSet:
    """In-memory training tiles: uint8 images plus multi-label or joint targets."""

    def __init__(self, images, masks, joint=None):
        if len(images) != len(masks) or not images:
            raise ValueError("need the same, non-zero number of images and masks")
        self.images = [np.asarray(im, dtype=np.uint8) for im in images]
        self.masks = list(masks)
        self.joint = joint  # optional callable mask -> (H, W) joint labels

    def __len__(self):
        return len(self.images)

    def batch(self, indices, augment=0.0, seed=0):
        imgs, targets = [], []
        for k, i in enumerate(indices):
            img, mask = self.images[i], self.masks[i]
            if augment:
                img, mask = augment_perspective(img, mask, augment, seed=seed * 1_000_003 + k)
            imgs.append(img)
            targets.append(self.joint(mask) if self.joint else mask.labels)
        return normalize_image(np.stack(imgs)), np.stack(targets)


class BatchOrder:
    """Deterministic epoch-wise shuffled batches."""

    def __init__(self, n, batch_size, seed):
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(seed)
        self.queue = []

    def next(self):
        out = []
        while len(out) < self.batch_size:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.n))
            out.append(int(self.queue.pop(0)))
        return out


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list
    iterations: int
    stopped_early: bool = False
    phase_ends: list = field(default_factory=list)


def _snapshot(net):
    return [(p, p.data.copy()) for p in net.parameters()], [
        (b.state, b.state.running_mean.copy(), b.state.running_var.copy()) for b in net.batchnorms()
    ]


def _restore(snap):
    params, stats = snap
    for p, data in params:
        p.data = data.copy()
        p.grad = None
    for state, mean, var in stats:
        state.running_mean = mean.copy()
        state.running_var = var.copy()


def train(net, tiles, schedule, loss_config=LossConfig(), callback=None, snapshot_every=100):
    """Run every phase of ``schedule`` on ``net`` in place.

    ``callback(iteration, loss, net)`` is called after each step; returning
    True ends training early. A non-finite loss or gradient restores the
    last good snapshot and raises :class:`TrainingDiverged`.
    """
    order = BatchOrder(len(tiles), schedule.batch_size, schedule.seed)
    params = net.parameters()
    losses, ends = [], []
    snap = _snapshot(net)
    it = 0
    for phase in schedule.phases:
        lr = schedule.lr if phase.lr is None else phase.lr
        for _ in range(phase.length(len(tiles), schedule.batch_size)):
            x, target = tiles.batch(order.next(), schedule.augment, seed=schedule.seed + it)
            try:
                outputs = net.forward(x, training=True, frozen=phase.frozen)
                loss, _ = total_loss(outputs, target, loss_config)
                loss.backward()
                sgd_step(params, lr, schedule.weight_decay, phase.lr_mult, phase.frozen)
            except ag.NonFiniteError as exc:
                _restore(snap)
                raise TrainingDiverged(it, str(exc), snap) from exc
            finally:
                zero_grad(params)
            value = float(loss.data)
            losses.append(value)
            it += 1
            if it % snapshot_every == 0:
                snap = _snapshot(net)
            if callback is not None and callback(it, value, net):
                ends.append(it)
                return TrainResult(losses, it, True, ends)
        ends.append(it)
        log.info("phase %s done after %d iterations", phase.name, it)
    return TrainResult(losses, it, False, ends)


def refinement_schedule(lr=1e-6, phase1_lr=1e-4, phase1_iterations=100_000, phase2_iterations=100_000,
                        compat_mult=100.0, **kw):
    """Two phases: compatibility block alone on a frozen base, then everything."""
    return TrainSchedule(
        lr=lr,
        phases=[
            Phase("compat-only", iterations=phase1_iterations, lr=phase1_lr, frozen=BASE_PREFIXES),
            Phase("joint", iterations=phase2_iterations, lr_mult={"compat": compat_mult}),
        ],
        **kw,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(net, extra=None):
    meta = {"architecture": net.spec.to_dict(), **(extra or {})}
    return encode_weights(net.state_entries(), meta)


def save_checkpoint(path, net, extra=None):
    atomic_write_bytes(path, encode_checkpoint(net, extra))


def load_checkpoint(path, dtype=None):
    with open(path, "rb") as fh:
        entries, manifest = decode_weights(fh.read())
    spec = ArchitectureSpec.from_dict(manifest["architecture"])
    net = build(spec, dtype=dtype)
    net.load_state_entries(entries)
    return net, manifest


def joint_training_set(images, masks):
    """Tiles with joint-label targets and median-frequency loss weights.

    Labels absent from the corpus get weight 0; the median is taken over
    the labels that occur.
    """
    from .dataset import joint_label, joint_stats, median_frequency_weights

    joints = [joint_label(m) for m in masks]
    n_labels = len(masks[0].classes) + 1
    stats = joint_stats(joints, n_labels)
    present = np.flatnonzero(stats.frequencies > 0)
    sub = type(stats)(tuple(present), stats.counts[present])
    weights = np.zeros(n_labels)
    weights[present] = median_frequency_weights(sub)
    lookup = {id(m): j for m, j in zip(masks, joints)}
    tiles = TileSet(images, masks, joint=lambda m: lookup[id(m)] if id(m) in lookup else joint_label(m))
    return tiles, LossConfig(joint_weights=tuple(weights))

"""Encoder-decoder segmentation networks with max-unpooling decoders.

Four heads are supported:

``baseline``
    one softmax over disjoint joint labels.
``multihead``
    one 4-way (NEG/UNK/POS/EDG) softmax per class, each from its own 3x3 conv.
``separable``
    as multihead, with every decoder 3x3 conv (heads included) replaced by
    a 1x9 conv, batch norm and 9x1 conv.
``compatibility``
    separable plus ``repeats`` recurrent blocks. Each block concatenates all
    per-class softmax outputs and re-predicts every class with its own 3x3
    conv. The block's weights are the same Parameter objects in every repeat.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Parameter
from .labels import CMP_CLASSES, CMP_JOINT_LABELS, NUM_LABELS
from .optim import is_frozen, unique_parameters

HEADS = ("baseline", "multihead", "separable", "compatibility")


@dataclass
class ArchitectureSpec:
    head: str = "multihead"
    encoder_blocks: list = field(default_factory=lambda: [[2, 16], [2, 32]])
    input_size: tuple = (64, 64)
    classes: tuple = CMP_CLASSES
    joint_labels: tuple = CMP_JOINT_LABELS
    repeats: int = 2
    in_channels: int = 3
    relu_slope: float | None = None
    separable_length: int = 9

    def __post_init__(self):
        self.encoder_blocks = [list(map(int, b)) for b in self.encoder_blocks]
        self.input_size = tuple(int(v) for v in self.input_size)
        self.classes = tuple(self.classes)
        self.joint_labels = tuple(self.joint_labels)

    @property
    def slope(self):
        if self.relu_slope is not None:
            return float(self.relu_slope)
        return 0.01 if self.head == "compatibility" else 0.0

    def validate(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if not self.encoder_blocks:
            raise ValueError("at least one encoder block is required")
        for convs, width in self.encoder_blocks:
            if convs < 1 or width < 1:
                raise ValueError(f"invalid encoder block ({convs}, {width})")
        div = 2 ** len(self.encoder_blocks)
        h, w = self.input_size
        if h % div or w % div:
            raise ValueError(f"input size {self.input_size} not divisible by 2^{len(self.encoder_blocks)} = {div}")
        if self.head == "baseline":
            if not self.joint_labels:
                raise ValueError("baseline head needs a non-empty joint label vocabulary")
        elif not self.classes:
            raise ValueError("class vocabulary must be non-empty")
        if self.head == "compatibility" and self.repeats < 1:
            raise ValueError("compatibility head needs repeats >= 1")
        if self.separable_length < 1 or self.separable_length % 2 == 0:
            raise ValueError("separable_length must be a positive odd number")
        return self

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["classes"] = list(self.classes)
        d["joint_labels"] = list(self.joint_labels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


PRESETS = {
    "toy": {"encoder_blocks": [[2, 16], [2, 32]], "input_size": [64, 64]},
    "small": {"encoder_blocks": [[2, 32], [2, 64], [2, 128]], "input_size": [128, 128]},
    "vgg16": {
        "encoder_blocks": [[2, 64], [2, 128], [3, 256], [3, 512], [3, 512]],
        "input_size": [512, 512],
    },
}


def preset(name, head="multihead", **overrides):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return ArchitectureSpec(head=head, **{**PRESETS[name], **overrides}).validate()


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv:
    kind = "conv"

    def __init__(self, name, cin, cout, kernel, rng, dtype, share_id=None):
        kh, kw = kernel
        std = np.sqrt(2.0 / (cin * kh * kw))
        self.name = name
        self.kernel = (kh, kw)
        self.cin, self.cout = cin, cout
        self.weight = Parameter(
            (rng.standard_normal((cout, cin, kh, kw)) * std).astype(dtype), f"{name}.weight", share_id
        )
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias", share_id)

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias)

    def __repr__(self):
        return f"Conv({self.name!r}, {self.cin}->{self.cout}, {self.kernel[0]}x{self.kernel[1]})"


class BatchNorm:
    kind = "bn"

    def __init__(self, name, channels, dtype):
        self.name = name
        self.channels = channels
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.state = BatchNormState(channels, dtype)

    def parameters(self):
        return [self.gamma, self.beta]

    def __call__(self, x, training):
        return ag.batchnorm2d(x, self.gamma, self.beta, self.state, training)

    def __repr__(self):
        return f"BatchNorm({self.name!r}, {self.channels})"


def _bank_conv(x, convs, groups=1):
    """Run several parallel convs as one call; outputs concatenated in order."""
    if len(convs) == 1:
        return ag.conv2d(x, convs[0].weight, convs[0].bias, groups=groups)
    w = ag.cat([c.weight for c in convs], axis=0)
    b = ag.cat([c.bias for c in convs], axis=0)
    return ag.conv2d(x, w, b, groups=groups)


def _bank_batchnorm(x, bns, training):
    """Per-channel batch norm over several layers stacked along channels."""
    if len(bns) == 1:
        return bns[0](x, training)
    gamma = ag.cat([b.gamma for b in bns], axis=0)
    beta = ag.cat([b.beta for b in bns], axis=0)
    ref = bns[0].state
    joint = BatchNormState(sum(b.channels for b in bns), ref.running_mean.dtype, ref.momentum, ref.eps)
    joint.running_mean = np.concatenate([b.state.running_mean for b in bns])
    joint.running_var = np.concatenate([b.state.running_var for b in bns])
    out = ag.batchnorm2d(x, gamma, beta, joint, training)
    if training:
        start = 0
        for b in bns:
            stop = start + b.channels
            b.state.running_mean = joint.running_mean[start:stop].copy()
            b.state.running_var = joint.running_var[start:stop].copy()
            start = stop
    return out


@dataclass
class LayerRecord:
    """One entry in the network's forward-ordered layer listing."""

    section: str  # encoder | decoder | head | compat
    layer: object
    repeat: int | None = None

    @property
    def name(self):
        return self.layer.name

    @property
    def kind(self):
        return self.layer.kind


class Network:
    """Executable encoder-decoder graph built from an :class:`ArchitectureSpec`."""

    def __init__(self, spec, seed=0, dtype=None, share_compat=True):
        spec.validate()
        self.spec = spec
        dtype = dtype or ag.default_dtype()
        rng = np.random.default_rng(seed)
        self.layers: list[LayerRecord] = []
        sep = spec.head in ("separable", "compatibility")
        n = spec.separable_length

        def conv(name, cin, cout, section, k=(3, 3), share_id=None, repeat=None):
            layer = Conv(name, cin, cout, k, rng, dtype, share_id)
            self.layers.append(LayerRecord(section, layer, repeat))
            return layer

        def bn(name, ch, section):
            layer = BatchNorm(name, ch, dtype)
            self.layers.append(LayerRecord(section, layer))
            return layer

        # encoder: [conv, bn, relu] * convs, then 2x2 max-pool
        self.encoder = []
        cin = spec.in_channels
        for b, (convs, width) in enumerate(spec.encoder_blocks):
            block = []
            for i in range(convs):
                block.append((conv(f"enc{b}.conv{i}", cin, width, "encoder"), bn(f"enc{b}.bn{i}", width, "encoder")))
                cin = width
            self.encoder.append(block)

        # decoder mirrors the encoder; block 0 loses its last conv to the heads
        self.decoder = {}
        widths = [w for _, w in spec.encoder_blocks]
        for b in reversed(range(len(spec.encoder_blocks))):
            convs, width = spec.encoder_blocks[b]
            count = convs if b > 0 else convs - 1
            block = []
            for i in range(count):
                cout = widths[b - 1] if (b > 0 and i == count - 1) else width
                name = f"dec{b}.conv{i}"
                if sep:
                    unit = (
                        conv(f"{name}.h", width, cout, "decoder", (1, n)),
                        bn(f"{name}.bn", cout, "decoder"),
                        conv(f"{name}.v", cout, cout, "decoder", (n, 1)),
                    )
                else:
                    unit = (conv(name, width, cout, "decoder"),)
                block.append((unit, bn(f"dec{b}.bn{i}", cout, "decoder")))
            self.decoder[b] = block
        head_in = widths[0]

        # output heads
        self.heads = []
        if spec.head == "baseline":
            self.heads.append(conv("head.joint", head_in, len(spec.joint_labels), "head"))
        elif spec.head == "multihead":
            for cls in spec.classes:
                self.heads.append(conv(f"head.{cls}", head_in, NUM_LABELS, "head"))
        else:
            self.head_h = [conv(f"head.{cls}.h", head_in, NUM_LABELS, "head", (1, n)) for cls in spec.classes]
            self.head_bn = [bn(f"head.{cls}.bn", NUM_LABELS, "head") for cls in spec.classes]
            self.head_v = [conv(f"head.{cls}.v", NUM_LABELS, NUM_LABELS, "head", (n, 1)) for cls in spec.classes]

        # recurrent compatibility blocks
        self.compat = []
        if spec.head == "compatibility":
            width = NUM_LABELS * len(spec.classes)
            first = [
                conv(f"compat.{cls}", width, NUM_LABELS, "compat", share_id=f"compat.{cls}", repeat=0)
                for cls in spec.classes
            ]
            self.compat.append(first)
            for r in range(1, spec.repeats):
                if share_compat:
                    for layer in first:
                        self.layers.append(LayerRecord("compat", layer, r))
                    self.compat.append(first)
                else:
                    clones = []
                    for layer in first:
                        twin = copy.deepcopy(layer)
                        twin.name = f"compat.r{r}.{layer.name.split('.', 1)[1]}"
                        twin.weight.name = f"{twin.name}.weight"
                        twin.bias.name = f"{twin.name}.bias"
                        twin.weight.share_id = twin.bias.share_id = None
                        self.layers.append(LayerRecord("compat", twin, r))
                        clones.append(twin)
                    self.compat.append(clones)

    # -- introspection -----------------------------------------------------

    @property
    def num_groups(self):
        return 1 if self.spec.head == "baseline" else len(self.spec.classes)

    @property
    def num_stages(self):
        return 1 + (self.spec.repeats if self.spec.head == "compatibility" else 0)

    @property
    def num_loss_terms(self):
        return self.num_stages * self.num_groups

    def modules(self):
        seen, out = set(), []
        for rec in self.layers:
            if id(rec.layer) not in seen:
                seen.add(id(rec.layer))
                out.append(rec.layer)
        return out

    def parameters(self):
        return unique_parameters(p for m in self.modules() for p in m.parameters())

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def batchnorms(self):
        return [m for m in self.modules() if m.kind == "bn"]

    def parameter_count(self, section=None):
        params = unique_parameters(
            p for rec in self.layers if section is None or rec.section == section for p in rec.layer.parameters()
        )
        return int(sum(p.data.size for p in params))

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for b in self.batchnorms():
            b.state.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].data.dtype

    # -- forward -------------------------------------------------------------

    def forward(self, x, training=False, frozen=()):
        """Run the network; returns the list of per-stage softmax outputs.

        Each stage is (N, classes*4, H, W), or (N, joint_labels, H, W) for the
        baseline head. Batch norms whose parameters are frozen run on their
        running statistics.
        """
        x = ag.as_tensor(x, dtype=self.dtype)
        n, c, h, w = x.shape
        if (h, w) != self.spec.input_size:
            raise ag.ShapeError(f"network built for {self.spec.input_size}, got input {(h, w)}")
        if c != self.spec.in_channels:
            raise ag.ShapeError(f"network expects {self.spec.in_channels} input channels, got {c}")
        slope = self.spec.slope

        def norm(layer, t):
            return layer(t, training and not is_frozen(layer.gamma.name, frozen))

        pools = []
        for block in self.encoder:
            for cv, bnorm in block:
                x = ag.leaky_relu(norm(bnorm, cv(x)), slope)
            x, rec = ag.maxpool2x2_with_indices(x)
            pools.append(rec)
        for b in reversed(range(len(self.encoder))):
            x = ag.max_unpool2x2(x, pools[b])
            for unit, bnorm in self.decoder[b]:
                if len(unit) == 3:
                    hconv, mid, vconv = unit
                    x = vconv(norm(mid, hconv(x)))
                else:
                    x = unit[0](x)
                x = ag.leaky_relu(norm(bnorm, x), slope)

        g = self.num_groups
        if self.spec.head == "baseline":
            probs = ag.softmax_channels(self.heads[0](x))
        elif self.spec.head == "multihead":
            probs = ag.softmax_channels(_bank_conv(x, self.heads), groups=g)
        else:
            z = _bank_conv(x, self.head_h)
            trainable = [b for b in self.head_bn if not is_frozen(b.gamma.name, frozen)]
            z = _bank_batchnorm(z, self.head_bn, training and len(trainable) == len(self.head_bn))
            z = _bank_conv(z, self.head_v, groups=g)
            probs = ag.softmax_channels(z, groups=g)
        stages = [probs]
        for block in self.compat:
            probs = ag.softmax_channels(_bank_conv(probs, block), groups=g)
            stages.append(probs)
        return stages

    __call__ = forward

    def encode(self, x):
        """Encoder features only (eval mode); used to compare refinements."""
        x = ag.as_tensor(x, dtype=self.dtype)
        with ag.no_grad():
            for block in self.encoder:
                for cv, bnorm in block:
                    x = ag.leaky_relu(bnorm(cv(x), False), self.spec.slope)
                x, _ = ag.maxpool2x2_with_indices(x)
        return x.data

    # -- state -----------------------------------------------------------------

    def state_entries(self):
        entries = [
            {"name": p.name, "kind": "param", "array": p.data, "share_id": p.share_id} for p in self.parameters()
        ]
        for b in self.batchnorms():
            entries.append({"name": f"{b.name}.running_mean", "kind": "running_mean", "array": b.state.running_mean})
            entries.append({"name": f"{b.name}.running_var", "kind": "running_var", "array": b.state.running_var})
        return entries

    def load_state_entries(self, entries, strict=True):
        params = self.named_parameters()
        bns = {b.name: b for b in self.batchnorms()}
        seen = set()
        for e in entries:
            name, arr = e["name"], np.asarray(e["array"])
            if e["kind"] == "param":
                if name not in params:
                    if strict:
                        raise KeyError(f"unexpected parameter {name!r}")
                    continue
                p = params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name!r}: {p.data.shape} vs {arr.shape}")
                p.data = arr.astype(p.data.dtype).copy()
                seen.add(name)
            else:
                layer = name.rsplit(".", 1)[0]
                if layer in bns:
                    setattr(bns[layer].state, e["kind"], arr.astype(bns[layer].state.running_mean.dtype).copy())
        missing = set(params) - seen
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")


def build(spec, seed=0, dtype=None, share_compat=True):
    """Build a :class:`Network` for ``spec`` with He-normal initial weights."""
    return Network(spec, seed=seed, dtype=dtype, share_compat=share_compat)


def truncated_normal(rng, shape, limit=2.0):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > limit
    return out


def init_refinement(target, source, seed=0, scale=0.01):
    """Initialise ``target`` from ``source`` for refinement training.

    Parameters present in both (same name) are copied and must have the same
    shape; batch-norm running statistics are copied the same way. New conv
    weights are drawn from a standard normal truncated at +-2 and scaled by
    ``scale``; new biases and batch-norm shifts start at 0, new batch-norm
    scales at 1.
    """
    rng = np.random.default_rng(seed)
    src = source.named_parameters()
    for p in target.parameters():
        if p.name in src:
            q = src[p.name]
            if q.data.shape != p.data.shape:
                raise ValueError(f"refinement shape mismatch for {p.name!r}: {q.data.shape} vs {p.data.shape}")
            p.data = q.data.astype(p.data.dtype).copy()
        elif p.name.endswith(".weight"):
            p.data = (truncated_normal(rng, p.data.shape) * scale).astype(p.data.dtype)
        elif p.name.endswith(".gamma"):
            p.data = np.ones_like(p.data)
        else:
            p.data = np.zeros_like(p.data)
        p.grad = None
    src_bn = {b.name: b for b in source.batchnorms()}
    for b in target.batchnorms():
        if b.name in src_bn:
            s = src_bn[b.name].state
            b.state.running_mean = s.running_mean.astype(b.state.running_mean.dtype).copy()
            b.state.running_var = s.running_var.astype(b.state.running_var.dtype).copy()
    return target


def unshared_clone(net):
    """Copy of a compatibility network whose repeats own separate weights.

    Each repeat's convs start from the shared values; used to check that the
    shared network's gradients are the per-repeat gradients summed.
    """
    clone = build(net.spec, dtype=net.dtype, share_compat=False)
    src = net.named_parameters()
    for p in clone.parameters():
        key = p.name
        if key.startswith("compat.r"):
            key = "compat." + key.split(".", 2)[2]
        p.data = src[key].data.copy()
    src_bn = {b.name: b for b in net.batchnorms()}
    for b in clone.batchnorms():
        b.state.running_mean = src_bn[b.name].state.running_mean.copy()
        b.state.running_var = src_bn[b.name].state.running_var.copy()
    return clone

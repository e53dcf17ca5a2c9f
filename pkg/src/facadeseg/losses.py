"""Loss weighting and the summed multi-stage training objective."""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .labels import NUM_LABELS


@dataclass
class LossConfig:
    """Per-label loss weights, indexed by ground-truth label value.

    ``joint_weights`` (one per joint label) is used instead by the baseline
    single-softmax head, typically from median-frequency balancing.
    """

    neg: float = 0.5
    unk: float = 0.0
    pos: float = 1.0
    edg: float = 6.0
    joint_weights: tuple | None = None

    def __post_init__(self):
        if self.unk != 0:
            raise ValueError("UNK must carry zero loss weight")
        if min(self.neg, self.pos, self.edg) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.joint_weights is not None:
            self.joint_weights = tuple(float(w) for w in self.joint_weights)
            if min(self.joint_weights) < 0:
                raise ValueError("joint loss weights must be non-negative")

    @property
    def label_weights(self):
        return np.array([self.neg, self.unk, self.pos, self.edg], dtype=np.float64)


def total_loss(outputs, target, config):
    """Sum the weighted cross-entropy over every stage and class.

    For multi-label heads ``target`` is (N, classes, H, W) in NEG/UNK/POS/EDG
    values and each stage is (N, classes*4, H, W). For the baseline head
    ``target`` is (N, H, W) joint labels (negative = ignore) and the single
    stage is (N, joint_labels, H, W).

    Returns ``(loss, n_terms)``.
    """
    target = np.asarray(target)
    terms = []
    for stage in outputs:
        ch = stage.shape[1]
        if target.ndim == 3:
            weights = config.joint_weights
            if weights is None:
                weights = np.ones(ch)
            if len(weights) != ch:
                raise ValueError(f"{len(weights)} joint weights for a {ch}-label output")
            terms.append(ag.weighted_cross_entropy(stage, target, weights))
        else:
            if ch != NUM_LABELS * target.shape[1]:
                raise ValueError(
                    f"vocabulary mismatch: output has {ch} channels, target has {target.shape[1]} classes"
                )
            terms.append(ag.weighted_cross_entropy(stage, target, config.label_weights))
    per_term = ag.cat(terms, axis=0) if len(terms) > 1 else terms[0]
    return ag.total(per_term), int(per_term.shape[0])

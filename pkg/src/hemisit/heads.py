"""Classifier heads, the three-term joint loss, and ACC/SEN/SPE/AUC."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from . import ops
from .errors import ConfigurationError, InputError
from .nn import Linear, Module
from .tensor import Tensor

HEAD_HIDDEN = 64
N_CLASSES = 2
DEFAULT_LAMBDA = 0.25
DEFAULT_GAMMA = 0.25
THRESHOLD = 0.5


class Classifier(Module):
    """linear -> ReLU -> linear; softmax is applied by :meth:`classify`."""

    def __init__(self, rng, d_in=128, hidden=HEAD_HIDDEN, n_classes=N_CLASSES):
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, n_classes, gain=1.0)

    def logits(self, g: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(g)))

    def classify(self, g: Tensor) -> Tensor:
        return ops.softmax(self.logits(g), axis=-1)

    __call__ = logits


def classify(g: Tensor, head: Classifier) -> Tensor:
    return head.classify(g)


def check_loss_weights(lam, gam):
    if lam < 0 or gam < 0:
        raise ConfigurationError(f"loss weights must be non-negative, got lambda={lam}, gamma={gam}")


def combine_losses(loss_l, loss_r, loss_all, lam=DEFAULT_LAMBDA, gam=DEFAULT_GAMMA):
    check_loss_weights(lam, gam)
    total = loss_all
    if lam:
        total = ops.add(total, ops.scale(loss_l, lam))
    if gam:
        total = ops.add(total, ops.scale(loss_r, gam))
    return total


def joint_loss(logits_l, logits_r, logits_all, labels, lam=DEFAULT_LAMBDA, gam=DEFAULT_GAMMA):
    """lam * CE_left + gam * CE_right + CE_all.

    Takes pre-softmax logits; the cross-entropy op applies the softmax
    internally with max subtraction.  Returns ``(total, parts)``.
    """
    loss_all = ops.cross_entropy(logits_all, labels)
    loss_l = ops.cross_entropy(logits_l, labels) if logits_l is not None else None
    loss_r = ops.cross_entropy(logits_r, labels) if logits_r is not None else None
    total = combine_losses(loss_l, loss_r, loss_all, lam, gam)
    return total, {"loss_all": loss_all, "loss_l": loss_l, "loss_r": loss_r}


@dataclass
class MetricsReport:
    acc: float
    sen: float
    spe: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self):
        d = asdict(self)
        for k in ("acc", "sen", "spe", "auc"):
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        return d

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        vals = dict(d)
        for k in ("acc", "sen", "spe", "auc"):
            if vals[k] is None:
                vals[k] = float("nan")
        return cls(**vals)


def _ratio(num, den):
    return num / den if den else float("nan")


def auc_rank(scores, labels):
    """Mann-Whitney AUC from average ranks (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold=THRESHOLD) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise InputError(f"{scores.size} scores but {labels.size} labels")
    if scores.size == 0:
        raise InputError("no samples to score")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return MetricsReport(
        acc=(tp + tn) / scores.size,
        sen=_ratio(tp, tp + fn),
        spe=_ratio(tn, tn + fp),
        auc=auc_rank(scores, pos),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )

"""Training objectives: focal / dice / smooth-L1 and their 2D and 3D compositions."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

IGNORE = -1
TERM_NAMES = ("geo3d", "sem3d", "rgb3d", "sem2d", "depth2d", "rgb2d")


class EmptyLossWarning(UserWarning):
    """A loss was asked to average over zero valid entries; it returns 0."""


@dataclass
class LossWeights:
    focal: float = 1.0
    dice: float = 1.0
    rgb: float = 1.0
    depth: float = 2.0
    gamma: float = 2.0
    criterion: str = "focal"  # or "wce"

    def __post_init__(self):
        for name in ("focal", "dice", "rgb", "depth"):
            if getattr(self, name) < 0:
                raise T.ConfigError(f"loss weight {name} must be >= 0")
        if self.criterion not in ("focal", "wce"):
            raise T.ConfigError(f"unknown criterion {self.criterion!r}")


def _zero():
    return Tensor(0.0)


def focal_loss(logits, targets, gamma=2.0, class_weights=None):
    """Mean of -w_t (1-p_t)^gamma log p_t over entries whose target != IGNORE."""
    targets = np.asarray(targets).reshape(-1)
    n, k = logits.shape
    valid = np.flatnonzero(targets != IGNORE)
    if valid.size == 0:
        warnings.warn("focal_loss over empty selection", EmptyLossWarning, stacklevel=2)
        return _zero()
    t = targets[valid]
    if t.min() < 0 or t.max() >= k:
        raise ValueError(f"targets must lie in [0, {k}), got range [{t.min()}, {t.max()}]")
    logp = T.log_softmax(T.take_rows(logits, valid) if valid.size < n else logits, axis=-1)
    logp_t = logp[np.arange(valid.size), t]
    w = np.ones(valid.size) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[t]
    if gamma == 0:
        per = logp_t * Tensor(-w)
    else:
        per = ((1.0 - T.exp(logp_t)) ** gamma) * logp_t * Tensor(-w)
    return T.mean(per)


def weighted_cross_entropy(logits, targets, class_weights=None):
    """Class-weighted CE normalized by the summed weights of valid entries."""
    targets = np.asarray(targets).reshape(-1)
    valid = np.flatnonzero(targets != IGNORE)
    if valid.size == 0:
        warnings.warn("weighted_cross_entropy over empty selection", EmptyLossWarning, stacklevel=2)
        return _zero()
    t = targets[valid]
    logp = T.log_softmax(T.take_rows(logits, valid), axis=-1)
    w = np.ones(valid.size) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[t]
    return T.sum_(logp[np.arange(valid.size), t] * Tensor(-w)) * (1.0 / w.sum())


def dice_loss(probs, targets, eps=1e-6):
    """Soft one-vs-rest dice averaged over all K classes."""
    targets = np.asarray(targets).reshape(-1)
    valid = np.flatnonzero(targets != IGNORE)
    if valid.size == 0:
        warnings.warn("dice_loss over empty selection", EmptyLossWarning, stacklevel=2)
        return _zero()
    k = probs.shape[1]
    p = T.take_rows(probs, valid) if valid.size < probs.shape[0] else probs
    onehot = np.eye(k)[targets[valid]]
    inter = T.sum_(p * Tensor(onehot), axis=0)
    denom = T.sum_(p, axis=0) + Tensor(onehot.sum(0) + eps)
    score = (inter * 2.0 + eps) / denom
    return 1.0 - T.mean(score)


def smooth_l1(pred, target, mask=None):
    """0.5 x^2 below |x|=1, |x|-0.5 above; mean over unmasked elements.

    ``mask`` may match ``pred`` or its leading axis (row mask).
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if target.shape != pred.shape:
        raise T.ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    if mask is None:
        m = np.ones(pred.shape)
    else:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != pred.shape:
            m = np.broadcast_to(m.reshape(m.shape + (1,) * (pred.ndim - m.ndim)), pred.shape)
    count = m.sum()
    if count == 0:
        warnings.warn("smooth_l1 with every element masked", EmptyLossWarning, stacklevel=2)
        return _zero()
    diff = pred - Tensor(target)
    ad = np.abs(diff.data)
    quad = ad < 1.0
    # elementwise: 0.5 d^2 where quadratic, |d| - 0.5 elsewhere
    val = diff * diff * Tensor(0.5 * quad * m) + T.abs_(diff) * Tensor(~quad * m) - Tensor(0.5 * ~quad * m)
    return T.sum_(val) * (1.0 / count)


def _class_term(logits, targets, weights, class_weights=None):
    if weights.criterion == "wce":
        first = weighted_cross_entropy(logits, targets, class_weights)
    else:
        first = focal_loss(logits, targets, weights.gamma, class_weights)
    probs = T.softmax(logits, axis=-1)
    return first * weights.focal + dice_loss(probs, targets) * weights.dice


def loss_3d(pred, labels, weights, rgb_target=None, rgb_mask=None, class_weights=None):
    """Fine-query semantic, geometry and texture losses.

    ``labels``: per-query classes in {0..S}. Geometry targets are label != 0.
    Returns a dict with keys sem3d, geo3d, rgb3d and a set of flags.
    """
    labels = np.asarray(labels).reshape(-1)
    if labels.size != pred.fine_sem.shape[0]:
        raise ValueError(f"{labels.size} labels for {pred.fine_sem.shape[0]} queries")
    flags = set()
    sem = _class_term(pred.fine_sem, labels, weights, class_weights)
    geo_t = np.where(labels == IGNORE, IGNORE, (labels != 0).astype(np.int64))
    geo = _class_term(pred.fine_geo, geo_t, weights)
    if rgb_target is None or rgb_mask is None or not np.any(rgb_mask):
        flags.add("rgb3d_empty")
        rgb = _zero()
    else:
        rgb = smooth_l1(pred.fine_rgb, rgb_target, rgb_mask) * weights.rgb
    return {"sem3d": sem, "geo3d": geo, "rgb3d": rgb}, flags


def loss_2d(aux, sem_label, depth_label, rgb_label, weights):
    """2D auxiliary losses for one sampled camera.

    aux: (sem_logits S×H×W, depth 1×H×W, rgb 3×H×W). ``sem_label`` holds
    classes 0..S-1 or IGNORE; ``depth_label`` holds metres or a negative
    sentinel. Only labelled pixels enter the sem/depth terms.
    """
    sem_logits, depth, rgb = aux
    s = sem_logits.shape[0]
    flags = set()
    sem_flat = T.reshape(T.transpose(sem_logits, (1, 2, 0)), (-1, s))
    labels = np.asarray(sem_label).reshape(-1)
    if np.any(labels != IGNORE):
        sem = _class_term(sem_flat, labels, weights)
    else:
        flags.add("sem2d_empty")
        sem = _zero()
    dl = np.asarray(depth_label).reshape(-1)
    dmask = dl > 0
    if dmask.any():
        depth_term = smooth_l1(T.reshape(depth, (-1,)), np.where(dmask, dl, 0.0), dmask) * weights.depth
    else:
        flags.add("depth2d_empty")
        depth_term = _zero()
    rgb_term = smooth_l1(rgb, np.asarray(rgb_label)) * weights.rgb
    return {"sem2d": sem, "depth2d": depth_term, "rgb2d": rgb_term}, flags


@dataclass
class LossReport:
    terms: dict
    total: float
    tensor: Tensor | None = None
    flags: set = field(default_factory=set)

    def as_row(self):
        return {**{k: self.terms.get(k, 0.0) for k in TERM_NAMES}, "total": self.total}


def total_loss(terms, flags=()):
    """Unweighted sum of the six terms (weights already applied inside them)."""
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    parts = [terms[k] if isinstance(terms[k], Tensor) else Tensor(terms[k])
             for k in TERM_NAMES if k in terms]
    tot = parts[0]
    for p in parts[1:]:
        tot = tot + p
    values = {k: float(np.asarray(terms[k].data if isinstance(terms[k], Tensor) else terms[k]))
              for k in TERM_NAMES if k in terms}
    # the reported total is summed in double precision from the reported terms
    return LossReport(values, math.fsum(values.values()), tot, set(flags))

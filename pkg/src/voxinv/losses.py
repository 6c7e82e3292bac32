"""Sigmoid focal classification loss, masked L2 regression loss, and their per-block sum.

All losses use mean reduction. Gradients are written out by hand and wired
into the autograd graph through ``make_result``.
"""
from dataclasses import dataclass
import math

import numpy as np

from .sparse.autograd import accumulate, make_result
from .sparse.tensor import intersect_rows

@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.75
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def focal_terms(z, target, alpha, gamma):
    """Per-element focal loss and its derivative with respect to the logit.

    Works on the logit of p_t directly (log p_t = -softplus(-z_t)), so no
    probability clamping is needed and gamma = 0 is exactly alpha_t * BCE.
    """
    t = np.asarray(target, dtype=bool)
    z = np.asarray(z, dtype=np.float64)
    sign = np.where(t, 1.0, -1.0)
    zt = sign * z
    log_pt = -np.logaddexp(0.0, -zt)
    pt = sigmoid(zt)
    q = sigmoid(-zt)
    at = np.where(t, alpha, 1 - alpha)
    loss = -at * q ** gamma * log_pt
    dl_dzt = at * (gamma * q ** gamma * pt * log_pt - q ** (gamma + 1))
    return loss, sign * dl_dzt


def missed_positive_loss(focal):
    """Focal loss of a positive scored at logit 0 (p_t = 0.5)."""
    return focal.alpha * 0.5 ** focal.gamma * math.log(2.0)


def sigmoid_focal_loss(logits, targets, focal, n_missing=0):
    """Mean focal loss over ``logits`` rows plus ``n_missing`` positives at logit 0.

    ``logits`` is a Tensor of shape (N,) or (N, 1); ``targets`` are 0/1.
    """
    z = logits.data.reshape(-1).astype(np.float64)
    n = z.size + n_missing
    dtype = logits.data.dtype
    if n == 0:
        return make_result(np.zeros((), dtype), (logits,), lambda g: None)
    loss, grad = focal_terms(z, targets, focal.alpha, focal.gamma)
    value = (loss.sum() + n_missing * missed_positive_loss(focal)) / n
    scaled = (grad / n).reshape(logits.data.shape)

    def backward(g):
        accumulate(logits, (scaled * float(g)).astype(dtype))

    return make_result(np.asarray(value, dtype=dtype), (logits,), backward)


def _check_grids(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"resolution mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def masked_l2_loss(pred, gt):
    """Mean squared channel error over coordinates active in both tensors."""
    _check_grids(pred, gt)
    if pred.channels != gt.channels:
        raise ValueError(f"channel mismatch: {pred.channels} vs {gt.channels}")
    ip, ig = intersect_rows(pred.keys(), gt.keys())
    feats = pred.feats
    dtype = feats.data.dtype
    if ip.size == 0:
        return make_result(np.zeros((), dtype), (feats,), lambda g: None)
    diff = feats.data[ip].astype(np.float64) - gt.feats.data[ig].astype(np.float64)
    denom = diff.size
    value = (diff ** 2).sum() / denom

    def backward(g):
        if feats.requires_grad:
            full = np.zeros(feats.data.shape, np.float64)
            full[ip] = 2.0 * diff / denom * float(g)
            accumulate(feats, full.astype(dtype))

    return make_result(np.asarray(value, dtype=dtype), (feats,), backward)


def classification_loss(logits, gt, focal):
    """Focal loss over the union of predicted and ground-truth active sets.

    Ground-truth voxels absent from the prediction count as positives at logit 0.
    """
    _check_grids(logits, gt)
    ip, _ = intersect_rows(logits.keys(), gt.keys())
    target = np.zeros(logits.n_active, bool)
    target[ip] = True
    n_missing = gt.n_active - ip.size
    return sigmoid_focal_loss(logits.feats, target, focal, n_missing=n_missing)


def block_loss(i, m_pred, m_gt, c_pred, c_gt, focal, beta=1.0):
    """Classification loss, plus ``beta`` times the masked L2 term when ``i >= 1``.

    ``m_pred`` holds one logit channel; ``m_gt`` supplies the true active set
    (its features are ignored). Returns ``(total, l_cls, l_reg)``; ``l_reg`` is
    ``None`` at the original resolution.
    """
    if i < 0:
        raise ValueError("block index must be >= 0")
    l_cls = classification_loss(m_pred, m_gt, focal)
    if i == 0:
        return l_cls, l_cls, None
    l_reg = masked_l2_loss(c_pred, c_gt)
    return l_cls + l_reg * beta, l_cls, l_reg


def dense_target_l2(pred, f0, channels=3):
    """Point-regression loss: mean squared error over every predicted voxel.

    Targets are the true per-voxel coordinates where ``f0`` is active and
    ``(0, 0, 0)`` elsewhere (empty voxels are zero vectors).
    """
    _check_grids(pred, f0)
    ip, ig = intersect_rows(pred.keys(), f0.keys())
    target = np.zeros((pred.n_active, channels), np.float64)
    target[ip] = f0.feats.data[ig, :channels]
    feats = pred.feats
    dtype = feats.data.dtype
    if pred.n_active == 0:
        return make_result(np.zeros((), dtype), (feats,), lambda g: None)
    diff = feats.data.astype(np.float64) - target
    denom = diff.size
    value = (diff ** 2).sum() / denom

    def backward(g):
        accumulate(feats, (2.0 * diff / denom * float(g)).astype(dtype))

    return make_result(np.asarray(value, dtype=dtype), (feats,), backward)

"""Multi-task objective: focal classification, SmoothL1 + Pearson regression, feature consistency."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import Tensor
from .tensorcore import functional as F

log = logging.getLogger(__name__)

P_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    lambda_aux: float = 0.1
    gamma: float = 2.0
    alpha: tuple[float, ...] = (1.0, 1.0, 1.0)
    beta: float = 0.5
    pearson_eps: float = 1e-8
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        if min(self.lambda_cls, self.lambda_reg, self.lambda_aux) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be non-negative")
        if any(a <= 0 for a in self.alpha):
            raise ValueError("class weights alpha must be > 0")
        if self.pearson_eps <= 0:
            raise ValueError("pearson_eps must be > 0")


def inverse_frequency_alpha(labels, n_classes: int = 3) -> tuple[float, ...]:
    """Per-class weights proportional to 1/frequency, normalised to mean 1.

    Absent classes get the largest observed weight.
    """
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    present = counts > 0
    inv = np.zeros(n_classes)
    inv[present] = counts[present].sum() / counts[present]
    if not present.all():
        inv[~present] = inv[present].max() if present.any() else 1.0
    return tuple((inv / inv.mean()).tolist())


def _one_hot(labels: np.ndarray, n: int, dtype) -> np.ndarray:
    out = np.zeros((labels.shape[0], n), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def focal_loss(cls_probs: Tensor, labels, alpha=(1.0, 1.0, 1.0), gamma: float = 2.0) -> Tensor:
    """Mean over the batch of ``-alpha_y * (1 - p_y)**gamma * log(p_y)``."""
    labels = np.asarray(labels)
    n = cls_probs.shape[1]
    if labels.ndim != 1 or labels.shape[0] != cls_probs.shape[0]:
        raise ValueError(f"labels shape {labels.shape} does not match batch {cls_probs.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= n or not np.issubdtype(labels.dtype, np.integer)):
        raise ValueError(f"labels must be integers in [0, {n - 1}]")
    onehot = _one_hot(labels, n, cls_probs.dtype)
    p_y = F.clip(F.sum(cls_probs * onehot, axis=1), P_CLAMP, 1.0 - P_CLAMP)
    a = np.asarray(alpha, dtype=cls_probs.dtype)[labels]
    per_sample = -F.log(p_y) * a
    if gamma != 0:
        per_sample = per_sample * F.power(1.0 - p_y, gamma)
    return F.mean(per_sample)


def pearson_per_marker(pred: Tensor, target, eps: float = 1e-8) -> Tensor:
    """Across-batch Pearson r per column, population moments.

    Each variance is floored at ``eps`` rather than offset by it, so r stays
    exactly invariant to positive affine maps of either side.
    """
    target = np.asarray(target, dtype=pred.dtype)
    pc = pred - F.mean(pred, axis=0, keepdims=True)
    tc = target - target.mean(axis=0, keepdims=True)
    cov = F.mean(pc * tc, axis=0)
    sd_p = F.sqrt(F.clip(F.mean(pc * pc, axis=0), eps, np.inf))
    sd_t = np.sqrt(np.maximum((tc * tc).mean(axis=0), eps))
    return cov / (sd_p * sd_t)


def regression_loss(pred: Tensor, target, beta: float = 0.5, pearson_eps: float = 1e-8,
                    smooth_l1_beta: float = 1.0) -> Tensor:
    """SmoothL1 (mean over elements) + beta * mean over markers of (1 - r)."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    loss = F.mean(F.smooth_l1(pred - target, smooth_l1_beta))
    if beta == 0:
        return loss
    if pred.shape[0] < 2:
        log.warning("regression_loss: batch of %d cannot define a Pearson term; SmoothL1 only", pred.shape[0])
        return loss
    r = pearson_per_marker(pred, target, pearson_eps)
    return loss + F.mean(1.0 - r) * beta


def aux_consistency_loss(h_fused: Tensor, h_cls: Tensor, h_reg: Tensor) -> Tensor:
    """Half the sum of the mean squared distances from the shared to each task feature."""
    if not (h_fused.shape == h_cls.shape == h_reg.shape):
        raise ValueError("aux_consistency_loss: feature shapes differ")
    d_cls = h_fused - h_cls
    d_reg = h_fused - h_reg
    return (F.mean(d_cls * d_cls) + F.mean(d_reg * d_reg)) * 0.5


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def total_loss(preds, labels, markers, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the three objectives.

    Terms with zero weight, or whose head is absent, are left out of the graph
    entirely so no gradient reaches parameters that only serve them.
    ``terms`` holds each unweighted term as a float.
    """
    parts: list[Tensor] = []
    terms: dict[str, float] = {}
    if preds.cls_probs is not None and weights.lambda_cls > 0:
        l_cls = focal_loss(preds.cls_probs, labels, weights.alpha, weights.gamma)
        terms["cls"] = float(l_cls.value)
        parts.append(l_cls * weights.lambda_cls)
    if preds.reg_values is not None and weights.lambda_reg > 0:
        l_reg = regression_loss(preds.reg_values, markers, weights.beta, weights.pearson_eps,
                                weights.smooth_l1_beta)
        terms["reg"] = float(l_reg.value)
        parts.append(l_reg * weights.lambda_reg)
    if weights.lambda_aux > 0 and "h_fused" in preds.features:
        f = preds.features
        l_aux = aux_consistency_loss(f["h_fused"], f["h_cls"], f["h_reg"])
        terms["aux"] = float(l_aux.value)
        parts.append(l_aux * weights.lambda_aux)
    if not parts:
        return LossBreakdown(Tensor(np.zeros((), dtype=np.float64)), terms)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return LossBreakdown(total, terms)

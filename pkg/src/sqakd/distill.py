"""Distillation losses over logits.

The teacher side is always a constant: teacher logits are detached before use,
so gradients only reach the student.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, log_softmax_array

LOSS_MODES = ("CE_only", "KL_only", "Combined")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    mode: str = "KL_only"
    lam: float = 0.5
    rho: float = 4.0
    rho2_scaling: bool = True

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise LossError(f"unknown loss mode {self.mode!r}; expected one of {LOSS_MODES}")
        if not 0.0 <= self.lam <= 1.0:
            raise LossError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.rho <= 0:
            raise LossError(f"temperature rho must be positive, got {self.rho}")

    @property
    def needs_teacher(self) -> bool:
        return self.mode != "CE_only"

    @property
    def needs_labels(self) -> bool:
        return self.mode != "KL_only"


def _data(h) -> np.ndarray:
    return h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)


def soften(h, rho: float) -> Tensor:
    """Row-wise softmax of h / rho."""
    if rho <= 0:
        raise LossError(f"temperature rho must be positive, got {rho}")
    return Tensor(np.exp(log_softmax_array(_data(h) / rho)))


def kl_loss(h_t, h_s, rho: float, rho2_scaling: bool = True) -> Tensor:
    """Batch mean of KL(softmax(h_t/rho) || softmax(h_s/rho))."""
    if rho <= 0:
        raise LossError(f"temperature rho must be positive, got {rho}")
    h_t = _data(h_t)
    h_s = T.tensor(h_s)
    if h_t.shape != h_s.shape:
        raise ShapeError(f"kl_loss: teacher logits {h_t.shape} vs student logits {h_s.shape}")
    log_p = log_softmax_array(h_t / rho)
    p = np.exp(log_p)
    log_q = T.log_softmax(T.mul(h_s, 1.0 / rho))
    per_entry = T.mul(Tensor(p), T.sub(Tensor(log_p), log_q))
    scale = (rho * rho if rho2_scaling else 1.0) / h_s.shape[0]
    return T.mul(T.sum(per_entry), scale)


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise ShapeError(f"labels shape {y.shape} does not match batch of {batch}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise LossError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise LossError(f"label out of range [0, {classes}): min {y.min()}, max {y.max()}")
    return y


def ce_loss(h_s, labels, smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross entropy; ``smoothing`` > 0 spreads that mass uniformly."""
    h_s = T.tensor(h_s)
    batch, classes = h_s.shape
    y = _check_labels(labels, batch, classes)
    target = np.zeros((batch, classes))
    target[np.arange(batch), y] = 1.0
    if smoothing:
        target = (1.0 - smoothing) * target + smoothing / classes
    return T.mul(T.sum(T.mul(Tensor(target), T.log_softmax(h_s))), -1.0 / batch)


def total_loss(cfg: LossConfig, h_t, h_s, labels=None) -> Tensor:
    if cfg.needs_teacher and h_t is None:
        raise LossError(f"{cfg.mode} loss needs teacher logits")
    if cfg.needs_labels and labels is None:
        raise LossError(f"{cfg.mode} loss needs labels")
    if cfg.mode == "CE_only":
        return ce_loss(h_s, labels)
    if cfg.mode == "KL_only":
        return kl_loss(h_t, h_s, cfg.rho, cfg.rho2_scaling)
    ce = ce_loss(h_s, labels)
    kl = kl_loss(h_t, h_s, cfg.rho, cfg.rho2_scaling)
    return T.add(T.mul(ce, 1.0 - cfg.lam), T.mul(kl, cfg.lam))


def ensemble_logits(teacher_logits: Sequence) -> Tensor:
    if not teacher_logits:
        raise LossError("ensemble needs at least one teacher")
    arrays = [_data(h) for h in teacher_logits]
    for a in arrays[1:]:
        if a.shape != arrays[0].shape:
            raise ShapeError(f"ensemble: logits shape {a.shape} vs {arrays[0].shape}")
    if len(arrays) == 1:
        return Tensor(arrays[0].copy())
    return Tensor(np.mean(np.stack(arrays), axis=0))

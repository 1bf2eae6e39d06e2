"""Classification losses, cosine similarity, the contrastive alignment loss,
and the combined per-client training objective.

Gradient conventions: classification losses return gradients with respect
to the pre-activation logits, averaged over the batch. The contrastive
loss sums over the batch and differentiates only the local features; the
other-model features it is paired against are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchSizeError, ConfigError, DimensionError, ValidationError
from .models import (
    Encoder,
    GlobalModelSet,
    TaskHead,
    cross_encode,
    encode_backward,
    encode_train,
    fuse,
)
from .nncore import Array, activation_forward, dense_forward

NTXENT_VARIANTS = ("negatives-only", "standard")

_PROB_FLOOR = 1e-12
_NORM_FLOOR = 1e-12


@dataclass
class LossConfig:
    """Temperature, contrastive weight, and denominator convention."""

    tau: float = 0.5
    lambda_mim: float = 1.0
    ntxent_variant: str = "negatives-only"

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValidationError("temperature tau must be positive")
        if self.lambda_mim < 0.0:
            raise ValidationError("lambda_mim must be non-negative")
        if self.ntxent_variant not in NTXENT_VARIANTS:
            raise ConfigError(f"unknown ntxent variant {self.ntxent_variant!r}")


def bce_multilabel(probs: Array, y: Array) -> tuple[float, Array]:
    """Mean over the batch of per-label binary cross-entropy summed over labels.

    Returns the loss and its gradient wrt the logits that produced ``probs``
    through a sigmoid.
    """
    if probs.shape != y.shape or probs.ndim != 2:
        raise DimensionError(f"probs {probs.shape} vs labels {y.shape}")
    p = np.clip(probs, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    per_sample = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum(axis=1)
    loss = float(per_sample.mean())
    grad_logits = (probs - y) / probs.shape[0]
    return loss, grad_logits


def ce_singlelabel(probs: Array, y: Array) -> tuple[float, Array]:
    """Mean negative log-probability of the true class.

    ``y`` holds integer class indices; the gradient is wrt the logits that
    produced ``probs`` through a row softmax.
    """
    if probs.ndim != 2:
        raise DimensionError(f"probs must be 2-D, got {probs.shape}")
    y = np.asarray(y)
    if y.shape != (probs.shape[0],):
        raise DimensionError(f"labels {y.shape} vs batch of {probs.shape[0]}")
    if np.any(y < 0) or np.any(y >= probs.shape[1]):
        raise ValidationError(
            f"class index out of range [0, {probs.shape[1]}): {y.min()}..{y.max()}"
        )
    rows = np.arange(probs.shape[0])
    loss = float(-np.log(np.clip(probs[rows, y], _PROB_FLOOR, None)).mean())
    onehot = np.zeros_like(probs)
    onehot[rows, y] = 1.0
    grad_logits = (probs - onehot) / probs.shape[0]
    return loss, grad_logits


def cosine(a: Array, b: Array) -> float:
    """Cosine similarity; defined as 0 when either vector is near zero."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= _NORM_FLOOR or nb <= _NORM_FLOOR:
        return 0.0
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def _unit_rows(f: Array) -> tuple[Array, Array, Array]:
    norms = np.linalg.norm(f, axis=1)
    live = norms > _NORM_FLOOR
    units = np.zeros_like(f)
    units[live] = f[live] / norms[live, None]
    return units, norms, live


def ntxent(f_local: Array, f_global: Array, cfg: LossConfig) -> tuple[float, Array]:
    """Temperature-scaled contrastive loss over cosine similarities.

    Row z of ``f_local`` is paired with row z of ``f_global`` as a positive
    and with every other row as a negative. The loss is summed over the
    batch. The default variant keeps only negatives in the denominator;
    the "standard" variant includes the positive as well. The gradient is
    wrt ``f_local`` only; ``f_global`` is a constant.
    """
    if f_local.shape != f_global.shape or f_local.ndim != 2:
        raise DimensionError(f"f_local {f_local.shape} vs f_global {f_global.shape}")
    b = f_local.shape[0]
    if b < 2:
        raise BatchSizeError(f"contrastive loss needs at least 2 rows, got {b}")
    ul, nl, live_l = _unit_rows(f_local)
    ug, _, _ = _unit_rows(f_global)
    sims = np.clip(ul @ ug.T, -1.0, 1.0)
    logits = sims / cfg.tau

    if cfg.ntxent_variant == "negatives-only":
        masked = logits.copy()
        np.fill_diagonal(masked, -np.inf)
        row_max = masked.max(axis=1, keepdims=True)
        ex = np.exp(masked - row_max)
        denom = row_max[:, 0] + np.log(ex.sum(axis=1))
        weights = ex / ex.sum(axis=1, keepdims=True)  # zero on the diagonal
        coeff = (weights - np.eye(b)) / cfg.tau
    else:
        row_max = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - row_max)
        denom = row_max[:, 0] + np.log(ex.sum(axis=1))
        weights = ex / ex.sum(axis=1, keepdims=True)
        coeff = (weights - np.eye(b)) / cfg.tau

    loss = float((-np.diag(logits) + denom).sum())

    # d sim[z, t] / d f_local[z] = (ug[t] - sim[z, t] * ul[z]) / ||f_local[z]||
    grad = coeff @ ug - ((coeff * sims).sum(axis=1, keepdims=True)) * ul
    grad[live_l] /= nl[live_l, None]
    grad[~live_l] = 0.0
    return loss, grad


@dataclass
class LocalObjectiveResult:
    loss: float
    ce: float
    ntx: float
    grad_encoder: Array
    grad_head: Array


def local_objective(
    x: Array,
    y: Array,
    encoder: Encoder,
    head: TaskHead,
    global_set: GlobalModelSet,
    cfg: LossConfig,
) -> LocalObjectiveResult:
    """Combined per-client objective on one mini-batch.

    Classification term: the local features are zero-padded into the full
    slot layout and scored by the shared head. Alignment term (when
    ``cfg.lambda_mim > 0`` and other modalities exist): the batch is pushed
    through the local adapter into every other modality's body, those
    features are averaged, and the contrastive loss pulls the local
    features toward them. Both terms are averaged over the batch, which
    rescales the summed objective by a constant 1/B and keeps their
    relative weight independent of batch size. Gradients cover the local
    encoder and the head; the other models stay untouched.
    """
    slot = encoder.modality_id
    n_mod = global_set.n_modalities
    f_local, cache = encode_train(encoder, x)
    fused = fuse(f_local, slot, n_mod)
    logits = dense_forward(head.layer, fused)
    if head.task_kind == "multi-label":
        probs = activation_forward(logits, "sigmoid")
        ce, grad_logits = bce_multilabel(probs, y)
    else:
        probs = activation_forward(logits, "softmax-rows")
        ce, grad_logits = ce_singlelabel(probs, y)

    grad_head_w = fused.T @ grad_logits
    grad_head_b = grad_logits.sum(axis=0)
    grad_fused = grad_logits @ head.layer.weight.T
    d = encoder.feature_dim
    grad_f_local = grad_fused[:, slot * d : (slot + 1) * d]

    ntx = 0.0
    others = [m for m in range(n_mod) if m != slot]
    if cfg.lambda_mim > 0.0 and others:
        stacked = [cross_encode(encoder, global_set.encoders[m], x) for m in others]
        f_global = stacked[0] if len(stacked) == 1 else sum(stacked) / len(stacked)
        ntx_sum, grad_ntx = ntxent(f_local, f_global, cfg)
        ntx = ntx_sum / x.shape[0]
        grad_f_local = grad_f_local + (cfg.lambda_mim / x.shape[0]) * grad_ntx

    grad_encoder = encode_backward(encoder, cache, grad_f_local)
    return LocalObjectiveResult(
        loss=cfg.lambda_mim * ntx + ce,
        ce=ce,
        ntx=ntx,
        grad_encoder=grad_encoder,
        grad_head=np.concatenate([grad_head_w.ravel(), grad_head_b]),
    )

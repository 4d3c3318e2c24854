"""Cross-entropy and oracle-to-estimated distillation losses.

Every loss takes logits of shape ``[hw, n]`` (one image) or ``[B, hw, n]``
(a batch) together with integer labels of shape ``[hw]`` / ``[B, hw]``. Batched
losses are the mean of the per-image values. IGNORE pixels never contribute.

All distillation variants reduce to a weighted soft cross-entropy

    L = -sum_i w_i sum_j softmax(p_y)_ij log softmax(p_p)_ij

with constant per-pixel weights ``w``, so each is one pass on the tape. The
teacher logits ``p_y`` are detached before use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .labels import IGNORE, one_hot, valid_mask
from .tensor import Tensor, add, as_tensor, detach, log_softmax_rows, mul, reduce_sum, scale, softmax_rows

KL_VARIANTS = ("none", "vanilla", "entropy", "classwise", "classwise_entropy")
ENTROPY_SOURCES = ("oracle", "estimated", "original")
EPS_H = 1e-8


class LossConfigError(ValueError):
    """Raised when a loss configuration cannot be evaluated."""


@dataclass
class LossConfig:
    lambda_kl: float = 1.0
    kl_variant: str = "classwise_entropy"
    entropy_source: str = "oracle"
    ce: bool = True
    ce_p: bool = True
    ce_y: bool = True

    def __post_init__(self):
        if self.kl_variant not in KL_VARIANTS:
            raise LossConfigError(f"kl_variant must be one of {KL_VARIANTS}, got {self.kl_variant!r}")
        if self.entropy_source not in ENTROPY_SOURCES:
            raise LossConfigError(
                f"entropy_source must be one of {ENTROPY_SOURCES}, got {self.entropy_source!r}"
            )
        if self.lambda_kl < 0:
            raise LossConfigError(f"lambda_kl must be >= 0, got {self.lambda_kl}")

    @property
    def uses_kl(self) -> bool:
        return self.kl_variant != "none" and self.lambda_kl > 0

    @property
    def needs_oracle(self) -> bool:
        return self.ce_y or self.uses_kl

    @property
    def needs_context(self) -> bool:
        return self.ce_p or self.needs_oracle


@dataclass
class EntropyMask:
    """Per-pixel entropy of a softmax; plain array, never on the tape."""

    H: np.ndarray
    n_classes: int = field(default=0)


def _batched(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 1 else x


def _reduce_weighted(terms: Tensor, weights: np.ndarray) -> Tensor:
    """sum(w * terms) where ``terms`` is ``[..., hw, n]`` and ``w`` is ``[..., hw]`` or ``[..., hw, n]``."""
    if weights.ndim == terms.ndim - 1:
        weights = weights[..., None]
    return scale(reduce_sum(mul(terms, Tensor(weights))), -1.0)


def _image_count(labels: np.ndarray) -> int:
    return 1 if np.ndim(labels) == 1 else np.shape(labels)[0]


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean over non-IGNORE pixels of -log softmax at the true class.

    An image whose pixels are all IGNORE contributes exactly 0.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n = logits.shape[-1]
    target = one_hot(labels, n)
    counts = _batched(valid_mask(labels)).sum(axis=-1)
    per_image = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0) / _image_count(labels)
    if labels.ndim == 1:
        per_image = per_image[0]
        w = target * per_image
    else:
        w = target * per_image[:, None, None]
    return _reduce_weighted(log_softmax_rows(logits), w)


def entropy_mask(logits) -> EntropyMask:
    """Shannon entropy of the row-wise softmax, computed from detached values."""
    z = detach(logits).data
    z = z - z.max(axis=-1, keepdims=True)
    log_s = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    H = -(np.exp(log_s) * log_s).sum(axis=-1)
    return EntropyMask(np.maximum(H, 0.0), z.shape[-1])


def _soft_ce_terms(p_y, p_p) -> tuple[np.ndarray, Tensor]:
    p_y, p_p = as_tensor(p_y), as_tensor(p_p)
    if p_y.shape != p_p.shape:
        raise ValueError(f"teacher logits {p_y.shape} and student logits {p_p.shape} differ in shape")
    target = softmax_rows(detach(p_y))
    return target.data, mul(target, log_softmax_rows(p_p))


def _vanilla_weights(labels: np.ndarray) -> np.ndarray:
    valid = _batched(valid_mask(labels))
    counts = valid.sum(axis=-1, keepdims=True)
    return np.where(counts > 0, valid / np.maximum(counts, 1.0), 0.0)


def _entropy_weights(labels: np.ndarray, H: np.ndarray) -> np.ndarray:
    hv = _batched(valid_mask(labels)) * _batched(H)
    total = hv.sum(axis=-1, keepdims=True)
    return np.where(total >= EPS_H, hv / np.where(total >= EPS_H, total, 1.0), 0.0)


def _classwise_weights(labels: np.ndarray, H: Optional[np.ndarray], n: int) -> np.ndarray:
    """Pixel weights ``M_k[i] H[i] / sum_i M_k H`` averaged over the classes kept."""
    y = _batched(np.asarray(labels))
    h = np.ones(y.shape) if H is None else _batched(H)
    out = np.zeros(y.shape)
    for b in range(y.shape[0]):
        mass = np.bincount(y[b][y[b] != IGNORE], weights=h[b][y[b] != IGNORE], minlength=n)
        kept = mass >= EPS_H
        if not kept.any():
            continue
        valid = y[b] != IGNORE
        cls = np.where(valid, y[b], 0)
        keep_px = valid & kept[cls]
        out[b] = np.where(keep_px, h[b] / np.where(keep_px, mass[cls], 1.0), 0.0) / kept.sum()
    return out


def _finish(weights: np.ndarray, terms: Tensor, labels: np.ndarray) -> Tensor:
    weights = weights / _image_count(labels)
    if np.ndim(labels) == 1:
        weights = weights[0]
    return _reduce_weighted(terms, weights)


def kl_vanilla(p_y, p_p, labels: Optional[np.ndarray] = None) -> Tensor:
    """Soft cross-entropy from detached ``p_y`` to ``p_p``, averaged over pixels.

    Without labels every pixel counts.
    """
    _, terms = _soft_ce_terms(p_y, p_p)
    if labels is None:
        labels = np.zeros(terms.shape[:-1], dtype=np.int64)
    return _finish(_vanilla_weights(labels), terms, labels)


def kl_entropy(p_y, p_p, H: EntropyMask, labels: Optional[np.ndarray] = None) -> Tensor:
    """Entropy-weighted soft cross-entropy, normalised by the total entropy."""
    _, terms = _soft_ce_terms(p_y, p_p)
    if labels is None:
        labels = np.zeros(terms.shape[:-1], dtype=np.int64)
    return _finish(_entropy_weights(labels, H.H), terms, labels)


def kl_classwise(p_y, p_p, labels: np.ndarray) -> Tensor:
    """Soft cross-entropy averaged within each present class, then across classes."""
    _, terms = _soft_ce_terms(p_y, p_p)
    return _finish(_classwise_weights(labels, None, terms.shape[-1]), terms, labels)


def kl_classwise_entropy(p_y, p_p, labels: np.ndarray, H: EntropyMask) -> Tensor:
    """Class-wise entropy-weighted distillation.

    Each present class k gets ``sum_i M_k H CE_i / sum_i M_k H``; classes whose
    entropy mass is below ``EPS_H`` are skipped and the rest are averaged.
    """
    _, terms = _soft_ce_terms(p_y, p_p)
    return _finish(_classwise_weights(labels, H.H, terms.shape[-1]), terms, labels)


def loss_terms(p, p_y, p_p, labels: Optional[np.ndarray], cfg: LossConfig) -> dict[str, Tensor]:
    """The enabled loss terms by name (``ce``, ``ce_p``, ``ce_y``, ``kl``), unweighted."""
    if labels is None:
        raise LossConfigError("training losses need labels")
    if cfg.needs_oracle and p_y is None:
        raise LossConfigError("ce_y and distillation terms need oracle logits p_y")
    terms: dict[str, Tensor] = {}
    if cfg.ce:
        terms["ce"] = cross_entropy(p, labels)
    if cfg.ce_p:
        terms["ce_p"] = cross_entropy(p_p, labels)
    if cfg.ce_y:
        terms["ce_y"] = cross_entropy(p_y, labels)
    if cfg.uses_kl:
        source = {"oracle": p_y, "estimated": p_p, "original": p}[cfg.entropy_source]
        if cfg.kl_variant == "vanilla":
            kl = kl_vanilla(p_y, p_p, labels)
        elif cfg.kl_variant == "entropy":
            kl = kl_entropy(p_y, p_p, entropy_mask(source), labels)
        elif cfg.kl_variant == "classwise":
            kl = kl_classwise(p_y, p_p, labels)
        else:
            kl = kl_classwise_entropy(p_y, p_p, labels, entropy_mask(source))
        terms["kl"] = kl
    if not terms:
        raise LossConfigError("loss configuration enables no terms")
    return terms


def combine(terms: dict[str, Tensor], cfg: LossConfig) -> Tensor:
    total = None
    for name, value in terms.items():
        if name == "kl":
            value = scale(value, cfg.lambda_kl)
        total = value if total is None else add(total, value)
    return total


def total_loss(p, p_y, p_p, labels: Optional[np.ndarray], cfg: LossConfig) -> Tensor:
    """ce + ce_p + ce_y + lambda_kl * kl, restricted to the enabled terms."""
    return combine(loss_terms(p, p_y, p_p, labels, cfg), cfg)

"""Context-aware classifier head.

Per image, class prototypes are pooled from the feature map (from labels for
the oracle branch, from the image's own soft predictions for the estimated
branch), fused with the shared classifier through a small projector, and used
as the classifier for scaled-cosine logits. All functions accept a single image
(``f`` of shape ``[hw, d]``) or a batch (``[B, hw, d]``); prototypes and context
classifiers are always per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .labels import class_masks, valid_mask
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat_cols,
    div,
    inv_row_norms,
    l2_normalize_rows,
    matmul,
    mul,
    reduce_sum,
    relu,
    scale,
    softmax_rows,
    transpose,
)

DEFAULT_TAU = 15.0

# How a context classifier is formed from prototypes P and the shared classifier C.
FORMATIONS = {
    "concat": "theta(P (+) C)",
    "proto": "P",
    "proto_plus_c": "P + C",
    "proj_proto": "theta(P)",
    "proj_sum": "theta(P + C)",
    "concat_res": "theta(P (+) C) + C",
    "classifier": "C",
}
LOGIT_KINDS = ("dot", "cos")


def projector_input_dim(formation: str, d: int) -> Optional[int]:
    """Input width of the projector a formation needs, or None if it has none."""
    if formation in ("concat", "concat_res"):
        return 2 * d
    if formation in ("proj_proto", "proj_sum"):
        return d
    if formation in FORMATIONS:
        return None
    raise ValueError(f"unknown formation {formation!r}; expected one of {sorted(FORMATIONS)}")


def init_mlp(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> dict[str, np.ndarray]:
    """Two-layer perceptron weights; U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    b1 = 1.0 / np.sqrt(in_dim)
    b2 = 1.0 / np.sqrt(hidden)
    return {
        "W1": rng.uniform(-b1, b1, size=(in_dim, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.uniform(-b2, b2, size=(hidden, out_dim)),
        "b2": np.zeros(out_dim),
    }


@dataclass
class Projector:
    """linear -> relu -> linear, applied row-wise."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __call__(self, x) -> Tensor:
        h = relu(add(matmul(x, self.W1), self.b1))
        return add(matmul(h, self.W2), self.b2)

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    @classmethod
    def from_params(cls, params: dict, prefix: str) -> "Projector":
        return cls(*(as_tensor(params[f"{prefix}.{k}"]) for k in ("W1", "b1", "W2", "b2")))


@dataclass
class HeadConfig:
    tau: float = DEFAULT_TAU
    original_logits: str = "dot"
    context_logits: str = "cos"
    formation_y: str = "concat"
    formation_p: str = "concat"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("original_logits", "context_logits"):
            if getattr(self, name) not in LOGIT_KINDS:
                raise ValueError(f"{name} must be one of {LOGIT_KINDS}, got {getattr(self, name)!r}")
        for name in ("formation_y", "formation_p"):
            projector_input_dim(getattr(self, name), 1)


@dataclass
class ContextClassifier:
    A: Tensor
    kind: str
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.kind not in ("oracle", "estimated"):
            raise ValueError(f"kind must be 'oracle' or 'estimated', got {self.kind!r}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class HeadOutput:
    p: Tensor
    p_p: Tensor
    p_y: Optional[Tensor] = None
    A_p: Optional[Tensor] = None
    A_y: Optional[Tensor] = None
    extras: dict = field(default_factory=dict)


def masked_prototypes(f, labels: np.ndarray, C) -> Tensor:
    """Per-class mean of the feature rows labelled with that class.

    A class with no labelled pixels takes the matching row of ``C``.
    """
    f, C = as_tensor(f), as_tensor(C)
    n = C.shape[0]
    masks = class_masks(labels, n)  # [..., n, hw]
    if masks.shape[-1] != f.shape[-2]:
        raise ValueError(f"labels cover {masks.shape[-1]} pixels but features have {f.shape[-2]}")
    counts = masks.sum(axis=-1, keepdims=True)
    present = counts > 0
    inv = np.where(present, 1.0 / np.where(present, counts, 1.0), 0.0)
    pooled = mul(matmul(Tensor(masks), f), Tensor(inv))
    return add(pooled, mul(C, Tensor((~present).astype(np.float64))))


def soft_prototypes(f, C, valid: Optional[np.ndarray] = None, logits=None) -> Tensor:
    """Prediction-weighted per-class feature means.

    ``logits`` defaults to ``f @ C.T``; pixels with ``valid == 0`` are left out
    of both the weighted sum and the normaliser.
    """
    f, C = as_tensor(f), as_tensor(C)
    if logits is None:
        logits = dot_logits(f, C)
    w = softmax_rows(logits)  # [..., hw, n]
    if valid is not None:
        w = mul(w, Tensor(np.asarray(valid, dtype=np.float64)[..., :, None]))
    weighted = matmul(transpose(w), f)  # [..., n, d]
    mass = transpose(reduce_sum(w, axis=-2, keepdims=True))  # [..., n, 1]
    return div(weighted, mass)


def _form(P: Tensor, C: Tensor, theta: Optional[Projector], formation: str) -> Tensor:
    if formation == "proto":
        return P
    if formation == "classifier":
        return C
    if formation == "proto_plus_c":
        return add(P, C)
    if theta is None:
        raise ValueError(f"formation {formation!r} needs a projector")
    if formation == "proj_proto":
        return theta(P)
    if formation == "proj_sum":
        return theta(add(P, C))
    A = theta(concat_cols(P, C))
    if formation == "concat_res":
        A = add(A, C)
    return A


def _check_dims(P: Tensor, C: Tensor) -> None:
    if P.shape[-2:] != C.shape:
        raise ValueError(f"prototypes {P.shape} do not match classifier {C.shape}")


def make_oracle_classifier(C_y, C, theta_y: Optional[Projector], tau: float = DEFAULT_TAU,
                           formation: str = "concat") -> ContextClassifier:
    C_y, C = as_tensor(C_y), as_tensor(C)
    _check_dims(C_y, C)
    return ContextClassifier(_form(C_y, C, theta_y, formation), "oracle", tau)


def make_estimated_classifier(C_p, C, theta_p: Optional[Projector], tau: float = DEFAULT_TAU,
                              formation: str = "concat") -> ContextClassifier:
    C_p, C = as_tensor(C_p), as_tensor(C)
    _check_dims(C_p, C)
    return ContextClassifier(_form(C_p, C, theta_p, formation), "estimated", tau)


def cosine_logits(f, A, tau: Optional[float] = None) -> Tensor:
    """``tau * cos(f_i, A_k)``; zero rows give zero logits.

    The feature map is never normalised in full: the small ``f @ A_hat.T``
    product is rescaled by ``1 / |f_i|`` instead, which is the same value.
    """
    if isinstance(A, ContextClassifier):
        tau = A.tau if tau is None else tau
        A = A.A
    tau = DEFAULT_TAU if tau is None else tau
    f, A = as_tensor(f), as_tensor(A)
    if f.shape[-1] != A.shape[-1]:
        raise ValueError(f"feature width {f.shape[-1]} differs from classifier width {A.shape[-1]}")
    return mul(matmul(f, transpose(l2_normalize_rows(A))), scale(inv_row_norms(f), tau))


def dot_logits(f, C) -> Tensor:
    if isinstance(C, ContextClassifier):
        C = C.A
    return matmul(as_tensor(f), transpose(as_tensor(C)))


def _logits(f, A, kind: str, tau: float) -> Tensor:
    return cosine_logits(f, A, tau) if kind == "cos" else dot_logits(f, A)


def original_logits(f, C, cfg: HeadConfig) -> Tensor:
    return _logits(f, C, cfg.original_logits, cfg.tau)


def forward_inference(f, C, theta_p: Optional[Projector], cfg: HeadConfig = HeadConfig()) -> HeadOutput:
    """Test-time path: p and p_p only. Labels are not an input."""
    f, C = as_tensor(f), as_tensor(C)
    p = original_logits(f, C, cfg)
    C_p = soft_prototypes(f, C, logits=p)
    A_p = make_estimated_classifier(C_p, C, theta_p, cfg.tau, cfg.formation_p)
    p_p = _logits(f, A_p.A, cfg.context_logits, cfg.tau)
    return HeadOutput(p=p, p_p=p_p, A_p=A_p.A)


def forward_full(f, labels: Optional[np.ndarray], C, theta_y: Optional[Projector],
                 theta_p: Optional[Projector], cfg: HeadConfig = HeadConfig()) -> HeadOutput:
    """Training path returning p, p_y and p_p; ``labels=None`` falls back to inference."""
    if labels is None:
        return forward_inference(f, C, theta_p, cfg)
    f, C = as_tensor(f), as_tensor(C)
    p = original_logits(f, C, cfg)
    C_p = soft_prototypes(f, C, valid=valid_mask(labels), logits=p)
    A_p = make_estimated_classifier(C_p, C, theta_p, cfg.tau, cfg.formation_p)
    p_p = _logits(f, A_p.A, cfg.context_logits, cfg.tau)
    C_y = masked_prototypes(f, labels, C)
    A_y = make_oracle_classifier(C_y, C, theta_y, cfg.tau, cfg.formation_y)
    p_y = _logits(f, A_y.A, cfg.context_logits, cfg.tau)
    return HeadOutput(p=p, p_p=p_p, p_y=p_y, A_p=A_p.A, A_y=A_y.A)

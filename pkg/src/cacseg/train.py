"""Training loop, evaluation and per-epoch metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import config as cfgtext
from .data import Dataset
from .encoder import Encoder, encode, init_encoder
from .head import (
    HeadConfig,
    HeadOutput,
    Projector,
    forward_full,
    forward_inference,
    init_mlp,
    original_logits,
    projector_input_dim,
)
from .losses import LossConfig, combine, entropy_mask, loss_terms
from .metrics import confusion_matrix, iou_from_confusion
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

EVAL_MODES = ("estimated", "oracle", "original")
LOSS_COLUMNS = ("ce", "ce_p", "ce_y", "kl", "total")
EVAL_CHUNK = 64


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite."""


@dataclass
class RunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    d: int = 64
    d_hidden: int = 0  # 0 resolves to 2 * d
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    eval_mode: str = "estimated"
    variant: str = "default"

    def __post_init__(self):
        if self.d_hidden == 0:
            self.d_hidden = 2 * self.d
        if self.d < 2 or self.d % 2:
            raise ValueError(f"d must be an even integer >= 2, got {self.d}")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}, got {self.eval_mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def tau(self) -> float:
        return self.head.tau

    def to_flat(self) -> dict:
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("loss", "head")}
        flat.update(asdict(self.loss))
        flat.update(asdict(self.head))
        return flat

    @classmethod
    def from_flat(cls, values: dict) -> "RunConfig":
        values = dict(values)
        loss = LossConfig(**{f.name: values.pop(f.name) for f in fields(LossConfig) if f.name in values})
        head = HeadConfig(**{f.name: values.pop(f.name) for f in fields(HeadConfig) if f.name in values})
        return cls(loss=loss, head=head, **values)

    def dumps(self) -> str:
        return cfgtext.dump(self.to_flat())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_flat(cfgtext.coerce(cfgtext.parse(text), cls().to_flat()))

    def with_updates(self, **flat) -> "RunConfig":
        merged = self.to_flat()
        unknown = set(flat) - set(merged)
        if unknown:
            raise cfgtext.ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
        merged.update(flat)
        return RunConfig.from_flat(merged)


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: str = ""
    n_classes: int = 0
    d_in: int = 0


@dataclass
class MetricsRow:
    epoch: int
    split: str
    mode: str
    iou: np.ndarray
    miou: float
    losses: dict[str, float] = field(default_factory=dict)
    entropy_p_y: float = float("nan")
    cos_dist_ap_c: float = float("nan")


def init_params(cfg: RunConfig, d_in: int, n_classes: int) -> tuple[dict[str, np.ndarray], np.random.Generator]:
    """Fresh parameters in a fixed order, plus the generator that continues the run's stream."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for k, v in init_encoder(rng, d_in, cfg.d, cfg.d_hidden).items():
        params[f"encoder.{k}"] = v
    bound = 1.0 / math.sqrt(cfg.d)
    params["C"] = rng.uniform(-bound, bound, size=(n_classes, cfg.d))
    for side, formation in (("theta_y", cfg.head.formation_y), ("theta_p", cfg.head.formation_p)):
        in_dim = projector_input_dim(formation, cfg.d)
        if in_dim is None:
            continue
        for k, v in init_mlp(rng, in_dim, cfg.d // 2, cfg.d).items():
            params[f"{side}.{k}"] = v
    return params, rng


def _projector(params: dict, side: str) -> Optional[Projector]:
    return Projector.from_params(params, side) if f"{side}.W1" in params else None


def model_forward(params: dict, X: np.ndarray, Y: Optional[np.ndarray], cfg: RunConfig,
                  context: bool = True) -> HeadOutput:
    """Encoder plus head. With ``Y`` the training path (p, p_y, p_p) runs, otherwise inference."""
    f = encode(X, Encoder.from_params(params))
    C = params["C"] if isinstance(params["C"], Tensor) else Tensor(params["C"])
    if not context:
        return HeadOutput(p=original_logits(f, C, cfg.head), p_p=None)
    theta_p = _projector(params, "theta_p")
    if Y is None:
        return forward_inference(f, C, theta_p, cfg.head)
    return forward_full(f, Y, C, _projector(params, "theta_y"), theta_p, cfg.head)


def _select(out: HeadOutput, mode: str) -> np.ndarray:
    logits = {"original": out.p, "estimated": out.p_p, "oracle": out.p_y}[mode]
    return np.argmax(logits.data, axis=-1)


def _cos_dist(A_p: Tensor, C: np.ndarray) -> float:
    A = A_p.data
    num = (A * C).sum(axis=-1)
    den = np.linalg.norm(A, axis=-1) * np.linalg.norm(C, axis=-1)
    return float(np.mean(1.0 - num / np.maximum(den, 1e-12)))


def evaluate_arrays(params: dict, X: np.ndarray, Y: np.ndarray, cfg: RunConfig, mode: str,
                    n_classes: int, epoch: int = 0, split: str = "val") -> MetricsRow:
    """Metrics for ``mode`` plus loss terms and diagnostics on labelled arrays."""
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    sums: dict[str, float] = {}
    ent, cos, seen = 0.0, 0.0, 0
    for start in range(0, len(X), EVAL_CHUNK):
        xb, yb = X[start:start + EVAL_CHUNK], Y[start:start + EVAL_CHUNK]
        k = len(xb)
        train_out = model_forward(params, xb, yb, cfg)
        if mode == "oracle":
            pred = _select(train_out, mode)
        else:
            pred = _select(model_forward(params, xb, None, cfg), mode)
        cm += confusion_matrix(pred, yb, n_classes)
        terms = loss_terms(train_out.p, train_out.p_y, train_out.p_p, yb, cfg.loss)
        terms["total"] = combine(terms, cfg.loss)
        for name, t in terms.items():
            sums[name] = sums.get(name, 0.0) + t.item() * k
        ent += float(entropy_mask(train_out.p_y).H.mean()) * k
        cos += _cos_dist(train_out.A_p, params["C"]) * k
        seen += k
    iou, miou = iou_from_confusion(cm)
    return MetricsRow(epoch, split, mode, iou, miou, {k: v / seen for k, v in sums.items()},
                      ent / seen, cos / seen)


def evaluate(ckpt: Checkpoint, dataset: Dataset, mode: str) -> MetricsRow:
    X, Y = dataset.arrays()
    return evaluate_arrays(ckpt.params, X, Y, ckpt.config, mode, dataset.n_classes, ckpt.epoch)


def _check_finite(terms: dict[str, Tensor], epoch: int, batch: int) -> None:
    for name, t in terms.items():
        if not np.isfinite(t.item()):
            raise TrainingDiverged(f"loss term {name!r} is {t.item()} at epoch {epoch}, batch {batch}")


def train(cfg: RunConfig, train_set: Dataset, val_set: Dataset,
          on_row: Optional[Callable[[MetricsRow], None]] = None) -> tuple[Checkpoint, list[MetricsRow]]:
    """SGD with momentum on every parameter; one train and one val row per epoch.

    Epoch 0 is a validation row for the initial parameters.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if train_set.n_classes != val_set.n_classes or train_set.d_in != val_set.d_in:
        raise ValueError("training and validation sets disagree on n_classes or d_in")
    n = train_set.n_classes
    params, rng = init_params(cfg, train_set.d_in, n)
    X, Y = train_set.arrays()
    Xv, Yv = val_set.arrays()
    context = cfg.loss.needs_context or cfg.eval_mode != "original"
    rows = []

    def emit(row):
        rows.append(row)
        if on_row is not None:
            on_row(row)
        log.info("epoch %d %s %s mIoU %.4f", row.epoch, row.split, row.mode, row.miou)

    emit(evaluate_arrays(params, Xv, Yv, cfg, cfg.eval_mode, n, 0, "val"))
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    names = list(params)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        cm = np.zeros((n, n), dtype=np.int64)
        sums: dict[str, float] = {}
        for batch, start in enumerate(range(0, len(X), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], Y[idx]
            leaves = {k: Tensor(params[k], requires_grad=True) for k in names}
            with Tape() as tape:
                out = model_forward(leaves, xb, yb, cfg, context=context)
                terms = loss_terms(out.p, out.p_y, out.p_p, yb, cfg.loss)
                terms["total"] = combine(terms, cfg.loss)
            _check_finite(terms, epoch, batch)
            grads = tape.gradient(terms["total"], [leaves[k] for k in names])
            for k, g in zip(names, grads):
                velocity[k] = cfg.momentum * velocity[k] + g
                params[k] = params[k] - cfg.learning_rate * velocity[k]
            for name, t in terms.items():
                sums[name] = sums.get(name, 0.0) + t.item() * len(idx)
            cm += confusion_matrix(_select(out, cfg.eval_mode), yb, n)
        iou, miou = iou_from_confusion(cm)
        emit(MetricsRow(epoch, "train", cfg.eval_mode, iou, miou, {k: v / len(X) for k, v in sums.items()}))
        emit(evaluate_arrays(params, Xv, Yv, cfg, cfg.eval_mode, n, epoch, "val"))
    state = json.dumps(rng.bit_generator.state, sort_keys=True)
    return Checkpoint(cfg, params, cfg.epochs, state, n, train_set.d_in), rows


def metrics_header(n_classes: int) -> list[str]:
    return (["epoch", "split", "mode", "miou"] + [f"iou_{k}" for k in range(n_classes)]
            + list(LOSS_COLUMNS) + ["entropy_p_y", "cos_dist_ap_c"])


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def metrics_csv(rows: list[MetricsRow], n_classes: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_header(n_classes))
    for r in rows:
        writer.writerow([r.epoch, r.split, r.mode, _fmt(r.miou)] + [_fmt(v) for v in r.iou]
                        + [_fmt(r.losses.get(k)) for k in LOSS_COLUMNS]
                        + [_fmt(r.entropy_p_y), _fmt(r.cos_dist_ap_c)])
    return buf.getvalue()


def baseline_config(**flat) -> RunConfig:
    """Cross-entropy on the original classifier only, evaluated on ``p``."""
    cfg = RunConfig(loss=LossConfig(kl_variant="none", ce_p=False, ce_y=False), eval_mode="original")
    return cfg.with_updates(**flat) if flat else cfg


def full_config(**flat) -> RunConfig:
    cfg = RunConfig()
    return cfg.with_updates(**flat) if flat else cfg


__all__ = [
    "Checkpoint",
    "MetricsRow",
    "RunConfig",
    "TrainingDiverged",
    "baseline_config",
    "evaluate",
    "evaluate_arrays",
    "full_config",
    "init_params",
    "metrics_csv",
    "model_forward",
    "train",
]

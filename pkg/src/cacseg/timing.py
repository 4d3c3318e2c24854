"""Wall-time overhead of the context-aware inference path."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .encoder import Encoder, encode
from .head import Projector, forward_inference, original_logits
from .tensor import Tensor
from .train import Checkpoint

WARMUP = 3
MIN_REPEATS = 20


@dataclass
class Overhead:
    t_original: float
    t_cac: float
    relative_delta: float

    def __iter__(self):
        return iter((self.t_original, self.t_cac, self.relative_delta))

    def format(self) -> str:
        return (f"original {self.t_original * 1e3:.3f} ms  cac {self.t_cac * 1e3:.3f} ms  "
                f"delta {100 * self.relative_delta:+.1f}%")


def _paths(ckpt: Checkpoint, X: np.ndarray):
    params = ckpt.params
    cfg = ckpt.config.head
    enc = Encoder.from_params(params)
    C = Tensor(params["C"])
    theta_p = Projector.from_params(params, "theta_p") if "theta_p.W1" in params else None
    x = Tensor(X)

    def original():
        return original_logits(encode(x, enc), C, cfg)

    def cac():
        return forward_inference(encode(x, enc), C, theta_p, cfg).p_p

    return original, cac


def time_overhead(ckpt: Checkpoint, dataset: Dataset, repeats: int = 50) -> Overhead:
    """Median wall time of the dot-product-only forward versus the full inference path.

    Both paths run the encoder over the whole dataset as one batch; the two
    are timed alternately so drift affects both equally.
    """
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    X, _ = dataset.arrays()
    original, cac = _paths(ckpt, X)
    for _ in range(WARMUP):
        original()
        cac()
    t_o, t_c = [], []
    for _ in range(repeats):
        start = time.perf_counter()
        original()
        t_o.append(time.perf_counter() - start)
        start = time.perf_counter()
        cac()
        t_c.append(time.perf_counter() - start)
    mo, mc = float(np.median(t_o)), float(np.median(t_c))
    return Overhead(mo, mc, round((mc - mo) / mo, 3))

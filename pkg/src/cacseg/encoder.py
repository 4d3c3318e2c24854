"""Pixel-wise feature generator standing in for a segmentation backbone."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .head import init_mlp
from .tensor import Tensor, add, as_tensor, matmul, relu


@dataclass
class Encoder:
    """relu(x @ W1 + b1) @ W2 + b2 on every pixel independently."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d(self) -> int:
        return self.W2.shape[1]

    @classmethod
    def from_params(cls, params: dict, prefix: str = "encoder") -> "Encoder":
        return cls(*(as_tensor(params[f"{prefix}.{k}"]) for k in ("W1", "b1", "W2", "b2")))


def init_encoder(rng: np.random.Generator, d_in: int, d: int, d_hidden: Optional[int] = None) -> dict[str, np.ndarray]:
    return init_mlp(rng, d_in, 2 * d if d_hidden is None else d_hidden, d)


def encode(x, enc: Encoder) -> Tensor:
    """Map raw pixels ``[..., hw, d_in]`` to features ``[..., hw, d]``."""
    x = as_tensor(x)
    if x.shape[-1] != enc.d_in:
        raise ValueError(f"input has {x.shape[-1]} channels, encoder expects {enc.d_in}")
    h = relu(add(matmul(x, enc.W1), enc.b1))
    return add(matmul(h, enc.W2), enc.b2)

# bqfl/classical.py
"""One-hidden-layer tanh network with softmax output, the classical federated baseline."""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ArgumentError, DimensionError

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class MlpParams:
    w1: np.ndarray  # [input_dim, hidden]
    b1: np.ndarray  # [hidden]
    w2: np.ndarray  # [hidden, n_classes]
    b2: np.ndarray  # [n_classes]

    def __post_init__(self):
        arrays = [np.array(a, dtype=np.float64) for a in (self.w1, self.b1, self.w2, self.b2)]
        w1, b1, w2, b2 = arrays
        if w1.ndim != 2 or w2.ndim != 2 or b1.shape != (w1.shape[1],) or w2.shape[0] != w1.shape[1] or b2.shape != (w2.shape[1],):
            raise DimensionError(
                f"inconsistent MLP shapes w1{w1.shape} b1{b1.shape} w2{w2.shape} b2{b2.shape}"
            )
        for name, a in zip(("w1", "b1", "w2", "b2"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.leaves())

    def leaves(self) -> List[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def with_leaves(self, leaves: List[np.ndarray]) -> "MlpParams":
        return MlpParams(*leaves)


def init_mlp(input_dim: int, hidden: int, n_classes: int, rng: np.random.Generator) -> MlpParams:
    """Each layer uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound1 = 1.0 / np.sqrt(input_dim)
    bound2 = 1.0 / np.sqrt(hidden)
    return MlpParams(
        w1=rng.uniform(-bound1, bound1, size=(input_dim, hidden)),
        b1=rng.uniform(-bound1, bound1, size=hidden),
        w2=rng.uniform(-bound2, bound2, size=(hidden, n_classes)),
        b2=rng.uniform(-bound2, bound2, size=n_classes),
    )


def zeros_like_mlp(params: MlpParams) -> MlpParams:
    return MlpParams(*(np.zeros_like(a) for a in params.leaves()))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if x.shape[-1] != params.input_dim:
        raise DimensionError(f"input of length {x.shape[-1]} does not match input_dim {params.input_dim}")
    hidden = np.tanh(x @ params.w1 + params.b1)
    return hidden, _softmax(hidden @ params.w2 + params.b2)


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """softmax(w2' tanh(w1' x + b1) + b2); accepts one vector or a [B, input_dim] batch."""
    arr = np.asarray(x, dtype=np.float64)
    return _forward(params, arr)[1]


def _check_batch(batch_x, batch_y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(batch_x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(batch_y, dtype=np.float64))
    if x.shape[0] == 0:
        raise ArgumentError("batch must not be empty")
    if x.shape[0] != y.shape[0]:
        raise ArgumentError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    return x, y


def mlp_loss(params: MlpParams, batch_x, batch_y) -> float:
    x, y = _check_batch(batch_x, batch_y)
    p = _forward(params, x)[1]
    return float(np.mean(-np.log(np.maximum(np.sum(p * y, axis=1), PROB_CLAMP))))


def mlp_loss_and_grad(params: MlpParams, batch_x, batch_y) -> Tuple[float, MlpParams]:
    """Mean NLL and its exact gradient by backpropagation."""
    x, y = _check_batch(batch_x, batch_y)
    hidden, p = _forward(params, x)
    p_true = np.sum(p * y, axis=1)
    loss = float(np.mean(-np.log(np.maximum(p_true, PROB_CLAMP))))

    active = (p_true >= PROB_CLAMP)[:, None]
    d_logits = np.where(active, p - y, 0.0) / x.shape[0]
    d_w2 = hidden.T @ d_logits
    d_b2 = d_logits.sum(axis=0)
    d_pre = (d_logits @ params.w2.T) * (1.0 - hidden ** 2)
    d_w1 = x.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    return loss, MlpParams(d_w1, d_b1, d_w2, d_b2)


def mlp_grad(params: MlpParams, batch_x, batch_y) -> MlpParams:
    return mlp_loss_and_grad(params, batch_x, batch_y)[1]


def mlp_accuracy(params: MlpParams, batch_x, batch_y) -> float:
    x, y = _check_batch(batch_x, batch_y)
    return float(np.mean(np.argmax(mlp_forward(params, x), axis=1) == np.argmax(y, axis=1)))

# bqfl/models.py
"""Dispatch between the variational circuit and the classical baseline."""
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import classical, vqc
from .classical import MlpParams
from .config import RunConfig, derive_rng
from .data import PreparedSample, stack
from .vqc import CircuitParams, ReadoutMode

ModelParams = Union[CircuitParams, MlpParams]


def readout_mode(cfg: RunConfig) -> ReadoutMode:
    return ReadoutMode(cfg.readout, cfg.n_classes)


def init_model(cfg: RunConfig) -> ModelParams:
    """Global starting model, drawn from the run seed."""
    rng = derive_rng(cfg.seed, "init")
    if cfg.mode.is_quantum:
        return vqc.init_params(cfg.k_layers, cfg.n_qubits, rng)
    return classical.init_mlp(2 ** cfg.n_qubits, cfg.hidden_units, cfg.n_classes, rng)


def is_quantum(params: ModelParams) -> bool:
    return isinstance(params, CircuitParams)


def is_finite(params: ModelParams) -> bool:
    return params.is_finite()


def batch_arrays(params: ModelParams, samples: Sequence[PreparedSample]) -> Tuple[np.ndarray, np.ndarray]:
    # the classical path sees the pre-normalization pixel vector
    return stack(samples, use_pixels=not is_quantum(params))


def predict_proba(params: ModelParams, x: np.ndarray, readout: Optional[ReadoutMode]) -> np.ndarray:
    if is_quantum(params):
        return vqc.predict_proba(params, x, readout)
    return classical.mlp_forward(params, x)


def loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray, readout: Optional[ReadoutMode]):
    """Mean NLL and gradient leaves in the same order as params.leaves()."""
    if is_quantum(params):
        loss, grad = vqc.loss_and_grad_parameter_shift(params, x, y, readout)
        return loss, [grad]
    loss, grad = classical.mlp_loss_and_grad(params, x, y)
    return loss, grad.leaves()


def evaluate(params: ModelParams, samples: Sequence[PreparedSample], readout: Optional[ReadoutMode]) -> float:
    """Top-1 accuracy on a sample list (lowest class index wins ties)."""
    if not samples:
        return 0.0
    x, y = batch_arrays(params, samples)
    hits = np.argmax(predict_proba(params, x, readout), axis=1) == np.argmax(y, axis=1)
    return float(np.mean(hits))


def parameter_count(params: ModelParams) -> int:
    return int(sum(leaf.size for leaf in params.leaves()))

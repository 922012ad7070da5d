# bqfl/vqc.py
"""
Layered variational classifier.

Layer j applies a CNOT to every neighboring pair (control i, target i+1), then on
each qubit i the rotations RotX(values[3j, i]), RotZ(values[3j+1, i]),
RotX(values[3j+2, i]). Every angle appears exactly once, so the +-pi/2
parameter-shift rule gives exact derivatives of any expectation value.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import qsim
from .errors import ArgumentError, DimensionError
from .qsim import StateVector
from .schemas import ReadoutKind

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
DEGENERATE_MASS = 1e-12
INIT_STD = 0.1
SHIFT = np.pi / 2


@dataclass(frozen=True)
class CircuitParams:
    k_layers: int
    n_qubits: int
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (3 * self.k_layers, self.n_qubits):
            raise DimensionError(
                f"circuit parameters of shape {values.shape} do not match [3*{self.k_layers}, {self.n_qubits}]"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def leaves(self) -> List[np.ndarray]:
        return [self.values]

    def with_leaves(self, leaves: List[np.ndarray]) -> "CircuitParams":
        (values,) = leaves
        return CircuitParams(self.k_layers, self.n_qubits, values)


@dataclass(frozen=True)
class ReadoutMode:
    kind: ReadoutKind
    n_classes: int

    def check(self, n_qubits: int) -> None:
        if self.n_classes < 1:
            raise ArgumentError("readout needs at least one class")
        if self.kind is ReadoutKind.SOFTMAX and self.n_classes > n_qubits:
            raise ArgumentError(f"softmax readout needs n_classes ({self.n_classes}) <= n_qubits ({n_qubits})")
        if self.kind is ReadoutKind.SAMPLE and self.n_classes > 2 ** n_qubits:
            raise ArgumentError(f"sample readout needs n_classes ({self.n_classes}) <= 2^{n_qubits}")


def init_params(k_layers: int, n_qubits: int, rng: np.random.Generator) -> CircuitParams:
    """Near-identity start: i.i.d. normal angles with standard deviation 0.1."""
    return CircuitParams(k_layers, n_qubits, rng.normal(0.0, INIT_STD, size=(3 * k_layers, n_qubits)))


def circuit_gates(params: CircuitParams) -> List[qsim.GateSpec]:
    gates: List[qsim.GateSpec] = []
    n = params.n_qubits
    for j in range(params.k_layers):
        for i in range(n - 1):
            gates.append(qsim.GateSpec(qsim.GateKind.CNOT, target=i + 1, control=i))
        for i in range(n):
            gates.append(qsim.GateSpec(qsim.GateKind.ROT_X, target=i, angle=float(params.values[3 * j, i])))
            gates.append(qsim.GateSpec(qsim.GateKind.ROT_Z, target=i, angle=float(params.values[3 * j + 1, i])))
            gates.append(qsim.GateSpec(qsim.GateKind.ROT_X, target=i, angle=float(params.values[3 * j + 2, i])))
    return gates


def _run_circuit_batch(amps: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    for j in range(values.shape[0] // 3):
        for i in range(n - 1):
            amps = qsim.apply_cnot_batch(amps, i, i + 1, n)
        for i in range(n):
            amps = qsim.apply_single_batch(amps, qsim.rot_x(values[3 * j, i]), i, n)
            amps = qsim.apply_single_batch(amps, qsim.rot_z(values[3 * j + 1, i]), i, n)
            amps = qsim.apply_single_batch(amps, qsim.rot_x(values[3 * j + 2, i]), i, n)
    return amps


def clf_apply(state: StateVector, params: CircuitParams) -> StateVector:
    if params.n_qubits != state.n_qubits:
        raise DimensionError(f"parameters for {params.n_qubits} qubits applied to a {state.n_qubits}-qubit state")
    out = _run_circuit_batch(state.amplitudes[None, :], params.values, state.n_qubits)
    return StateVector(state.n_qubits, out[0])


# --- Readout ---
def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _class_quantities(probs: np.ndarray, mode: ReadoutMode, n: int) -> np.ndarray:
    """Per-class observables the readout is built from: <Z_c> (softmax) or basis mass P_c (sample)."""
    if mode.kind is ReadoutKind.SOFTMAX:
        return qsim.expect_z_batch(probs, n)[:, : mode.n_classes]
    return probs[:, : mode.n_classes]


def _readout_from_quantities(q: np.ndarray, mode: ReadoutMode, warn: bool = True) -> np.ndarray:
    if mode.kind is ReadoutKind.SOFTMAX:
        return _softmax(q)
    mass = q.sum(axis=1)
    degenerate = mass < DEGENERATE_MASS
    if degenerate.any():
        if warn:
            logger.warning(
                f"VQC: {int(degenerate.sum())} sample(s) put < {DEGENERATE_MASS} mass on the first "
                f"{mode.n_classes} basis states; using the uniform distribution."
            )
        q = np.where(degenerate[:, None], 1.0, q)
        mass = np.where(degenerate, float(mode.n_classes), mass)
    return q / mass[:, None]


def readout(state: StateVector, mode: ReadoutMode) -> np.ndarray:
    mode.check(state.n_qubits)
    probs = qsim.basis_probabilities(state)[None, :]
    return _readout_from_quantities(_class_quantities(probs, mode, state.n_qubits), mode)[0]


def predict_proba(params: CircuitParams, batch_x, mode: ReadoutMode) -> np.ndarray:
    """[B, n_classes] class probabilities for a batch of encodable vectors."""
    n = params.n_qubits
    mode.check(n)
    amps, zero_rows = qsim.encode_batch(np.atleast_2d(batch_x), n)
    if zero_rows.any():
        logger.warning(f"VQC: {int(zero_rows.sum())} all-zero input(s) encoded as |0...0>.")
    probs = qsim.probabilities_batch(_run_circuit_batch(amps, params.values, n))
    return _readout_from_quantities(_class_quantities(probs, mode, n), mode)


def _check_batch(batch_x, batch_y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(batch_x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(batch_y, dtype=np.float64))
    if x.shape[0] == 0:
        raise ArgumentError("batch must not be empty")
    if x.shape[0] != y.shape[0]:
        raise ArgumentError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    return x, y


def _nll(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    p_true = np.sum(p * y, axis=1)
    return -np.log(np.maximum(p_true, PROB_CLAMP))


def loss_nll(params: CircuitParams, batch_x, batch_y, mode: ReadoutMode) -> float:
    """Mean negative log-likelihood of the true class, probabilities clamped at 1e-12."""
    x, y = _check_batch(batch_x, batch_y)
    return float(np.mean(_nll(predict_proba(params, x, mode), y)))


def predicted_classes(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(probs, axis=1)


def accuracy(params: CircuitParams, batch_x, batch_y, mode: ReadoutMode) -> float:
    x, y = _check_batch(batch_x, batch_y)
    hits = predicted_classes(predict_proba(params, x, mode)) == np.argmax(y, axis=1)
    return float(np.mean(hits))


def _chain_coefficients(q: np.ndarray, y: np.ndarray, mode: ReadoutMode) -> np.ndarray:
    """
    d(loss_b)/d(q_bc) for every sample b and class c, where q are the class observables.
    Samples whose true-class probability sits at the clamp, or whose sample-mode mass is
    degenerate, contribute zero (the loss is flat there).
    """
    p = _readout_from_quantities(q, mode, warn=False)
    p_true = np.sum(p * y, axis=1)
    active = p_true >= PROB_CLAMP
    if mode.kind is ReadoutKind.SOFTMAX:
        coef = p - y
    else:
        mass = q.sum(axis=1)
        active &= mass >= DEGENERATE_MASS
        q_true = np.sum(q * y, axis=1)
        safe_true = np.where(active, q_true, 1.0)
        safe_mass = np.where(active, mass, 1.0)
        coef = -y / safe_true[:, None] + 1.0 / safe_mass[:, None]
    return np.where(active[:, None], coef, 0.0)


def loss_and_grad_parameter_shift(params: CircuitParams, batch_x, batch_y, mode: ReadoutMode):
    """Mean loss and its exact gradient; shares the unshifted forward pass between both."""
    x, y = _check_batch(batch_x, batch_y)
    n = params.n_qubits
    mode.check(n)
    amps, _ = qsim.encode_batch(x, n)
    q = _class_quantities(qsim.probabilities_batch(_run_circuit_batch(amps, params.values, n)), mode, n)
    loss = float(np.mean(_nll(_readout_from_quantities(q, mode, warn=False), y)))
    coef = _chain_coefficients(q, y, mode)

    grad = np.zeros_like(params.values)
    for r in range(params.values.shape[0]):
        for i in range(n):
            plus = params.values.copy()
            plus[r, i] += SHIFT
            minus = params.values.copy()
            minus[r, i] -= SHIFT
            q_plus = _class_quantities(qsim.probabilities_batch(_run_circuit_batch(amps, plus, n)), mode, n)
            q_minus = _class_quantities(qsim.probabilities_batch(_run_circuit_batch(amps, minus, n)), mode, n)
            dq = 0.5 * (q_plus - q_minus)
            grad[r, i] = np.mean(np.sum(coef * dq, axis=1))
    return loss, grad


def grad_parameter_shift(params: CircuitParams, batch_x, batch_y, mode: ReadoutMode) -> np.ndarray:
    return loss_and_grad_parameter_shift(params, batch_x, batch_y, mode)[1]


def grad_finite_diff(
    params: CircuitParams,
    batch_x,
    batch_y,
    mode: ReadoutMode,
    h: float = 1e-4,
    loss_fn: Optional[Callable[[CircuitParams], float]] = None,
) -> np.ndarray:
    """
    Central differences (loss(t+h) - loss(t-h)) / 2h per parameter.
    `loss_fn` replaces loss_nll when given, taking the shifted CircuitParams.
    """
    if not h > 0:
        raise ArgumentError(f"finite-difference step must be positive, got {h}")
    if loss_fn is None:
        x, y = _check_batch(batch_x, batch_y)

        def loss_fn(p: CircuitParams) -> float:
            return loss_nll(p, x, y, mode)

    grad = np.zeros_like(params.values)
    for idx in np.ndindex(params.values.shape):
        plus = params.values.copy()
        plus[idx] += h
        minus = params.values.copy()
        minus[idx] -= h
        grad[idx] = (loss_fn(params.with_leaves([plus])) - loss_fn(params.with_leaves([minus]))) / (2.0 * h)
    return grad

# bqfl/qsim.py
"""
Dense statevector engine.

Qubit ordering is little-endian: basis index b holds qubit q in bit (b >> q) & 1,
so a flattened image index maps directly onto an amplitude index.
Rotations follow RotX(t) = exp(-i t X / 2), RotZ(t) = exp(-i t Z / 2).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import DimensionError

logger = logging.getLogger(__name__)

MAX_QUBITS = 12
NORM_TOLERANCE = 1e-10


class GateKind(str, Enum):
    ROT_X = "rx"
    ROT_Z = "rz"
    CNOT = "cnot"


@dataclass(frozen=True)
class GateSpec:
    kind: GateKind
    target: int
    control: Optional[int] = None
    angle: float = 0.0

    def check(self, n_qubits: int) -> None:
        if not 0 <= self.target < n_qubits:
            raise DimensionError(f"gate target {self.target} out of range for {n_qubits} qubits")
        if self.kind is GateKind.CNOT:
            if self.control is None or not 0 <= self.control < n_qubits:
                raise DimensionError(f"CNOT control {self.control} out of range for {n_qubits} qubits")
            if self.control == self.target:
                raise DimensionError("CNOT control and target must differ")
        elif self.control is not None:
            raise DimensionError(f"{self.kind.value} gate takes no control qubit")


@dataclass(frozen=True)
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray
    degenerate: bool = field(default=False, compare=False)  # set when encoding fell back to |0...0>

    def __post_init__(self):
        _check_qubits(self.n_qubits)
        amps = np.array(self.amplitudes, dtype=np.complex128).reshape(-1)
        if amps.shape[0] != 2 ** self.n_qubits:
            raise DimensionError(f"{amps.shape[0]} amplitudes do not match {self.n_qubits} qubits")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2)))


def _check_qubits(n: int) -> None:
    if not 1 <= n <= MAX_QUBITS:
        raise DimensionError(f"qubit count {n} outside the supported range 1..{MAX_QUBITS}")


def zero_state(n: int) -> StateVector:
    amps = np.zeros(2 ** n, dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(n, amps)


# --- Gate matrices ---
def rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)


def rot_z(theta: float) -> np.ndarray:
    return np.array([[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]], dtype=np.complex128)


def gate_matrix(gate: GateSpec) -> np.ndarray:
    """2x2 matrix of a single-qubit gate."""
    if gate.kind is GateKind.ROT_X:
        return rot_x(gate.angle)
    if gate.kind is GateKind.ROT_Z:
        return rot_z(gate.angle)
    raise DimensionError("CNOT has no single-qubit matrix")


@lru_cache(maxsize=None)
def cnot_permutation(n: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(2 ** n)
    perm = idx ^ (((idx >> control) & 1) << target)
    perm.setflags(write=False)
    return perm


@lru_cache(maxsize=None)
def z_signs(n: int) -> np.ndarray:
    """[2^n, n] matrix of +1/-1: entry (b, q) is the Z eigenvalue of qubit q in basis state b."""
    idx = np.arange(2 ** n)[:, None]
    signs = 1.0 - 2.0 * ((idx >> np.arange(n)[None, :]) & 1)
    signs.setflags(write=False)
    return signs


# --- Batched kernels: amplitudes carry a leading batch axis, shape [B, 2^n] ---
def apply_single_batch(amps: np.ndarray, matrix: np.ndarray, qubit: int, n: int) -> np.ndarray:
    batch = amps.shape[0]
    psi = amps.reshape(batch, 2 ** (n - 1 - qubit), 2, 2 ** qubit)
    out = np.einsum("ij,bhjl->bhil", matrix, psi)
    return out.reshape(batch, 2 ** n)


def apply_cnot_batch(amps: np.ndarray, control: int, target: int, n: int) -> np.ndarray:
    return amps[:, cnot_permutation(n, control, target)]


def apply_gate_batch(amps: np.ndarray, gate: GateSpec, n: int) -> np.ndarray:
    if gate.kind is GateKind.CNOT:
        return apply_cnot_batch(amps, gate.control, gate.target, n)
    return apply_single_batch(amps, gate_matrix(gate), gate.target, n)


def encode_batch(data: np.ndarray, n: int):
    """
    Row-wise amplitude encoding of a [B, 2^n] real array.
    Returns (amplitudes [B, 2^n] complex, boolean mask of all-zero rows).
    """
    _check_qubits(n)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2 ** n:
        raise DimensionError(f"cannot encode data of shape {x.shape} on {n} qubits")
    norms = np.sqrt(np.sum(x * x, axis=1))
    zero_rows = norms == 0.0
    safe = np.where(zero_rows, 1.0, norms)
    amps = (x / safe[:, None]).astype(np.complex128)
    if zero_rows.any():
        amps[zero_rows] = 0.0
        amps[zero_rows, 0] = 1.0
    return amps, zero_rows


def probabilities_batch(amps: np.ndarray) -> np.ndarray:
    return amps.real ** 2 + amps.imag ** 2


def expect_z_batch(probs: np.ndarray, n: int) -> np.ndarray:
    """[B, n] array of <Z_q> from basis probabilities."""
    return probs @ z_signs(n)


# --- Single-state operations ---
def amplitude_encode(data, n: int) -> StateVector:
    """
    Loads a real vector of length 2^n as normalized amplitudes.
    An all-zero vector yields the basis-0 state with `degenerate` set.
    """
    x = np.asarray(data, dtype=np.float64).reshape(-1)
    _check_qubits(n)
    if x.shape[0] != 2 ** n:
        raise DimensionError(f"data length {x.shape[0]} does not equal 2^{n}")
    amps, zero_rows = encode_batch(x[None, :], n)
    if zero_rows[0]:
        logger.warning("QSIM: All-zero input to amplitude_encode; falling back to the |0...0> basis state.")
    return StateVector(n, amps[0], degenerate=bool(zero_rows[0]))


def apply_gate(state: StateVector, gate: GateSpec) -> StateVector:
    gate.check(state.n_qubits)
    out = apply_gate_batch(state.amplitudes[None, :], gate, state.n_qubits)
    return StateVector(state.n_qubits, out[0])


def basis_probabilities(state: StateVector) -> np.ndarray:
    return probabilities_batch(state.amplitudes)


def expect_z(state: StateVector, qubit: int) -> float:
    if not 0 <= qubit < state.n_qubits:
        raise DimensionError(f"qubit {qubit} out of range for {state.n_qubits} qubits")
    return float(basis_probabilities(state) @ z_signs(state.n_qubits)[:, qubit])

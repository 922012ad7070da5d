import numpy as np
import pytest

from bqfl import qsim
from bqfl.errors import DimensionError
from bqfl.qsim import GateKind, GateSpec, StateVector


def _basis(n, index):
    amps = np.zeros(2 ** n)
    amps[index] = 1.0
    return StateVector(n, amps)


def _full_matrix(gate: GateSpec, n: int) -> np.ndarray:
    """Explicit 2^n x 2^n unitary; qubit q is bit q of the basis index."""
    if gate.kind is GateKind.CNOT:
        dim = 2 ** n
        m = np.zeros((dim, dim), dtype=complex)
        for b in range(dim):
            flipped = b ^ (((b >> gate.control) & 1) << gate.target)
            m[flipped, b] = 1.0
        return m
    full = np.array([[1.0 + 0j]])
    for q in reversed(range(n)):
        factor = qsim.gate_matrix(gate) if q == gate.target else np.eye(2)
        full = np.kron(full, factor)
    return full


def _random_gate(rng, n):
    kind = [GateKind.ROT_X, GateKind.ROT_Z, GateKind.CNOT][rng.integers(3)] if n > 1 else [GateKind.ROT_X, GateKind.ROT_Z][rng.integers(2)]
    target = int(rng.integers(n))
    if kind is GateKind.CNOT:
        control = int((target + 1 + rng.integers(n - 1)) % n)
        return GateSpec(kind, target=target, control=control)
    return GateSpec(kind, target=target, angle=float(rng.uniform(-np.pi, np.pi)))


def test_amplitude_encode_basis_and_uniform():
    state = qsim.amplitude_encode([1, 0, 0, 0], 2)
    np.testing.assert_allclose(state.amplitudes, [1, 0, 0, 0])
    state = qsim.amplitude_encode([1, 1, 1, 1], 2)
    np.testing.assert_allclose(state.amplitudes, [0.5, 0.5, 0.5, 0.5])
    assert not state.degenerate


def test_amplitude_encode_image_has_unit_norm(rng):
    state = qsim.amplitude_encode(rng.uniform(size=256), 8)
    assert state.amplitudes.shape == (256,)
    assert abs(state.norm - 1.0) < 1e-12
    assert np.all(state.amplitudes.imag == 0)


def test_amplitude_encode_rejects_length_mismatch():
    with pytest.raises(DimensionError):
        qsim.amplitude_encode([1, 2, 3], 2)


def test_amplitude_encode_all_zero_falls_back_to_basis_zero():
    state = qsim.amplitude_encode(np.zeros(8), 3)
    assert state.degenerate
    np.testing.assert_array_equal(state.amplitudes, _basis(3, 0).amplitudes)


def test_rot_x_zero_is_identity(rng):
    state = qsim.amplitude_encode(rng.uniform(size=8), 3)
    out = qsim.apply_gate(state, GateSpec(GateKind.ROT_X, target=1, angle=0.0))
    np.testing.assert_allclose(out.amplitudes, state.amplitudes, atol=1e-15)


def test_rot_x_pi_on_zero():
    out = qsim.apply_gate(qsim.zero_state(1), GateSpec(GateKind.ROT_X, target=0, angle=np.pi))
    np.testing.assert_allclose(out.amplitudes, [0, -1j], atol=1e-15)


def test_cnot_truth_table_little_endian():
    out = qsim.apply_gate(_basis(2, 1), GateSpec(GateKind.CNOT, target=1, control=0))
    np.testing.assert_array_equal(np.abs(out.amplitudes), [0, 0, 0, 1])
    # control bit clear: untouched
    out = qsim.apply_gate(_basis(2, 2), GateSpec(GateKind.CNOT, target=1, control=0))
    np.testing.assert_array_equal(np.abs(out.amplitudes), [0, 0, 1, 0])


def test_rot_z_on_zero_is_phase():
    theta = 0.7
    out = qsim.apply_gate(qsim.zero_state(1), GateSpec(GateKind.ROT_Z, target=0, angle=theta))
    np.testing.assert_allclose(out.amplitudes, [np.exp(-0.5j * theta), 0], atol=1e-15)


def test_basis_probabilities_examples():
    np.testing.assert_allclose(qsim.basis_probabilities(qsim.zero_state(2)), [1, 0, 0, 0])
    uniform = qsim.amplitude_encode([1, 1, 1, 1], 2)
    np.testing.assert_allclose(qsim.basis_probabilities(uniform), [0.25] * 4)
    half = qsim.apply_gate(qsim.zero_state(1), GateSpec(GateKind.ROT_X, target=0, angle=np.pi / 2))
    np.testing.assert_allclose(qsim.basis_probabilities(half), [0.5, 0.5], atol=1e-15)


def test_expect_z_examples():
    assert qsim.expect_z(qsim.zero_state(3), 2) == 1.0
    flipped = qsim.apply_gate(qsim.zero_state(3), GateSpec(GateKind.ROT_X, target=1, angle=np.pi))
    assert qsim.expect_z(flipped, 1) == pytest.approx(-1.0, abs=1e-15)
    assert qsim.expect_z(flipped, 0) == pytest.approx(1.0, abs=1e-15)
    uniform = qsim.amplitude_encode(np.ones(8), 3)
    assert qsim.expect_z(uniform, 0) == pytest.approx(0.0, abs=1e-15)


def test_expect_z_matches_signed_probability_sum(rng):
    state = qsim.amplitude_encode(rng.normal(size=16), 4)
    probs = qsim.basis_probabilities(state)
    for q in range(4):
        signs = np.array([1.0 if ((i >> q) & 1) == 0 else -1.0 for i in range(16)])
        assert qsim.expect_z(state, q) == pytest.approx(float(np.sum(signs * probs)), abs=1e-15)


def test_out_of_range_indices_raise():
    state = qsim.zero_state(2)
    with pytest.raises(DimensionError):
        qsim.apply_gate(state, GateSpec(GateKind.ROT_X, target=2, angle=0.1))
    with pytest.raises(DimensionError):
        qsim.apply_gate(state, GateSpec(GateKind.CNOT, target=0, control=0))
    with pytest.raises(DimensionError):
        qsim.expect_z(state, 5)


def test_norm_conservation_random_sequences(rng):
    for _ in range(300):
        n = int(rng.integers(1, 9))
        state = qsim.amplitude_encode(rng.normal(size=2 ** n), n)
        for _ in range(int(rng.integers(1, 12))):
            state = qsim.apply_gate(state, _random_gate(rng, n))
        assert abs(state.norm - 1.0) < 1e-10


def test_rotations_invert_and_cnot_is_involution(rng):
    state = qsim.amplitude_encode(rng.normal(size=8), 3)
    for kind in (GateKind.ROT_X, GateKind.ROT_Z):
        theta = float(rng.uniform(-np.pi, np.pi))
        there = qsim.apply_gate(state, GateSpec(kind, target=2, angle=theta))
        back = qsim.apply_gate(there, GateSpec(kind, target=2, angle=-theta))
        np.testing.assert_allclose(back.amplitudes, state.amplitudes, atol=1e-12)
    cnot = GateSpec(GateKind.CNOT, target=0, control=2)
    twice = qsim.apply_gate(qsim.apply_gate(state, cnot), cnot)
    np.testing.assert_array_equal(twice.amplitudes, state.amplitudes)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_apply_gate_matches_kronecker_matrix(rng, n):
    for _ in range(30):
        state = qsim.amplitude_encode(rng.normal(size=2 ** n), n)
        gate = _random_gate(rng, n)
        expected = _full_matrix(gate, n) @ state.amplitudes
        np.testing.assert_allclose(qsim.apply_gate(state, gate).amplitudes, expected, atol=1e-12)

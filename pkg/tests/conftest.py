import numpy as np
import pytest

from qsim import StateVector


@pytest.fixture
def random_state():
    """Factory for Haar-ish random normalized states, seeded per call."""

    def make(n_qubits: int, seed: int = 0) -> StateVector:
        rng = np.random.default_rng(seed)
        amplitudes = rng.normal(size=1 << n_qubits) + 1j * rng.normal(size=1 << n_qubits)
        return StateVector(n_qubits, amplitudes / np.linalg.norm(amplitudes))

    return make

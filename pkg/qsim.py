# qsim.py
# Dense state-vector simulation for the voting protocol: n-qubit registers,
# the gate set signatures are built from, Bell-basis entangling unitaries,
# Monte-Carlo gate/readout noise and shot sampling.
#
# Qubit 0 is the leftmost character of a ket label ("10" means qubit 0 is 1),
# so basis index i is the label format(i, "0{n}b"). With a C-ordered reshape
# of the amplitudes to (2,) * n, qubit q is axis q.

import hashlib
import logging
import re
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, field_validator, model_validator

from errors import DimensionMismatch, InvalidBasisIndex, InvalidTarget, RegisterTooLarge

logger = logging.getLogger(__name__)

# Dense simulation keeps 2^n complex amplitudes; 20 qubits is 16 MiB.
MAX_QUBITS = 20
NORM_TOLERANCE = 1e-10

_SQRT1_2 = 1 / np.sqrt(2)

_SINGLE_QUBIT = {
    "X": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    "Z": np.array([[1, 0], [0, -1]], dtype=np.complex128),
    "H": np.array([[1, 1], [1, -1]], dtype=np.complex128) * _SQRT1_2,
    "S": np.array([[1, 0], [0, 1j]], dtype=np.complex128),
    "T": np.array([[1, 0], [0, np.exp(1j * np.pi / 4)]], dtype=np.complex128),
}

# First target is the control.
_TWO_QUBIT = {
    "CNOT": np.array(
        [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=np.complex128
    ),
    "CZ": np.diag([1, 1, 1, -1]).astype(np.complex128),
}

SELF_INVERSE_KINDS = frozenset({"X", "Y", "Z", "H", "CNOT", "CZ"})
PAULIS = ("X", "Y", "Z")

GateKind = Literal["X", "Y", "Z", "H", "S", "T", "CNOT", "CZ"]

_DESCRIPTOR = re.compile(r"^\s*([A-Z]+)(')?@(\d+(?:\s*,\s*\d+)*)\s*$")


# --- States ---

@dataclass(frozen=True, eq=False)
class StateVector:
    """A normalized n-qubit pure state. Amplitudes are copied on construction
    and read-only afterwards, so a StateVector can be shared freely."""

    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError("A register needs at least one qubit.")
        if self.n_qubits > MAX_QUBITS:
            raise RegisterTooLarge(f"{self.n_qubits} qubits exceeds the {MAX_QUBITS}-qubit cap.")
        amplitudes = np.array(self.amplitudes, dtype=np.complex128).reshape(-1)
        if amplitudes.shape != (1 << self.n_qubits,):
            raise DimensionMismatch(
                f"{amplitudes.size} amplitudes given for {self.n_qubits} qubits."
            )
        norm = float(np.sum(np.abs(amplitudes) ** 2))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise ValueError(f"State is not normalized (norm {norm:.12f}).")
        amplitudes.setflags(write=False)
        object.__setattr__(self, "amplitudes", amplitudes)

    @property
    def dim(self) -> int:
        return 1 << self.n_qubits

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def label(self, index: int) -> str:
        return format(index, f"0{self.n_qubits}b")

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape((2,) * self.n_qubits)


def init_basis(n_qubits: int, basis_index: int = 0) -> StateVector:
    """The computational basis ket |basis_index>."""
    if n_qubits > MAX_QUBITS:
        raise RegisterTooLarge(f"{n_qubits} qubits exceeds the {MAX_QUBITS}-qubit cap.")
    if not 0 <= basis_index < (1 << n_qubits):
        raise InvalidBasisIndex(f"Basis index {basis_index} is outside 0..{(1 << n_qubits) - 1}.")
    amplitudes = np.zeros(1 << n_qubits, dtype=np.complex128)
    amplitudes[basis_index] = 1.0
    return StateVector(n_qubits, amplitudes)


def fidelity(a: StateVector, b: StateVector) -> float:
    """|<a|b>|^2. Equal to 1 exactly when the states agree up to global phase."""
    if a.n_qubits != b.n_qubits:
        raise DimensionMismatch(f"Cannot compare {a.n_qubits}- and {b.n_qubits}-qubit states.")
    overlap = abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2
    return float(min(1.0, max(0.0, overlap)))


# --- Gates ---

class GateOp(BaseModel):
    """One gate application. Descriptor form: "X@0", "CNOT@0,1", "S'@0"
    (a trailing ' marks the adjoint)."""

    model_config = ConfigDict(frozen=True)

    kind: GateKind
    targets: tuple[int, ...]
    adjoint: bool = False

    @model_validator(mode="before")
    @classmethod
    def _drop_redundant_adjoint(cls, data):
        if isinstance(data, str):
            data = cls._parse_fields(data)
        if isinstance(data, dict) and data.get("kind") in SELF_INVERSE_KINDS:
            return {**data, "adjoint": False}
        return data

    @model_validator(mode="after")
    def _check_targets(self):
        arity = 2 if self.kind in _TWO_QUBIT else 1
        if len(self.targets) != arity:
            raise ValueError(f"{self.kind} takes {arity} target(s), got {len(self.targets)}.")
        if len(set(self.targets)) != arity:
            raise ValueError(f"{self.kind} targets must be distinct.")
        if any(t < 0 for t in self.targets):
            raise ValueError("Qubit indices cannot be negative.")
        return self

    @staticmethod
    def _parse_fields(text: str) -> dict:
        match = _DESCRIPTOR.match(text)
        if not match:
            raise ValueError(f"Unreadable gate descriptor {text!r}.")
        kind, prime, targets = match.groups()
        return {
            "kind": kind,
            "targets": tuple(int(t) for t in targets.split(",")),
            "adjoint": bool(prime),
        }

    @classmethod
    def parse(cls, text: str) -> "GateOp":
        return cls.model_validate(text)

    @property
    def descriptor(self) -> str:
        mark = "'" if self.adjoint else ""
        return f"{self.kind}{mark}@{','.join(str(t) for t in self.targets)}"

    def __str__(self) -> str:
        return self.descriptor

    def inverse(self) -> "GateOp":
        if self.kind in SELF_INVERSE_KINDS:
            return self
        return self.model_copy(update={"adjoint": not self.adjoint})

    @property
    def matrix(self) -> np.ndarray:
        if self.kind in _TWO_QUBIT:
            return _TWO_QUBIT[self.kind]
        matrix = _SINGLE_QUBIT[self.kind]
        return matrix.conj().T if self.adjoint else matrix


def gate(kind: str, *targets: int) -> GateOp:
    return GateOp(kind=kind, targets=tuple(targets))


# --- Noise ---

class NoiseConfig(BaseModel):
    """Gate and readout error probabilities for one Monte-Carlo trajectory.

    Gate noise: each gate application draws one uniform number and one Pauli
    index per target; when the uniform falls below gate_error_p, the drawn
    Pauli is applied to each target after the gate. Readout noise: after a
    shot is sampled, each bit draws one uniform and flips below meas_error_p.
    Draws happen whenever a NoiseConfig is present, so streams stay aligned
    across error probabilities."""

    model_config = ConfigDict(frozen=True)

    gate_error_p: float = Field(default=0.0, ge=0.0, le=1.0)
    meas_error_p: float = Field(default=0.0, ge=0.0, le=1.0)
    rng_seed: int = Field(default=0, ge=0, lt=2**64)
    noisy_lookup: bool = False

    @property
    def is_noiseless(self) -> bool:
        return self.gate_error_p == 0.0 and self.meas_error_p == 0.0

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


def derive_seed(master_seed: int, *indices: int) -> int:
    """sub_seed = first 8 bytes of SHA-256(u64be(master_seed) || u64be(index)...)."""
    payload = b"".join(struct.pack(">Q", value) for value in (master_seed, *indices))
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def _rng_for(noise: NoiseConfig | None, rng: np.random.Generator | None) -> np.random.Generator:
    if rng is not None:
        return rng
    if noise is not None:
        return noise.rng()
    return np.random.default_rng(0)


def _apply_unitary(psi: np.ndarray, matrix: np.ndarray, targets: tuple[int, ...]) -> np.ndarray:
    k = len(targets)
    unitary = matrix.reshape((2,) * (2 * k))
    psi = np.tensordot(unitary, psi, axes=(list(range(k, 2 * k)), list(targets)))
    return np.moveaxis(psi, list(range(k)), list(targets))


def check_targets(n_qubits: int, targets: Iterable[int]) -> None:
    for target in targets:
        if not 0 <= target < n_qubits:
            raise InvalidTarget(f"Qubit {target} is outside a {n_qubits}-qubit register.")


def apply_gate(
    state: StateVector,
    gate: GateOp,
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
) -> StateVector:
    """Returns the state after `gate`. With `noise`, a depolarizing Pauli may
    follow on each target; pass `rng` to thread one stream through a whole
    circuit (otherwise a fresh stream is seeded from noise.rng_seed)."""
    check_targets(state.n_qubits, gate.targets)
    psi = _apply_unitary(state.tensor(), gate.matrix, gate.targets)
    if noise is not None:
        stream = _rng_for(noise, rng)
        hit = stream.random() < noise.gate_error_p
        paulis = stream.integers(0, len(PAULIS), size=len(gate.targets))
        if hit:
            logger.debug(
                "Gate error after %s: %s", gate.descriptor,
                ", ".join(f"{PAULIS[p]}@{t}" for t, p in zip(gate.targets, paulis)),
            )
            for target, pauli in zip(gate.targets, paulis):
                psi = _apply_unitary(psi, _SINGLE_QUBIT[PAULIS[pauli]], (target,))
    return StateVector(state.n_qubits, psi.reshape(-1))


def apply_gates(
    state: StateVector,
    gates: Iterable[GateOp],
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
) -> StateVector:
    if noise is not None:
        rng = _rng_for(noise, rng)
    for op in gates:
        state = apply_gate(state, op, noise, rng)
    return state


# --- Bell-basis entanglement ---

class BellVariant(str, Enum):
    PHI_PLUS = "PhiPlus"
    PHI_MINUS = "PhiMinus"
    PSI_PLUS = "PsiPlus"
    PSI_MINUS = "PsiMinus"


# Which pair elements get an X before H/CNOT: (first, second).
_BELL_PRELAYER = {
    BellVariant.PHI_PLUS: (False, False),
    BellVariant.PHI_MINUS: (True, False),
    BellVariant.PSI_PLUS: (False, True),
    BellVariant.PSI_MINUS: (True, True),
}


class EntangleSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    bell_variant: BellVariant
    qubit_pair: tuple[int, int] = (0, 1)

    @field_validator("qubit_pair")
    @classmethod
    def _distinct(cls, pair):
        if pair[0] == pair[1] or min(pair) < 0:
            raise ValueError("qubit_pair must be two distinct non-negative indices.")
        return pair

    def circuit(self) -> list[GateOp]:
        first, second = self.qubit_pair
        flip_first, flip_second = _BELL_PRELAYER[self.bell_variant]
        ops = []
        if flip_first:
            ops.append(gate("X", first))
        if flip_second:
            ops.append(gate("X", second))
        ops.append(gate("H", first))
        ops.append(gate("CNOT", first, second))
        return ops


def apply_entangle(
    state: StateVector,
    spec: EntangleSpec,
    direction: Literal["forward", "inverse"] = "forward",
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
) -> StateVector:
    check_targets(state.n_qubits, spec.qubit_pair)
    ops = spec.circuit()
    if direction == "inverse":
        ops = [op.inverse() for op in reversed(ops)]
    elif direction != "forward":
        raise ValueError(f"Unknown direction {direction!r}.")
    return apply_gates(state, ops, noise, rng)


def bell_state(variant: BellVariant) -> StateVector:
    """The two-qubit Bell state a forward entangle produces from |00>."""
    amplitudes = {
        BellVariant.PHI_PLUS: [1, 0, 0, 1],
        BellVariant.PHI_MINUS: [1, 0, 0, -1],
        BellVariant.PSI_PLUS: [0, 1, 1, 0],
        BellVariant.PSI_MINUS: [0, 1, -1, 0],
    }[BellVariant(variant)]
    return StateVector(2, np.array(amplitudes, dtype=np.complex128) * _SQRT1_2)


# --- Measurement ---

class Counts(BaseModel):
    """Shot outcomes keyed by ket label; only observed labels are listed."""

    shots: PositiveInt
    table: dict[str, int]

    @model_validator(mode="after")
    def _consistent(self):
        widths = {len(label) for label in self.table}
        if len(widths) > 1 or any(set(label) - {"0", "1"} for label in self.table):
            raise ValueError("Count labels must be bitstrings of one width.")
        if any(count < 0 for count in self.table.values()):
            raise ValueError("Counts cannot be negative.")
        if sum(self.table.values()) != self.shots:
            raise ValueError(f"Counts sum to {sum(self.table.values())}, expected {self.shots}.")
        return self

    def get(self, label: str) -> int:
        return self.table.get(label, 0)

    def by_index(self) -> dict[int, int]:
        return {int(label, 2): count for label, count in self.table.items()}


def measure_shots(
    state: StateVector,
    shots: int,
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
) -> Counts:
    """Samples `shots` readouts of the whole register. The state is not
    consumed: every shot is drawn from the same StateVector."""
    if shots < 1:
        raise ValueError("shots must be at least 1.")
    stream = _rng_for(noise, rng)
    probabilities = state.probabilities()
    outcomes = stream.choice(state.dim, size=shots, p=probabilities / probabilities.sum())
    if noise is not None:
        flips = stream.random((shots, state.n_qubits)) < noise.meas_error_p
        weights = 1 << np.arange(state.n_qubits - 1, -1, -1)
        outcomes = outcomes ^ (flips.astype(np.int64) @ weights)
    values, counts = np.unique(outcomes, return_counts=True)
    table = {state.label(int(v)): int(c) for v, c in zip(values, counts)}
    return Counts(shots=shots, table=table)


def expected_counts(state: StateVector, shots: int) -> Counts:
    """Born probabilities turned into integer counts by largest remainder
    (ties go to the lower index); sums to `shots` exactly."""
    if shots < 1:
        raise ValueError("shots must be at least 1.")
    raw = state.probabilities() * shots
    counts = np.floor(raw + 1e-9).astype(np.int64)
    remaining = max(0, shots - int(counts.sum()))
    order = np.lexsort((np.arange(state.dim), -(raw - counts)))
    counts[order[:remaining]] += 1
    table = {state.label(i): int(c) for i, c in enumerate(counts) if c}
    return Counts(shots=shots, table=table)

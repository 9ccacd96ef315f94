# grover.py
# Grover lookup of a voter's hash ID in the tallyman's database, run on the
# qsim engine. The oracle's phase-flip diagonal is built by comparing digests
# classically; no reversible hash circuit is synthesized. The Hadamard
# layers are real gates and pick up gate noise when a NoiseConfig is given.

import logging
import math
from typing import NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from errors import AmbiguousTarget, SearchSpaceTooLarge
from protocol_crypto import HashId
from qsim import NoiseConfig, StateVector, apply_gates, gate, init_basis, measure_shots

logger = logging.getLogger(__name__)

MAX_INDEX_QUBITS = 10
MAX_SEARCH_SPACE = 1 << MAX_INDEX_QUBITS

# Padding slot. Its algorithm_id is not a hash algorithm, so it can never
# compare equal to a real HashId.
SENTINEL = HashId(digest=bytes(32), algorithm_id="padding")


def padded_size(n_entries: int, min_size: int = 2) -> int:
    size = max(2, min_size, n_entries)
    return 1 << (size - 1).bit_length()


def pad_database(entries: Sequence[HashId], min_size: int = 2) -> tuple[HashId, ...]:
    size = padded_size(len(entries), min_size)
    if size > MAX_SEARCH_SPACE:
        raise SearchSpaceTooLarge(f"{len(entries)} entries exceed the {MAX_SEARCH_SPACE}-slot cap.")
    return tuple(entries) + (SENTINEL,) * (size - len(entries))


class SearchProblem(BaseModel):
    model_config = ConfigDict(frozen=True)

    database: tuple[HashId, ...]
    target: HashId

    @model_validator(mode="after")
    def _power_of_two(self):
        size = len(self.database)
        if size < 2 or size & (size - 1):
            raise ValueError(f"Database size must be a power of two >= 2, got {size}.")
        if size > MAX_SEARCH_SPACE:
            raise SearchSpaceTooLarge(f"{size} slots exceed the {MAX_SEARCH_SPACE}-slot cap.")
        return self

    @classmethod
    def build(cls, entries: Sequence[HashId], target: HashId, min_size: int = 2) -> "SearchProblem":
        return cls(database=pad_database(entries, min_size), target=target)

    @property
    def index_qubits(self) -> int:
        return len(self.database).bit_length() - 1

    def marked(self) -> list[int]:
        return [i for i, entry in enumerate(self.database) if entry == self.target]


class GroverResult(NamedTuple):
    found: bool
    index: int | None
    success_prob: float
    iterations: int


def iterations_for(size: int) -> int:
    """floor(pi/4 * sqrt(M)), at least 1: 1 for M in {2, 4}, 2 for 8, 3 for
    16, 6 for 64. Rounding instead would over-rotate M = 4 to k = 2."""
    return max(1, math.floor(math.pi / 4 * math.sqrt(size)))


def analytic_success(size: int, iterations: int | None = None) -> float:
    """sin^2((2k+1) * arcsin(1/sqrt(M))) for one marked entry."""
    k = iterations_for(size) if iterations is None else iterations
    theta = math.asin(1 / math.sqrt(size))
    return math.sin((2 * k + 1) * theta) ** 2


def _hadamard_layer(m: int):
    return [gate("H", q) for q in range(m)]


def grover_search(
    problem: SearchProblem,
    noise: NoiseConfig | None = None,
    shots: int = 64,
    rng: np.random.Generator | None = None,
) -> GroverResult:
    """Amplifies the target's index and reads it out. found requires the
    modal outcome to hold the target digest on a classical recheck, so a
    noisy or empty search can never produce a false accept."""
    marked = problem.marked()
    if len(marked) > 1:
        raise AmbiguousTarget(f"Target {problem.target.short} appears {len(marked)} times.")
    if noise is not None and rng is None:
        rng = noise.rng()

    m = problem.index_qubits
    size = len(problem.database)
    k = iterations_for(size)
    phase_flip = np.ones(size)
    phase_flip[marked] = -1.0
    # 2|0><0| - I up to a global phase of -1.
    zero_reflection = -np.ones(size)
    zero_reflection[0] = 1.0

    state = apply_gates(init_basis(m, 0), _hadamard_layer(m), noise, rng)
    for _ in range(k):
        state = StateVector(m, state.amplitudes * phase_flip)
        state = apply_gates(state, _hadamard_layer(m), noise, rng)
        state = StateVector(m, state.amplitudes * zero_reflection)
        state = apply_gates(state, _hadamard_layer(m), noise, rng)

    success_prob = float(state.probabilities()[marked[0]]) if marked else 0.0
    counts = measure_shots(state, shots, noise, rng)
    by_index = counts.by_index()
    modal = min(by_index, key=lambda i: (-by_index[i], i))
    found = problem.database[modal] == problem.target
    logger.debug(
        "Grover over %d slots, k=%d: modal index %d, success_prob %.6f, found=%s",
        size, k, modal, success_prob, found,
    )
    return GroverResult(found, modal if found else None, success_prob, k)


def remove_id(database: Sequence[HashId], voter_hash_id: HashId) -> tuple[HashId, ...]:
    """Every copy of the ID becomes a sentinel slot; the size is unchanged."""
    return tuple(SENTINEL if entry == voter_hash_id else entry for entry in database)

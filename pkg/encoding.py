# encoding.py
# Approval ballots as amplitude-encoded states and back again. Candidate i
# (0-based) is the basis ket |i>, so for four candidates c1..c4 are |00>,
# |01>, |10>, |11>. A ballot approving k candidates puts 1/sqrt(k) on each
# approved ket and nothing anywhere else.

import logging
from typing import Literal, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_serializer, model_validator

from env_utils import env_float, env_int
from errors import ConfigMismatch, EmptyBallot, NoBallots
from qsim import MAX_QUBITS, Counts, StateVector

logger = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_SHOTS = env_int("QVOTE_SHOTS", 1024)
# Must sit above hardware-scale noise (1-2 % of shots) and below 1/N, the
# smallest honest frequency (1/16 = 0.0625 for sixteen candidates).
DEFAULT_DECODE_THRESHOLD = env_float("QVOTE_DECODE_THRESHOLD", 0.05)
DEFAULT_KEY_LENGTH = env_int("QVOTE_KEY_LENGTH", 256)
DEFAULT_GROVER_SHOTS = env_int("QVOTE_GROVER_SHOTS", 64)


def qubits_for(n_candidates: int) -> int:
    """Smallest n with 2^n >= n_candidates."""
    return max(1, (n_candidates - 1).bit_length())


def candidate_label(index: int) -> str:
    return f"c{index + 1}"


class Ballot(BaseModel):
    """An approval bit-vector; '1101' approves c1, c2 and c4. All-zero
    ballots can be represented (a decoding may produce one) but cannot be
    encoded."""

    model_config = ConfigDict(frozen=True)

    approvals: tuple[bool, ...] = Field(min_length=2)

    @model_validator(mode="before")
    @classmethod
    def _from_bits(cls, data):
        if isinstance(data, str):
            bits = data.strip()
            if not bits or set(bits) - {"0", "1"}:
                raise ValueError(f"A ballot is a string of 0/1, got {data!r}.")
            return {"approvals": tuple(bit == "1" for bit in bits)}
        return data

    @model_serializer
    def _as_bits(self) -> str:
        return self.bits

    @classmethod
    def parse(cls, bits: str) -> "Ballot":
        return cls.model_validate(bits)

    @property
    def n_candidates(self) -> int:
        return len(self.approvals)

    @property
    def approved(self) -> tuple[int, ...]:
        return tuple(i for i, approved in enumerate(self.approvals) if approved)

    @property
    def bits(self) -> str:
        return "".join("1" if approved else "0" for approved in self.approvals)

    def __str__(self) -> str:
        return self.bits


class ElectionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_candidates: int = Field(ge=2)
    n_qubits: int = Field(ge=1, le=MAX_QUBITS)
    shots_per_ballot: PositiveInt = DEFAULT_SHOTS
    decode_threshold: float = Field(default=DEFAULT_DECODE_THRESHOLD, gt=0.0, lt=1.0)
    # "statevector" decodes from exact Born probabilities (debug readout).
    readout: Literal["shots", "statevector"] = "shots"
    # A hash ID is 256 bits and travels one-time-padded under K_AC.
    key_length: int = Field(default=DEFAULT_KEY_LENGTH, ge=256)
    grover_shots: PositiveInt = DEFAULT_GROVER_SHOTS
    # Size of the scrutineer group; every member shares the one ledger.
    scrutineers: PositiveInt = 1

    @model_validator(mode="before")
    @classmethod
    def _derive_qubits(cls, data):
        if not isinstance(data, dict) or not isinstance(data.get("n_candidates"), int):
            return data
        needed = qubits_for(data["n_candidates"])
        given = data.get("n_qubits")
        if given is None:
            return {**data, "n_qubits": needed}
        if given != needed:
            raise ValueError(
                f"{data['n_candidates']} candidates need exactly {needed} qubits, not {given}."
            )
        return data


def encode_ballot(ballot: Ballot, config: ElectionConfig) -> StateVector:
    if ballot.n_candidates != config.n_candidates:
        raise ConfigMismatch(
            f"Ballot has {ballot.n_candidates} candidates, election has {config.n_candidates}."
        )
    approved = ballot.approved
    if not approved:
        raise EmptyBallot("A ballot must approve at least one candidate.")
    amplitudes = np.zeros(1 << config.n_qubits, dtype=np.complex128)
    amplitudes[list(approved)] = 1 / np.sqrt(len(approved))
    return StateVector(config.n_qubits, amplitudes)


class Decoded(NamedTuple):
    approvals: Ballot
    noise_fraction: float


def decode_counts(counts: Counts, config: ElectionConfig) -> Decoded:
    """Candidate i is approved iff its basis frequency reaches the threshold.
    Shots on unapproved or unused basis states make up noise_fraction."""
    by_index = counts.by_index()
    approvals = tuple(
        by_index.get(i, 0) / counts.shots >= config.decode_threshold
        for i in range(config.n_candidates)
    )
    noise = sum(
        count for i, count in by_index.items()
        if i >= config.n_candidates or not approvals[i]
    )
    return Decoded(Ballot(approvals=approvals), noise / counts.shots)


def decode_probabilities(probabilities: np.ndarray, config: ElectionConfig) -> Decoded:
    """decode_counts on exact Born probabilities instead of sampled shots."""
    probabilities = np.asarray(probabilities, dtype=float)
    approvals = tuple(
        bool(probabilities[i] >= config.decode_threshold) for i in range(config.n_candidates)
    )
    mask = np.ones(probabilities.size, dtype=bool)
    mask[[i for i, approved in enumerate(approvals) if approved]] = False
    return Decoded(Ballot(approvals=approvals), float(probabilities[mask].sum()))


class BallotAudit(BaseModel):
    """One tallied ballot as the scrutineer sees it: which registration it
    belongs to, the raw measurement table and what it decoded to."""

    hash_id: str
    counts: Counts
    approvals: str
    noise_fraction: float = Field(ge=0.0, le=1.0)


class TallyResult(BaseModel):
    per_candidate_approvals: dict[int, int]
    winners: list[int]
    noise_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    ballots: list[BallotAudit] = Field(default_factory=list)
    # Hash IDs (hex) of held ballots whose entanglement details never arrived.
    blocked: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _winners_attain_max(self):
        if not self.winners:
            raise ValueError("A tally always has at least one winner.")
        best = max(self.per_candidate_approvals.values())
        if any(self.per_candidate_approvals[w] != best for w in self.winners):
            raise ValueError("Every winner must attain the maximum approval count.")
        return self

    def summary(self) -> str:
        approvals = ", ".join(
            f"{candidate_label(i)}={n}" for i, n in sorted(self.per_candidate_approvals.items())
        )
        winners = ", ".join(candidate_label(i) for i in self.winners)
        return f"approvals: {approvals} | winners: {winners}"


def tally(
    ballots_decoded: Sequence[Ballot | str],
    noise_fractions: Sequence[float] | None = None,
) -> TallyResult:
    """Per-candidate approval sums; every candidate at the maximum wins."""
    if not ballots_decoded:
        raise NoBallots("Nothing to tally.")
    ballots = [b if isinstance(b, Ballot) else Ballot.parse(b) for b in ballots_decoded]
    n_candidates = ballots[0].n_candidates
    if any(b.n_candidates != n_candidates for b in ballots):
        raise ConfigMismatch("All ballots in a tally must cover the same candidates.")
    totals = {
        i: sum(1 for b in ballots if b.approvals[i]) for i in range(n_candidates)
    }
    best = max(totals.values())
    winners = [i for i, total in totals.items() if total == best]
    noise = float(np.mean(noise_fractions)) if noise_fractions else 0.0
    logger.info("Tallied %d ballot(s); winners %s", len(ballots), [candidate_label(w) for w in winners])
    return TallyResult(per_candidate_approvals=totals, winners=winners, noise_fraction=noise)

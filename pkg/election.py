# election.py
# Whole elections and noise sweeps on top of the protocol calls: input
# schemas, full runs with their transcripts, replay of a transcript, and the
# gate/measurement error sweeps with their CSV rows.
#
# Transcripts name voters only by hash-ID hex. Replay registers those
# pre-hashed IDs under the recorded master seed, which regenerates the same
# keys and noise draws.

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Literal, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, Field, PositiveInt, field_validator, model_validator

from encoding import (
    DEFAULT_DECODE_THRESHOLD,
    DEFAULT_SHOTS,
    Ballot,
    ElectionConfig,
    TallyResult,
    candidate_label,
)
from env_utils import env_int
from errors import ProtocolOrderViolation, ReplayDivergence, TallyBlocked, UnknownVoter
from ledger import Ledger, verify_chain
from protocol import (
    CastReceipt,
    ElectionRun,
    audit_tally,
    cast_vote,
    register_voter,
    release_and_tally,
    release_entanglement,
    scrutinize_and_record,
    voter_verify,
)
from protocol_crypto import HashId, SignatureSpec
from qsim import BellVariant, Counts, EntangleSpec, NoiseConfig, derive_seed

logger = logging.getLogger(__name__)

SWEEP_WORKERS = max(1, env_int("QVOTE_WORKERS", 1))
SWEEP_CSV_HEADER = ("p", "mean_noise_fraction", "std", "trajectories", "shots")
LEAKAGE_CSV_HEADER = ("source", "mean_leakage", "std", "trajectories", "shots")
DEFAULT_SWEEP_BALLOT = "1101"
DEFAULT_SWEEP_SIGNATURE = "Z@0;X@1"
TRANSCRIPT_VERSION = 1


def _signature_from_list(value):
    if isinstance(value, (list, tuple, str)):
        return SignatureSpec(gates=value)
    return value


# --- Election input ---

class VoterSpec(BaseModel):
    """One voter in an election file. Exactly one of unique_id / hash_id;
    hash_id (hex) is the replay path and never needs the raw ID."""

    unique_id: str | None = None
    hash_id: str | None = None
    eligible: bool = True
    ballot: Ballot
    signature: SignatureSpec = SignatureSpec()
    bell_variant: BellVariant = BellVariant.PHI_PLUS
    qubit_pair: tuple[int, int] = (0, 1)
    # False withholds the entanglement details; the ballot stays blocked.
    release: bool = True

    @field_validator("signature", mode="before")
    @classmethod
    def _signature_descriptors(cls, value):
        return _signature_from_list(value)

    @model_validator(mode="after")
    def _one_identity(self):
        if (self.unique_id is None) == (self.hash_id is None):
            raise ValueError("A voter needs exactly one of unique_id or hash_id.")
        if self.unique_id == "":
            raise ValueError("unique_id cannot be empty.")
        return self

    @property
    def entangle(self) -> EntangleSpec:
        return EntangleSpec(bell_variant=self.bell_variant, qubit_pair=self.qubit_pair)


class NoiseSpec(BaseModel):
    gate_error_p: float = Field(default=0.0, ge=0.0, le=1.0)
    meas_error_p: float = Field(default=0.0, ge=0.0, le=1.0)
    noisy_lookup: bool = False


class ElectionSpec(BaseModel):
    n_candidates: int = Field(ge=2)
    voters: list[VoterSpec] = Field(min_length=1)
    noise: NoiseSpec = NoiseSpec()
    shots: PositiveInt = DEFAULT_SHOTS
    seed: int = Field(default=0, ge=0, lt=2**64)
    readout: Literal["shots", "statevector"] = "shots"
    decode_threshold: float = Field(default=DEFAULT_DECODE_THRESHOLD, gt=0.0, lt=1.0)
    scrutineers: PositiveInt = 1

    @model_validator(mode="after")
    def _ballots_fit(self):
        for position, voter in enumerate(self.voters):
            if voter.ballot.n_candidates != self.n_candidates:
                raise ValueError(
                    f"Voter {position} has a {voter.ballot.n_candidates}-candidate ballot "
                    f"in a {self.n_candidates}-candidate election."
                )
        return self

    def election_config(self) -> ElectionConfig:
        return ElectionConfig(
            n_candidates=self.n_candidates,
            shots_per_ballot=self.shots,
            decode_threshold=self.decode_threshold,
            readout=self.readout,
            scrutineers=self.scrutineers,
        )

    def noise_config(self, seed: int) -> NoiseConfig | None:
        noise = NoiseConfig(
            gate_error_p=self.noise.gate_error_p,
            meas_error_p=self.noise.meas_error_p,
            rng_seed=seed,
            noisy_lookup=self.noise.noisy_lookup,
        )
        return None if noise.is_noiseless else noise


# --- Transcript ---

class BallotRecord(BaseModel):
    """A tallied ballot as recorded; tables are kept as given so an edited
    transcript still loads and replay can point at the edit."""

    hash_id: str
    counts: dict[str, int]
    approvals: str
    noise_fraction: float


class Transcript(BaseModel):
    version: int = TRANSCRIPT_VERSION
    master_seed: int
    election: ElectionSpec
    config: ElectionConfig
    registry: list[str]
    ledger: list[dict]
    ballots: list[BallotRecord] = Field(default_factory=list)
    tally: TallyResult | None = None
    blocked: list[str] = Field(default_factory=list)
    rejected: int = 0
    violations: list[str] = Field(default_factory=list)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


class _CastOutcome(NamedTuple):
    ballot: Ballot
    receipt: CastReceipt
    verified: bool


def run_checks(
    run: ElectionRun,
    cast: dict[str, _CastOutcome],
    result: TallyResult | None,
    noiseless: bool,
    discarded: Sequence[str] = (),
) -> list[str]:
    """Security-property violations observable from one run. `discarded`
    lists the hash IDs the scrutineer could not find."""
    violations = [f"voter {hex_id[:8]} discarded by the scrutineer" for hex_id in discarded]
    chain = verify_chain(run.ledger)
    if not chain.valid:
        violations.append(f"ledger chain broken at block {chain.first_bad_index}")
    for hex_id, outcome in cast.items():
        if not outcome.verified:
            violations.append(f"voter {hex_id[:8]} could not verify the registration")
        if noiseless and not outcome.receipt.intact:
            violations.append(
                f"voter {hex_id[:8]} ballot arrived with fidelity {outcome.receipt.transit_fidelity:.9f}"
            )
    if result is not None:
        if not audit_tally(run, result):
            violations.append("tally audit failed")
        if noiseless:
            for audit in result.ballots:
                cast_ballot = cast[audit.hash_id].ballot
                if audit.approvals != cast_ballot.bits:
                    violations.append(
                        f"ballot {audit.hash_id[:8]} decoded {audit.approvals}, cast {cast_ballot.bits}"
                    )
    for violation in violations:
        logger.warning("Security check: %s", violation)
    return violations


def run_election(
    spec: ElectionSpec,
    seed: int | None = None,
    shots: int | None = None,
    config: ElectionConfig | None = None,
) -> Transcript:
    """One full run: registration of every voter, then each eligible voter
    casts, is recorded, verifies and releases; then Bob tallies. `config`
    replaces the one built from `spec` and the environment defaults. A
    voter the scrutineer cannot find is discarded and reported as a
    violation; the run goes on."""
    if seed is not None:
        spec = spec.model_copy(update={"seed": seed})
    if shots is not None:
        spec = spec.model_copy(update={"shots": shots})

    config = config or spec.election_config()
    noise = spec.noise_config(spec.seed)
    run = ElectionRun(config, master_seed=spec.seed)
    logger.info(
        "Election: %d candidate(s), %d voter(s), seed %d, %d shots.",
        spec.n_candidates, len(spec.voters), spec.seed, spec.shots,
    )

    registered, rejected = [], 0
    for voter_spec in spec.voters:
        if not voter_spec.eligible:
            rejected += 1
            continue
        identity = HashId.from_hex(voter_spec.hash_id) if voter_spec.hash_id else voter_spec.unique_id
        registered.append((voter_spec, register_voter(run, identity, eligible=True)))

    cast: dict[str, _CastOutcome] = {}
    released, discarded = [], []
    for voter_spec, voter_hash in registered:
        voter = run.voters[voter_hash]
        receipt = cast_vote(run, voter, voter_spec.ballot, voter_spec.signature, voter_spec.entangle, noise)
        try:
            scrutinize_and_record(run, receipt.encrypted_hash_id, receipt.signing_details, noise)
        except UnknownVoter:
            discarded.append(voter_hash.hex)
            continue
        verified = voter_verify(run, voter)
        cast[voter_hash.hex] = _CastOutcome(voter_spec.ballot, receipt, verified)
        if verified and voter_spec.release:
            released.append(release_entanglement(run, voter))

    result, blocked = None, []
    if cast:
        try:
            result = release_and_tally(run, released, noise)
            blocked = result.blocked
        except TallyBlocked:
            blocked = list(cast)
            logger.warning("Every held ballot is blocked; no tally.")

    violations = run_checks(run, cast, result, noiseless=noise is None, discarded=discarded)
    anonymized = spec.model_copy(update={
        "voters": [
            voter_spec.model_copy(update={"unique_id": None, "hash_id": voter_hash.hex})
            for voter_spec, voter_hash in registered
        ],
    })
    return Transcript(
        master_seed=spec.seed,
        election=anonymized,
        config=config,
        registry=[h.hex for h in run.issued],
        ledger=run.ledger.to_json(),
        ballots=[
            BallotRecord(
                hash_id=audit.hash_id,
                counts=audit.counts.table,
                approvals=audit.approvals,
                noise_fraction=audit.noise_fraction,
            )
            for audit in (result.ballots if result else [])
        ],
        tally=result.model_copy(update={"ballots": []}) if result else None,
        blocked=blocked,
        rejected=rejected,
        violations=violations,
    )


def summarize(transcript: Transcript) -> str:
    lines = []
    if transcript.tally is None:
        lines.append("No tally: no ballot could be decoded.")
    else:
        lines.append(transcript.tally.summary())
    n_qubits = transcript.config.n_qubits
    for record in transcript.ballots:
        approved = ", ".join(
            candidate_label(i) for i, bit in enumerate(record.approvals) if bit == "1"
        ) or "none"
        off_support = ", ".join(
            f"|{label}>={record.counts.get(label, 0)}"
            for label in (format(i, f"0{n_qubits}b") for i in range(1 << n_qubits))
            if int(label, 2) >= len(record.approvals) or record.approvals[int(label, 2)] == "0"
        )
        lines.append(
            f"ballot {record.hash_id[:8]}: approves {approved}; "
            f"noise fraction {record.noise_fraction:.6f}; off-support {off_support or '-'}"
        )
    for hex_id in transcript.blocked:
        lines.append(f"ballot {hex_id[:8]}: blocked (entanglement details withheld)")
    if transcript.rejected:
        lines.append(f"{transcript.rejected} ineligible voter(s) rejected at registration")
    for violation in transcript.violations:
        lines.append(f"VIOLATION: {violation}")
    return "\n".join(lines)


# --- Replay ---

def replay(transcript: Transcript) -> str:
    """Checks the recorded ledger, re-executes the run from its master seed
    and recorded config, and compares registry, ledger, every count table and the tally. Raises
    ReplayDivergence at the first difference."""
    recorded_chain = verify_chain(Ledger.from_json(transcript.ledger))
    if not recorded_chain.valid:
        raise ReplayDivergence(
            "ledger verification",
            f"recorded block {recorded_chain.first_bad_index} does not chain",
        )

    fresh = run_election(transcript.election, seed=transcript.master_seed, config=transcript.config)
    if fresh.registry != transcript.registry:
        raise ReplayDivergence("registry", "issued hash IDs differ")
    if len(fresh.ledger) != len(transcript.ledger):
        raise ReplayDivergence("ledger", f"{len(transcript.ledger)} recorded blocks, {len(fresh.ledger)} replayed")
    for recorded, replayed in zip(transcript.ledger, fresh.ledger):
        if recorded != replayed:
            raise ReplayDivergence(f"ledger block {recorded.get('index')}", "block contents differ")
    if len(fresh.ballots) != len(transcript.ballots):
        raise ReplayDivergence("ballots", "different number of tallied ballots")
    for recorded, replayed in zip(transcript.ballots, fresh.ballots):
        if recorded.hash_id != replayed.hash_id or recorded.counts != replayed.counts:
            raise ReplayDivergence(f"ballot {recorded.hash_id[:8]}", "count table differs")
        if recorded.approvals != replayed.approvals:
            raise ReplayDivergence(f"ballot {recorded.hash_id[:8]}", "decoded approvals differ")
    if fresh.tally != transcript.tally:
        raise ReplayDivergence("tally", "tally result differs")
    logger.info("Replay of seed %d matched the transcript.", transcript.master_seed)
    return "identical"


# --- Noise sweeps ---

class SweepSpec(BaseModel):
    error_axis: Literal["gate", "measurement"]
    p_values: list[float] = Field(min_length=1)
    fixed_other_p: float = Field(default=0.0, ge=0.0, le=1.0)
    shots: PositiveInt = 1024
    trajectories: PositiveInt = 32
    ballot: Ballot = Field(default_factory=lambda: Ballot.parse(DEFAULT_SWEEP_BALLOT))
    seed: int = Field(default=0, ge=0, lt=2**64)
    signature: SignatureSpec = Field(default_factory=lambda: SignatureSpec.parse(DEFAULT_SWEEP_SIGNATURE))
    bell_variant: BellVariant = BellVariant.PHI_PLUS

    @field_validator("signature", mode="before")
    @classmethod
    def _signature_descriptors(cls, value):
        return _signature_from_list(value)

    @field_validator("p_values")
    @classmethod
    def _increasing_probabilities(cls, values):
        if any(not 0.0 <= p <= 1.0 for p in values):
            raise ValueError("p_values must lie in [0, 1].")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("p_values must be strictly increasing.")
        return values

    def noise_at(self, p: float, seed: int) -> NoiseConfig:
        gate_p, meas_p = (p, self.fixed_other_p) if self.error_axis == "gate" else (self.fixed_other_p, p)
        return NoiseConfig(gate_error_p=gate_p, meas_error_p=meas_p, rng_seed=seed)


class SweepRow(NamedTuple):
    p: float
    mean_noise_fraction: float
    std: float
    trajectories: int
    shots: int


class LeakageRow(NamedTuple):
    source: str
    mean_leakage: float
    std: float
    trajectories: int
    shots: int


def off_support_fraction(counts: Counts, ballot: Ballot) -> float:
    """Share of shots outside the cast ballot's support; for '1101' that is
    the |10> share."""
    support = set(ballot.approved)
    off = sum(count for index, count in counts.by_index().items() if index not in support)
    return off / counts.shots


def protocol_trajectory(
    ballot: Ballot,
    noise: NoiseConfig,
    shots: int,
    signature: SignatureSpec,
    bell_variant: BellVariant,
) -> Counts:
    """One single-voter run through every protocol step; returns the tally's
    count table for the ballot."""
    config = ElectionConfig(n_candidates=ballot.n_candidates, shots_per_ballot=shots)
    run = ElectionRun(config, master_seed=noise.rng_seed)
    voter = run.voters[register_voter(run, "sweep-voter", eligible=True)]
    receipt = cast_vote(run, voter, ballot, signature, EntangleSpec(bell_variant=bell_variant), noise)
    scrutinize_and_record(run, receipt.encrypted_hash_id, receipt.signing_details, noise)
    if not voter_verify(run, voter):
        raise ProtocolOrderViolation("Sweep voter failed to verify its registration.")
    result = release_and_tally(run, [release_entanglement(run, voter)], noise)
    return result.ballots[0].counts


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    data = np.asarray(values, dtype=float)
    std = float(np.std(data, ddof=1)) if data.size > 1 else 0.0
    return float(np.mean(data)), std


def _ordered_map(fn, jobs: list, workers: int) -> list:
    # Results come back in job order whatever the completion order.
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_sweep(spec: SweepSpec, workers: int | None = None) -> list[SweepRow]:
    """Per p value, `trajectories` independent protocol runs; trajectory j at
    point i uses derive_seed(spec.seed, i, j)."""
    jobs = [(i, j) for i in range(len(spec.p_values)) for j in range(spec.trajectories)]

    def trajectory(job):
        i, j = job
        noise = spec.noise_at(spec.p_values[i], derive_seed(spec.seed, i, j))
        counts = protocol_trajectory(spec.ballot, noise, spec.shots, spec.signature, spec.bell_variant)
        return off_support_fraction(counts, spec.ballot)

    fractions = _ordered_map(trajectory, jobs, workers or SWEEP_WORKERS)
    rows = []
    for i, p in enumerate(spec.p_values):
        chunk = fractions[i * spec.trajectories:(i + 1) * spec.trajectories]
        mean, std = _mean_std(chunk)
        rows.append(SweepRow(p, mean, std, spec.trajectories, spec.shots))
        logger.info("%s p=%.6f: mean noise fraction %.6f (std %.6f)", spec.error_axis, p, mean, std)
    return rows


def run_leakage(spec: SweepSpec, p: float | None = None, workers: int | None = None) -> list[LeakageRow]:
    """Where the off-support shots come from: each basis state of the
    ballot's support is sent alone through the protocol under the sweep's
    noise at `p` (default: the largest p value), and its shots outside the
    full ballot's support are counted."""
    p = spec.p_values[-1] if p is None else p
    n_candidates = spec.ballot.n_candidates
    sources = spec.ballot.approved
    jobs = [(s, j) for s in range(len(sources)) for j in range(spec.trajectories)]

    def trajectory(job):
        s, j = job
        one_hot = Ballot(approvals=tuple(i == sources[s] for i in range(n_candidates)))
        noise = spec.noise_at(p, derive_seed(spec.seed, s, j))
        counts = protocol_trajectory(one_hot, noise, spec.shots, spec.signature, spec.bell_variant)
        return off_support_fraction(counts, spec.ballot)

    fractions = _ordered_map(trajectory, jobs, workers or SWEEP_WORKERS)
    n_qubits = ElectionConfig(n_candidates=n_candidates).n_qubits
    rows = []
    for s, index in enumerate(sources):
        mean, std = _mean_std(fractions[s * spec.trajectories:(s + 1) * spec.trajectories])
        rows.append(LeakageRow(format(index, f"0{n_qubits}b"), mean, std, spec.trajectories, spec.shots))
    return rows


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def rows_to_csv(header: Sequence[str], rows: Sequence[tuple]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(value) for value in row])
    return buffer.getvalue()


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    return rows_to_csv(SWEEP_CSV_HEADER, rows)


def leakage_csv(rows: Sequence[LeakageRow]) -> str:
    return rows_to_csv(LEAKAGE_CSV_HEADER, rows)

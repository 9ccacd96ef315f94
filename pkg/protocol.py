# protocol.py
# The three parties of an election and the channels between them. Alice is
# a voter, Bob the tallyman, Charlie the scrutineer group (modeled as one
# logical party sharing one ledger).
#
# One ElectionRun is single-writer: protocol calls on a run must be
# serialized. Independent runs share nothing and may run in parallel.

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from encoding import (
    Ballot,
    BallotAudit,
    ElectionConfig,
    TallyResult,
    decode_counts,
    encode_ballot,
    tally,
)
from errors import (
    AlreadyRegistered,
    ChannelError,
    NotEligible,
    ProtocolOrderViolation,
    TallyBlocked,
    UnknownVoter,
)
from grover import SearchProblem, grover_search, remove_id
from ledger import Block, Ledger, append_block, find_registration, verify_chain
from protocol_crypto import (
    HashId,
    KeyLabel,
    SecretKey,
    SignatureSpec,
    SimulatedQRNG,
    gen_key,
    hash_id,
    hash_ids_match,
    load_hash_secret,
    otp,
    sign,
    signing_details_match,
    unsign,
)
from qsim import (
    BellVariant,
    EntangleSpec,
    GateOp,
    NoiseConfig,
    StateVector,
    apply_entangle,
    apply_gates,
    check_targets,
    derive_seed,
    expected_counts,
    fidelity,
    measure_shots,
)

logger = logging.getLogger(__name__)

# Bob's database is padded to at least this many slots: a two-slot Grover
# search tops out at success probability 1/2.
REGISTRY_MIN_SIZE = 4
# Transit fidelity below 1 - this flags the message as not intact.
INTACT_TOLERANCE = 1e-6

_QRNG_STREAM = 0
_QUANTUM_STREAM = 1

# One per process unless QVOTE_HASH_SECRET pins it.
PROCESS_HASH_SECRET = load_hash_secret()


# --- Parties ---

class Role(str, Enum):
    VOTER = "Voter"
    TALLYMAN = "Tallyman"
    SCRUTINEER = "Scrutineer"


class VoterPhase(str, Enum):
    UNREGISTERED = "Unregistered"
    REJECTED = "Rejected"
    REGISTERED = "Registered"
    ENCODED = "Encoded"
    SENT = "Sent"
    VERIFIED = "Verified"
    KEYS_RELEASED = "KeysReleased"


class TallymanPhase(str, Enum):
    REGISTRATION = "Registration"
    CLOSED = "Closed"


class ScrutineerPhase(str, Enum):
    SCRUTINIZING = "Scrutinizing"
    HANDED_OVER = "HandedOver"


@dataclass(eq=False, kw_only=True)
class Party:
    """A protocol participant. held_keys maps a registration session to the
    keys this party holds for it."""

    role: Role
    phase: Enum
    held_keys: dict[int, dict[KeyLabel, SecretKey]] = field(default_factory=dict)

    def key(self, session: int | None, label: KeyLabel) -> SecretKey | None:
        return self.held_keys.get(session, {}).get(label)


@dataclass(eq=False, kw_only=True)
class Voter(Party):
    role: Role = Role.VOTER
    phase: VoterPhase = VoterPhase.UNREGISTERED
    # Never serialized or logged in full.
    unique_id: bytes = field(default=b"", repr=False)
    hash_id: HashId | None = None
    session: int | None = None
    ballot: Ballot | None = None
    signature: SignatureSpec | None = None
    entangle: EntangleSpec | None = None

    @classmethod
    def from_id(cls, unique_id: bytes | str) -> "Voter":
        if isinstance(unique_id, str):
            unique_id = unique_id.encode()
        return cls(unique_id=unique_id)


def _require_phase(party: Party, allowed: tuple[Enum, ...], action: str) -> None:
    if party.phase not in allowed:
        logger.warning("%s in phase %s cannot %s.", party.role.value, party.phase.value, action)
        raise ProtocolOrderViolation(
            f"{party.role.value} in phase {party.phase.value} cannot {action}."
        )


# --- Channels ---

class QuantumMessage:
    """A quantum state in someone's hands. Delivery moves the state and
    invalidates the sender's handle; no copy survives."""

    def __init__(self, state: StateVector, sender: Role, holder: Role, session: int):
        self._state = state
        self.sender = sender
        self.holder = holder
        self.session = session

    @property
    def delivered(self) -> bool:
        return self._state is None

    @property
    def state(self) -> StateVector:
        if self._state is None:
            raise ChannelError(f"Session {self.session}: state already handed on by {self.holder.value}.")
        return self._state

    def evolve(self, operation) -> None:
        self._state = operation(self.state)

    def take(self) -> StateVector:
        state = self.state
        self._state = None
        return state


class QuantumChannel:
    """Synchronous, ordered delivery. `tamper` models an adversary in
    transit: its gates hit every state travelling voter -> scrutineer."""

    def __init__(self, tamper: Sequence[GateOp] = ()):
        self.tamper: tuple[GateOp, ...] = tuple(tamper)

    def deliver(self, message: QuantumMessage, receiver: Role) -> QuantumMessage:
        state = message.take()
        if self.tamper and message.holder is Role.VOTER:
            state = apply_gates(state, self.tamper)
        return QuantumMessage(state, sender=message.holder, holder=receiver, session=message.session)


class ClassicalMessage(BaseModel):
    """A classical transmission. Bit payloads are '0'/'1' strings; when
    encrypted_with is set the payload is one-time-pad output."""

    model_config = ConfigDict(frozen=True)

    session: int
    sender: Role
    receiver: Role
    kind: Literal["hash_id", "signing_details", "entangle_spec"]
    payload: str
    encrypted_with: KeyLabel | None = None

    @model_validator(mode="after")
    def _ciphertext_is_bits(self):
        if self.encrypted_with and set(self.payload) - {"0", "1"}:
            raise ValueError("Encrypted payloads are bit strings.")
        return self

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple(int(b) for b in self.payload)


class ClassicalChannel:
    """Delivers classical messages and keeps every one it carried."""

    def __init__(self):
        self.messages: list[ClassicalMessage] = []

    def send(self, message: ClassicalMessage) -> ClassicalMessage:
        self.messages.append(message)
        return message


def _bit_string(bits: Sequence[int]) -> str:
    return "".join(str(b) for b in bits)


# EntangleSpec on the wire: 2 bits of variant, 5 bits per pair element.
_VARIANTS = list(BellVariant)


def entangle_to_bits(spec: EntangleSpec) -> tuple[int, ...]:
    first, second = spec.qubit_pair
    text = f"{_VARIANTS.index(spec.bell_variant):02b}{first:05b}{second:05b}"
    return tuple(int(b) for b in text)


def entangle_from_bits(bits: Sequence[int]) -> EntangleSpec:
    text = _bit_string(bits)
    if len(text) != 12:
        raise ValueError("An encoded EntangleSpec is 12 bits.")
    return EntangleSpec(
        bell_variant=_VARIANTS[int(text[:2], 2)],
        qubit_pair=(int(text[2:7], 2), int(text[7:], 2)),
    )


# --- The run ---

@dataclass
class MonotoneClock:
    """Ledger timestamps. Injectable so ledger hashes are reproducible."""

    now_ms: int = 0
    step_ms: int = 1

    def tick(self) -> int:
        self.now_ms += self.step_ms
        return self.now_ms


@dataclass(eq=False)
class ElectionRun:
    config: ElectionConfig
    master_seed: int
    clock: MonotoneClock = field(default_factory=MonotoneClock)
    quantum_channel: QuantumChannel = field(default_factory=QuantumChannel)
    classical_channel: ClassicalChannel = field(default_factory=ClassicalChannel)
    # Known only to voters and the tallyman: keys the hash-ID function.
    hash_secret: bytes = field(default=PROCESS_HASH_SECRET, repr=False)

    def __post_init__(self):
        self.qrng = SimulatedQRNG(derive_seed(self.master_seed, _QRNG_STREAM))
        # Gate-noise and measurement draws for the whole run, in call order.
        self.rng = np.random.default_rng(derive_seed(self.master_seed, _QUANTUM_STREAM))
        self.tallyman = Party(role=Role.TALLYMAN, phase=TallymanPhase.REGISTRATION)
        self.scrutineer = Party(role=Role.SCRUTINEER, phase=ScrutineerPhase.SCRUTINIZING)
        self.registry: list[HashId] = []
        self.issued: list[HashId] = []
        self.voters: dict[HashId, Voter] = {}
        self.ledger = Ledger()
        self.pending: dict[int, QuantumMessage] = {}
        self.cast_states: dict[HashId, QuantumMessage] = {}
        self._sessions = 0

    def _open_session(self) -> int:
        self._sessions += 1
        return self._sessions


# --- Protocol calls ---

def register_voter(run: ElectionRun, voter: Voter | str | bytes | HashId, eligible: bool) -> HashId:
    """Bob checks eligibility, hashes the unique ID and hands out K_AB/K_AC
    from the QRNG. A pre-computed HashId registers a voter whose unique ID
    is not at hand (transcript replay)."""
    _require_phase(run.tallyman, (TallymanPhase.REGISTRATION,), "register voters")
    if isinstance(voter, (str, bytes)):
        voter = Voter.from_id(voter)
    elif isinstance(voter, HashId):
        voter = Voter(hash_id=voter)
    if voter.phase is not VoterPhase.UNREGISTERED:
        raise AlreadyRegistered("This voter has already been through registration.")
    if not eligible:
        voter.phase = VoterPhase.REJECTED
        logger.warning("A voter is not eligible.")
        raise NotEligible("Only eligible voters receive a unique ID.")

    voter_hash = voter.hash_id or hash_id(voter.unique_id, run.hash_secret)
    if voter_hash in run.issued:
        logger.warning("Hash ID %s was already issued.", voter_hash.short)
        raise AlreadyRegistered(f"Hash ID {voter_hash.short}... is already registered.")

    session = run._open_session()
    k_ab = gen_key("K_AB", run.config.key_length, run.qrng)
    k_ac = gen_key("K_AC", run.config.key_length, run.qrng)
    voter.held_keys[session] = {"K_AB": k_ab, "K_AC": k_ac}
    run.tallyman.held_keys[session] = {"K_AB": k_ab}
    run.scrutineer.held_keys[session] = {"K_AC": k_ac}

    voter.hash_id = voter_hash
    voter.session = session
    voter.phase = VoterPhase.REGISTERED
    run.registry.append(voter_hash)
    run.issued.append(voter_hash)
    run.voters[voter_hash] = voter
    logger.info("Registered a voter as hash ID %s (session %d).", voter_hash.short, session)
    return voter_hash


class CastReceipt(BaseModel):
    session: int
    encrypted_hash_id: ClassicalMessage
    signing_details: str
    # Scrutineer-held state vs. the voter's own noiseless reference.
    transit_fidelity: float
    intact: bool


def cast_vote(
    run: ElectionRun,
    voter: Voter,
    ballot: Ballot,
    signature: SignatureSpec,
    entangle: EntangleSpec,
    noise: NoiseConfig | None = None,
) -> CastReceipt:
    """Encode, entangle, sign, send the qubits to the scrutineer, send the
    K_AC-encrypted hash ID and disclose the signature; the scrutineer strips
    the signature and holds the state until the registration is recorded."""
    if voter.phase is VoterPhase.REJECTED:
        raise NotEligible("An ineligible voter cannot cast a ballot.")
    _require_phase(voter, (VoterPhase.REGISTERED,), "cast a vote")
    n_qubits = run.config.n_qubits
    for op in signature.gates:
        check_targets(n_qubits, op.targets)
    check_targets(n_qubits, entangle.qubit_pair)

    state = encode_ballot(ballot, run.config)
    reference = apply_entangle(state, entangle, "forward")
    voter.phase = VoterPhase.ENCODED
    state = apply_entangle(state, entangle, "forward", noise, run.rng)
    state = sign(state, signature, noise, run.rng)
    voter.ballot, voter.signature, voter.entangle = ballot, signature, entangle

    outgoing = QuantumMessage(state, sender=Role.VOTER, holder=Role.VOTER, session=voter.session)
    held = run.quantum_channel.deliver(outgoing, Role.SCRUTINEER)

    k_ac = voter.key(voter.session, "K_AC")
    encrypted = run.classical_channel.send(ClassicalMessage(
        session=voter.session,
        sender=Role.VOTER,
        receiver=Role.SCRUTINEER,
        kind="hash_id",
        payload=_bit_string(otp(voter.hash_id.bits, k_ac)),
        encrypted_with="K_AC",
    ))
    details = run.classical_channel.send(ClassicalMessage(
        session=voter.session,
        sender=Role.VOTER,
        receiver=Role.SCRUTINEER,
        kind="signing_details",
        payload=signature.descriptor,
    ))

    disclosed = SignatureSpec.parse(details.payload)
    held.evolve(lambda s: unsign(s, disclosed, noise, run.rng))
    run.pending[voter.session] = held
    voter.phase = VoterPhase.SENT

    transit_fidelity = fidelity(held.state, reference)
    intact = transit_fidelity >= 1 - INTACT_TOLERANCE
    if not intact:
        logger.warning(
            "Session %d arrived with fidelity %.6f against the voter's reference.",
            voter.session, transit_fidelity,
        )
    logger.info("Voter %s sent a ballot (session %d).", voter.hash_id.short, voter.session)
    return CastReceipt(
        session=voter.session,
        encrypted_hash_id=encrypted,
        signing_details=signature.descriptor,
        transit_fidelity=transit_fidelity,
        intact=intact,
    )


def scrutinize_and_record(
    run: ElectionRun,
    voter_hash_id_encrypted: ClassicalMessage,
    signing_details: str,
    noise: NoiseConfig | None = None,
) -> Block:
    """Charlie decrypts the hash ID, looks it up with Grover, and on a hit
    appends the ledger block and strikes the ID from Bob's database."""
    session = voter_hash_id_encrypted.session
    held = run.pending.get(session)
    if held is None:
        logger.warning("No quantum message held for session %d.", session)
        raise ProtocolOrderViolation(f"No ballot is held for session {session}.")

    k_ac = run.scrutineer.key(session, "K_AC")
    if k_ac is None or voter_hash_id_encrypted.encrypted_with != "K_AC":
        run.pending.pop(session)
        logger.warning("Session %d has no K_AC on record; ballot discarded.", session)
        raise UnknownVoter(f"Session {session} is not a registered voter's.")
    claimed = HashId.from_bits(otp(voter_hash_id_encrypted.bits, k_ac))

    lookup_noise = noise if noise is not None and noise.noisy_lookup else None
    problem = SearchProblem.build(run.registry, claimed, min_size=REGISTRY_MIN_SIZE)
    result = grover_search(problem, lookup_noise, run.config.grover_shots, rng=run.rng)
    if not result.found:
        run.pending.pop(session)
        logger.warning("Hash ID %s not in the voting database; ballot discarded.", claimed.short)
        raise UnknownVoter(f"Hash ID {claimed.short}... is not in the voting database.")

    try:
        block = append_block(run.ledger, claimed, signing_details, run.clock.tick())
    except Exception:
        run.pending.pop(session)
        raise
    run.registry = list(remove_id(run.registry, claimed))
    run.cast_states[claimed] = run.pending.pop(session)
    logger.info("Recorded hash ID %s in block %d.", claimed.short, block.index)
    return block


def voter_verify(run: ElectionRun, voter: Voter) -> bool:
    """Alice looks for her block and checks her hash ID and signing details."""
    _require_phase(voter, (VoterPhase.SENT, VoterPhase.VERIFIED), "verify a registration")
    block = find_registration(run.ledger, voter.hash_id)
    verified = (
        block is not None
        and hash_ids_match(block.voter_hash_id, voter.hash_id)
        and signing_details_match(block.signing_details, voter.signature.descriptor)
    )
    if verified:
        voter.phase = VoterPhase.VERIFIED
    else:
        logger.warning("Voter %s could not verify a matching block.", voter.hash_id.short)
    return verified


def release_entanglement(run: ElectionRun, voter: Voter) -> ClassicalMessage:
    """A verified voter sends the K_AB-encrypted EntangleSpec to Bob."""
    _require_phase(voter, (VoterPhase.VERIFIED,), "release entanglement details")
    k_ab = voter.key(voter.session, "K_AB")
    message = run.classical_channel.send(ClassicalMessage(
        session=voter.session,
        sender=Role.VOTER,
        receiver=Role.TALLYMAN,
        kind="entangle_spec",
        payload=_bit_string(otp(entangle_to_bits(voter.entangle), k_ab)),
        encrypted_with="K_AB",
    ))
    voter.phase = VoterPhase.KEYS_RELEASED
    logger.info("Voter %s released entanglement details.", voter.hash_id.short)
    return message


def release_and_tally(
    run: ElectionRun,
    voters_entangle_specs: Sequence[ClassicalMessage],
    noise: NoiseConfig | None = None,
) -> TallyResult:
    """Bob decrypts each released EntangleSpec, receives the state from
    Charlie, undoes the entanglement, measures and decodes. Ballots whose
    spec never arrived, or does not fit the register, stay entangled with
    Charlie and are listed as blocked."""
    _require_phase(run.tallyman, (TallymanPhase.REGISTRATION,), "open the tally")
    if not run.cast_states:
        raise ProtocolOrderViolation("The scrutineer holds no recorded ballot to tally.")
    released = {m.session: m for m in voters_entangle_specs if m.kind == "entangle_spec"}
    config = run.config

    decoded, fractions, audits, blocked = [], [], [], []
    for block in run.ledger.blocks:
        held = run.cast_states.get(block.voter_hash_id)
        if held is None:
            continue
        message = released.get(held.session)
        k_ab = run.tallyman.key(held.session, "K_AB")
        spec = None
        if message is not None and k_ab is not None and message.encrypted_with == "K_AB":
            try:
                spec = entangle_from_bits(otp(message.bits, k_ab))
                check_targets(config.n_qubits, spec.qubit_pair)
            except ValueError:
                logger.warning("Session %d sent unusable entanglement details.", held.session)
                spec = None
        if spec is None:
            blocked.append(block.voter_hash_id.hex)
            logger.warning("Ballot %s blocked: no usable entanglement details.", block.voter_hash_id.short)
            continue

        received = run.quantum_channel.deliver(held, Role.TALLYMAN)
        state = apply_entangle(received.take(), spec, "inverse", noise, run.rng)
        del run.cast_states[block.voter_hash_id]
        if config.readout == "statevector":
            counts = expected_counts(state, config.shots_per_ballot)
        else:
            counts = measure_shots(state, config.shots_per_ballot, noise, run.rng)
        approvals, noise_fraction = decode_counts(counts, config)
        decoded.append(approvals)
        fractions.append(noise_fraction)
        audits.append(BallotAudit(
            hash_id=block.voter_hash_id.hex,
            counts=counts,
            approvals=approvals.bits,
            noise_fraction=noise_fraction,
        ))

    if not decoded:
        raise TallyBlocked(f"All {len(blocked)} held ballot(s) lack entanglement details.")
    result = tally(decoded, fractions).model_copy(update={"ballots": audits, "blocked": blocked})
    run.tallyman.phase = TallymanPhase.CLOSED
    if not run.cast_states:
        run.scrutineer.phase = ScrutineerPhase.HANDED_OVER
    logger.info("Tally closed: %s", result.summary())
    return result


def audit_tally(run: ElectionRun, result: TallyResult) -> bool:
    """Charlie's supervision of Bob: every tallied ballot must belong to a
    ledger block, and every recorded decoding must follow from its counts."""
    if not verify_chain(run.ledger).valid:
        logger.warning("Tally audit: ledger chain is broken.")
        return False
    seen = set()
    for audit in result.ballots:
        voter_hash = HashId.from_hex(audit.hash_id)
        if voter_hash in seen or find_registration(run.ledger, voter_hash) is None:
            logger.warning("Tally audit: ballot %s has no unique ledger block.", voter_hash.short)
            return False
        seen.add(voter_hash)
        if audit.counts.shots != run.config.shots_per_ballot:
            logger.warning("Tally audit: ballot %s has %d shots.", voter_hash.short, audit.counts.shots)
            return False
        approvals, noise_fraction = decode_counts(audit.counts, run.config)
        if approvals.bits != audit.approvals or abs(noise_fraction - audit.noise_fraction) > 1e-12:
            logger.warning("Tally audit: ballot %s decoding does not match its counts.", voter_hash.short)
            return False
    if result.ballots:
        recount = tally([audit.approvals for audit in result.ballots])
        if recount.per_candidate_approvals != result.per_candidate_approvals:
            logger.warning("Tally audit: approval totals do not match the ballots.")
            return False
    return True

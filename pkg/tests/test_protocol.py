# The three-party protocol end to end, and its security properties:
# anonymity, binding, non-reusability, verifiability, eligibility, fairness
# and phase order.

import dataclasses
import itertools
import json
import logging
import math

import numpy as np
import pytest
from pydantic import ValidationError

from encoding import Ballot, ElectionConfig, decode_counts, encode_ballot
from errors import (
    AlreadyRegistered,
    ChannelError,
    InvalidTarget,
    NotEligible,
    ProtocolOrderViolation,
    QVoteError,
    TallyBlocked,
    UnknownVoter,
)
from ledger import Ledger
from protocol import (
    ClassicalMessage,
    ElectionRun,
    MonotoneClock,
    QuantumChannel,
    QuantumMessage,
    Role,
    Voter,
    VoterPhase,
    audit_tally,
    cast_vote,
    entangle_from_bits,
    entangle_to_bits,
    register_voter,
    release_and_tally,
    release_entanglement,
    scrutinize_and_record,
    voter_verify,
)
from protocol_crypto import SignatureSpec, hash_id, otp
from qsim import (
    BellVariant,
    EntangleSpec,
    apply_entangle,
    derive_seed,
    fidelity,
    gate,
    init_basis,
    measure_shots,
)

FOUR = ElectionConfig(n_candidates=4)
BALLOT = Ballot.parse("1101")
SIGNATURE = SignatureSpec.parse("Z@0;X@1")
PHI_PLUS = EntangleSpec(bell_variant="PhiPlus")


def _run(seed=0, **kwargs) -> ElectionRun:
    return ElectionRun(FOUR, master_seed=seed, **kwargs)


def _forged(session: int) -> ClassicalMessage:
    return ClassicalMessage(
        session=session,
        sender=Role.VOTER,
        receiver=Role.SCRUTINEER,
        kind="hash_id",
        payload="0" * 256,
        encrypted_with="K_AC",
    )


def _cast_and_record(run, unique_id, ballot=BALLOT, signature=SIGNATURE, entangle=PHI_PLUS, noise=None):
    voter = run.voters[register_voter(run, unique_id, eligible=True)]
    receipt = cast_vote(run, voter, ballot, signature, entangle, noise)
    scrutinize_and_record(run, receipt.encrypted_hash_id, receipt.signing_details, noise)
    return voter, receipt


def _complete(run, voters, noise=None):
    released = []
    for voter in voters:
        assert voter_verify(run, voter)
        released.append(release_entanglement(run, voter))
    return release_and_tally(run, released, noise)


# --- Registration ---

def test_register_eligible_voter():
    run = _run()
    hid = register_voter(run, "alice-01", eligible=True)
    voter = run.voters[hid]
    assert hid in run.registry
    assert voter.phase is VoterPhase.REGISTERED
    assert voter.key(voter.session, "K_AB") == run.tallyman.key(voter.session, "K_AB")
    assert voter.key(voter.session, "K_AC") == run.scrutineer.key(voter.session, "K_AC")
    assert run.tallyman.key(voter.session, "K_AC") is None
    assert run.scrutineer.key(voter.session, "K_AB") is None


def test_ineligible_voter_is_refused():
    run = _run()
    with pytest.raises(NotEligible):
        register_voter(run, "mallory", eligible=False)
    assert run.registry == []


def test_duplicate_registration():
    run = _run()
    register_voter(run, "alice-01", eligible=True)
    with pytest.raises(AlreadyRegistered):
        register_voter(run, "alice-01", eligible=True)


def test_keys_depend_on_master_seed():
    a, b = _run(seed=1), _run(seed=2)
    ha = register_voter(a, "alice-01", eligible=True)
    hb = register_voter(b, "alice-01", eligible=True)
    assert ha == hb
    assert a.voters[ha].key(1, "K_AB") != b.voters[hb].key(1, "K_AB")


def test_hash_secret_cannot_be_rebuilt_from_the_master_seed():
    run = _run(seed=5)
    hid = register_voter(run, "alice-01", eligible=True)
    for stream in range(4):
        guess = np.random.default_rng(derive_seed(5, stream)).bytes(32)
        assert run.hash_secret != guess
        assert hash_id("alice-01", guess) != hid


def test_explicit_hash_secret_keys_the_hash_id():
    run = _run(hash_secret=b"pinned-secret")
    assert register_voter(run, "alice-01", eligible=True) == hash_id("alice-01", b"pinned-secret")
    assert "pinned-secret" not in repr(run)


def test_registration_logs_no_part_of_the_unique_id(caplog):
    with caplog.at_level(logging.DEBUG):
        run = _run()
        register_voter(run, "alice-01", eligible=True)
        with pytest.raises(NotEligible):
            register_voter(run, "mallory-77", eligible=False)
    assert "Registered a voter" in caplog.text
    for fragment in ("alice", "e-01", "mallory", "y-77"):
        assert fragment not in caplog.text


# --- Casting ---

def test_cast_before_registration():
    with pytest.raises(ProtocolOrderViolation):
        cast_vote(_run(), Voter.from_id("alice-01"), BALLOT, SIGNATURE, PHI_PLUS)


@pytest.mark.parametrize("variant", list(BellVariant))
def test_scrutineer_holds_the_entangled_ballot(variant):
    run = _run()
    voter = run.voters[register_voter(run, "alice-01", eligible=True)]
    spec = EntangleSpec(bell_variant=variant)
    receipt = cast_vote(run, voter, BALLOT, SIGNATURE, spec)
    expected = apply_entangle(encode_ballot(BALLOT, FOUR), spec)
    assert fidelity(run.pending[receipt.session].state, expected) == pytest.approx(1.0, abs=1e-10)
    assert receipt.intact
    assert voter.phase is VoterPhase.SENT


def test_empty_ballot_is_refused_before_anything_is_sent():
    run = _run()
    voter = run.voters[register_voter(run, "alice-01", eligible=True)]
    with pytest.raises(QVoteError):
        cast_vote(run, voter, Ballot.parse("0000"), SIGNATURE, PHI_PLUS)
    assert voter.phase is VoterPhase.REGISTERED
    assert run.pending == {}


@pytest.mark.parametrize(
    "signature, entangle",
    [
        (SignatureSpec.parse("X@5"), PHI_PLUS),
        (SignatureSpec.parse("Z@0;CNOT@1,2"), PHI_PLUS),
        (SIGNATURE, EntangleSpec(bell_variant="PhiPlus", qubit_pair=(0, 3))),
    ],
)
def test_out_of_register_targets_are_refused_before_encoding(signature, entangle):
    run = _run()
    voter = run.voters[register_voter(run, "alice-01", eligible=True)]
    with pytest.raises(InvalidTarget):
        cast_vote(run, voter, BALLOT, signature, entangle)
    assert voter.phase is VoterPhase.REGISTERED
    assert run.pending == {}
    assert run.classical_channel.messages == []
    assert cast_vote(run, voter, BALLOT, SIGNATURE, PHI_PLUS).intact


def test_tampered_transit_is_flagged():
    run = _run(quantum_channel=QuantumChannel([gate("X", 0)]))
    voter = run.voters[register_voter(run, "alice-01", eligible=True)]
    receipt = cast_vote(run, voter, BALLOT, SIGNATURE, PHI_PLUS)
    assert receipt.transit_fidelity < 1 - 1e-6
    assert not receipt.intact


def test_signing_details_travel_in_clear_and_hash_id_encrypted():
    run = _run()
    voter, receipt = _cast_and_record(run, "alice-01")
    kinds = {m.kind: m for m in run.classical_channel.messages}
    assert kinds["signing_details"].payload == "Z@0;X@1"
    assert kinds["signing_details"].encrypted_with is None
    assert kinds["hash_id"].encrypted_with == "K_AC"
    assert kinds["hash_id"].payload != "".join(map(str, voter.hash_id.bits))


# --- Recording ---

def test_record_appends_block_and_strikes_the_id():
    run = _run(clock=MonotoneClock(now_ms=1000, step_ms=5))
    voter, _ = _cast_and_record(run, "alice-01")
    block = run.ledger.blocks[0]
    assert block.voter_hash_id == voter.hash_id
    assert block.signing_details == "Z@0;X@1"
    assert block.timestamp_ms == 1005
    assert voter.hash_id not in run.registry
    assert voter.hash_id in run.cast_states


def test_record_without_a_held_ballot():
    run = _run()
    register_voter(run, "alice-01", eligible=True)
    with pytest.raises(ProtocolOrderViolation):
        scrutinize_and_record(run, _forged(1), "Z@0")


def test_unregistered_identity_is_discarded():
    run = _run()
    voter = run.voters[register_voter(run, "alice-01", eligible=True)]
    receipt = cast_vote(run, voter, BALLOT, SIGNATURE, PHI_PLUS)
    # An intruder swaps in a hash ID of its own making.
    bits = receipt.encrypted_hash_id.payload
    flipped = ("1" if bits[0] == "0" else "0") + bits[1:]
    forged = receipt.encrypted_hash_id.model_copy(update={"payload": flipped})
    with pytest.raises(UnknownVoter):
        scrutinize_and_record(run, forged, receipt.signing_details)
    assert len(run.ledger) == 0
    assert run.pending == {}


# --- Verification ---

def test_verify_matching_block():
    run = _run()
    voter, _ = _cast_and_record(run, "alice-01")
    assert voter_verify(run, voter)
    assert voter.phase is VoterPhase.VERIFIED


def test_verify_before_casting():
    run = _run()
    voter = run.voters[register_voter(run, "alice-01", eligible=True)]
    with pytest.raises(ProtocolOrderViolation):
        voter_verify(run, voter)


def test_verify_absent_block():
    run = _run()
    voter = run.voters[register_voter(run, "alice-01", eligible=True)]
    cast_vote(run, voter, BALLOT, SIGNATURE, PHI_PLUS)
    assert not voter_verify(run, voter)


def test_verify_fails_on_mutated_signing_details():
    run = _run()
    voter, _ = _cast_and_record(run, "alice-01")
    block = run.ledger.blocks[0]
    run.ledger = Ledger((block.model_copy(update={"signing_details": "Z@0;X@0"}),))
    assert not voter_verify(run, voter)


def test_verify_fails_on_mutated_hash_id():
    run = _run()
    voter, _ = _cast_and_record(run, "alice-01")
    other = register_voter(run, "bob-02", eligible=True)
    block = run.ledger.blocks[0]
    run.ledger = Ledger((block.model_copy(update={"voter_hash_id": other}),))
    assert not voter_verify(run, voter)


_GATE_POOL = ["Z@0", "X@1", "H@0", "S@1", "T'@0", "CNOT@0,1", "CZ@1,0", "Y@0"]


def test_verifiability_over_randomized_runs():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        run = _run(seed=trial)
        ballot = Ballot.parse(format(int(rng.integers(1, 16)), "04b"))
        gates = rng.choice(_GATE_POOL, size=int(rng.integers(1, 4)))
        signature = SignatureSpec(gates=list(gates))
        entangle = EntangleSpec(bell_variant=list(BellVariant)[int(rng.integers(0, 4))])
        voter, receipt = _cast_and_record(run, f"voter-{trial}", ballot, signature, entangle)
        assert receipt.intact
        assert voter_verify(run, voter), trial


# --- Tally ---

@pytest.mark.parametrize("variant", list(BellVariant))
def test_single_noiseless_ballot_round_trips(variant):
    run = _run()
    voter, _ = _cast_and_record(run, "alice-01", entangle=EntangleSpec(bell_variant=variant))
    result = _complete(run, [voter])
    audit = result.ballots[0]
    assert audit.approvals == "1101"
    assert audit.counts.shots == 1024
    assert audit.counts.get("10") == 0
    assert result.winners == [0, 1, 3]
    assert voter.phase is VoterPhase.KEYS_RELEASED


def test_three_voters_pick_a_single_winner():
    run = _run()
    voters = [
        _cast_and_record(run, uid, ballot=Ballot.parse(bits))[0]
        for uid, bits in [("v1", "1000"), ("v2", "1000"), ("v3", "0100")]
    ]
    result = _complete(run, voters)
    assert result.winners == [0]
    assert result.per_candidate_approvals == {0: 2, 1: 1, 2: 0, 3: 0}
    assert audit_tally(run, result)


def test_withheld_spec_blocks_only_that_ballot():
    run = _run()
    alice, _ = _cast_and_record(run, "alice-01")
    bob, _ = _cast_and_record(run, "bob-02", ballot=Ballot.parse("0010"))
    assert voter_verify(run, alice) and voter_verify(run, bob)
    result = release_and_tally(run, [release_entanglement(run, alice)])
    assert [b.hash_id for b in result.ballots] == [alice.hash_id.hex]
    assert result.blocked == [bob.hash_id.hex]
    assert bob.hash_id in run.cast_states


@pytest.mark.parametrize("pair", [(7, 9), (0, 2), (31, 1)])
def test_entangle_spec_outside_the_register_blocks_only_that_ballot(pair):
    run = _run()
    alice, _ = _cast_and_record(run, "alice-01")
    bob, _ = _cast_and_record(run, "bob-02", ballot=Ballot.parse("0010"))
    assert voter_verify(run, alice) and voter_verify(run, bob)
    k_ab = run.tallyman.key(bob.session, "K_AB")
    wide = EntangleSpec(bell_variant="PhiPlus", qubit_pair=pair)
    forged = ClassicalMessage(
        session=bob.session,
        sender=Role.VOTER,
        receiver=Role.TALLYMAN,
        kind="entangle_spec",
        payload="".join(str(b) for b in otp(entangle_to_bits(wide), k_ab)),
        encrypted_with="K_AB",
    )
    result = release_and_tally(run, [release_entanglement(run, alice), forged])
    assert [(b.hash_id, b.approvals) for b in result.ballots] == [(alice.hash_id.hex, "1101")]
    assert result.blocked == [bob.hash_id.hex]
    assert not run.cast_states[bob.hash_id].delivered


def test_tally_with_nothing_held():
    run = _run()
    with pytest.raises(ProtocolOrderViolation):
        release_and_tally(run, [])


def test_registration_closes_with_the_tally():
    run = _run()
    voter, _ = _cast_and_record(run, "alice-01")
    _complete(run, [voter])
    with pytest.raises(ProtocolOrderViolation):
        register_voter(run, "late-voter", eligible=True)


def test_statevector_readout_is_exact():
    run = ElectionRun(ElectionConfig(n_candidates=4, readout="statevector"), master_seed=0)
    voter, _ = _cast_and_record(run, "alice-01")
    result = _complete(run, [voter])
    table = result.ballots[0].counts.table
    assert "10" not in table
    assert sorted(table.values()) == [341, 341, 342]


def test_audit_rejects_doctored_results():
    run = _run()
    voter, _ = _cast_and_record(run, "alice-01")
    result = _complete(run, [voter])
    assert audit_tally(run, result)

    doctored = result.ballots[0].model_copy(update={"approvals": "1111"})
    assert not audit_tally(run, result.model_copy(update={"ballots": [doctored]}))

    stranger = result.ballots[0].model_copy(update={"hash_id": "ab" * 32})
    assert not audit_tally(run, result.model_copy(update={"ballots": [stranger]}))

    inflated = result.model_copy(update={"per_candidate_approvals": {0: 2, 1: 1, 2: 0, 3: 1}})
    assert not audit_tally(run, inflated)


# --- Channels ---

def test_delivery_invalidates_the_sender_handle():
    channel = QuantumChannel()
    outgoing = QuantumMessage(init_basis(1), sender=Role.VOTER, holder=Role.VOTER, session=1)
    received = channel.deliver(outgoing, Role.SCRUTINEER)
    assert outgoing.delivered
    with pytest.raises(ChannelError):
        outgoing.state
    assert received.holder is Role.SCRUTINEER
    assert fidelity(received.state, init_basis(1)) == pytest.approx(1.0)


def test_scrutineer_keeps_nothing_after_hand_over():
    run = _run()
    voter, _ = _cast_and_record(run, "alice-01")
    held = run.cast_states[voter.hash_id]
    _complete(run, [voter])
    assert held.delivered
    assert run.cast_states == {}


def test_encrypted_payload_must_be_bits():
    with pytest.raises(ValidationError):
        ClassicalMessage(
            session=1, sender=Role.VOTER, receiver=Role.TALLYMAN,
            kind="entangle_spec", payload="PhiPlus", encrypted_with="K_AB",
        )


def test_entangle_spec_wire_form():
    spec = EntangleSpec(bell_variant="PsiMinus", qubit_pair=(3, 1))
    assert len(entangle_to_bits(spec)) == 12
    assert entangle_from_bits(entangle_to_bits(spec)) == spec


# --- Security properties ---

def test_anonymity_of_every_classical_artifact(caplog):
    ids = ["alice-01", "bob-02", "carol-03"]
    with caplog.at_level(logging.DEBUG):
        run = _run(seed=5)
        voters = [_cast_and_record(run, uid)[0] for uid in ids]
        receipts_json = [m.model_dump_json() for m in run.classical_channel.messages]
        result = _complete(run, voters)
    artifacts = [
        *receipts_json,
        json.dumps(run.ledger.to_json()),
        result.model_dump_json(),
        *(repr(voter) for voter in voters),
        caplog.text,
    ]
    for uid in ids:
        for artifact in artifacts:
            assert uid not in artifact
            assert uid.encode().hex() not in artifact


@pytest.mark.parametrize("variant", list(BellVariant))
@pytest.mark.parametrize("pauli", ["X", "Y", "Z"])
@pytest.mark.parametrize("qubit", [0, 1])
def test_binding_single_pauli_tamper(variant, pauli, qubit):
    run = _run(quantum_channel=QuantumChannel([gate(pauli, qubit)]))
    voter, receipt = _cast_and_record(run, "alice-01", entangle=EntangleSpec(bell_variant=variant))
    result = _complete(run, [voter])
    assert receipt.transit_fidelity < 1 - 1e-6 or result.ballots[0].approvals != "1101"


def test_non_reusability():
    run = _run()
    voter, _ = _cast_and_record(run, "alice-01")
    with pytest.raises(ProtocolOrderViolation):
        cast_vote(run, voter, BALLOT, SIGNATURE, PHI_PLUS)

    # A copy of the voter's credentials with its phase rewound.
    clone = dataclasses.replace(voter, phase=VoterPhase.REGISTERED)
    receipt = cast_vote(run, clone, Ballot.parse("0010"), SIGNATURE, PHI_PLUS)
    with pytest.raises(UnknownVoter):
        scrutinize_and_record(run, receipt.encrypted_hash_id, receipt.signing_details)
    assert len(run.ledger) == 1
    assert len({b.voter_hash_id for b in run.ledger}) == 1


def _adversary_calls(run, intruder, eligible_flag):
    state = {}

    def register():
        register_voter(run, intruder, eligible=eligible_flag)

    def cast():
        state["receipt"] = cast_vote(run, intruder, BALLOT, SIGNATURE, PHI_PLUS)

    def scrutinize():
        receipt = state.get("receipt")
        message = receipt.encrypted_hash_id if receipt else _forged(1)
        scrutinize_and_record(run, message, SIGNATURE.descriptor)

    return {"register": register, "cast": cast, "scrutinize": scrutinize}


@pytest.mark.parametrize("order", list(itertools.permutations(["register", "cast", "scrutinize"])))
def test_ineligible_voter_never_reaches_the_ledger(order):
    run = _run()
    register_voter(run, "honest-voter", eligible=True)
    calls = _adversary_calls(run, Voter.from_id("mallory"), eligible_flag=False)
    for name in order:
        try:
            calls[name]()
        except QVoteError:
            pass
    assert len(run.ledger) == 0


@pytest.mark.parametrize("order", list(itertools.permutations(["cast", "scrutinize"])))
def test_never_registered_voter_never_reaches_the_ledger(order):
    run = _run()
    register_voter(run, "honest-voter", eligible=True)
    calls = _adversary_calls(run, Voter.from_id("mallory"), eligible_flag=True)
    for name in order:
        try:
            calls[name]()
        except QVoteError:
            pass
    assert len(run.ledger) == 0


def test_fairness_guessing_the_entanglement():
    rng = np.random.default_rng(77)
    variants = list(BellVariant)
    trials, recovered = 400, 0
    for trial in range(trials):
        run = _run(seed=trial)
        true_variant = variants[int(rng.integers(0, 4))]
        voter, _ = _cast_and_record(run, "alice-01", entangle=EntangleSpec(bell_variant=true_variant))
        held = run.cast_states[voter.hash_id].state
        guess = EntangleSpec(bell_variant=variants[int(rng.integers(0, 4))])
        counts = measure_shots(apply_entangle(held, guess, "inverse"), 1024, rng=rng)
        recovered += decode_counts(counts, FOUR).approvals.bits == "1101"
    bound = trials / 4 + 3 * math.sqrt(trials * 0.25 * 0.75)
    assert recovered <= bound

    with pytest.raises(TallyBlocked):
        release_and_tally(run, [])


_CALLS = ("register", "cast", "scrutinize", "verify", "release")


def _phase_steps(run, voter):
    state = {}

    def register():
        register_voter(run, voter, eligible=True)

    def cast():
        state["receipt"] = cast_vote(run, voter, BALLOT, SIGNATURE, PHI_PLUS)

    def scrutinize():
        receipt = state.get("receipt")
        message = receipt.encrypted_hash_id if receipt else _forged(1)
        scrutinize_and_record(run, message, SIGNATURE.descriptor)

    def verify():
        voter_verify(run, voter)

    def release():
        state["result"] = release_and_tally(run, [release_entanglement(run, voter)])

    return state, {"register": register, "cast": cast, "scrutinize": scrutinize,
                   "verify": verify, "release": release}


def test_canonical_order_completes():
    run = _run()
    state, steps = _phase_steps(run, Voter.from_id("alice-01"))
    for name in _CALLS:
        steps[name]()
    assert state["result"].ballots[0].approvals == "1101"


@pytest.mark.parametrize(
    "order", [p for p in itertools.permutations(_CALLS) if p != _CALLS]
)
def test_every_other_order_is_a_phase_violation(order):
    run = _run()
    _, steps = _phase_steps(run, Voter.from_id("alice-01"))
    with pytest.raises(ProtocolOrderViolation):
        for name in order:
            steps[name]()

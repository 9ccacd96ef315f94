# protocol_crypto.py
# Classical cryptography around the quantum ballot: keys from the simulated
# QRNG, one-time-pad encryption, keyed hash IDs, and the voter's gate-sequence
# signature together with its inverse.

import hashlib
import hmac
import logging
import secrets
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_serializer

from env_utils import clean_env_value
from errors import InvalidId, InvalidLength, KeyTooShort
from qsim import GateOp, NoiseConfig, StateVector, apply_gates

logger = logging.getLogger(__name__)

# Recorded next to every digest in serialized records.
HASH_ALGORITHM = "sha-256"
HASH_BITS = 256
QRNG_SOURCE = "simulated-qrng"
HASH_SECRET_ENV = "QVOTE_HASH_SECRET"
HASH_SECRET_BYTES = 32

KeyLabel = Literal["K_AB", "K_AC"]


class SimulatedQRNG:
    """Stands in for the quantum random number generator. It is a seeded
    numpy Generator, not a physical entropy source: the same seed always
    yields the same keys."""

    source = QRNG_SOURCE

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def bits(self, length: int) -> tuple[int, ...]:
        return tuple(int(b) for b in self._rng.integers(0, 2, size=length))


# --- Bit helpers ---

def bytes_to_bits(data: bytes) -> tuple[int, ...]:
    return tuple(int(b) for b in np.unpackbits(np.frombuffer(data, dtype=np.uint8)))


def bits_to_bytes(bits: Sequence[int]) -> bytes:
    if len(bits) % 8:
        raise ValueError("Bit strings must be whole bytes to convert.")
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


# --- Keys and one-time pad ---

class SecretKey(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: KeyLabel
    bits: tuple[int, ...]
    source: str = QRNG_SOURCE

    @field_validator("bits")
    @classmethod
    def _binary(cls, bits):
        if any(b not in (0, 1) for b in bits):
            raise ValueError("Key bits must be 0 or 1.")
        return bits

    @property
    def length(self) -> int:
        return len(self.bits)


def gen_key(label: KeyLabel, length: int, qrng: SimulatedQRNG) -> SecretKey:
    if length < 1:
        raise InvalidLength("A secret key needs at least one bit.")
    return SecretKey(label=label, bits=qrng.bits(length), source=qrng.source)


def otp(message: Sequence[int], key: SecretKey) -> tuple[int, ...]:
    """XOR with the key prefix. Applying it twice with one key is the identity."""
    if len(message) > key.length:
        raise KeyTooShort(f"{len(message)}-bit message, {key.length}-bit key {key.label}.")
    return tuple(int(m) ^ k for m, k in zip(message, key.bits))


# --- Hash IDs ---

class HashId(BaseModel):
    model_config = ConfigDict(frozen=True)

    digest: bytes = Field(min_length=HASH_BITS // 8, max_length=HASH_BITS // 8)
    algorithm_id: str = HASH_ALGORITHM

    @field_validator("digest", mode="before")
    @classmethod
    def _from_hex(cls, value):
        if isinstance(value, str):
            return bytes.fromhex(value)
        return value

    @field_serializer("digest")
    def _to_hex(self, digest: bytes) -> str:
        return digest.hex()

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @property
    def short(self) -> str:
        """Log-safe prefix."""
        return self.digest.hex()[:8]

    @property
    def bits(self) -> tuple[int, ...]:
        return bytes_to_bits(self.digest)

    @classmethod
    def from_hex(cls, text: str, algorithm_id: str = HASH_ALGORITHM) -> "HashId":
        return cls(digest=bytes.fromhex(text), algorithm_id=algorithm_id)

    @classmethod
    def from_bits(cls, bits: Sequence[int], algorithm_id: str = HASH_ALGORITHM) -> "HashId":
        return cls(digest=bits_to_bytes(bits), algorithm_id=algorithm_id)


def load_hash_secret() -> bytes:
    """The key of the hash-ID function, shared by voters and the tallyman.
    QVOTE_HASH_SECRET pins it; otherwise it is fresh OS entropy. Nothing in
    a transcript determines it."""
    configured = clean_env_value(HASH_SECRET_ENV)
    if configured is not None:
        return configured.encode()
    return secrets.token_bytes(HASH_SECRET_BYTES)


def hash_id(unique_id: bytes | str, shared_secret: bytes) -> HashId:
    """digest = SHA-256(shared_secret || unique_id). The secret is what only
    the voter and the tallyman know; outsiders cannot link an ID to it."""
    if isinstance(unique_id, str):
        unique_id = unique_id.encode()
    if not unique_id:
        raise InvalidId("A unique ID cannot be empty.")
    return HashId(digest=hashlib.sha256(shared_secret + unique_id).digest())


def hash_ids_match(a: HashId, b: HashId) -> bool:
    return a.algorithm_id == b.algorithm_id and hmac.compare_digest(a.digest, b.digest)


# --- Gate signatures ---

class SignatureSpec(BaseModel):
    """The voter's secret gate sequence. Canonical text form joins gate
    descriptors with ';', e.g. "Z@0;X@1" (empty string for no gates)."""

    model_config = ConfigDict(frozen=True)

    gates: tuple[GateOp, ...] = ()

    @field_validator("gates", mode="before")
    @classmethod
    def _from_descriptors(cls, value):
        if isinstance(value, str):
            value = [part for part in value.split(";") if part.strip()]
        return value

    @model_serializer
    def _as_descriptor(self) -> str:
        return self.descriptor

    @classmethod
    def parse(cls, text: str) -> "SignatureSpec":
        return cls(gates=text)

    @property
    def descriptor(self) -> str:
        return ";".join(op.descriptor for op in self.gates)

    def inverse(self) -> "SignatureSpec":
        return SignatureSpec(gates=tuple(op.inverse() for op in reversed(self.gates)))


def sign(
    state: StateVector,
    spec: SignatureSpec,
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
) -> StateVector:
    return apply_gates(state, spec.gates, noise, rng)


def unsign(
    state: StateVector,
    spec: SignatureSpec,
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
) -> StateVector:
    return apply_gates(state, spec.inverse().gates, noise, rng)


def signing_details_match(recorded: str, own: str) -> bool:
    return hmac.compare_digest(recorded.encode("utf-8", "surrogateescape"),
                               own.encode("utf-8", "surrogateescape"))

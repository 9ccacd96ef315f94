# ledger.py
# Append-only, hash-chained record of vote registrations. Each block holds
# the voter's hash ID, the disclosed signing details, a caller-supplied
# timestamp and the hash of its predecessor. All content is classical.
#
# Canonical block serialization (hashed with SHA-256):
#   u64be(index) || voter digest || u32be(len(details)) || details (UTF-8)
#   || u64be(timestamp_ms) || prev_hash

import hashlib
import logging
import struct
import threading
from typing import NamedTuple

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator

from errors import DuplicateVoter
from protocol_crypto import HashId

logger = logging.getLogger(__name__)

GENESIS_PREV_HASH = bytes(32)
_U64_MAX = 2**64 - 1


def _utf8(text: str) -> bytes:
    # surrogateescape keeps arbitrary (even tampered) bytes round-trippable.
    return text.encode("utf-8", "surrogateescape")


class Block(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=0, le=_U64_MAX)
    voter_hash_id: HashId
    signing_details: str
    timestamp_ms: int = Field(ge=0, le=_U64_MAX)
    prev_hash: bytes
    block_hash: bytes

    @field_validator("prev_hash", "block_hash", mode="before")
    @classmethod
    def _from_hex(cls, value):
        if isinstance(value, str):
            return bytes.fromhex(value)
        return value

    @field_serializer("prev_hash", "block_hash")
    def _to_hex(self, value: bytes) -> str:
        return value.hex()

    def serialize(self) -> bytes:
        """Canonical bytes of every field except block_hash."""
        details = _utf8(self.signing_details)
        return b"".join((
            struct.pack(">Q", self.index),
            self.voter_hash_id.digest,
            struct.pack(">I", len(details)),
            details,
            struct.pack(">Q", self.timestamp_ms),
            self.prev_hash,
        ))

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.serialize()).digest()

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "voter_hash_id": self.voter_hash_id.hex,
            "signing_details": self.signing_details,
            "timestamp_ms": self.timestamp_ms,
            "prev_hash": self.prev_hash.hex(),
            "block_hash": self.block_hash.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Block":
        return cls(
            index=data["index"],
            voter_hash_id=HashId.from_hex(data["voter_hash_id"]),
            signing_details=data["signing_details"],
            timestamp_ms=data["timestamp_ms"],
            prev_hash=data["prev_hash"],
            block_hash=data["block_hash"],
        )


class Ledger:
    """The chain itself. Appends are serialized by a lock; readers get an
    immutable snapshot, so they always observe a prefix of the chain."""

    def __init__(self, blocks: tuple[Block, ...] = ()):
        self._blocks: tuple[Block, ...] = tuple(blocks)
        self._lock = threading.Lock()

    @property
    def blocks(self) -> tuple[Block, ...]:
        return self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self):
        return iter(self._blocks)

    def append(self, voter_hash_id: HashId, signing_details: str, timestamp_ms: int) -> Block:
        with self._lock:
            blocks = self._blocks
            if any(b.voter_hash_id == voter_hash_id for b in blocks):
                logger.warning("Refusing a second block for hash ID %s.", voter_hash_id.short)
                raise DuplicateVoter(f"Hash ID {voter_hash_id.short}... already has a block.")
            prev_hash = blocks[-1].block_hash if blocks else GENESIS_PREV_HASH
            draft = Block(
                index=len(blocks),
                voter_hash_id=voter_hash_id,
                signing_details=signing_details,
                timestamp_ms=timestamp_ms,
                prev_hash=prev_hash,
                block_hash=bytes(32),
            )
            block = draft.model_copy(update={"block_hash": draft.compute_hash()})
            self._blocks = blocks + (block,)
        logger.info("Block %d appended for hash ID %s.", block.index, voter_hash_id.short)
        return block

    def to_json(self) -> list[dict]:
        return [block.to_json() for block in self._blocks]

    @classmethod
    def from_json(cls, data: list[dict]) -> "Ledger":
        """Loads blocks as given, without validating the chain: a tampered
        export must still load so verify_chain can point at the damage."""
        return cls(tuple(Block.from_json(item) for item in data))


def append_block(ledger: Ledger, voter_hash_id: HashId, signing_details: str, timestamp: int) -> Block:
    return ledger.append(voter_hash_id, signing_details, timestamp)


class ChainCheck(NamedTuple):
    valid: bool
    first_bad_index: int | None = None


def verify_chain(ledger: Ledger) -> ChainCheck:
    prev_hash = GENESIS_PREV_HASH
    for position, block in enumerate(ledger.blocks):
        if (
            block.index != position
            or block.prev_hash != prev_hash
            or block.block_hash != block.compute_hash()
        ):
            return ChainCheck(False, position)
        prev_hash = block.block_hash
    return ChainCheck(True, None)


def find_registration(ledger: Ledger, voter_hash_id: HashId) -> Block | None:
    for block in ledger.blocks:
        if block.voter_hash_id == voter_hash_id:
            return block
    return None

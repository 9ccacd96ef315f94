import hashlib
import json
import random
import threading

import pytest

from errors import DuplicateVoter
from ledger import GENESIS_PREV_HASH, Block, Ledger, append_block, find_registration, verify_chain
from protocol_crypto import HashId, hash_id

SECRET = b"ledger-test-secret"


def _ids(n):
    return [hash_id(f"voter-{i:03d}", SECRET) for i in range(n)]


def _ledger(n):
    ledger = Ledger()
    for t, hid in enumerate(_ids(n), start=1):
        append_block(ledger, hid, "Z@0;X@1", t)
    return ledger


def test_first_block_links_to_genesis():
    ledger = _ledger(1)
    block = ledger.blocks[0]
    assert block.index == 0
    assert block.prev_hash == GENESIS_PREV_HASH
    assert block.block_hash == block.compute_hash()


def test_blocks_chain():
    ledger = _ledger(3)
    assert [b.index for b in ledger] == [0, 1, 2]
    assert ledger.blocks[2].prev_hash == ledger.blocks[1].block_hash
    assert verify_chain(ledger) == (True, None)


def test_empty_ledger_is_valid():
    assert verify_chain(Ledger()).valid


def test_second_block_for_one_voter_is_refused():
    ledger = _ledger(2)
    with pytest.raises(DuplicateVoter):
        append_block(ledger, _ids(1)[0], "H@0", 99)
    assert len(ledger) == 2


def test_block_hash_depends_on_timestamp():
    a, b = Ledger(), Ledger()
    hid = _ids(1)[0]
    assert append_block(a, hid, "Z@0", 1).block_hash != append_block(b, hid, "Z@0", 2).block_hash


def test_find_registration():
    ledger = _ledger(4)
    ids = _ids(5)
    assert find_registration(ledger, ids[2]).index == 2
    assert find_registration(ledger, ids[4]) is None


def test_json_export_reloads_identically():
    ledger = _ledger(5)
    reloaded = Ledger.from_json(json.loads(json.dumps(ledger.to_json())))
    assert reloaded.blocks == ledger.blocks
    assert verify_chain(reloaded).valid


def test_edited_export_points_at_first_bad_block():
    exported = _ledger(5).to_json()
    exported[3]["signing_details"] = "X@0"
    assert verify_chain(Ledger.from_json(exported)) == (False, 3)


def test_edited_block_hash_is_caught():
    exported = _ledger(5).to_json()
    exported[1]["block_hash"] = "00" * 32
    check = verify_chain(Ledger.from_json(exported))
    assert check == (False, 1)


def _parse(raw: bytes, block_hash: bytes) -> Block | None:
    """Reads serialized bytes back into a Block; None when the length
    prefix no longer fits the data."""
    details_len = int.from_bytes(raw[40:44], "big")
    end = 44 + details_len
    if end + 8 > len(raw):
        return None
    return Block.model_construct(
        index=int.from_bytes(raw[:8], "big"),
        voter_hash_id=HashId(digest=bytes(raw[8:40])),
        signing_details=bytes(raw[44:end]).decode("utf-8", "surrogateescape"),
        timestamp_ms=int.from_bytes(raw[end:end + 8], "big"),
        prev_hash=bytes(raw[end + 8:]),
        block_hash=block_hash,
    )


def test_every_bit_flip_of_one_block_is_caught():
    ledger = _ledger(32)
    position = random.Random(8).randrange(32)
    target = ledger.blocks[position]
    serialized = target.serialize()
    assert _parse(serialized, target.block_hash) == target
    for bit in range(len(serialized) * 8):
        raw = bytearray(serialized)
        raw[bit // 8] ^= 0x80 >> (bit % 8)
        tampered = _parse(bytes(raw), target.block_hash)
        if tampered is None:
            # No block decodes from these bytes; their digest still differs.
            assert hashlib.sha256(bytes(raw)).digest() != target.block_hash, bit
            continue
        blocks = list(ledger.blocks)
        blocks[position] = tampered
        assert not verify_chain(Ledger(tuple(blocks))).valid, bit


def test_every_bit_flip_of_block_hash_is_caught():
    ledger = _ledger(32)
    target = ledger.blocks[17]
    for bit in range(256):
        raw = bytearray(target.block_hash)
        raw[bit // 8] ^= 0x80 >> (bit % 8)
        blocks = list(ledger.blocks)
        blocks[17] = target.model_copy(update={"block_hash": bytes(raw)})
        assert not verify_chain(Ledger(tuple(blocks))).valid


def test_concurrent_appends_keep_the_chain_valid():
    ledger = Ledger()
    ids = _ids(40)

    def worker(chunk):
        for hid in chunk:
            ledger.append(hid, "H@0", 1)

    threads = [threading.Thread(target=worker, args=(ids[i::4],)) for i in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert len(ledger) == 40
    assert verify_chain(ledger).valid

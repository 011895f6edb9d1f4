import dataclasses
import hashlib
import json
import random
import struct
import zlib
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagbft.types import Block, BlockRef, CoinShare
from dagbft.wire import (MAX_FRAME, DecodeError, FrameKind, WalCorruption, WalKind, WalRecord,
                         WriteAheadLog, decode_block, decode_blocks, decode_frame, decode_refs,
                         encode_block, encode_blocks, encode_frame, encode_refs,
                         encode_wal_record, replay_wal)

FIXTURES = Path(__file__).parent / "fixtures"


def _block(author=1, round_=2, parents=None, txs=(b"a", b"bc"), sig=b"\x07" * 32):
    if parents is None:
        parents = (BlockRef(0, 1, b"\x11" * 32), BlockRef(2, 1, b"\x22" * 32))
    return Block(author, round_, parents, txs, CoinShare(author, round_, b"\x05" * 16), sig)


def test_layout_matches_hand_assembled_bytes():
    b = _block()
    expected = b"".join([
        struct.pack(">IQI", 1, 2, 2),
        struct.pack(">IQ", 0, 1), b"\x11" * 32,
        struct.pack(">IQ", 2, 1), b"\x22" * 32,
        struct.pack(">I", 2), struct.pack(">I", 1), b"a", struct.pack(">I", 2), b"bc",
        struct.pack(">IQH", 1, 2, 16), b"\x05" * 16,
    ])
    assert encode_block(b) == expected + struct.pack(">H", 32) + b"\x07" * 32
    assert b.digest == hashlib.blake2b(expected, digest_size=32).digest()


def test_round_trip_example():
    b = _block()
    assert decode_block(encode_block(b)) == b


def test_flipping_a_parent_byte_changes_digest():
    b = _block()
    raw = bytearray(encode_block(b))
    raw[20] ^= 0xFF  # inside the first parent digest
    other = decode_block(bytes(raw))
    assert other.digest != b.digest
    assert other.author == b.author and other.round == b.round


def test_declared_tx_count_exceeding_frame():
    raw = bytearray(encode_block(_block()))
    offset = 16 + 2 * 44
    raw[offset:offset + 4] = struct.pack(">I", 5000)
    with pytest.raises(DecodeError):
        decode_block(bytes(raw))


@pytest.mark.parametrize("cut", [1, 10, 60, 150])
def test_truncation_rejected(cut):
    raw = encode_block(_block())
    with pytest.raises(DecodeError):
        decode_block(raw[:-cut])


def test_trailing_bytes_rejected():
    with pytest.raises(DecodeError):
        decode_block(encode_block(_block()) + b"\x00")


@pytest.mark.parametrize("field, value", [
    ("author", 3), ("round", 9), ("parents", (BlockRef(0, 1, b"\x11" * 32),)),
    ("transactions", (b"a",)), ("coin_share", CoinShare(1, 2, b"\x06" * 16)),
])
def test_digest_depends_on_every_field_but_signature(field, value):
    b = _block()
    assert dataclasses.replace(b, **{field: value}).digest != b.digest
    assert dataclasses.replace(b, signature=b"\x00").digest == b.digest


def _random_block(rng: random.Random) -> Block:
    parents = tuple(BlockRef(rng.randrange(100), rng.randrange(1 << 40), rng.randbytes(32))
                    for _ in range(rng.randrange(12)))
    txs = tuple(rng.randbytes(rng.randrange(64)) for _ in range(rng.randrange(6)))
    share = CoinShare(rng.randrange(100), rng.randrange(1 << 40), rng.randbytes(rng.randrange(33)))
    return Block(rng.randrange(100), rng.randrange(1 << 40), parents, txs, share,
                 rng.randbytes(rng.randrange(65)))


def test_round_trip_ten_thousand_random_blocks():
    rng = random.Random(2024)
    encodings = set()
    for _ in range(10_000):
        b = _random_block(rng)
        raw = encode_block(b)
        back = decode_block(raw)
        assert back == b and back.signature == b.signature
        encodings.add(raw)
    assert len(encodings) == 10_000  # injective on distinct blocks


refs = st.builds(BlockRef, st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1),
                 st.binary(min_size=32, max_size=32))
blocks = st.builds(
    Block, st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1),
    st.lists(refs, max_size=8).map(tuple),
    st.lists(st.binary(max_size=40), max_size=5).map(tuple),
    st.builds(CoinShare, st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1),
              st.binary(max_size=32)),
    st.binary(max_size=64))


@settings(max_examples=300)
@given(blocks)
def test_round_trip_property(b):
    assert decode_block(encode_block(b)) == b


@settings(max_examples=100)
@given(st.lists(blocks, max_size=4), st.lists(refs, max_size=6))
def test_batch_and_ref_payloads_round_trip(bs, rs):
    assert decode_blocks(encode_blocks(bs)) == bs
    assert decode_refs(encode_refs(rs)) == rs


# -- frames --------------------------------------------------------------------


def test_frame_layout_and_partial_reads():
    body = b"hello"
    frame = encode_frame(FrameKind.FETCH_REQUEST, body)
    assert frame == struct.pack(">I", 6) + b"\x01" + body
    assert decode_frame(frame[:3]) is None
    assert decode_frame(frame[:-1]) is None
    assert decode_frame(frame + b"xx") == (FrameKind.FETCH_REQUEST, body, len(frame))


def test_frame_limits():
    with pytest.raises(DecodeError):
        decode_frame(struct.pack(">I", 0) + b"\x00")
    with pytest.raises(DecodeError):
        decode_frame(struct.pack(">I", MAX_FRAME + 1) + b"\x00")
    with pytest.raises(DecodeError):
        decode_frame(struct.pack(">I", 1) + b"\x09")
    with pytest.raises(ValueError):
        encode_frame(FrameKind.BLOCK, b"\x00" * MAX_FRAME)


# -- write-ahead log -----------------------------------------------------------


def _records():
    return [WalRecord(WalKind.RECEIVED_BLOCK, b"one"), WalRecord(WalKind.OWN_PROPOSAL, b"two"),
            WalRecord(WalKind.COMMIT_CHECKPOINT, b"\x00" * 8)]


def test_wal_record_layout():
    rec = WalRecord(WalKind.OWN_PROPOSAL, b"xyz")
    crc = zlib.crc32(b"\x01xyz")
    assert encode_wal_record(rec) == b"\x01" + struct.pack(">I", 3) + b"xyz" + struct.pack(">I", crc)


def test_wal_append_and_replay(tmp_path):
    path = tmp_path / "v.wal"
    wal = WriteAheadLog.open(path)
    for r in _records():
        wal.append(r)
    wal.close()  # a crash after flush loses nothing
    assert replay_wal(path) == _records()


def test_wal_torn_tail_dropped(tmp_path):
    path = tmp_path / "v.wal"
    data = b"".join(encode_wal_record(r) for r in _records())
    path.write_bytes(data[:-5])
    assert replay_wal(path) == _records()[:2]
    # reopening trims the torn bytes so new appends stay readable
    wal = WriteAheadLog.open(path)
    wal.append(WalRecord(WalKind.RECEIVED_BLOCK, b"four"))
    wal.close()
    assert [r.body for r in replay_wal(path)] == [b"one", b"two", b"four"]


def test_wal_bad_crc_on_final_record_is_a_torn_tail():
    data = bytearray(b"".join(encode_wal_record(r) for r in _records()))
    data[-1] ^= 1
    assert replay_wal(bytes(data)) == _records()[:2]


def test_wal_mid_log_corruption_fails():
    encoded = [encode_wal_record(r) for r in _records()]
    middle = bytearray(encoded[1])
    middle[6] ^= 0xFF
    with pytest.raises(WalCorruption):
        replay_wal(encoded[0] + bytes(middle) + encoded[2])


def test_wire_vectors_fixture():
    vectors = json.loads((FIXTURES / "wire_vectors.json").read_text())
    for v in vectors["blocks"]:
        b = decode_block(bytes.fromhex(v["encoding"]))
        assert b.digest.hex() == v["digest"]
        assert encode_block(b).hex() == v["encoding"]
    for v in vectors["frames"]:
        kind, body, used = decode_frame(bytes.fromhex(v["frame"]))
        assert (int(kind), body.hex(), used) == (v["kind"], v["body"], len(v["frame"]) // 2)
    for v in vectors["wal"]:
        rec = WalRecord(WalKind(v["kind"]), bytes.fromhex(v["body"]))
        assert encode_wal_record(rec).hex() == v["record"]

"""Canonical byte layouts: block encoding, TCP frames and WAL records.

All integers are fixed width, big-endian. The block digest covers every
field except the trailing signature.

Block::

    author u32 | round u64 | n_parents u32 | (author u32, round u64, digest[32])*
    | n_txs u32 | (len u32, bytes)* | share_author u32 | share_round u64
    | share_len u16 | share | sig_len u16 | sig

Frame::  length u32 (= len(body) + 1) | kind u8 | body

WAL record::  kind u8 | body_len u32 | body | crc32(kind || body) u32
"""

from __future__ import annotations

import enum
import hashlib
import io
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Union

from .types import MAX_TX_BYTES, MAX_TXS_PER_BLOCK, Block, BlockRef, CoinShare

DIGEST_LEN = 32
MAX_PARENTS = 1 << 16
MAX_FRAME = 16 * 1024 * 1024

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_REF = struct.Struct(">IQ32s")
_HEAD = struct.Struct(">IQI")
_SHARE_HEAD = struct.Struct(">IQH")


class DecodeError(ValueError):
    pass


def hash_bytes(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=DIGEST_LEN).digest()


def _encode_unsigned(block: Block) -> bytes:
    out = [_HEAD.pack(block.author, block.round, len(block.parents))]
    for p in block.parents:
        if len(p.digest) != DIGEST_LEN:
            raise ValueError("parent digest must be 32 bytes")
        out.append(_REF.pack(p.author, p.round, p.digest))
    out.append(_U32.pack(len(block.transactions)))
    for tx in block.transactions:
        out.append(_U32.pack(len(tx)))
        out.append(tx)
    share = block.coin_share
    out.append(_SHARE_HEAD.pack(share.author, share.round, len(share.share_bytes)))
    out.append(share.share_bytes)
    return b"".join(out)


def block_digest(block: Block) -> bytes:
    return hash_bytes(_encode_unsigned(block))


def encode_block(block: Block) -> bytes:
    return _encode_unsigned(block) + _U16.pack(len(block.signature)) + block.signature


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError(f"truncated: need {n} bytes at offset {self.pos}")
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def _read_block(r: _Reader) -> Block:
    author, round_, n_parents = r.unpack(_HEAD)
    if n_parents > MAX_PARENTS or n_parents * _REF.size > r.remaining:
        raise DecodeError(f"parent count {n_parents} exceeds frame")
    parents = tuple(BlockRef(*r.unpack(_REF)) for _ in range(n_parents))
    (n_txs,) = r.unpack(_U32)
    if n_txs > MAX_TXS_PER_BLOCK or n_txs * _U32.size > r.remaining:
        raise DecodeError(f"transaction count {n_txs} exceeds frame")
    txs = []
    for _ in range(n_txs):
        (length,) = r.unpack(_U32)
        if length > MAX_TX_BYTES:
            raise DecodeError(f"transaction of {length} bytes exceeds bound")
        txs.append(r.take(length))
    s_author, s_round, s_len = r.unpack(_SHARE_HEAD)
    share = CoinShare(s_author, s_round, r.take(s_len))
    (sig_len,) = r.unpack(_U16)
    signature = r.take(sig_len)
    return Block(author, round_, parents, tuple(txs), share, signature)


def decode_block(data: bytes) -> Block:
    r = _Reader(data)
    block = _read_block(r)
    if r.remaining:
        raise DecodeError(f"{r.remaining} trailing bytes after block")
    return block


# -- frames -----------------------------------------------------------------


class FrameKind(enum.IntEnum):
    BLOCK = 0
    FETCH_REQUEST = 1
    FETCH_RESPONSE = 2


def encode_frame(kind: FrameKind, body: bytes) -> bytes:
    if len(body) + 1 > MAX_FRAME:
        raise ValueError("frame exceeds 16 MiB")
    return _U32.pack(len(body) + 1) + bytes([kind]) + body


def decode_frame(buf: bytes) -> Optional[tuple[FrameKind, bytes, int]]:
    """Parse one frame off the front of ``buf``.

    Returns ``(kind, body, consumed)`` or None when more bytes are needed.
    """
    if len(buf) < 4:
        return None
    (length,) = _U32.unpack_from(buf, 0)
    if length < 1 or length > MAX_FRAME:
        raise DecodeError(f"bad frame length {length}")
    if len(buf) < 4 + length:
        return None
    try:
        kind = FrameKind(buf[4])
    except ValueError:
        raise DecodeError(f"unknown frame kind {buf[4]}") from None
    return kind, bytes(buf[5:4 + length]), 4 + length


def encode_refs(refs: Iterable[BlockRef]) -> bytes:
    refs = list(refs)
    return _U32.pack(len(refs)) + b"".join(_REF.pack(*r) for r in refs)


def decode_refs(body: bytes) -> list[BlockRef]:
    r = _Reader(body)
    (count,) = r.unpack(_U32)
    if count * _REF.size != r.remaining:
        raise DecodeError("fetch request length mismatch")
    return [BlockRef(*r.unpack(_REF)) for _ in range(count)]


def encode_blocks(blocks: Iterable[Block]) -> bytes:
    blocks = list(blocks)
    out = [_U32.pack(len(blocks))]
    for b in blocks:
        enc = encode_block(b)
        out.append(_U32.pack(len(enc)))
        out.append(enc)
    return b"".join(out)


def decode_blocks(body: bytes) -> list[Block]:
    r = _Reader(body)
    (count,) = r.unpack(_U32)
    if count * _U32.size > r.remaining:
        raise DecodeError("block count exceeds frame")
    blocks = []
    for _ in range(count):
        (length,) = r.unpack(_U32)
        blocks.append(decode_block(r.take(length)))
    if r.remaining:
        raise DecodeError("trailing bytes after blocks")
    return blocks


# -- write-ahead log --------------------------------------------------------


class WalKind(enum.IntEnum):
    RECEIVED_BLOCK = 0
    OWN_PROPOSAL = 1
    COMMIT_CHECKPOINT = 2


@dataclass(frozen=True)
class WalRecord:
    kind: WalKind
    body: bytes


class WalCorruption(Exception):
    """A record before the tail failed its checksum."""


_WAL_HEAD = struct.Struct(">BI")


def encode_wal_record(record: WalRecord) -> bytes:
    head = _WAL_HEAD.pack(record.kind, len(record.body))
    crc = zlib.crc32(bytes([record.kind]) + record.body)
    return head + record.body + _U32.pack(crc)


def parse_wal(data: bytes) -> list[WalRecord]:
    """Decode every intact record; a torn or bad final record is dropped."""
    records = []
    pos = 0
    end = len(data)
    while pos < end:
        if pos + _WAL_HEAD.size > end:
            break  # torn header
        kind, length = _WAL_HEAD.unpack_from(data, pos)
        stop = pos + _WAL_HEAD.size + length + 4
        if stop > end:
            break  # torn body
        body = bytes(data[pos + _WAL_HEAD.size:stop - 4])
        (crc,) = _U32.unpack_from(data, stop - 4)
        valid = crc == zlib.crc32(bytes([kind]) + body) and kind in WalKind._value2member_map_
        if not valid:
            if stop == end:
                break
            raise WalCorruption(f"bad record at offset {pos}")
        records.append(WalRecord(WalKind(kind), body))
        pos = stop
    return records


class WriteAheadLog:
    """Append-only record log over a binary stream.

    ``fsync`` controls whether appends are forced to disk; in-memory logs
    used by the simulator skip it.
    """

    def __init__(self, stream: BinaryIO, *, fsync: bool = False) -> None:
        self.stream = stream
        self.fsync = fsync
        self.stream.seek(0, io.SEEK_END)

    @classmethod
    def open(cls, path: Union[str, Path], *, fsync: bool = True) -> "WriteAheadLog":
        path = Path(path)
        if path.exists():
            # drop any torn tail so new records are not appended after garbage
            good = len(b"".join(encode_wal_record(r) for r in parse_wal(path.read_bytes())))
            with open(path, "r+b") as fh:
                fh.truncate(good)
        return cls(open(path, "a+b"), fsync=fsync)

    @classmethod
    def in_memory(cls, data: bytes = b"") -> "WriteAheadLog":
        return cls(io.BytesIO(data), fsync=False)

    def append(self, record: WalRecord) -> int:
        encoded = encode_wal_record(record)
        self.stream.write(encoded)
        self.stream.flush()
        if self.fsync:
            os.fsync(self.stream.fileno())
        return self.stream.tell()

    def contents(self) -> bytes:
        pos = self.stream.tell()
        self.stream.seek(0)
        data = self.stream.read()
        self.stream.seek(pos)
        return data

    def close(self) -> None:
        self.stream.close()


def append_wal(wal: WriteAheadLog, record: WalRecord) -> int:
    return wal.append(record)


def replay_wal(source: Union[str, Path, bytes, WriteAheadLog]) -> list[WalRecord]:
    if isinstance(source, WriteAheadLog):
        data = source.contents()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = Path(source).read_bytes()
    return parse_wal(data)

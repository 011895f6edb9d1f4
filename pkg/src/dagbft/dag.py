"""Per-validator local DAG.

Blocks become visible (``stored``) only once their whole causal history is
stored; until then they sit in a pending buffer keyed by the parents they
are waiting for. Equivocating blocks are all kept side by side.
"""

from __future__ import annotations

import bisect
import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import crypto
from .coin import verify_share
from .types import (MAX_TX_BYTES, MAX_TXS_PER_BLOCK, Block, BlockRef, CoinShare, Committee,
                    canonical_parent_order)

log = logging.getLogger(__name__)

DEFAULT_MAX_PENDING = 100_000


class InvalidReason(enum.Enum):
    UNKNOWN_AUTHOR = "unknown author"
    BAD_SIGNATURE = "bad signature"
    BAD_ROUND = "bad round"
    DUPLICATE_PARENT = "duplicate parent"
    BAD_PARENT = "bad parent reference"
    NON_CANONICAL_PARENTS = "parents not in canonical order"
    INSUFFICIENT_PARENTS = "insufficient parents"
    BAD_COIN_SHARE = "bad coin share"
    OVERSIZED = "too many or too large transactions"


class Verdict(enum.Enum):
    VALID = "valid"
    INVALID = "invalid"
    MISSING = "missing ancestors"


@dataclass(frozen=True)
class Validation:
    verdict: Verdict
    reason: Optional[InvalidReason] = None
    missing: frozenset[BlockRef] = frozenset()

    @property
    def ok(self) -> bool:
        return self.verdict is not Verdict.INVALID


VALID = Validation(Verdict.VALID)


def _invalid(reason: InvalidReason) -> Validation:
    return Validation(Verdict.INVALID, reason)


class InvalidBlock(ValueError):
    def __init__(self, block: Block, reason: InvalidReason) -> None:
        super().__init__(f"{block!r}: {reason.value}")
        self.block = block
        self.reason = reason


class UnknownBlock(KeyError):
    pass


def genesis_blocks(committee: Committee) -> list[Block]:
    """Round-0 blocks every validator starts with; unsigned and parentless."""
    return [Block(v, 0, (), (), CoinShare(v, 0, b"")) for v in committee.validators()]


def check_block(block: Block, committee: Committee) -> Optional[InvalidReason]:
    """Store-independent checks; returns the first failure or None."""
    if block.author not in committee:
        return InvalidReason.UNKNOWN_AUTHOR
    if not crypto.verify(committee.public_keys[block.author], block.digest, block.signature):
        return InvalidReason.BAD_SIGNATURE
    if block.round < 1:
        return InvalidReason.BAD_ROUND
    seen_refs = set()
    seen_slots = set()
    prev_round = 0
    for p in block.parents:
        if p in seen_refs or (p.author, p.round) in seen_slots:
            return InvalidReason.DUPLICATE_PARENT
        seen_refs.add(p)
        seen_slots.add((p.author, p.round))
        if p.round >= block.round or p.author not in committee:
            return InvalidReason.BAD_PARENT
        if p.round == block.round - 1:
            prev_round += 1
    if tuple(block.parents) != canonical_parent_order(block.author, block.parents):
        return InvalidReason.NON_CANONICAL_PARENTS
    if prev_round < committee.quorum():
        return InvalidReason.INSUFFICIENT_PARENTS
    share = block.coin_share
    if (share.author, share.round) != (block.author, block.round) \
            or not verify_share(share, committee.coin_setup):
        return InvalidReason.BAD_COIN_SHARE
    if len(block.transactions) > MAX_TXS_PER_BLOCK \
            or any(len(tx) > MAX_TX_BYTES for tx in block.transactions):
        return InvalidReason.OVERSIZED
    return None


def validate_block(block: Block, committee: Committee, store: "DagStore",
                   verified: Optional[set] = None) -> Validation:
    """Full validity check of ``block`` against ``store``.

    ``verified`` is an optional set of digests that already passed
    :func:`check_block`; a simulator may share one across validators since
    those checks do not depend on local state.
    """
    if verified is None or block.digest not in verified:
        reason = check_block(block, committee)
        if reason is not None:
            return _invalid(reason)
        if verified is not None:
            verified.add(block.digest)
    missing = []
    stored = store.blocks
    for p in block.parents:
        parent = stored.get(p.digest)
        if parent is None:
            missing.append(p)
        elif parent.ref != p:
            return _invalid(InvalidReason.BAD_PARENT)
    if missing:
        return Validation(Verdict.MISSING, missing=frozenset(missing))
    return VALID


class InsertStatus(enum.Enum):
    STORED = "stored"
    BUFFERED = "buffered"
    DUPLICATE = "duplicate"


@dataclass
class InsertResult:
    status: InsertStatus
    promoted: list[Block] = field(default_factory=list)

    @property
    def newly_stored(self) -> list[Block]:
        return self.promoted


def _sort_key(block: Block) -> tuple[int, bytes]:
    return (block.author, block.digest)


class DagStore:
    def __init__(self, committee: Committee, *, max_pending: int = DEFAULT_MAX_PENDING,
                 verified: Optional[set] = None) -> None:
        self.committee = committee
        self.max_pending = max_pending
        self.verified = verified
        self.blocks: dict[bytes, Block] = {}
        self._rounds: dict[int, list[Block]] = {}
        self._slots: dict[tuple[int, int], list[Block]] = {}
        self._authors: dict[int, set[int]] = {}
        self.pending: dict[bytes, Block] = {}
        self._missing: dict[bytes, set[bytes]] = {}
        # insertion-ordered so promotion order never depends on hashing
        self._waiters: dict[bytes, dict[bytes, None]] = {}
        self._wanted: dict[bytes, BlockRef] = {}
        self.highest_round = 0
        self.latest_round: dict[int, int] = {}
        self._reach: dict[bytes, tuple[int, set[bytes]]] = {}

    # -- lookups -----------------------------------------------------------

    def __contains__(self, digest: bytes) -> bool:
        return digest in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def get(self, digest: bytes) -> Optional[Block]:
        return self.blocks.get(digest)

    def __getitem__(self, ref: BlockRef) -> Block:
        try:
            return self.blocks[ref.digest]
        except KeyError:
            raise UnknownBlock(ref) from None

    def round_blocks(self, round_: int) -> list[Block]:
        """``DAG[r, *]``: every stored block of a round, by (author, digest)."""
        return self._rounds.get(round_, [])

    def slot_blocks(self, round_: int, author: int) -> list[Block]:
        """``DAG[r, v]``: more than one block only for equivocators."""
        return self._slots.get((round_, author), [])

    def round_authors(self, round_: int) -> int:
        return len(self._authors.get(round_, ()))

    def is_equivocator(self, round_: int, author: int) -> bool:
        return len(self.slot_blocks(round_, author)) > 1

    def parents_of(self, block: Block) -> list[Block]:
        blocks = self.blocks
        return [blocks[p.digest] for p in block.parents]

    # -- insertion ---------------------------------------------------------

    def add_genesis(self, blocks: Iterable[Block]) -> None:
        for b in blocks:
            if b.round != 0 or b.parents:
                raise ValueError("genesis blocks must be parentless round-0 blocks")
            if b.digest not in self.blocks:
                self._store(b)

    def validate(self, block: Block) -> Validation:
        return validate_block(block, self.committee, self, self.verified)

    def insert(self, block: Block, validation: Optional[Validation] = None) -> InsertResult:
        if block.digest in self.blocks or block.digest in self.pending:
            return InsertResult(InsertStatus.DUPLICATE)
        if validation is None:
            validation = self.validate(block)
        if validation.verdict is Verdict.INVALID:
            raise InvalidBlock(block, validation.reason)
        missing = {p.digest for p in block.parents if p.digest not in self.blocks}
        if missing:
            self._buffer(block, missing)
            return InsertResult(InsertStatus.BUFFERED)
        self._store(block)
        return InsertResult(InsertStatus.STORED, self._promote(block.digest))

    def _buffer(self, block: Block, missing: set[bytes]) -> None:
        self.pending[block.digest] = block
        self._missing[block.digest] = missing
        self._wanted.pop(block.digest, None)
        for p in block.parents:
            if p.digest in missing:
                self._waiters.setdefault(p.digest, {})[block.digest] = None
                if p.digest not in self.pending:
                    self._wanted[p.digest] = p
        if len(self.pending) > self.max_pending:
            self._evict()

    def _evict(self) -> None:
        victim = min(self.pending.values(), key=lambda b: (b.round, b.digest))
        log.debug("pending buffer full, evicting %r", victim)
        del self.pending[victim.digest]
        for parent in self._missing.pop(victim.digest):
            waiting = self._waiters.get(parent)
            if waiting is not None:
                waiting.pop(victim.digest, None)
                if not waiting:
                    del self._waiters[parent]
                    self._wanted.pop(parent, None)
        if victim.digest in self._waiters:
            self._wanted[victim.digest] = victim.ref

    def _store(self, block: Block) -> None:
        self.blocks[block.digest] = block
        bisect.insort(self._rounds.setdefault(block.round, []), block, key=_sort_key)
        self._slots.setdefault((block.round, block.author), []).append(block)
        self._authors.setdefault(block.round, set()).add(block.author)
        if block.round > self.highest_round:
            self.highest_round = block.round
        if block.round > self.latest_round.get(block.author, -1):
            self.latest_round[block.author] = block.round

    def _promote(self, digest: bytes) -> list[Block]:
        promoted = []
        stack = [digest]
        while stack:
            done = stack.pop()
            self._wanted.pop(done, None)
            for child_digest in self._waiters.pop(done, ()):
                missing = self._missing[child_digest]
                missing.discard(done)
                if missing:
                    continue
                del self._missing[child_digest]
                child = self.pending.pop(child_digest)
                if any(self.blocks[p.digest].ref != p for p in child.parents):
                    log.warning("dropping %r: parent reference mismatch", child)
                    continue
                self._store(child)
                promoted.append(child)
                stack.append(child_digest)
        return promoted

    def missing_ancestors(self) -> set[BlockRef]:
        return set(self._wanted.values())

    # -- reachability ------------------------------------------------------

    def exists_path(self, source: BlockRef, target: BlockRef) -> bool:
        """True iff ``target`` is in the causal history of ``source``."""
        if source.digest not in self.blocks:
            raise UnknownBlock(source)
        if target.digest not in self.blocks:
            raise UnknownBlock(target)
        if source.digest == target.digest:
            return True
        if target.round >= source.round:
            return False
        return target.digest in self.ancestors_down_to(source, target.round)

    def ancestors_down_to(self, source: BlockRef, floor: int) -> set[bytes]:
        """Digests of the causal history of ``source`` with round >= ``floor``."""
        cached = self._reach.get(source.digest)
        if cached is not None and cached[0] <= floor:
            return cached[1]
        if len(self._reach) > 4096:
            self._reach.clear()
        blocks = self.blocks
        seen = {source.digest}
        stack = [blocks[source.digest]]
        while stack:
            node = stack.pop()
            for p in node.parents:
                if p.round >= floor and p.digest not in seen:
                    seen.add(p.digest)
                    stack.append(blocks[p.digest])
        self._reach[source.digest] = (floor, seen)
        return seen

    def catch_up(self, refs: Iterable[BlockRef], floor: int, limit: int = 20_000) -> list[Block]:
        """Requested blocks plus their ancestors above ``floor``, ascending.

        Lets a far-behind peer rebuild a long history in one exchange
        instead of one round trip per round.
        """
        blocks = self.blocks
        seen: set[bytes] = set()
        stack = [blocks[r.digest] for r in refs if r.digest in blocks]
        out = []
        for b in stack:
            seen.add(b.digest)
        while stack and len(out) < limit:
            node = stack.pop()
            out.append(node)
            for p in node.parents:
                if p.round > floor and p.digest not in seen:
                    seen.add(p.digest)
                    stack.append(blocks[p.digest])
        out.sort(key=lambda b: (b.round, b.author, b.digest))
        return out

    def causal_history(self, block: Block, exclude: Optional[set[bytes]] = None) -> list[Block]:
        """Every ancestor of ``block`` (itself included) not in ``exclude``.

        ``exclude`` must be downward closed (true for any union of causal
        histories), which lets the walk stop at excluded blocks.
        """
        exclude = exclude or set()
        if block.digest in exclude:
            return []
        blocks = self.blocks
        seen = {block.digest}
        out = [block]
        stack = [block]
        while stack:
            node = stack.pop()
            for p in node.parents:
                d = p.digest
                if d not in seen and d not in exclude:
                    seen.add(d)
                    parent = blocks[d]
                    out.append(parent)
                    stack.append(parent)
        return out

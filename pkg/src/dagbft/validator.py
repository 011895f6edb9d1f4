"""Per-node state machine.

A validator never touches the network itself. Every entry point returns an
:class:`Effects` record listing what should be sent where; the simulator
and the TCP runner both drive validators through that contract.
"""

from __future__ import annotations

import enum
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import crypto
from .coin import make_share
from .committer import Committer, HistoryCache
from .dag import VALID, DagStore, InsertStatus, InvalidReason, Verdict, genesis_blocks
from .types import (MAX_TX_BYTES, MAX_TXS_PER_BLOCK, Block, BlockRef, Committee, Round,
                    Transaction, ValidatorId, WaveConfig, canonical_parent_order)
from .wire import WalKind, WalRecord, WriteAheadLog, decode_block, encode_block, replay_wal

log = logging.getLogger(__name__)

DEFAULT_POOL_LIMIT = 1_000_000
_CHECKPOINT = struct.Struct(">Q")

Observer = Callable[[ValidatorId, Block, int], None]


class SubmitResult(enum.Enum):
    ACCEPTED = "accepted"
    POOL_FULL = "pool full"
    TOO_LARGE = "too large"
    DUPLICATE = "duplicate"


@dataclass
class Effects:
    stored: list[Block] = field(default_factory=list)
    buffered: list[Block] = field(default_factory=list)
    rejected: list[tuple[Block, InvalidReason]] = field(default_factory=list)
    # (block, recipients); None means every other validator
    outgoing: list[tuple[Block, Optional[tuple[int, ...]]]] = field(default_factory=list)
    requests: list[tuple[int, list[BlockRef]]] = field(default_factory=list)
    hints: list[tuple[int, Block]] = field(default_factory=list)
    committed: list[Block] = field(default_factory=list)

    @property
    def proposals(self) -> list[Block]:
        return [b for b, _ in self.outgoing]


@dataclass
class _Want:
    ref: BlockRef
    first_peer: Optional[int]
    attempts: int = 0
    due: int = 0


class Synchronizer:
    """Tracks missing ancestors and decides whom to ask and when.

    The first request goes to the peer whose block revealed the gap; each
    retry moves to the next peer with exponentially growing wait, capped at
    ``max_delay`` time units.
    """

    def __init__(self, me: ValidatorId, n: int, *, base_delay: int = 2, max_delay: int = 10) -> None:
        self.me = me
        self.peers = [p for p in range(n) if p != me]
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.wants: dict[bytes, _Want] = {}

    def update(self, missing: set[BlockRef], hints: dict[bytes, int], now: int) -> None:
        digests = {r.digest for r in missing}
        for d in [d for d in self.wants if d not in digests]:
            del self.wants[d]
        for ref in sorted(missing):
            if ref.digest not in self.wants:
                self.wants[ref.digest] = _Want(ref, hints.get(ref.digest), 0, now)

    def _peer(self, want: _Want) -> int:
        start = self.peers.index(want.first_peer) if want.first_peer in self.peers else \
            want.ref.author % len(self.peers)
        return self.peers[(start + want.attempts) % len(self.peers)]

    def due(self, now: int) -> list[tuple[int, list[BlockRef]]]:
        if not self.peers:
            return []
        batches: dict[int, list[BlockRef]] = {}
        for want in self.wants.values():
            if want.due > now:
                continue
            batches.setdefault(self._peer(want), []).append(want.ref)
            want.attempts += 1
            want.due = now + min(self.max_delay, self.base_delay * 2 ** (want.attempts - 1))
        return sorted(batches.items())

    def next_due(self) -> Optional[int]:
        return min((w.due for w in self.wants.values()), default=None)


class Validator:
    def __init__(self, keys: crypto.ValidatorKeys, committee: Committee, cfg: WaveConfig, *,
                 wal: Optional[WriteAheadLog] = None, cache: Optional[HistoryCache] = None,
                 verified: Optional[set] = None, observer: Optional[Observer] = None,
                 run_committer: bool = True, max_round: Optional[Round] = None,
                 pool_limit: int = DEFAULT_POOL_LIMIT, fetch_base: int = 2, fetch_cap: int = 10,
                 min_block_interval: int = 0, round_patience: int = 0) -> None:
        cfg.check_committee(committee)
        self.id = keys.id
        self.keys = keys
        self.committee = committee
        self.cfg = cfg
        self.wal = wal
        self.observer = observer
        self.max_round = max_round
        self.pool_limit = pool_limit
        self.min_block_interval = min_block_interval
        # how long to hold out for blocks beyond the quorum of a round
        self.round_patience = round_patience
        self._quorum_seen: tuple[Round, int] = (-1, 0)
        self.store = DagStore(committee, verified=verified)
        genesis = genesis_blocks(committee)
        self.store.add_genesis(genesis)
        self.committer: Optional[Committer] = None
        if run_committer:
            self.committer = Committer(self.store, cfg, cache=cache, start_round=1,
                                       already_output=[g.digest for g in genesis])
        self.current_round: Round = 0
        self.last_block: Block = genesis[self.id]
        self.last_proposal_time: Optional[int] = None
        self.proposed: list[Block] = []
        self.pool: deque[Transaction] = deque()
        self._pooled: set[Transaction] = set()
        self._history: set[bytes] = {g.digest for g in genesis}
        self._history_txs: set[Transaction] = set()
        self.sync = Synchronizer(self.id, committee.n, base_delay=fetch_base, max_delay=fetch_cap)
        self._missing_hint: dict[bytes, int] = {}
        self._hinted: dict[int, Round] = {}
        self.delivered = 0
        self._suppress_until = 0

    # -- client intake -----------------------------------------------------

    def submit_transaction(self, tx: Transaction) -> SubmitResult:
        if len(tx) > MAX_TX_BYTES:
            return SubmitResult.TOO_LARGE
        if tx in self._pooled or tx in self._history_txs:
            return SubmitResult.DUPLICATE
        if len(self.pool) >= self.pool_limit:
            return SubmitResult.POOL_FULL
        self.pool.append(tx)
        self._pooled.add(tx)
        return SubmitResult.ACCEPTED

    def _take_transactions(self) -> tuple[Transaction, ...]:
        out = []
        while self.pool and len(out) < MAX_TXS_PER_BLOCK:
            tx = self.pool.popleft()
            self._pooled.discard(tx)
            if tx not in self._history_txs:
                out.append(tx)
        return tuple(out)

    # -- block production --------------------------------------------------

    def _quorum_round(self) -> Optional[Round]:
        """Highest round >= current_round holding 2f+1 distinct authors."""
        quorum = self.committee.quorum()
        top = self.store.highest_round
        if self.max_round is not None:
            top = min(top, self.max_round - 1)
        for r in range(top, self.current_round - 1, -1):
            if self.store.round_authors(r) >= quorum:
                return r
        return None

    def _parents(self, prev: Round, own: Block) -> list[BlockRef]:
        refs = [own.ref] if own.round <= prev else []
        for author in self.committee.validators():
            if author == self.id and own.round == prev:
                continue
            blocks = self.store.slot_blocks(prev, author)
            if blocks:
                refs.append(blocks[0].ref)
        return refs

    def _make_block(self, round_: Round, own: Block, txs: tuple[Transaction, ...]) -> Block:
        parents = canonical_parent_order(self.id, self._parents(round_ - 1, own))
        share = make_share(self.id, round_, self.keys.coin_secret)
        unsigned = Block(self.id, round_, parents, txs, share)
        if self.wal is not None:
            # logged before signing so a restart can never sign a second block for this round
            self.wal.append(WalRecord(WalKind.OWN_PROPOSAL, encode_block(unsigned)))
        return unsigned.signed(crypto.sign(self.keys.signing_key, unsigned.digest))

    def _adopt_own(self, block: Block) -> None:
        if block.digest not in self.store.blocks:
            self.store.insert(block, VALID)
        self.proposed.append(block)
        if block.round > self.current_round:
            self.current_round = block.round
            self.last_block = block
        for b in self.store.causal_history(block, self._history):
            self._history.add(b.digest)
            self._history_txs.update(b.transactions)

    def _next_round(self, now: Optional[int]) -> Optional[Round]:
        r = self._quorum_round()
        if r is None or (self.max_round is not None and r + 1 > self.max_round):
            return None
        if self.min_block_interval and now is not None and self.last_proposal_time is not None \
                and now - self.last_proposal_time < self.min_block_interval:
            return None
        if self.round_patience and now is not None \
                and self.store.round_authors(r) < self.committee.n:
            if self._quorum_seen[0] != r:
                self._quorum_seen = (r, now)
            if now - self._quorum_seen[1] < self.round_patience:
                return None
        return r + 1

    def try_advance_round(self, now: Optional[int] = None) -> Optional[Block]:
        round_ = self._next_round(now)
        if round_ is None:
            return None
        block = self._make_block(round_, self.last_block, self._take_transactions())
        self._adopt_own(block)
        self.last_proposal_time = now
        return block

    def _advance(self, now: int, eff: Effects) -> None:
        block = self.try_advance_round(now)
        if block is not None:
            eff.outgoing.append((block, None))

    # -- ingress -----------------------------------------------------------

    def on_block_received(self, block: Block, sender: Optional[int] = None, now: int = 0) -> Effects:
        return self.handle([(block, sender)], now)

    def handle(self, deliveries: Iterable[tuple[Block, Optional[int]]], now: int) -> Effects:
        """Process a batch of received blocks, then commit, propose and fetch once."""
        eff = Effects()
        for block, sender in deliveries:
            self._receive(block, sender, eff)
        if eff.stored:
            self._commit(now, eff)
        self._advance(now, eff)
        self._sync(now, eff)
        return eff

    def tick(self, now: int) -> Effects:
        eff = Effects()
        self._advance(now, eff)
        self._sync(now, eff)
        return eff

    def _receive(self, block: Block, sender: Optional[int], eff: Effects) -> None:
        store = self.store
        if block.digest in store.blocks or block.digest in store.pending:
            # an author re-sending its latest block has just restarted
            if sender == block.author and block.round == store.latest_round.get(sender):
                self._hint(sender, block, eff, force=True)
            return
        validation = store.validate(block)
        if validation.verdict is Verdict.INVALID:
            log.debug("v%d rejects %r: %s", self.id, block, validation.reason.value)
            eff.rejected.append((block, validation.reason))
            return
        if self.wal is not None:
            self.wal.append(WalRecord(WalKind.RECEIVED_BLOCK, encode_block(block)))
        result = store.insert(block, validation)
        if result.status is InsertStatus.STORED:
            eff.stored.append(block)
            eff.stored.extend(result.promoted)
        elif result.status is InsertStatus.BUFFERED:
            eff.buffered.append(block)
            if sender is not None:
                for ref in validation.missing:
                    self._missing_hint.setdefault(ref.digest, sender)
        if sender is not None and sender == block.author:
            self._hint(sender, block, eff)

    def _hint(self, sender: int, block: Block, eff: Effects, force: bool = False) -> None:
        # a peer still working on an old round learns about our progress
        if sender == self.id or block.round >= self.current_round:
            return
        if force or self._hinted.get(sender, -1) < self.current_round:
            self._hinted[sender] = self.current_round
            eff.hints.append((sender, self.last_block))

    def _sync(self, now: int, eff: Effects) -> None:
        if not self.store.pending and not self.sync.wants:
            return
        missing = self.store.missing_ancestors()
        self.sync.update(missing, self._missing_hint, now)
        if not missing:
            self._missing_hint.clear()
        eff.requests.extend(self.sync.due(now))

    def next_wakeup(self) -> Optional[int]:
        due = self.sync.next_due()
        if self.min_block_interval and self.last_proposal_time is not None:
            t = self.last_proposal_time + self.min_block_interval
            due = t if due is None else min(due, t)
        if self.round_patience and self._quorum_seen[0] >= self.current_round:
            t = self._quorum_seen[1] + self.round_patience
            due = t if due is None else min(due, t)
        return due

    def on_fetch_request(self, refs: Iterable[BlockRef]) -> list[Block]:
        blocks = self.store.blocks
        return [blocks[r.digest] for r in refs if r.digest in blocks]

    def on_sync_request(self, refs: Iterable[BlockRef], requester: int) -> list[Block]:
        """Answer a peer's fetch with the requested blocks and every ancestor
        newer than the latest block we hold from that peer."""
        floor = self.store.latest_round.get(requester, 0)
        return self.store.catch_up(refs, floor)

    # -- commits -----------------------------------------------------------

    def _commit(self, now: int, eff: Effects) -> None:
        if self.committer is None:
            return
        self.committer.view.now = now
        blocks = self.committer.extend_commit_sequence()
        if not blocks:
            return
        for b in blocks:
            index = self.delivered
            self.delivered += 1
            if index < self._suppress_until:
                continue  # delivered before a crash
            eff.committed.append(b)
            if self.observer is not None:
                self.observer(self.id, b, now)
        if self.wal is not None:
            self.wal.append(WalRecord(WalKind.COMMIT_CHECKPOINT, _CHECKPOINT.pack(self.delivered)))

    def announce(self) -> Effects:
        """Re-broadcast our latest block, e.g. after a restart."""
        eff = Effects()
        if self.last_block.round > 0:
            eff.outgoing.append((self.last_block, None))
        return eff

    # -- recovery ----------------------------------------------------------

    @classmethod
    def recover(cls, wal: WriteAheadLog, keys: crypto.ValidatorKeys, committee: Committee,
                cfg: WaveConfig, *, now: int = 0, **kwargs) -> "Validator":
        """Rebuild state from ``wal``; raises WalCorruption on a damaged log."""
        records = replay_wal(wal)
        v = cls(keys, committee, cfg, wal=None, **kwargs)
        suppress = 0
        for rec in records:
            if rec.kind is WalKind.RECEIVED_BLOCK:
                block = decode_block(rec.body)
                if block.digest in v.store.blocks or block.digest in v.store.pending:
                    continue
                validation = v.store.validate(block)
                if validation.verdict is Verdict.INVALID:
                    log.warning("v%d: skipping invalid logged block %r", v.id, block)
                    continue
                v.store.insert(block, validation)
            elif rec.kind is WalKind.OWN_PROPOSAL:
                unsigned = decode_block(rec.body)
                block = unsigned.signed(crypto.sign(keys.signing_key, unsigned.digest))
                v._recover_own(block)
            else:
                (count,) = _CHECKPOINT.unpack(rec.body)
                suppress = max(suppress, count)
        v._suppress_until = suppress
        v.wal = wal
        eff = Effects()
        v._commit(now, eff)
        return v

    def _recover_own(self, block: Block) -> None:
        self._adopt_own(block)


class EquivocatorValidator(Validator):
    """Byzantine node that signs ``k`` conflicting blocks every round.

    Variant ``i`` carries its own transactions, builds on the variant ``i``
    of the previous round and is sent only to the ``i``-th group of peers.
    """

    def __init__(self, *args, k: int = 2, **kwargs) -> None:
        kwargs.setdefault("run_committer", False)
        super().__init__(*args, **kwargs)
        if k < 2:
            raise ValueError("an equivocator needs at least two variants")
        self.k = k
        others = [p for p in self.committee.validators() if p != self.id]
        self.groups = [tuple(p for j, p in enumerate(others) if j % k == i) for i in range(k)]
        self.variants: list[Block] = [self.last_block] * k

    def _advance(self, now: int, eff: Effects) -> None:
        round_ = self._next_round(now)
        if round_ is None:
            return
        base = self._take_transactions()
        made = []
        for i in range(self.k):
            tag = f"equivocation-v{self.id}-r{round_}-{i}".encode()
            made.append(self._make_block(round_, self.variants[i], base + (tag,)))
        for i, block in enumerate(made):
            self.store.insert(block, VALID)
            self.proposed.append(block)
            eff.outgoing.append((block, self.groups[i]))
        self.variants = made
        self.current_round = round_
        self.last_block = made[0]
        self.last_proposal_time = now

    def try_advance_round(self, now: Optional[int] = None) -> Optional[Block]:
        eff = Effects()
        self._advance(now or 0, eff)
        return eff.outgoing[0][0] if eff.outgoing else None

"""Leader-slot decisions and the commit sequence.

Every round starts a wave with ``leaders_per_round`` leader slots. A slot
is decided with the direct rule (certificates or non-votes in its own
wave) or, failing that, the indirect rule through the first later slot
that is not skipped (the anchor). Decided slots are emitted in ascending
order up to the first undecided one and each committed leader's new causal
history is linearized ahead of it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .coin import CoinError, combine, elect as coin_elect
from .dag import DagStore
from .types import (SKIP, UNDECIDED, Block, BlockRef, CoinValue, LeaderSlot, Round, SlotStatus,
                    ValidatorId, WaveConfig)

ElectFn = Callable[[CoinValue, int], ValidatorId]


class CoinUnavailable(Exception):
    """Fewer than 2f+1 certify-round blocks are stored."""


@dataclass(frozen=True)
class Decider:
    wave_length: int
    wave_offset: int
    leader_offset: int

    @classmethod
    def for_round(cls, cfg: WaveConfig, round_: Round, leader_offset: int) -> "Decider":
        return cls(cfg.wave_length, round_ % cfg.wave_length, leader_offset)

    def wave_number(self, round_: Round) -> int:
        return (round_ - self.wave_offset) // self.wave_length

    def propose_round(self, wave: int) -> Round:
        return wave * self.wave_length + self.wave_offset

    def certify_round(self, wave: int) -> Round:
        return wave * self.wave_length + self.wave_length - 1 + self.wave_offset

    def vote_round(self, wave: int) -> Round:
        return self.certify_round(wave) - 1


class HistoryCache:
    """Memo tables for facts that depend only on a block's causal history.

    Since a digest pins down the whole history, one cache can be shared by
    every validator of a simulation.
    """

    def __init__(self) -> None:
        self.voted: dict[tuple[bytes, int, int], Optional[bytes]] = {}
        self.certs: dict[tuple[bytes, bytes], bool] = {}
        self.coins: dict[int, CoinValue] = {}

    def voted_block(self, block: Block, author: ValidatorId, round_: Round,
                    blocks: dict[bytes, Block]) -> Optional[bytes]:
        key = (block.digest, author, round_)
        memo = self.voted
        if key in memo:
            return memo[key]
        found = None
        if round_ < block.round:
            for p in block.parents:
                if p.author == author and p.round == round_:
                    found = p.digest
                    break
                if p.round > round_:
                    found = self.voted_block(blocks[p.digest], author, round_, blocks)
                    if found is not None:
                        break
        memo[key] = found
        return found


class Rule(enum.Enum):
    DIRECT = "direct"
    INDIRECT = "indirect"


@dataclass(frozen=True)
class SlotDecision:
    slot: LeaderSlot
    status: SlotStatus
    rule: Optional[Rule] = None
    decided_round: Optional[Round] = None
    decided_at: Optional[int] = None
    anchor: Optional[Block] = None  # the later leader an indirect decision leaned on


class DecisionView:
    """A store plus the knobs the decision rules need."""

    def __init__(self, store: DagStore, cfg: WaveConfig, *, cache: Optional[HistoryCache] = None,
                 elect: Optional[ElectFn] = None) -> None:
        self.store = store
        self.cfg = cfg
        self.now = 0  # caller's clock, stamped on decisions
        self.undecided: dict[tuple[int, int], tuple] = {}
        self.committee = store.committee
        self.quorum = store.committee.quorum()
        self.cache = cache if cache is not None else HistoryCache()
        committee = self.committee
        self.elect = elect or (lambda value, offset: coin_elect(value, offset, committee))

    def coin(self, round_: Round) -> CoinValue:
        blocks = self.store.round_blocks(round_)
        if self.store.round_authors(round_) < self.quorum:
            raise CoinUnavailable(round_)
        value = self.cache.coins.get(round_)
        if value is None:
            try:
                value = combine((b.coin_share for b in blocks), self.committee)
            except CoinError as exc:
                raise CoinUnavailable(round_) from exc
            self.cache.coins[round_] = value
        return value

    def elected(self, decider: Decider, wave: int) -> ValidatorId:
        return self.elect(self.coin(decider.certify_round(wave)), decider.leader_offset)

    def leader_blocks(self, decider: Decider, wave: int) -> list[Block]:
        leader = self.elected(decider, wave)
        blocks = self.store.slot_blocks(decider.propose_round(wave), leader)
        return sorted(blocks, key=lambda b: b.digest)

    def is_vote(self, candidate: Block, leader: Block) -> bool:
        voted = self.cache.voted_block(candidate, leader.author, leader.round, self.store.blocks)
        return voted == leader.digest

    def is_cert(self, candidate: Block, leader: Block) -> bool:
        key = (candidate.digest, leader.digest)
        hit = self.cache.certs.get(key)
        if hit is None:
            blocks = self.store.blocks
            votes = 0
            for p in candidate.parents:
                if self.is_vote(blocks[p.digest], leader):
                    votes += 1
            hit = votes >= self.quorum
            self.cache.certs[key] = hit
        return hit


def _as_view(store, cfg: Optional[WaveConfig] = None) -> DecisionView:
    if isinstance(store, DecisionView):
        return store
    return DecisionView(store, cfg or WaveConfig())


def is_vote(candidate: Block, leader: Block, store, cache: Optional[HistoryCache] = None) -> bool:
    """True iff a parent-order DFS from ``candidate`` meets ``leader`` first
    among the blocks sharing its (author, round)."""
    if isinstance(store, DecisionView):
        return store.is_vote(candidate, leader)
    cache = cache or HistoryCache()
    return cache.voted_block(candidate, leader.author, leader.round, store.blocks) == leader.digest


def is_cert(candidate: Block, leader: Block, store, cache: Optional[HistoryCache] = None) -> bool:
    if isinstance(store, DecisionView):
        return store.is_cert(candidate, leader)
    cache = cache or HistoryCache()
    blocks = store.blocks
    votes = sum(1 for p in candidate.parents
                if cache.voted_block(blocks[p.digest], leader.author, leader.round, blocks)
                == leader.digest)
    return votes >= store.committee.quorum()


def leader_blocks(decider: Decider, wave: int, store, cfg: Optional[WaveConfig] = None) -> list[Block]:
    return _as_view(store, cfg).leader_blocks(decider, wave)


def _certificate_authors(view: DecisionView, leader: Block, certify_round: Round) -> int:
    return len({b.author for b in view.store.round_blocks(certify_round) if view.is_cert(b, leader)})


def _non_voter_authors(view: DecisionView, leader: Block, vote_round: Round) -> int:
    voters = set()
    authors = set()
    for b in view.store.round_blocks(vote_round):
        authors.add(b.author)
        if view.is_vote(b, leader):
            voters.add(b.author)
    return len(authors - voters)


def try_direct_decide(decider: Decider, wave: int, store, cfg: Optional[WaveConfig] = None) -> SlotStatus:
    """Commit a leader block holding 2f+1 certificates; skip the slot when
    every stored leader block (possibly none) has 2f+1 non-votes."""
    view = _as_view(store, cfg)
    try:
        leaders = view.leader_blocks(decider, wave)
    except CoinUnavailable:
        return UNDECIDED
    certify = decider.certify_round(wave)
    vote = decider.vote_round(wave)
    for b in leaders:
        if _certificate_authors(view, b, certify) >= view.quorum:
            return SlotStatus.commit(b)
    if view.store.round_authors(vote) < view.quorum:
        return UNDECIDED
    if all(_non_voter_authors(view, b, vote) >= view.quorum for b in leaders):
        return SKIP
    return UNDECIDED


def try_indirect_decide(decider: Decider, wave: int, later: Iterable, store,
                        cfg: Optional[WaveConfig] = None) -> SlotStatus:
    """``later`` holds the statuses of higher slots in ascending order, as
    :class:`SlotDecision` or ``(LeaderSlot, SlotStatus)`` pairs."""
    view = _as_view(store, cfg)
    certify = decider.certify_round(wave)
    anchor = _find_anchor(certify, later)
    if anchor is None or not anchor.is_commit:
        return UNDECIDED
    try:
        leaders = view.leader_blocks(decider, wave)
    except CoinUnavailable:
        return UNDECIDED
    store_ = view.store
    anchor_ref = anchor.block.ref
    for b in leaders:
        for cert in store_.round_blocks(certify):
            if view.is_cert(cert, b) and store_.exists_path(anchor_ref, cert.ref):
                return SlotStatus.commit(b)
    return SKIP


def _find_anchor(certify: Round, later: Iterable) -> Optional[SlotStatus]:
    for item in later:
        slot, status = (item.slot, item.status) if isinstance(item, SlotDecision) else item
        if slot.round > certify and not status.is_skip:
            return status
    return None


def _decide_slot(view: DecisionView, round_: Round, offset: int,
                 higher_desc: list[SlotDecision]) -> SlotDecision:
    store = view.store
    rounds = store._rounds
    certify = round_ + view.cfg.wave_length - 1
    if store.round_authors(certify) < view.quorum:
        return SlotDecision(LeaderSlot(round_, offset), UNDECIDED)  # no coin yet
    leaders_seen = len(rounds.get(round_, ()))
    certs_seen = len(rounds.get(certify, ()))
    # an undecided verdict holds until the rounds its rule reads gain blocks,
    # or, for the indirect rule, until the anchor changes
    direct_key = (leaders_seen, len(rounds.get(certify - 1, ())), certs_seen)
    key = (round_, offset)
    memo = view.undecided.get(key)
    if memo is not None and memo[0] == direct_key:
        anchor = _find_anchor(certify, reversed(higher_desc))
        if anchor is None or not anchor.is_commit:
            return memo[2]
        indirect_key = (anchor.block.digest, leaders_seen, certs_seen)
        if memo[1] == indirect_key:
            return memo[2]
    decider = Decider.for_round(view.cfg, round_, offset)
    wave = decider.wave_number(round_)
    slot = LeaderSlot(round_, offset, view.elected(decider, wave))
    if memo is None or memo[0] != direct_key:
        status = try_direct_decide(decider, wave, view)
        if status.is_decided:
            view.undecided.pop(key, None)
            return SlotDecision(slot, status, Rule.DIRECT, store.highest_round, view.now)
    rec = SlotDecision(slot, UNDECIDED)
    anchor = _find_anchor(certify, reversed(higher_desc))
    if anchor is None or not anchor.is_commit:
        view.undecided[key] = (direct_key, None, rec)
        return rec
    indirect_key = (anchor.block.digest, leaders_seen, certs_seen)
    status = try_indirect_decide(decider, wave, [(LeaderSlot(certify + 1, 0), anchor)], view)
    if status.is_decided:
        view.undecided.pop(key, None)
        return SlotDecision(slot, status, Rule.INDIRECT, store.highest_round, view.now,
                            anchor.block)
    rec = SlotDecision(slot, status)
    view.undecided[key] = (direct_key, indirect_key, rec)
    return rec


def _decide_range(view: DecisionView, first: tuple[int, int], highest: Round,
                  known: Optional[dict] = None) -> list[SlotDecision]:
    """Decide every slot from ``first`` up to ``highest``, newest first;
    returns them ascending. ``known`` caches decided slots across calls."""
    ell = view.cfg.leaders_per_round
    desc: list[SlotDecision] = []
    for r in range(highest, first[0] - 1, -1):
        for o in range(ell - 1, -1, -1):
            if (r, o) < first:
                continue
            rec = known.get((r, o)) if known is not None else None
            if rec is None:
                rec = _decide_slot(view, r, o, desc)
                if known is not None and rec.status.is_decided:
                    known[(r, o)] = rec
            desc.append(rec)
    desc.reverse()
    return desc


def try_decide(store, committed_round: Round, highest_round: Round, cfg: WaveConfig, *,
               cache: Optional[HistoryCache] = None,
               elect: Optional[ElectFn] = None) -> list[SlotDecision]:
    """Classify every slot in rounds (committed_round, highest_round]."""
    if committed_round > highest_round:
        raise ValueError("committed round above highest round")
    view = store if isinstance(store, DecisionView) else DecisionView(store, cfg, cache=cache,
                                                                       elect=elect)
    return _decide_range(view, (committed_round + 1, 0), highest_round)


def linearize_sub_dags(leaders: Iterable[Block], store: DagStore,
                       already_output: set[bytes]) -> list[Block]:
    """Append each leader's not-yet-output history, ascending by
    (round, author, digest); the leader lands last. ``already_output`` holds
    digests and is updated in place."""
    out: list[Block] = []
    for leader in leaders:
        new = store.causal_history(leader, already_output)
        new.sort(key=lambda b: (b.round, b.author, b.digest))
        already_output.update(b.digest for b in new)
        out.extend(new)
    return out


@dataclass
class DecisionSnapshot:
    statuses: list[SlotDecision]
    committed_prefix: list[BlockRef] = field(default_factory=list)


class Committer:
    """Incremental driver: remembers decided slots and what was output."""

    def __init__(self, store: DagStore, cfg: WaveConfig, *, cache: Optional[HistoryCache] = None,
                 elect: Optional[ElectFn] = None, start_round: Round = 1,
                 already_output: Iterable[bytes] = ()) -> None:
        self.store = store
        self.cfg = cfg
        self.view = DecisionView(store, cfg, cache=cache, elect=elect)
        self.next_slot = (start_round, 0)
        self.known: dict[tuple[int, int], SlotDecision] = {}
        self.output: set[bytes] = set(already_output)
        self.emitted: list[SlotDecision] = []
        self.committed_leaders: list[Block] = []
        self.delivered = 0
        self.sequence: list[BlockRef] = []

    @property
    def committed_round(self) -> Round:
        return self.next_slot[0] - 1

    def try_decide(self) -> list[SlotDecision]:
        highest = self.store.highest_round
        if highest < self.next_slot[0]:
            return []
        return _decide_range(self.view, self.next_slot, highest, self.known)

    def extend_commit_sequence(self) -> list[Block]:
        leaders = []
        ell = self.cfg.leaders_per_round
        for rec in self.try_decide():
            if not rec.status.is_decided:
                break
            self.emitted.append(rec)
            self.known.pop(rec.slot.key, None)
            r, o = rec.slot.key
            self.next_slot = (r, o + 1) if o + 1 < ell else (r + 1, 0)
            if rec.status.is_commit:
                leaders.append(rec.status.block)
        if not leaders:
            return []
        self.committed_leaders.extend(leaders)
        blocks = linearize_sub_dags(leaders, self.store, self.output)
        self.delivered += len(blocks)
        self.sequence.extend(b.ref for b in blocks)
        return blocks

    def snapshot(self) -> DecisionSnapshot:
        pending = self.try_decide()
        statuses = sorted(self.emitted + pending, key=lambda s: s.slot.key, reverse=True)
        return DecisionSnapshot(statuses, list(self.sequence))


def direct_commit_lower_bound(f: int, leaders: int, wave_length: int) -> float:
    """Lower bound on the chance that a wave directly commits some slot,
    under a random network."""
    n = 3 * f + 1
    if f < 0 or not 1 <= leaders <= n:
        raise ValueError(f"need 1 <= leaders <= {n}")
    if wave_length == 5:
        if leaders > f:
            return 1.0
        return 1.0 - math.comb(f, leaders) / math.comb(n, leaders)
    if wave_length == 4:
        if leaders == n:
            return 1.0
        return leaders / n
    raise ValueError("bound is only known for wave lengths 4 and 5")

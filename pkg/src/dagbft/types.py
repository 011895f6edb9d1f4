"""Domain types shared across the consensus engine.

Everything here is immutable once built. Blocks compute their digest at
construction from the canonical unsigned encoding (see :mod:`dagbft.wire`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional

ValidatorId = int
Round = int
Transaction = bytes

MAX_TX_BYTES = 1024
MAX_TXS_PER_BLOCK = 10_000


class BlockRef(NamedTuple):
    author: ValidatorId
    round: Round
    digest: bytes

    def short(self) -> str:
        return f"B(v{self.author},{self.round})#{self.digest[:4].hex()}"


def is_equivocation(a: BlockRef, b: BlockRef) -> bool:
    return a.author == b.author and a.round == b.round and a.digest != b.digest


@dataclass(frozen=True)
class Committee:
    """A static committee of ``n = 3f + 1`` validators.

    ``public_keys`` hold one verification key per validator index and
    ``coin_setup`` is whatever the coin scheme needs to check shares.
    """

    n: int
    public_keys: tuple[bytes, ...]
    coin_setup: Any = None
    f: int = field(init=False)

    def __post_init__(self) -> None:
        if self.n < 1 or (self.n - 1) % 3 != 0:
            raise ValueError(f"committee size must be 3f+1, got {self.n}")
        if len(self.public_keys) != self.n:
            raise ValueError("need exactly one public key per validator")
        object.__setattr__(self, "f", (self.n - 1) // 3)

    def quorum(self) -> int:
        return 2 * self.f + 1

    def validity_threshold(self) -> int:
        return self.f + 1

    def __contains__(self, author: object) -> bool:
        return isinstance(author, int) and 0 <= author < self.n

    def validators(self) -> range:
        return range(self.n)


def quorum(committee: Committee) -> int:
    return committee.quorum()


class CoinShare(NamedTuple):
    author: ValidatorId
    round: Round
    share_bytes: bytes


class CoinValue(NamedTuple):
    round: Round
    value: int


@dataclass(frozen=True, eq=False)
class Block:
    author: ValidatorId
    round: Round
    parents: tuple[BlockRef, ...]
    transactions: tuple[Transaction, ...]
    coin_share: CoinShare
    signature: bytes = b""
    digest: bytes = field(init=False, repr=False)
    ref: BlockRef = field(init=False, repr=False)

    def __post_init__(self) -> None:
        from .wire import block_digest

        object.__setattr__(self, "parents", tuple(
            p if type(p) is BlockRef else BlockRef(*p) for p in self.parents))
        object.__setattr__(self, "transactions", tuple(self.transactions))
        object.__setattr__(self, "coin_share", CoinShare(*self.coin_share))
        digest = block_digest(self)
        object.__setattr__(self, "digest", digest)
        object.__setattr__(self, "ref", BlockRef(self.author, self.round, digest))

    def __hash__(self) -> int:
        return hash(self.digest)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Block):
            return NotImplemented
        return self.digest == other.digest and self.signature == other.signature

    def signed(self, signature: bytes) -> "Block":
        return Block(self.author, self.round, self.parents, self.transactions,
                     self.coin_share, signature)

    def __repr__(self) -> str:
        return f"Block({self.ref.short()}, parents={len(self.parents)}, txs={len(self.transactions)})"


def canonical_parent_order(author: ValidatorId, parents) -> tuple[BlockRef, ...]:
    """Own most recent block first, then the rest by (author, digest)."""
    parents = [BlockRef(*p) for p in parents]
    own = [p for p in parents if p.author == author]
    head: list[BlockRef] = []
    if own:
        latest = max(own, key=lambda p: (p.round, p.digest))
        head = [latest]
        parents.remove(latest)
    return tuple(head + sorted(parents, key=lambda p: (p.author, p.digest)))


class Decision(enum.Enum):
    UNDECIDED = "undecided"
    COMMIT = "commit"
    SKIP = "skip"


@dataclass(frozen=True)
class SlotStatus:
    decision: Decision
    block: Optional[Block] = None

    @classmethod
    def commit(cls, block: Block) -> "SlotStatus":
        return cls(Decision.COMMIT, block)

    @property
    def is_decided(self) -> bool:
        return self.decision is not Decision.UNDECIDED

    @property
    def is_commit(self) -> bool:
        return self.decision is Decision.COMMIT

    @property
    def is_skip(self) -> bool:
        return self.decision is Decision.SKIP

    def __str__(self) -> str:
        if self.block is not None:
            return f"commit({self.block.ref.short()})"
        return self.decision.value


UNDECIDED = SlotStatus(Decision.UNDECIDED)
SKIP = SlotStatus(Decision.SKIP)


class LeaderSlot(NamedTuple):
    round: Round
    offset: int
    elected: Optional[ValidatorId] = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.round, self.offset)


class Role(enum.Enum):
    PROPOSE = "propose"
    BOOST = "boost"
    VOTE = "vote"
    CERTIFY = "certify"


@dataclass(frozen=True)
class WaveConfig:
    wave_length: int = 5
    leaders_per_round: int = 2

    def __post_init__(self) -> None:
        if self.wave_length < 3:
            raise ValueError("wave length must be at least 3")
        if self.leaders_per_round < 1:
            raise ValueError("need at least one leader per round")

    @property
    def liveness_safe(self) -> bool:
        # w = 3 keeps safety but loses the common-core liveness argument
        return self.wave_length >= 4

    def roles(self) -> list[Role]:
        boosts = [Role.BOOST] * (self.wave_length - 3)
        return [Role.PROPOSE, *boosts, Role.VOTE, Role.CERTIFY]

    def check_committee(self, committee: Committee) -> None:
        if self.leaders_per_round > committee.n:
            raise ValueError(
                f"{self.leaders_per_round} leaders per round exceeds committee size {committee.n}")

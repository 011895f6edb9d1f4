"""Global perfect coin: per-round shares and their combination.

This is a keyed-hash stand-in for a threshold signature scheme. Each
validator holds a share secret derived from the setup seed; a round's coin
value is a PRF of (global seed, round), so every valid quorum of shares
yields the same value. A real threshold backend would slot in behind the
same four functions.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable

from .types import CoinShare, CoinValue, Committee, Round, ValidatorId

SHARE_LEN = 16


class CoinError(Exception):
    pass


class InsufficientShares(CoinError):
    pass


class MixedRounds(CoinError):
    pass


class InvalidShareInSet(CoinError):
    pass


@dataclass(frozen=True)
class CoinSetup:
    seed: bytes
    n: int

    def share_secret(self, author: ValidatorId) -> bytes:
        return hashlib.blake2b(b"coin-share-key" + struct.pack(">I", author),
                               key=self.seed, digest_size=32).digest()


def make_share(author: ValidatorId, round_: Round, secret: bytes) -> CoinShare:
    mac = hashlib.blake2b(b"coin-share" + struct.pack(">Q", round_), key=secret,
                          digest_size=32).digest()
    return CoinShare(author, round_, mac[:SHARE_LEN])


def verify_share(share: CoinShare, setup: CoinSetup) -> bool:
    if not 0 <= share.author < setup.n:
        return False
    expected = make_share(share.author, share.round, setup.share_secret(share.author))
    return expected.share_bytes == share.share_bytes


def _coin_prf(setup: CoinSetup, round_: Round) -> int:
    out = hashlib.blake2b(b"coin-value" + struct.pack(">Q", round_), key=setup.seed,
                          digest_size=8).digest()
    return int.from_bytes(out, "big")


def combine(shares: Iterable[CoinShare], committee: Committee) -> CoinValue:
    setup: CoinSetup = committee.coin_setup
    by_author: dict[int, CoinShare] = {}
    rounds = set()
    for share in shares:
        if not verify_share(share, setup):
            raise InvalidShareInSet(f"share from v{share.author} for round {share.round}")
        rounds.add(share.round)
        by_author.setdefault(share.author, share)
    if len(rounds) > 1:
        raise MixedRounds(f"shares span rounds {sorted(rounds)}")
    if len(by_author) < committee.quorum():
        raise InsufficientShares(f"{len(by_author)} of {committee.quorum()} shares")
    (round_,) = rounds
    return CoinValue(round_, _coin_prf(setup, round_) % committee.n)


def elect(value: CoinValue, offset: int, committee: Committee) -> ValidatorId:
    return (value.value + offset) % committee.n

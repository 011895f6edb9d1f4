"""Shared test helpers: block builders, random DAGs and independent oracles.

The oracles here deliberately avoid the library's own traversal code so
that agreement means something.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from dagbft import crypto
from dagbft.coin import make_share
from dagbft.dag import DagStore, genesis_blocks
from dagbft.types import Block, BlockRef, Committee, canonical_parent_order


def make_block(keys: crypto.ValidatorKeys, round_: int, parents, txs=(), *,
               canonical: bool = True) -> Block:
    parents = [p.ref if isinstance(p, Block) else BlockRef(*p) for p in parents]
    if canonical:
        parents = canonical_parent_order(keys.id, parents)
    share = make_share(keys.id, round_, keys.coin_secret)
    unsigned = Block(keys.id, round_, tuple(parents), tuple(txs), share)
    return unsigned.signed(crypto.sign(keys.signing_key, unsigned.digest))


@dataclass
class RandomDag:
    committee: Committee
    keys: list
    genesis: list[Block]
    blocks: list[Block]  # rounds >= 1, in round order

    @property
    def all_blocks(self) -> list[Block]:
        return self.genesis + self.blocks

    def store(self, order=None) -> DagStore:
        s = DagStore(self.committee)
        s.add_genesis(self.genesis)
        for b in (order if order is not None else self.blocks):
            s.insert(b)
        return s


def random_dag(rng: random.Random, n: int, rounds: int, *, equivocation: float = 0.1,
               absent: float = 0.1, seed: int = 0, equivocators=None) -> RandomDag:
    """A valid DAG where each round keeps at least 2f+1 authors, some
    authors equivocate, and each block picks a random quorum-or-more of the
    previous round (one block per author). ``equivocators`` limits who may
    equivocate; by default anyone can."""
    committee, keys = crypto.generate_committee(n, seed=seed)
    q = committee.quorum()
    genesis = genesis_blocks(committee)
    prev: dict[int, list[Block]] = {g.author: [g] for g in genesis}
    blocks: list[Block] = []
    for r in range(1, rounds + 1):
        authors = [v for v in range(n) if rng.random() >= absent]
        if len(authors) < q:
            authors = sorted(rng.sample(range(n), q))
        cur: dict[int, list[Block]] = {}
        for v in authors:
            allowed = equivocators is None or v in equivocators
            copies = 2 if allowed and rng.random() < equivocation else 1
            for c in range(copies):
                size = rng.randint(q, len(prev))
                chosen = rng.sample(sorted(prev), size)
                if v in prev and v not in chosen and rng.random() < 0.8:
                    chosen[0] = v
                parents = [rng.choice(prev[a]) for a in chosen]
                b = make_block(keys[v], r, parents, (f"r{r}v{v}c{c}".encode(),))
                cur.setdefault(v, []).append(b)
                blocks.append(b)
        prev = cur
    return RandomDag(committee, keys, genesis, blocks)


# -- vote oracle --------------------------------------------------------------


def oracle_voted_block(blocks: dict[bytes, Block], start: Block, author: int, round_: int):
    """Walk every root-to-ancestor path from ``start`` in lexicographic
    parent order, without memo or visited set, and return the digest of
    the first (author, round_) block met."""
    if start.round <= round_:
        return None

    def paths(block):
        for p in block.parents:
            if p.round < round_:
                continue
            yield p
            if p.round > round_:
                yield from paths(blocks[p.digest])

    for ref in paths(start):
        if ref.author == author and ref.round == round_:
            return ref.digest
    return None


def oracle_is_vote(blocks, candidate: Block, leader: Block) -> bool:
    return oracle_voted_block(blocks, candidate, leader.author, leader.round) == leader.digest


def oracle_is_cert(blocks, candidate: Block, leader: Block, quorum: int) -> bool:
    votes = sum(1 for p in candidate.parents
                if oracle_is_vote(blocks, blocks[p.digest], leader))
    return votes >= quorum


# -- reachability oracle -------------------------------------------------------


def transitive_closure(blocks: list[Block]) -> tuple[dict[bytes, int], np.ndarray]:
    """Reflexive reachability matrix by repeated boolean squaring."""
    index = {b.digest: i for i, b in enumerate(blocks)}
    m = len(blocks)
    reach = np.eye(m, dtype=bool)
    for b in blocks:
        for p in b.parents:
            reach[index[b.digest], index[p.digest]] = True
    while True:
        nxt = reach | ((reach.astype(np.int64) @ reach.astype(np.int64)) > 0)
        if (nxt == reach).all():
            return index, reach
        reach = nxt

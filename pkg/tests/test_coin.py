import hashlib
import itertools
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagbft import crypto
from dagbft.coin import (InsufficientShares, InvalidShareInSet, MixedRounds, combine, elect,
                         make_share, verify_share)
from dagbft.types import CoinShare, CoinValue


@pytest.fixture(scope="module")
def committee4():
    return crypto.generate_committee(4, seed=11)


def test_share_round_trip_and_tamper(committee4):
    committee, keys = committee4
    s = make_share(0, 7, keys[0].coin_secret)
    assert verify_share(s, committee.coin_setup)
    tampered = CoinShare(0, 7, bytes([s.share_bytes[0] ^ 1]) + s.share_bytes[1:])
    assert not verify_share(tampered, committee.coin_setup)


def test_share_is_deterministic_and_matches_rederivation(committee4):
    committee, keys = committee4
    a = make_share(2, 9, keys[2].coin_secret)
    assert a == make_share(2, 9, keys[2].coin_secret)
    # independent re-derivation of the keyed-MAC share
    secret = hashlib.blake2b(b"coin-share-key" + struct.pack(">I", 2),
                             key=committee.coin_setup.seed, digest_size=32).digest()
    mac = hashlib.blake2b(b"coin-share" + struct.pack(">Q", 9), key=secret, digest_size=32).digest()
    assert a.share_bytes == mac[:len(a.share_bytes)]


def test_share_with_swapped_author_or_round_fails(committee4):
    committee, keys = committee4
    s = make_share(1, 4, keys[1].coin_secret)
    assert verify_share(s, committee.coin_setup)
    assert not verify_share(CoinShare(2, 4, s.share_bytes), committee.coin_setup)
    assert not verify_share(CoinShare(1, 5, s.share_bytes), committee.coin_setup)
    assert not verify_share(CoinShare(9, 4, s.share_bytes), committee.coin_setup)


def test_combine_errors(committee4):
    committee, keys = committee4
    shares = [make_share(v, 3, keys[v].coin_secret) for v in range(4)]
    with pytest.raises(InsufficientShares):
        combine(shares[:2], committee)
    with pytest.raises(InsufficientShares):
        combine([shares[0]] * 3, committee)  # duplicates do not count twice
    mixed = shares[:2] + [make_share(2, 4, keys[2].coin_secret)]
    with pytest.raises(MixedRounds):
        combine(mixed, committee)
    with pytest.raises(InvalidShareInSet):
        combine(shares[:2] + [CoinShare(2, 3, b"\x00" * 16)], committee)


def test_elect_examples(committee4):
    committee, _ = committee4
    assert elect(CoinValue(0, 2), 0, committee) == 2
    assert elect(CoinValue(0, 3), 1, committee) == 0
    assert {elect(CoinValue(0, 2), o, committee) for o in (0, 1)} == {2, 3}


@pytest.mark.parametrize("n", [1, 4, 7])
def test_subset_independence_exhaustive(n):
    committee, keys = crypto.generate_committee(n, seed=n)
    q = committee.quorum()
    for round_ in range(1, 8):
        shares = [make_share(v, round_, keys[v].coin_secret) for v in range(n)]
        values = {combine(sub, committee) for k in range(q, n + 1)
                  for sub in itertools.combinations(shares, k)}
        assert len(values) == 1
        (value,) = values
        assert value.round == round_ and 0 <= value.value < n


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([4, 7]), st.integers(1, 10_000), st.randoms(use_true_random=False))
def test_subset_independence_property(n, round_, rnd):
    committee, keys = crypto.generate_committee(n, seed=5)
    shares = [make_share(v, round_, keys[v].coin_secret) for v in range(n)]
    a = rnd.sample(shares, rnd.randint(committee.quorum(), n))
    b = rnd.sample(shares, rnd.randint(committee.quorum(), n))
    assert combine(a, committee) == combine(b, committee)


def test_coin_values_spread_over_validators():
    committee, keys = crypto.generate_committee(4, seed=0)
    counts = [0] * 4
    for r in range(1, 2001):
        shares = [make_share(v, r, keys[v].coin_secret) for v in range(3)]
        counts[combine(shares, committee).value] += 1
    assert min(counts) > 400  # roughly uniform over 2000 rounds

"""Key material for a simulated committee.

Signatures are keyed BLAKE2b MACs where the verification key equals the
signing key. That is enough for the harness (it only needs forgery to be
detectable by honest code) and keeps verification cheap.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass

from .coin import CoinSetup
from .types import Committee, ValidatorId

SIG_LEN = 32


def sign(key: bytes, digest: bytes) -> bytes:
    return hashlib.blake2b(digest, key=key, digest_size=SIG_LEN).digest()


def verify(public_key: bytes, digest: bytes, signature: bytes) -> bool:
    return hmac.compare_digest(sign(public_key, digest), signature)


@dataclass(frozen=True)
class ValidatorKeys:
    id: ValidatorId
    signing_key: bytes
    coin_secret: bytes


def generate_committee(n: int, seed: int = 0) -> tuple[Committee, list[ValidatorKeys]]:
    master = hashlib.blake2b(b"committee" + struct.pack(">QI", seed, n)).digest()
    signing = [
        hashlib.blake2b(b"sign" + struct.pack(">I", i), key=master, digest_size=32).digest()
        for i in range(n)
    ]
    setup = CoinSetup(seed=hashlib.blake2b(b"coin", key=master, digest_size=32).digest(), n=n)
    committee = Committee(n=n, public_keys=tuple(signing), coin_setup=setup)
    keys = [ValidatorKeys(i, signing[i], setup.share_secret(i)) for i in range(n)]
    return committee, keys

"""Ed25519 detached signatures keyed by raw 32-byte public ids."""
from __future__ import annotations

import hashlib
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

SIGNATURE_SIZE = 64


class KeyPair:
    """A signing key together with its public id.

    Ed25519 signatures are deterministic, so re-signing the same message
    yields identical bytes; replays are therefore byte-identical, which
    the channel layer relies on to tell duplicates from equivocation.
    """

    __slots__ = ("_sk", "public_id", "_cache")

    def __init__(self, sk: Ed25519PrivateKey):
        self._sk = sk
        self.public_id: bytes = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        self._cache: dict[bytes, bytes] = {}

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        return cls(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest()))

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(Ed25519PrivateKey.generate())

    @property
    def secret(self) -> Ed25519PrivateKey:
        return self._sk

    def sign(self, message: bytes) -> bytes:
        sig = self._cache.get(message)
        if sig is None:
            sig = self._sk.sign(message)
            if len(self._cache) > 100_000:
                self._cache.clear()
            self._cache[message] = sig
        return sig

    def __repr__(self) -> str:
        return f"KeyPair({self.public_id[:4].hex()}…)"


def sign(secret: KeyPair, message: bytes) -> bytes:
    return secret.sign(message)


@lru_cache(maxsize=4096)
def _public_key(public_id: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_id)


@lru_cache(maxsize=1 << 18)
def verify(public_id: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid signature of ``message`` under ``public_id``.

    Malformed keys or signatures give False rather than raising.
    """
    if len(signature) != SIGNATURE_SIZE or len(public_id) != 32:
        return False
    try:
        _public_key(public_id).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True

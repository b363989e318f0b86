"""Canonical byte encoding, hashing and the cumulative sequence hash.

Every digest and signature in the package is computed over the output of
:func:`encode`, so the rules below are normative:

* integers: 8-byte big-endian two's complement (``0`` is eight zero bytes)
* byte strings: 4-byte big-endian length prefix followed by the bytes
* ``str``: UTF-8, then encoded as a byte string
* sequences: 4-byte big-endian count followed by the encoded elements
* ``Optional[T]``: a sequence of zero or one element
* dataclasses: their fields in declaration order, no separators
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import struct
import types
import typing
from functools import lru_cache
from typing import Any, Callable, Iterable

from Crypto.Hash import RIPEMD160

Digest = bytes

_INT = struct.Struct(">q")
_LEN = struct.Struct(">I")
_INT_MIN, _INT_MAX = -(1 << 63), (1 << 63) - 1

HASHES: dict[str, tuple[int, Callable[[bytes], bytes]]] = {
    "ripemd160": (20, lambda data: RIPEMD160.new(data).digest()),
    "sha256": (32, lambda data: hashlib.sha256(data).digest()),
}

_active = "ripemd160"


class DecodeError(ValueError):
    """Raised when bytes are not a valid canonical encoding of the requested type."""


def set_hash(name: str) -> None:
    global _active
    if name not in HASHES:
        raise ValueError(f"unknown hash {name!r}; choose from {sorted(HASHES)}")
    _active = name


def hash_name() -> str:
    return _active


def digest_size() -> int:
    return HASHES[_active][0]


def zero_digest() -> Digest:
    return bytes(digest_size())


def H(data: bytes) -> Digest:
    return HASHES[_active][1](data)


def chain_hash(prev: Digest, value: bytes) -> Digest:
    return H(prev + value)


def chain_fold(values: Iterable[bytes], start: Digest | None = None) -> Digest:
    h = zero_digest() if start is None else start
    for v in values:
        h = chain_hash(h, v)
    return h


# -- encoding ---------------------------------------------------------------

def encode_int(n: int) -> bytes:
    if not _INT_MIN <= n <= _INT_MAX:
        raise OverflowError(f"integer {n} outside the 64-bit encodable range")
    return _INT.pack(n)


def encode_bytes(b: bytes) -> bytes:
    return _LEN.pack(len(b)) + b


@lru_cache(maxsize=None)
def _fields(cls: type) -> tuple[dataclasses.Field, ...]:
    return tuple(f for f in dataclasses.fields(cls) if f.metadata.get("encode", True))


@lru_cache(maxsize=None)
def _plan(cls: type) -> tuple[tuple[str, bool], ...]:
    """(field name, is Optional) for every encoded field, resolved once per class."""
    hints = _hints(cls)
    return tuple((f.name, typing.get_origin(hints[f.name]) in (typing.Union, types.UnionType))
                 for f in _fields(cls))


def _encode_dataclass(value: Any) -> bytes:
    parts = []
    for name, optional in _plan(type(value)):
        v = getattr(value, name)
        if optional:
            parts.append(_LEN.pack(0) if v is None else _LEN.pack(1) + encode(v))
        else:
            parts.append(encode(v))
    return b"".join(parts)


def encode(value: Any) -> bytes:
    """Return the canonical encoding of ``value``.

    Frozen dataclass instances memoise their encoding; transactions and
    messages are re-hashed many times on their way through the system.
    """
    t = type(value)
    if t is int or t is bool or isinstance(value, int):
        return encode_int(int(value))
    if t is bytes:
        return _LEN.pack(len(value)) + value
    if hasattr(t, "__dataclass_fields__"):
        cached = value.__dict__.get("_enc")
        if cached is not None:
            return cached
        out = _encode_dataclass(value)
        if t.__dataclass_params__.frozen:
            object.__setattr__(value, "_enc", out)
        return out
    if isinstance(value, (bytes, bytearray)):
        return encode_bytes(bytes(value))
    if isinstance(value, str):
        return encode_bytes(value.encode("utf-8"))
    if isinstance(value, (list, tuple)):
        return _LEN.pack(len(value)) + b"".join(encode(v) for v in value)
    raise TypeError(f"no canonical encoding for {type(value).__name__}")


@lru_cache(maxsize=None)
def _hints(cls: type) -> dict[str, Any]:
    return typing.get_type_hints(cls)


# -- decoding ---------------------------------------------------------------

class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError("truncated input")
        out = self.buf[self.pos:end]
        self.pos = end
        return out


def _decode(tp: Any, r: _Reader) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        (n,) = _LEN.unpack(r.take(4))
        if n == 0:
            return None
        if n != 1:
            raise DecodeError("optional with more than one element")
        return _decode(args[0], r)
    if origin in (tuple, list):
        args = typing.get_args(tp)
        (n,) = _LEN.unpack(r.take(4))
        if n > len(r.buf):
            raise DecodeError("implausible element count")
        items = [_decode(args[0], r) for _ in range(n)]
        return tuple(items) if origin is tuple else items
    if isinstance(tp, type):
        if dataclasses.is_dataclass(tp):
            hints = _hints(tp)
            kwargs = {f.name: _decode(hints[f.name], r) for f in _fields(tp)}
            return tp(**kwargs)
        if issubclass(tp, enum.IntEnum):
            (n,) = _INT.unpack(r.take(8))
            try:
                return tp(n)
            except ValueError:
                raise DecodeError(f"{n} is not a valid {tp.__name__}") from None
        if tp is bool:
            (n,) = _INT.unpack(r.take(8))
            if n not in (0, 1):
                raise DecodeError("bad boolean")
            return bool(n)
        if tp is int:
            return _INT.unpack(r.take(8))[0]
        if tp is bytes:
            (n,) = _LEN.unpack(r.take(4))
            return r.take(n)
        if tp is str:
            (n,) = _LEN.unpack(r.take(4))
            try:
                return r.take(n).decode("utf-8")
            except UnicodeDecodeError:
                raise DecodeError("invalid utf-8") from None
    raise TypeError(f"cannot decode type {tp!r}")


def decode(tp: Any, data: bytes) -> Any:
    """Inverse of :func:`encode`; rejects trailing bytes."""
    r = _Reader(bytes(data))
    try:
        value = _decode(tp, r)
    except (struct.error, TypeError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(str(exc)) from exc
    if r.pos != len(r.buf):
        raise DecodeError("trailing bytes")
    return value


# -- tagged blobs -----------------------------------------------------------
# Wire frames and proof evidence are ``tag byte || encode(obj)``.

_TAGS: dict[int, type] = {}
_TAG_OF: dict[type, int] = {}


def register(tag: int) -> Callable[[type], type]:
    def deco(cls: type) -> type:
        if tag in _TAGS and _TAGS[tag] is not cls:
            raise ValueError(f"tag {tag:#x} already taken by {_TAGS[tag].__name__}")
        _TAGS[tag] = cls
        _TAG_OF[cls] = tag
        return cls
    return deco


def tag_of(cls: type) -> int:
    return _TAG_OF[cls]


def pack(obj: Any) -> bytes:
    return bytes([_TAG_OF[type(obj)]]) + encode(obj)


@lru_cache(maxsize=65536)
def unpack(blob: bytes) -> Any:
    if not blob:
        raise DecodeError("empty blob")
    cls = _TAGS.get(blob[0])
    if cls is None:
        raise DecodeError(f"unknown tag {blob[0]:#x}")
    return decode(cls, blob[1:])


def signing_bytes(obj: Any) -> bytes:
    """Bytes covered by ``obj.signature``: its tag and encoding with the signature blanked."""
    cached = obj.__dict__.get("_sb")
    if cached is not None and cached[0] == obj.signature:
        return cached[1]
    out = bytes([_TAG_OF[type(obj)]]) + encode(dataclasses.replace(obj, signature=b""))
    if type(obj).__dataclass_params__.frozen:
        object.__setattr__(obj, "_sb", (obj.signature, out))
    return out

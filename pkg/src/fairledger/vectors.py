"""Golden vectors: byte-exact reference outputs other implementations can check against.

Each file is newline-delimited ``hex(input) SP hex(output)``, except the
frame and PRNG files whose first column is a label.
"""
from __future__ import annotations

from pathlib import Path

from . import codec
from .crypto import KeyPair
from .owac import Confirmation, OwacMessage, make_conn_id, signed
from .proposal import permute, prng_next


def _chain_inputs() -> list[tuple[bytes, bytes]]:
    z = codec.zero_digest()
    values = [b"", b"\x00", b"a", b"abc", bytes(range(64)), b"\xff" * 100]
    out = [(z, v) for v in values]
    prev = z
    for n in range(8):
        v = codec.encode_int(n)
        out.append((prev, v))
        prev = codec.chain_hash(prev, v)
    return out


def chain_hash_lines(hash_name: str) -> str:
    old = codec.hash_name()
    codec.set_hash(hash_name)
    try:
        return "".join(f"{(p + v).hex()} {codec.chain_hash(p, v).hex()}\n" for p, v in _chain_inputs())
    finally:
        codec.set_hash(old)


def codec_lines() -> str:
    samples = [
        ("int", 0), ("int", 1), ("int", -1), ("int", (1 << 63) - 1), ("int", -(1 << 63)),
        ("bytes", b""), ("bytes", b"fair"), ("list", [1, 2, 3]), ("list", [b"a", b"bc"]),
    ]
    return "".join(f"{repr(v).encode().hex()} {codec.encode(v).hex()}\n" for _, v in samples)


def frame_lines(hash_name: str = "ripemd160") -> str:
    old = codec.hash_name()
    codec.set_hash(hash_name)
    try:
        a = KeyPair.from_seed(b"vector:sender")
        b = KeyPair.from_seed(b"vector:receiver")
        conn = make_conn_id(a.public_id, b.public_id)
        lines = [f"sender_id {a.public_id.hex()}", f"receiver_id {b.public_id.hex()}", f"conn_id {conn.hex()}"]
        h = codec.zero_digest()
        for i, v in enumerate([b"tx-0", b"tx-1", b"tx-2"]):
            m = signed(OwacMessage(conn, i, v, -1), a)
            h = codec.chain_hash(h, v)
            lines.append(f"message_{i} {codec.pack(m).hex()}")
        c = signed(Confirmation(conn, 2, h, b"summary"), b)
        lines.append(f"confirmation_2 {codec.pack(c).hex()}")
        return "\n".join(lines) + "\n"
    finally:
        codec.set_hash(old)


def prng_lines() -> str:
    lines = []
    for seed in (1, 2, 0xDEADBEEF, (1 << 64) - 1):
        s, vals = seed, []
        for _ in range(4):
            s, v = prng_next(s)
            vals.append(f"{v:016x}")
        lines.append(f"xorshift64_{seed:016x} {''.join(vals)}")
    for seed in (1, 12345):
        lines.append(f"permute8_{seed:016x} {bytes(permute(list(range(8)), seed)).hex()}")
    return "\n".join(lines) + "\n"


def generate() -> dict[str, str]:
    return {
        "chain_hash_ripemd160.txt": chain_hash_lines("ripemd160"),
        "chain_hash_sha256.txt": chain_hash_lines("sha256"),
        "codec.txt": codec_lines(),
        "owac_frames.txt": frame_lines(),
        "xorshift.txt": prng_lines(),
    }


def write(out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in generate().items():
        p = out / name
        p.write_text(text)
        paths.append(p)
    return paths

import dataclasses
import itertools
import math
import random
from collections import Counter

import pytest

from fairledger import codec
from fairledger.crypto import KeyPair
from fairledger.ledger import Reason
from fairledger.outqueue import MerkleQueue
from fairledger.proposal import (MASK64, ZERO_SEED_SUBSTITUTE, ProposalError, SelectionPolicy, build_proposal,
                                 canonical_order, derive_seed, genesis_hash, make_block, permute, prng_next,
                                 select_prefix, tx_size, verify_proposal)

PREV = codec.H(b"previous block")


def _queue(txs):
    q = MerkleQueue()
    for tx in txs:
        q.enqueue(tx)
    return q


def _independent(send, n):
    return [send(i % 6, 1, i // 6, to=(i + 1) % 6) for i in range(n)]


# -- xorshift ---------------------------------------------------------------------

def test_xorshift_first_step_from_one():
    assert prng_next(1) == (0x40822041, 0x40822041)


def test_xorshift_matches_oracle():
    def step(x):
        x ^= (x << 13) & MASK64
        x ^= x >> 7
        return x ^ ((x << 17) & MASK64)

    s = 0xDEADBEEF
    for _ in range(1000):
        want = step(s)
        s, v = prng_next(s)
        assert s == v == want


def test_xorshift_rejects_zero_state():
    with pytest.raises(ValueError):
        prng_next(0)


def test_xorshift_does_not_cycle_early():
    s = start = 12345
    seen = set()
    for _ in range(1_000_000):
        s, _ = prng_next(s)
        assert s != start and s != 0
        seen.add(s)
    assert len(seen) == 1_000_000


# -- seed and permutation ---------------------------------------------------------

def test_derive_seed_matches_oracle():
    rng = random.Random(4)
    for _ in range(100):
        a, b = rng.randbytes(20), rng.randbytes(64)
        x = bytes(p ^ q for p, q in zip(a, b)) + bytes(4)
        want = 0
        for w in (x[0:8], x[8:16], x[16:24]):
            want ^= int.from_bytes(w, "big")
        assert derive_seed(a, b) == (want or ZERO_SEED_SUBSTITUTE)


def test_zero_seed_substituted():
    assert derive_seed(bytes(20), bytes(64)) == ZERO_SEED_SUBSTITUTE
    h = bytes(range(20))
    assert derive_seed(h, h) == ZERO_SEED_SUBSTITUTE


def test_permute_is_a_permutation_and_deterministic():
    items = list(range(50))
    p = permute(items, 99)
    assert sorted(p) == items and p == permute(items, 99) and p != permute(items, 100)
    assert permute([], 5) == [] and permute(["a"], 5) == ["a"]


def test_permute_is_uniform_over_four_items():
    rng = random.Random(0)
    trials = 24 * 10_000
    counts = Counter(tuple(permute("abcd", rng.getrandbits(64) | 1)) for _ in range(trials))
    assert set(counts) == {tuple(p) for p in itertools.permutations("abcd")}
    mean = trials / 24
    sd = math.sqrt(trials * (1 / 24) * (23 / 24))
    assert all(abs(c - mean) < 5 * sd for c in counts.values())


def test_canonical_order_ignores_arrival(send):
    txs = _independent(send, 8)
    assert canonical_order(txs) == canonical_order(list(reversed(txs)))


# -- selection ---------------------------------------------------------------------

def test_policy_parse():
    assert SelectionPolicy.parse("fixed:3") == SelectionPolicy("fixed", 3)
    assert str(SelectionPolicy.parse("bytes:900")) == "bytes:900"
    for bad in ("fixed", "size:3", "bytes:-1", "fixed:x"):
        with pytest.raises(ValueError):
            SelectionPolicy.parse(bad)


def test_fixed_selection(send):
    txs = _independent(send, 5)
    snap = _queue(txs).snapshot()
    assert select_prefix(snap, SelectionPolicy("fixed", 3)) == (txs[:3], 3)
    assert select_prefix(snap, SelectionPolicy("fixed", 9)) == (txs, 5)


def test_byte_selection_against_oracle(send):
    txs = _independent(send, 10)
    snap = _queue(txs).snapshot()
    sizes = [tx_size(t) for t in txs]
    assert select_prefix(snap, SelectionPolicy("bytes", 0)) == ([], 0)
    for limit in range(0, sum(sizes) + 10, 37):
        k = 0
        while k < len(txs) and sum(sizes[:k + 1]) <= limit:
            k += 1
        assert select_prefix(snap, SelectionPolicy("bytes", limit)) == (txs[:k], k)


# -- ordering ------------------------------------------------------------------------

def test_dependent_chain_processed_in_nonce_order(send, keys, genesis):
    chain = [send(0, 1, n, to=1) for n in range(5)]
    p = build_proposal(_queue(reversed(chain)).snapshot(), SelectionPolicy("fixed", 10), PREV, genesis)
    assert list(p.processed) == chain and p.rejected == ()


def test_gap_in_nonces_is_rejected(send, genesis):
    txs = [send(0, 1, n, to=1) for n in (0, 1, 2, 3, 5)]
    p = build_proposal(_queue(txs).snapshot(), SelectionPolicy("fixed", 10), PREV, genesis)
    assert list(p.processed) == txs[:4]
    assert [(r.tx, r.reason) for r in p.rejected] == [(txs[4], Reason.BadNonce)]


def test_ordering_depends_on_previous_block(send, genesis):
    snap = _queue(_independent(send, 12)).snapshot()
    pol = SelectionPolicy("fixed", 12)
    a = build_proposal(snap, pol, PREV, genesis).processed
    b = build_proposal(snap, pol, codec.H(b"another"), genesis).processed
    assert sorted(a, key=lambda t: t.tx_id) == sorted(b, key=lambda t: t.tx_id) and a != b


# -- verification ------------------------------------------------------------------

@pytest.fixture
def honest(send, genesis):
    txs = _independent(send, 6)
    q = _queue(txs)
    pol = SelectionPolicy("fixed", 4)
    return q, pol, build_proposal(q.snapshot(), pol, PREV, genesis)


def test_honest_proposal_verifies(honest, genesis):
    q, pol, p = honest
    assert verify_proposal(p, PREV, q.root, pol, genesis) is None


def test_swapped_order_is_bad_ordering(honest, genesis):
    q, pol, p = honest
    swapped = dataclasses.replace(p, processed=(p.processed[1], p.processed[0]) + p.processed[2:])
    assert verify_proposal(swapped, PREV, q.root, pol, genesis) == ProposalError.BadOrdering


def test_wrong_root_is_bad_root(honest, genesis):
    q, pol, p = honest
    assert verify_proposal(p, PREV, codec.H(b"nope"), pol, genesis) == ProposalError.BadRoot


def test_gapped_selection_is_bad_prefix(send, genesis):
    txs = _independent(send, 6)
    q = _queue(txs)
    chosen = [txs[0], txs[1], txs[3]]
    pt = q.snapshot().disclose_positions({0, 1, 3})
    p = dataclasses.replace(build_proposal(q.snapshot(), SelectionPolicy("fixed", 3), PREV, genesis),
                            processed=tuple(chosen), disclosure=pt)
    assert verify_proposal(p, PREV, q.root, SelectionPolicy("fixed", 3), genesis) == ProposalError.BadPrefix


def test_short_fixed_selection_is_bad_size(send, genesis):
    q = _queue(_independent(send, 6))
    short = build_proposal(q.snapshot(), SelectionPolicy("fixed", 2), PREV, genesis)
    assert verify_proposal(short, PREV, q.root, SelectionPolicy("fixed", 3), genesis) == \
        ProposalError.BadSelectionSize


def test_byte_policy_discloses_a_witness_leaf(send, genesis):
    txs = _independent(send, 5)
    q = _queue(txs)
    pol = SelectionPolicy("bytes", tx_size(txs[0]) + tx_size(txs[1]))
    p = build_proposal(q.snapshot(), pol, PREV, genesis)
    assert len(p.processed) == 2 and len(p.disclosure.leaves()) == 3
    assert verify_proposal(p, PREV, q.root, pol, genesis) is None
    no_witness = dataclasses.replace(p, disclosure=q.disclose_prefix(2))
    assert verify_proposal(no_witness, PREV, q.root, pol, genesis) == ProposalError.BadSelectionSize
    empty = build_proposal(q.snapshot(), SelectionPolicy("bytes", 0), PREV, genesis)
    assert empty.processed == () and verify_proposal(empty, PREV, q.root, SelectionPolicy("bytes", 0), genesis) is None


def test_block_round_trip(honest, genesis):
    q, pol, p = honest
    key = KeyPair.from_seed(b"proposer")
    b = make_block(p, 1, genesis_hash(), key)
    assert b.verifies()
    assert codec.unpack(codec.pack(b)) == b
    back = b.to_proposal()
    assert back == p
    assert verify_proposal(back, PREV, q.root, pol, genesis) is None
    assert not dataclasses.replace(b, height=2).verifies()
    h = b.hash
    codec.set_hash("sha256")
    assert b.hash != h and len(b.hash) == 32

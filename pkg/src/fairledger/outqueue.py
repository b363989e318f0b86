"""Authenticated outgoing queue.

The queue is a Merkle AVL+ tree keyed by queue position: transactions live
in the leaves, inner nodes only route and hash. Nodes are immutable, so a
snapshot is just a reference to a root and summaries, membership proofs
and prefix disclosures are always taken against a consistent point in time.

Hashing is domain separated::

    leaf  = H(0x00 || encode(position) || encode(tx))
    inner = H(0x01 || left || right)

and the empty queue's root is the zero digest.

A :class:`PartialTree` lists the disclosed leaves and pruned subtree
digests left to right, each tagged with its depth. The depth sequence of
the leaves of a full binary tree determines its shape, so the verifier can
rebuild the root without any inner-node records.
"""
from __future__ import annotations

import bisect
import dataclasses
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Callable, Container, Iterator, Optional, Sequence, Union

from . import codec
from .codec import Digest, register
from .crypto import KeyPair, verify
from .ledger import Transaction


class Absent(KeyError):
    """No transaction at the requested queue position."""


def leaf_digest(position: int, tx: Transaction) -> Digest:
    return _node_digest(codec.hash_name(), b"\x00" + codec.encode_int(position) + codec.encode(tx))


def inner_digest(left: Digest, right: Digest) -> Digest:
    return _node_digest(codec.hash_name(), b"\x01" + left + right)


# The same subtrees are rehashed by every proof and audit that touches them;
# the hash name is part of the key so switching hashes never reuses a digest.
@lru_cache(maxsize=1 << 16)
def _node_digest(hash_name: str, data: bytes) -> Digest:
    return codec.H(data)


class _Leaf:
    __slots__ = ("key", "tx", "hash")
    height = 1
    size = 1

    def __init__(self, key: int, tx: Transaction):
        self.key = key
        self.tx = tx
        self.hash = leaf_digest(key, tx)

    @property
    def min_key(self) -> int:
        return self.key


class _Inner:
    __slots__ = ("left", "right", "height", "size", "min_key", "split", "hash")

    def __init__(self, left: "_Node", right: "_Node"):
        self.left = left
        self.right = right
        self.height = 1 + max(left.height, right.height)
        self.size = left.size + right.size
        self.min_key = left.min_key
        self.split = right.min_key
        self.hash = inner_digest(left.hash, right.hash)


_Node = Union[_Leaf, _Inner]


def _rot_right(n: _Inner) -> _Inner:
    l = n.left
    return _Inner(l.left, _Inner(l.right, n.right))


def _rot_left(n: _Inner) -> _Inner:
    r = n.right
    return _Inner(_Inner(n.left, r.left), r.right)


def _balanced(left: _Node, right: _Node) -> _Inner:
    n = _Inner(left, right)
    bf = left.height - right.height
    if bf > 1:
        if left.left.height < left.right.height:
            n = _Inner(_rot_left(left), right)
        return _rot_right(n)
    if bf < -1:
        if right.right.height < right.left.height:
            n = _Inner(left, _rot_right(right))
        return _rot_left(n)
    return n


def _insert(n: Optional[_Node], key: int, tx: Transaction) -> _Node:
    if n is None:
        return _Leaf(key, tx)
    if isinstance(n, _Leaf):
        if key == n.key:
            return _Leaf(key, tx)
        return _Inner(_Leaf(key, tx), n) if key < n.key else _Inner(n, _Leaf(key, tx))
    if key < n.split:
        return _balanced(_insert(n.left, key, tx), n.right)
    return _balanced(n.left, _insert(n.right, key, tx))


def _delete(n: _Node, key: int) -> Optional[_Node]:
    if isinstance(n, _Leaf):
        if n.key != key:
            raise Absent(key)
        return None
    if key < n.split:
        left = _delete(n.left, key)
        return n.right if left is None else _balanced(left, n.right)
    right = _delete(n.right, key)
    return n.left if right is None else _balanced(n.left, right)


def _walk(n: Optional[_Node]) -> Iterator[_Leaf]:
    stack: list[_Node] = []
    while stack or n is not None:
        if n is not None:
            if isinstance(n, _Leaf):
                yield n
                n = None
            else:
                stack.append(n.right)
                n = n.left
        else:
            n = stack.pop()


# -- wire types -------------------------------------------------------------

@register(0x03)
@dataclass(frozen=True)
class QueueSummary:
    root: Digest
    block_height: int
    block_hash: Digest
    summary_seq: int
    node_id: bytes
    signature: bytes = b""

    def verifies(self) -> bool:
        return verify(self.node_id, codec.signing_bytes(self), self.signature)


@dataclass(frozen=True)
class PathStep:
    sibling_on_left: bool
    digest: Digest


@dataclass(frozen=True)
class MembershipProof:
    position: int
    tx: Transaction
    path: tuple[PathStep, ...]


class EntryKind(IntEnum):
    LEAF = 0
    LEAF_REF = 1
    PRUNED = 2


@dataclass(frozen=True)
class PTEntry:
    depth: int
    kind: EntryKind
    position: int = 0
    tx: Optional[Transaction] = None
    block_index: int = 0
    digest: bytes = b""


@register(0x04)
@dataclass(frozen=True)
class PartialTree:
    entries: tuple[PTEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def leaves(self) -> list[PTEntry]:
        return [e for e in self.entries if e.kind != EntryKind.PRUNED]

    def with_block_indexes(self, index_of: Callable[[Transaction], Optional[int]]) -> "PartialTree":
        """Swap disclosed transactions for their index in a block where one exists."""
        out = []
        for e in self.entries:
            idx = index_of(e.tx) if e.kind == EntryKind.LEAF else None
            if idx is not None:
                e = PTEntry(e.depth, EntryKind.LEAF_REF, e.position, block_index=idx)
            out.append(e)
        return PartialTree(tuple(out))

    def resolved(self, block_txs: Sequence[Transaction]) -> Optional["PartialTree"]:
        out = []
        for e in self.entries:
            if e.kind == EntryKind.LEAF_REF:
                if not 0 <= e.block_index < len(block_txs) or e.tx is not None or e.digest:
                    return None
                e = PTEntry(e.depth, EntryKind.LEAF, e.position, tx=block_txs[e.block_index])
            out.append(e)
        return PartialTree(tuple(out))


_MAX_DEPTH = 128


def recombine(pt: PartialTree) -> Optional[Digest]:
    """Root digest implied by a partial tree, or None if it is not a well-formed tree."""
    if not pt.entries:
        return codec.zero_digest()
    stack: list[tuple[int, Digest]] = []
    for e in pt.entries:
        if not 0 <= e.depth <= _MAX_DEPTH:
            return None
        # Fields a kind does not use must stay at their defaults, so that
        # every tree has exactly one encoding.
        if e.kind == EntryKind.LEAF:
            if e.tx is None or e.block_index or e.digest:
                return None
            h = leaf_digest(e.position, e.tx)
        elif e.kind == EntryKind.PRUNED:
            if len(e.digest) != codec.digest_size() or e.position or e.tx is not None or e.block_index:
                return None
            h = e.digest
        else:
            return None
        stack.append((e.depth, h))
        while len(stack) >= 2 and stack[-1][0] == stack[-2][0]:
            d, right = stack.pop()
            _, left = stack.pop()
            if d == 0:
                return None
            stack.append((d - 1, inner_digest(left, right)))
    if len(stack) != 1 or stack[0][0] != 0:
        return None
    return stack[0][1]


def verify_prefix(root: Digest, pt: PartialTree, expected_txs: Sequence[Transaction]) -> bool:
    """True iff ``pt`` proves ``expected_txs`` are the first entries of the queue with this root."""
    seen_pruned = False
    last_pos = None
    disclosed = []
    for e in pt.entries:
        if e.kind == EntryKind.PRUNED:
            seen_pruned = True
            continue
        if seen_pruned or (last_pos is not None and e.position <= last_pos):
            return False
        last_pos = e.position
        disclosed.append(e.tx)
    # Shape first, it is cheap; only then pay for rehashing.
    return disclosed == list(expected_txs) and recombine(pt) == root


def verify_membership(root: Digest, proof: MembershipProof) -> bool:
    h = leaf_digest(proof.position, proof.tx)
    for step in proof.path:
        h = inner_digest(step.digest, h) if step.sibling_on_left else inner_digest(h, step.digest)
    return h == root


class QueueSnapshot:
    """Immutable point-in-time view of a queue."""

    __slots__ = ("_root",)

    def __init__(self, root: Optional[_Node]):
        self._root = root

    @property
    def root(self) -> Digest:
        return codec.zero_digest() if self._root is None else self._root.hash

    @property
    def size(self) -> int:
        return 0 if self._root is None else self._root.size

    @property
    def height(self) -> int:
        """Number of node levels; a single-leaf tree has height 1."""
        return 0 if self._root is None else self._root.height

    def items(self) -> Iterator[tuple[int, Transaction]]:
        for leaf in _walk(self._root):
            yield leaf.key, leaf.tx

    def transactions(self) -> list[Transaction]:
        return [tx for _, tx in self.items()]

    def prove_membership(self, position: int) -> MembershipProof:
        path: list[PathStep] = []
        n = self._root
        while isinstance(n, _Inner):
            if position < n.split:
                path.append(PathStep(False, n.right.hash))
                n = n.left
            else:
                path.append(PathStep(True, n.left.hash))
                n = n.right
        if n is None or n.key != position:
            raise Absent(position)
        return MembershipProof(position, n.tx, tuple(reversed(path)))

    def disclose_prefix(self, k: int) -> PartialTree:
        """Disclose the first ``k`` leaves and prune every subtree to their right."""
        if not 0 <= k <= self.size:
            raise IndexError(f"prefix length {k} outside 0..{self.size}")
        out: list[PTEntry] = []

        def walk(n: _Node, depth: int, need: int) -> None:
            if need == 0:
                out.append(PTEntry(depth, EntryKind.PRUNED, digest=n.hash))
            elif isinstance(n, _Leaf):
                out.append(PTEntry(depth, EntryKind.LEAF, n.key, tx=n.tx))
            else:
                walk(n.left, depth + 1, need)
                walk(n.right, depth + 1, max(0, need - n.left.size))

        if self._root is not None:
            walk(self._root, 0, k)
        return PartialTree(tuple(out))

    def disclose_positions(self, positions: Container[int]) -> PartialTree:
        """Disclose an arbitrary set of leaves, pruning everything else."""
        out: list[PTEntry] = []

        def has_any(n: _Node) -> bool:
            return any(leaf.key in positions for leaf in _walk(n))

        def walk(n: _Node, depth: int) -> None:
            if isinstance(n, _Leaf):
                if n.key in positions:
                    out.append(PTEntry(depth, EntryKind.LEAF, n.key, tx=n.tx))
                else:
                    out.append(PTEntry(depth, EntryKind.PRUNED, digest=n.hash))
            elif not has_any(n):
                out.append(PTEntry(depth, EntryKind.PRUNED, digest=n.hash))
            else:
                walk(n.left, depth + 1)
                walk(n.right, depth + 1)

        if self._root is not None:
            walk(self._root, 0)
        return PartialTree(tuple(out))


class MerkleQueue:
    """A node's outgoing queue: positions are assigned once and never reused."""

    def __init__(self) -> None:
        self._root: Optional[_Node] = None
        self.next_position = 0
        self.by_tx: dict[Digest, int] = {}
        self._positions: list[int] = []
        self._txs: dict[int, Transaction] = {}
        self._last_seq = -1

    def __len__(self) -> int:
        return len(self._positions)

    def __contains__(self, tx: Transaction) -> bool:
        return tx.tx_id in self.by_tx

    @property
    def root(self) -> Digest:
        return codec.zero_digest() if self._root is None else self._root.hash

    @property
    def height(self) -> int:
        return 0 if self._root is None else self._root.height

    def snapshot(self) -> QueueSnapshot:
        return QueueSnapshot(self._root)

    def order_array(self) -> list[tuple[int, Transaction]]:
        return [(p, self._txs[p]) for p in self._positions]

    def position_of(self, tx: Transaction) -> Optional[int]:
        return self.by_tx.get(tx.tx_id)

    def get(self, position: int) -> Transaction:
        try:
            return self._txs[position]
        except KeyError:
            raise Absent(position) from None

    def enqueue(self, tx: Transaction, committed: Container[Digest] = ()) -> Optional[int]:
        """Append ``tx``; returns its position, or None if it is a duplicate."""
        tid = tx.tx_id
        if tid in self.by_tx or tid in committed:
            return None
        pos = self.next_position
        self.next_position += 1
        self._root = _insert(self._root, pos, tx)
        self.by_tx[tid] = pos
        self._positions.append(pos)
        self._txs[pos] = tx
        return pos

    def discard(self, position: int) -> Transaction:
        tx = self.get(position)
        self._root = _delete(self._root, position)
        del self._txs[position]
        del self.by_tx[tx.tx_id]
        i = bisect.bisect_left(self._positions, position)
        del self._positions[i]
        return tx

    def overwrite(self, position: int, tx: Transaction) -> None:
        """Store a different transaction at an existing position."""
        old = self.get(position)
        self._root = _insert(self._root, position, tx)
        del self.by_tx[old.tx_id]
        self.by_tx[tx.tx_id] = position
        self._txs[position] = tx

    def swap(self, p1: int, p2: int) -> None:
        """Exchange the transactions stored at two positions."""
        t1, t2 = self.get(p1), self.get(p2)
        self._root = _insert(_insert(self._root, p1, t2), p2, t1)
        self._txs[p1], self._txs[p2] = t2, t1
        self.by_tx[t1.tx_id], self.by_tx[t2.tx_id] = p2, p1

    def remove_committed(self, txs: Sequence[Transaction]) -> list[int]:
        """Remove exactly the given block transactions that are queued here."""
        removed = []
        for tx in txs:
            pos = self.by_tx.get(tx.tx_id)
            if pos is not None:
                self.discard(pos)
                removed.append(pos)
        return removed

    def summarize(self, key: KeyPair, committed: tuple[int, Digest], seq: int) -> QueueSummary:
        assert seq > self._last_seq, "summary sequence numbers must increase"
        self._last_seq = seq
        s = QueueSummary(self.root, committed[0], committed[1], seq, key.public_id)
        return dataclasses.replace(s, signature=key.sign(codec.signing_bytes(s)))

    def prove_membership(self, position: int) -> MembershipProof:
        return self.snapshot().prove_membership(position)

    def disclose_prefix(self, k: int) -> PartialTree:
        return self.snapshot().disclose_prefix(k)

    def check_views(self) -> None:
        """Assert the derived views agree with the tree (used by tests)."""
        walked = [(leaf.key, leaf.tx) for leaf in _walk(self._root)]
        assert walked == self.order_array(), "order array diverged from tree"
        assert {tx.tx_id: p for p, tx in walked} == self.by_tx, "reverse index diverged"
        _check_avl(self._root)


def _check_avl(n: Optional[_Node]) -> None:
    if n is None or isinstance(n, _Leaf):
        return
    assert abs(n.left.height - n.right.height) <= 1, "AVL balance violated"
    assert n.height == 1 + max(n.left.height, n.right.height)
    assert n.split == n.right.min_key and n.left.min_key == n.min_key
    assert n.hash == inner_digest(n.left.hash, n.right.hash)
    _check_avl(n.left)
    _check_avl(n.right)

"""Proposal selection, seeded ordering and the block artifact.

A proposer has no discretion: it takes a policy-determined prefix of its
outgoing queue, proves with a partial Merkle tree that it really is the
prefix, and orders it by a shuffle seeded from the previous block hash and
the first selected transaction's acceptor signature. Transactions whose
nonce is not yet usable are deferred to later passes; whatever is still
unprocessable when a pass makes no progress is rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence

from . import codec
from .codec import Digest, register
from .crypto import KeyPair, verify
from .ledger import Reason, State, Transaction, apply, ordering_signature, validate_against_state
from .outqueue import EntryKind, PartialTree, QueueSnapshot, recombine

MASK64 = (1 << 64) - 1
ZERO_SEED_SUBSTITUTE = 0x9E3779B97F4A7C15

_DEFERRABLE = (Reason.BadNonce, Reason.InsufficientBalance)


class ProposalError(IntEnum):
    BadPrefix = 1
    BadSelectionSize = 2
    BadOrdering = 3
    BadRoot = 4


@dataclass(frozen=True)
class SelectionPolicy:
    """``fixed`` takes the first ``limit`` entries, ``bytes`` the longest prefix within ``limit`` encoded bytes."""

    mode: str = "fixed"
    limit: int = 128

    def __post_init__(self):
        if self.mode not in ("fixed", "bytes") or self.limit < 0:
            raise ValueError(f"bad selection policy {self.mode}:{self.limit}")

    @classmethod
    def parse(cls, text: str) -> "SelectionPolicy":
        mode, _, n = text.partition(":")
        try:
            return cls(mode, int(n))
        except ValueError:
            raise ValueError(f"policy must look like fixed:N or bytes:N, got {text!r}") from None

    def __str__(self) -> str:
        return f"{self.mode}:{self.limit}"


def tx_size(tx: Transaction) -> int:
    return len(codec.encode(tx))


def select_prefix(q: QueueSnapshot, policy: SelectionPolicy) -> tuple[list[Transaction], int]:
    if policy.mode == "fixed":
        txs = []
        for _, tx in q.items():
            if len(txs) == policy.limit:
                break
            txs.append(tx)
        return txs, len(txs)
    txs, total = [], 0
    for _, tx in q.items():
        total += tx_size(tx)
        if total > policy.limit:
            break
        txs.append(tx)
    return txs, len(txs)


# -- seeded permutation -----------------------------------------------------

def derive_seed(prev_block_hash: bytes, first_acceptor_sig: bytes) -> int:
    mixed = bytes(a ^ b for a, b in zip(prev_block_hash, first_acceptor_sig))
    mixed += bytes(-len(mixed) % 8)
    seed = 0
    for i in range(0, len(mixed), 8):
        seed ^= int.from_bytes(mixed[i:i + 8], "big")
    return seed or ZERO_SEED_SUBSTITUTE


def prng_next(state: int) -> tuple[int, int]:
    """One xorshift64 step with shifts (13, 7, 17); returns (state, value), which coincide."""
    if state == 0:
        raise ValueError("xorshift state must be nonzero")
    s = state
    s ^= (s << 13) & MASK64
    s ^= s >> 7
    s ^= (s << 17) & MASK64
    return s, s


def permute(txs: Sequence, seed: int) -> list:
    out = list(txs)
    state = seed
    for i in range(len(out) - 1, 0, -1):
        state, v = prng_next(state)
        j = v % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def canonical_order(txs: Sequence[Transaction]) -> list[Transaction]:
    """Arrival-independent starting order for the shuffle."""
    return sorted(txs, key=lambda t: t.tx_id)


@dataclass(frozen=True)
class Rejection:
    tx: Transaction
    reason: Reason


def order_with_deferral(permuted: Sequence[Transaction], state: State
                        ) -> tuple[list[Transaction], list[Rejection]]:
    work = dict(state)
    processed: list[Transaction] = []
    rejected: list[Rejection] = []
    pending = list(permuted)
    while pending:
        deferred, progressed = [], False
        for tx in pending:
            reason = validate_against_state(tx, work)
            if reason is None:
                processed.append(tx)
                work = apply(tx, work)
                progressed = True
            elif reason in _DEFERRABLE:
                deferred.append(tx)
            else:
                rejected.append(Rejection(tx, reason))
        pending = deferred
        if not progressed:
            break
    rejected.extend(Rejection(tx, validate_against_state(tx, work)) for tx in pending)
    return processed, rejected


def order_selection(selection: Sequence[Transaction], prev_block_hash: Digest, state: State
                    ) -> tuple[list[Transaction], list[Rejection]]:
    if not selection:
        return [], []
    seed = derive_seed(prev_block_hash, ordering_signature(selection[0]))
    return order_with_deferral(permute(canonical_order(selection), seed), state)


# -- proposal and block -----------------------------------------------------

@dataclass(frozen=True)
class OrderedProposal:
    processed: tuple[Transaction, ...]
    rejected: tuple[Rejection, ...]
    disclosure: PartialTree
    outqueue_root: Digest


class Disposition(IntEnum):
    PROCESSED = 1
    REJECTED = 2


@dataclass(frozen=True)
class BlockEntry:
    tx: Transaction
    disposition: Disposition
    reason: int = 0


@register(0x05)
@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: Digest
    proposer_id: bytes
    entries: tuple[BlockEntry, ...]
    outqueue_root: Digest
    prefix_disclosure: PartialTree
    signature: bytes = b""

    @property
    def hash(self) -> Digest:
        cached = self.__dict__.get("_hash")
        if cached is None or cached[0] != codec.hash_name():
            cached = (codec.hash_name(), codec.H(codec.signing_bytes(self)))
            object.__setattr__(self, "_hash", cached)
        return cached[1]

    def verifies(self) -> bool:
        return verify(self.proposer_id, codec.signing_bytes(self), self.signature)

    @property
    def txs(self) -> list[Transaction]:
        return [e.tx for e in self.entries]

    @property
    def processed(self) -> list[Transaction]:
        return [e.tx for e in self.entries if e.disposition == Disposition.PROCESSED]

    def to_proposal(self) -> Optional[OrderedProposal]:
        """Rebuild the proposal this block was made from; None if the disclosure does not resolve."""
        disclosure = self.prefix_disclosure.resolved(self.txs)
        if disclosure is None:
            return None
        rejected = []
        for e in self.entries:
            if e.disposition == Disposition.REJECTED:
                try:
                    rejected.append(Rejection(e.tx, Reason(e.reason)))
                except ValueError:
                    return None
        return OrderedProposal(tuple(self.processed), tuple(rejected), disclosure, self.outqueue_root)


GENESIS_HEIGHT = 0


def genesis_hash() -> Digest:
    return codec.zero_digest()


def make_block(p: OrderedProposal, height: int, prev_hash: Digest, key: KeyPair) -> Block:
    entries = [BlockEntry(tx, Disposition.PROCESSED) for tx in p.processed]
    entries += [BlockEntry(r.tx, Disposition.REJECTED, int(r.reason)) for r in p.rejected]
    index = {tx.tx_id: i for i, tx in enumerate(e.tx for e in entries)}
    disclosure = p.disclosure.with_block_indexes(lambda tx: index.get(tx.tx_id))
    b = Block(height, prev_hash, key.public_id, tuple(entries), p.outqueue_root, disclosure)
    return dataclasses.replace(b, signature=key.sign(codec.signing_bytes(b)))


def apply_block(block: Block, state: State) -> dict:
    out = dict(state)
    for tx in block.processed:
        out = apply(tx, out)
    return out


def build_proposal(q: QueueSnapshot, policy: SelectionPolicy, prev_block_hash: Digest,
                   state: State) -> OrderedProposal:
    selection, k = select_prefix(q, policy)
    # A byte-bounded prefix that stops short of the queue end discloses the
    # next leaf too, so verifiers can see that it would not have fit.
    shown = k + 1 if policy.mode == "bytes" and k < q.size else k
    disclosure = q.disclose_prefix(shown)
    processed, rejected = order_selection(selection, prev_block_hash, state)
    return OrderedProposal(tuple(processed), tuple(rejected), disclosure, q.root)


def _disclosed(pt: PartialTree) -> Optional[tuple[list[Transaction], bool]]:
    """Disclosed transactions in position order and whether anything was pruned."""
    txs, pruned, last = [], False, None
    for e in pt.entries:
        if e.kind == EntryKind.PRUNED:
            pruned = True
            continue
        if e.kind != EntryKind.LEAF or pruned or (last is not None and e.position <= last):
            return None
        last = e.position
        txs.append(e.tx)
    return txs, pruned


def verify_proposal(p: OrderedProposal, prev_block_hash: Digest, claimed_root: Digest,
                    policy: SelectionPolicy, state: State) -> Optional[ProposalError]:
    """Recompute every deterministic step; None means the proposal is valid."""
    if p.outqueue_root != claimed_root:
        return ProposalError.BadRoot
    if recombine(p.disclosure) != claimed_root:
        return ProposalError.BadPrefix
    shown = _disclosed(p.disclosure)
    if shown is None:
        return ProposalError.BadPrefix
    leaves, pruned = shown

    if policy.mode == "fixed":
        selection = leaves
        if len(selection) > policy.limit or (len(selection) < policy.limit and pruned):
            return ProposalError.BadSelectionSize
    else:
        sizes = [tx_size(tx) for tx in leaves]
        total = sum(sizes)
        if total <= policy.limit:
            if pruned:
                return ProposalError.BadSelectionSize
            selection = leaves
        else:
            selection = leaves[:-1]
            if total - sizes[-1] > policy.limit:
                return ProposalError.BadSelectionSize

    chosen = [tx.tx_id for tx in p.processed] + [r.tx.tx_id for r in p.rejected]
    if sorted(chosen) != sorted(tx.tx_id for tx in selection):
        return ProposalError.BadPrefix
    processed, rejected = order_selection(selection, prev_block_hash, state)
    if tuple(processed) != p.processed or tuple(rejected) != p.rejected:
        return ProposalError.BadOrdering
    return None

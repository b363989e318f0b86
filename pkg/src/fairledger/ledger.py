"""Accounts, transactions, acceptor receipts and validation semantics."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, Optional

from . import codec
from .codec import Digest, register
from .crypto import KeyPair, verify

FEE = 0


class Reason(IntEnum):
    """Stable rejection codes, shared by acceptance, gossip and block dispositions."""

    BadSignature = 1
    InsufficientBalance = 2
    BadNonce = 3
    Malformed = 4
    BadReceipt = 5
    Censored = 6


class TxKind(IntEnum):
    SEND = 1
    ADMIN = 2


class AdminKind(IntEnum):
    OUTAGE = 1
    OMISSION = 2


@dataclass(frozen=True)
class Account:
    balance: int = 0
    next_nonce: int = 0


State = Mapping[bytes, Account]

_EMPTY = Account()


@dataclass(frozen=True)
class TxInput:
    address: bytes
    amount: int
    nonce: int
    signature: bytes = b""


@dataclass(frozen=True)
class TxOutput:
    address: bytes
    amount: int


@register(0x11)
@dataclass(frozen=True)
class AdminReport:
    """Signed payload of an administrative transaction.

    ``subject`` is the node whose channel lost messages; for an outage it
    is the reporter itself. ``first_index``..``last_index`` is the
    inclusive range of lost channel indices on ``conn_id``.
    """

    kind: AdminKind
    reporter: bytes
    subject: bytes
    conn_id: bytes
    first_index: int
    last_index: int
    note: bytes = b""
    signature: bytes = b""

    def signed(self, key: KeyPair) -> "AdminReport":
        return dataclasses.replace(self, signature=key.sign(codec.signing_bytes(self)))

    def verifies(self) -> bool:
        return verify(self.reporter, codec.signing_bytes(self), self.signature)


@register(0x12)
@dataclass(frozen=True)
class AcceptorReceipt:
    acceptor_id: bytes
    acceptor_seq: int
    signature: bytes = b""


@register(0x13)
@dataclass(frozen=True)
class CensorshipMark:
    censor_id: bytes
    reason: bytes
    signature: bytes = b""


@register(0x10)
@dataclass(frozen=True)
class Transaction:
    inputs: tuple[TxInput, ...]
    outputs: tuple[TxOutput, ...]
    kind: TxKind = TxKind.SEND
    admin: Optional[AdminReport] = None
    memo: bytes = b""
    receipt: Optional[AcceptorReceipt] = None
    censorship: Optional[CensorshipMark] = None

    def body(self) -> "Transaction":
        """The part covered by input signatures."""
        return Transaction(
            inputs=tuple(dataclasses.replace(i, signature=b"") for i in self.inputs),
            outputs=self.outputs, kind=self.kind, admin=self.admin, memo=self.memo,
        )

    def core(self) -> "Transaction":
        """Everything except the censorship mark; this is what dedup keys on."""
        if self.censorship is None:
            return self
        return dataclasses.replace(self, censorship=None)

    @property
    def tx_id(self) -> Digest:
        cached = self.__dict__.get("_id")
        if cached is None or cached[0] != codec.hash_name():
            cached = (codec.hash_name(), codec.H(b"\x10" + codec.encode(self.core())))
            object.__setattr__(self, "_id", cached)
        return cached[1]

    @property
    def spenders(self) -> tuple[bytes, ...]:
        return tuple(i.address for i in self.inputs)


def body_bytes(tx: Transaction) -> bytes:
    return b"\x14" + codec.encode(tx.body())


def receipt_bytes(tx: Transaction, acceptor_id: bytes, seq: int) -> bytes:
    core = dataclasses.replace(tx, receipt=None, censorship=None)
    return b"\x12" + codec.encode(core) + codec.encode(acceptor_id) + codec.encode_int(seq)


def censorship_bytes(tx: Transaction, reason: bytes) -> bytes:
    return b"\x13" + codec.encode(tx.core()) + codec.encode(reason)


# -- construction helpers ---------------------------------------------------

def make_send(spends: Iterable[tuple[KeyPair, int, int]], outputs: Iterable[tuple[bytes, int]],
              memo: bytes = b"") -> Transaction:
    """Build and sign a SendTx; ``spends`` holds (key, amount, nonce) per input."""
    spends = list(spends)
    unsigned = Transaction(
        inputs=tuple(TxInput(k.public_id, amount, nonce) for k, amount, nonce in spends),
        outputs=tuple(TxOutput(a, n) for a, n in outputs),
        memo=memo,
    )
    msg = body_bytes(unsigned)
    signed = tuple(dataclasses.replace(i, signature=k.sign(msg)) for i, (k, _, _) in zip(unsigned.inputs, spends))
    return dataclasses.replace(unsigned, inputs=signed)


def make_admin(report: AdminReport, key: KeyPair) -> Transaction:
    return Transaction(inputs=(), outputs=(), kind=TxKind.ADMIN, admin=report.signed(key))


def attach_receipt(tx: Transaction, acceptor: KeyPair, seq: int) -> Transaction:
    sig = acceptor.sign(receipt_bytes(tx, acceptor.public_id, seq))
    return dataclasses.replace(tx, receipt=AcceptorReceipt(acceptor.public_id, seq, sig))


def attach_censorship(tx: Transaction, censor: KeyPair, reason: bytes) -> Transaction:
    sig = censor.sign(censorship_bytes(tx, reason))
    return dataclasses.replace(tx, censorship=CensorshipMark(censor.public_id, reason, sig))


def ordering_signature(tx: Transaction) -> bytes:
    """The signature that seeds block ordering when ``tx`` is selected first."""
    if tx.receipt is not None:
        return tx.receipt.signature
    if tx.admin is not None:
        return tx.admin.signature
    return b""


def receipt_verifies(tx: Transaction) -> bool:
    r = tx.receipt
    return r is not None and r.acceptor_seq >= 0 and verify(
        r.acceptor_id, receipt_bytes(tx, r.acceptor_id, r.acceptor_seq), r.signature)


# -- validation -------------------------------------------------------------

def _stateless(tx: Transaction) -> Optional[Reason]:
    if tx.kind == TxKind.ADMIN:
        if tx.inputs or tx.outputs or tx.admin is None:
            return Reason.Malformed
        return None if tx.admin.verifies() else Reason.BadSignature
    if tx.admin is not None or not tx.inputs:
        return Reason.Malformed
    addrs = [i.address for i in tx.inputs]
    if len(set(addrs)) != len(addrs):
        return Reason.Malformed
    if any(i.amount < 0 or i.nonce < 0 for i in tx.inputs) or any(o.amount < 0 for o in tx.outputs):
        return Reason.Malformed
    if sum(i.amount for i in tx.inputs) - sum(o.amount for o in tx.outputs) != FEE:
        return Reason.Malformed
    msg = body_bytes(tx)
    if not all(verify(i.address, msg, i.signature) for i in tx.inputs):
        return Reason.BadSignature
    if tx.censorship is not None:
        c = tx.censorship
        if not verify(c.censor_id, censorship_bytes(tx, c.reason), c.signature):
            return Reason.BadSignature
    return None


def make_basic_check(tx: Transaction) -> Optional[Reason]:
    """Gossip-level validation: never consults balances or nonces.

    Returns None when the transaction is acceptable, else the reason code.
    Send transactions must carry a valid acceptor receipt; administrative
    ones must not carry any.
    """
    reason = _stateless(tx)
    if reason is not None:
        return reason
    # Administrative payloads are already signed by their reporter.
    if tx.kind == TxKind.ADMIN:
        return None if tx.receipt is None else Reason.Malformed
    if not receipt_verifies(tx):
        return Reason.BadReceipt
    return None


def validate_against_state(tx: Transaction, state: State) -> Optional[Reason]:
    """Full validation: signatures, then nonces, then balances."""
    reason = _stateless(tx)
    if reason is not None:
        return reason
    if tx.censorship is not None:
        return Reason.Censored
    if tx.kind == TxKind.ADMIN:
        return None
    for i in tx.inputs:
        acct = state.get(i.address, _EMPTY)
        if i.nonce != acct.next_nonce:
            return Reason.BadNonce
    for i in tx.inputs:
        if state.get(i.address, _EMPTY).balance < i.amount:
            return Reason.InsufficientBalance
    return None


def apply(tx: Transaction, state: State) -> dict[bytes, Account]:
    """Return the state after ``tx``; the input mapping is not modified."""
    assert validate_against_state(tx, state) is None, "apply() on an invalid transaction"
    out = dict(state)
    if tx.kind == TxKind.ADMIN:
        return out
    for i in tx.inputs:
        a = out.get(i.address, _EMPTY)
        out[i.address] = Account(a.balance - i.amount, a.next_nonce + 1)
    for o in tx.outputs:
        a = out.get(o.address, _EMPTY)
        out[o.address] = Account(a.balance + o.amount, a.next_nonce)
    return out


def total_balance(state: State) -> int:
    return sum(a.balance for a in state.values())

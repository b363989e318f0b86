"""One-way accountable channel.

A sender streams signed, indexed values to a receiver. The receiver folds
every accepted value into a cumulative hash and periodically returns a
signed confirmation carrying that hash plus a summary of its local data.
The sender refuses to run more than ``grace_period`` messages ahead of the
last confirmation, so a receiver that ignores a message stalls the channel.

Violations are reported as :class:`ViolationReport` values. A *claim* is an
assertion the reporter cannot back with evidence; a *proof* carries signed
messages that :func:`verify_proof` accepts without trusting the reporter.

Handlers are atomic: when a report is returned, the endpoint's state is
unchanged apart from its report log. The one exception is a skipped index,
which is claimed and then accepted so the stream can continue past it.
"""
from __future__ import annotations

import bisect
import dataclasses
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Mapping, Optional, Protocol, Sequence

from . import codec
from .codec import Digest, register
from .crypto import KeyPair, verify

INVALID_SIGNATURE = "invalid signature"
INVALID_CONN_ID = "invalid connection ID"
CONF_OUT_OF_SEQUENCE = "confirmation out of sequence"
CONF_UNSENT = "cannot confirm unsent values"
INCORRECT_HASH = "incorrect hash confirmation"
ACK_OUT_OF_SEQUENCE = "acknowledgement out of sequence"
INVALID_ACK = "invalid acknowledgement"
SKIPPED = "skipped message"
DUPLICATE = "duplicate message"
CONFLICTING = "conflicting messages"
TOO_FAR_AHEAD = "too far ahead"
RULES_VIOLATED = "rules violated"

SENDER_RULES = (INVALID_SIGNATURE, INVALID_CONN_ID, CONF_OUT_OF_SEQUENCE, CONF_UNSENT, INCORRECT_HASH)
RECEIVER_RULES = (INVALID_SIGNATURE, INVALID_CONN_ID, ACK_OUT_OF_SEQUENCE, INVALID_ACK, SKIPPED,
                  DUPLICATE, CONFLICTING, TOO_FAR_AHEAD, RULES_VIOLATED)

DEFAULT_BATCH_SIZE = 16


class Kind(IntEnum):
    CLAIM = 1
    PROOF = 2


@dataclass(frozen=True)
class ViolationReport:
    kind: Kind
    rule: str
    reporter: bytes
    accused: bytes
    evidence: tuple[bytes, ...] = ()
    conn_id: bytes = b""

    @property
    def evidence_digest(self) -> Digest:
        return codec.H(codec.encode(self.evidence))

    def record(self) -> dict:
        return {
            "kind": self.kind.name.lower(),
            "rule": self.rule,
            "reporter": self.reporter.hex(),
            "accused": self.accused.hex(),
            "conn_id": self.conn_id.hex(),
            "evidence_digest": self.evidence_digest.hex(),
        }


@dataclass(frozen=True)
class ChannelConfig:
    conn_id: bytes
    sender_id: bytes
    receiver_id: bytes
    grace_period: int

    def __post_init__(self):
        if self.grace_period < 1:
            raise ValueError("grace_period must be positive")


def make_conn_id(sender_id: bytes, receiver_id: bytes, session: int = 0) -> bytes:
    return codec.H(b"owac-conn" + codec.encode(sender_id) + codec.encode(receiver_id)
                   + codec.encode_int(session))


@register(0x01)
@dataclass(frozen=True)
class OwacMessage:
    conn_id: bytes
    index: int
    value: bytes
    sender_last_conf: int
    signature: bytes = b""


@register(0x02)
@dataclass(frozen=True)
class Confirmation:
    conn_id: bytes
    confirmed_index: int
    conf_hash: Digest
    data_summary: bytes
    signature: bytes = b""


def signed(obj, key: KeyPair):
    return dataclasses.replace(obj, signature=key.sign(codec.signing_bytes(obj)))


def signature_ok(obj, signer: bytes) -> bool:
    return verify(signer, codec.signing_bytes(obj), obj.signature)


class RulesHook(Protocol):
    def __call__(self, msgs: Mapping[int, OwacMessage], index: int) -> Optional[Sequence[OwacMessage]]:
        """Return None if ``msgs[index]`` is acceptable, else the messages witnessing the breach.

        The witnesses must be enough for a fresh hook, given only them, to
        reject the highest-indexed one.
        """


ConfPolicy = Callable[[int, int, int, bool], bool]


def batch_policy(batch_size: int = DEFAULT_BATCH_SIZE) -> ConfPolicy:
    """Confirm once ``batch_size`` messages are unconfirmed, or on any host event."""

    def policy(last_ackd: int, last_conf: int, last_rcvd: int, event: bool) -> bool:
        return last_rcvd - last_conf >= batch_size or (event and last_rcvd > last_conf)

    return policy


class Sender:
    """Sending endpoint. With ``key=None`` it is a passive replica fed by :meth:`note_message`."""

    def __init__(self, config: ChannelConfig, key: Optional[KeyPair]):
        assert key is None or key.public_id == config.sender_id
        self.config = config
        self.key = key
        self.vals_sent: dict[int, bytes] = {}
        self.last_sent = -1
        self.last_conf = -1
        self.hash_cache: dict[int, Digest] = {-1: codec.zero_digest()}
        self.confirmations: dict[int, Confirmation] = {}
        self.log: list[ViolationReport] = []

    def would_refuse(self) -> bool:
        return self.last_sent > self.last_conf + self.config.grace_period

    def send(self, value: bytes) -> Optional[OwacMessage]:
        """Sign and return the next message, or None when confirmations are too far behind."""
        if self.would_refuse():
            return None
        self.last_sent += 1
        self.vals_sent[self.last_sent] = value
        return self._message(self.last_sent, value)

    def note_message(self, m: OwacMessage) -> None:
        """Record a message observed on the wire as sent by this endpoint."""
        if m.index > self.last_sent:
            self.vals_sent[m.index] = m.value
            self.last_sent = m.index

    def _message(self, index: int, value: bytes) -> OwacMessage:
        return signed(OwacMessage(self.config.conn_id, index, value, self.last_conf), self.key)

    def fold_to(self, k: int) -> Digest:
        """Cumulative hash through index ``k``, starting from the last confirmed point."""
        j, h = self.last_conf, self.hash_cache[self.last_conf]
        while j < k:
            j += 1
            v = self.vals_sent.get(j)
            if v is not None:
                h = codec.chain_hash(h, v)
        return h

    def _report(self, rule: str, c: Confirmation) -> list[ViolationReport]:
        r = ViolationReport(Kind.CLAIM, rule, self.config.sender_id, self.config.receiver_id,
                            (codec.pack(c),), self.config.conn_id)
        self.log.append(r)
        return [r]

    def on_confirmation(self, c: Confirmation) -> list[ViolationReport]:
        if not signature_ok(c, self.config.receiver_id):
            return self._report(INVALID_SIGNATURE, c)
        if c.conn_id != self.config.conn_id:
            return self._report(INVALID_CONN_ID, c)
        k = c.confirmed_index
        if k <= self.last_conf:
            return self._report(CONF_OUT_OF_SEQUENCE, c)
        if k > self.last_sent:
            return self._report(CONF_UNSENT, c)
        h = self.fold_to(k)
        if c.conf_hash != h:
            return self._report(INCORRECT_HASH, c)
        self.hash_cache[k] = h
        for j in [j for j in self.vals_sent if j <= k]:
            del self.vals_sent[j]
        for j in [j for j in self.hash_cache if j < self.last_conf]:
            del self.hash_cache[j]
        self.last_conf = k
        self.confirmations[k] = c
        return []

    def prune_confirmations(self, upto: int) -> None:
        for j in [j for j in self.confirmations if j < upto]:
            del self.confirmations[j]


class Receiver:
    """Receiving endpoint. With ``key=None`` it is a passive replica fed by :meth:`note_confirmation`."""

    def __init__(self, config: ChannelConfig, key: Optional[KeyPair], *,
                 rules: Optional[RulesHook] = None,
                 process: Optional[Callable[[bytes], None]] = None,
                 summarize: Optional[Callable[[], bytes]] = None,
                 policy: Optional[ConfPolicy] = None,
                 forgive_gap: Optional[Callable[[int, int, OwacMessage], bool]] = None):
        assert key is None or key.public_id == config.receiver_id
        self.config = config
        self.key = key
        self.rules = rules
        self.process = process
        self.summarize = summarize or (lambda: b"")
        self.policy = policy or batch_policy()
        self.forgive_gap = forgive_gap
        self.msgs: dict[int, OwacMessage] = {}
        self.last_rcvd = -1
        self.last_conf = -1
        self.last_ackd = -1
        self.seq_hash: Digest = codec.zero_digest()
        self.pending_confs: list[int] = []
        self.frozen = False
        self.log: list[ViolationReport] = []

    def _claim(self, rule: str, m: OwacMessage) -> ViolationReport:
        return ViolationReport(Kind.CLAIM, rule, self.config.receiver_id, self.config.sender_id,
                               (codec.pack(m),), self.config.conn_id)

    def _prove(self, rule: str, evidence: Sequence[OwacMessage]) -> ViolationReport:
        self.frozen = True
        return ViolationReport(Kind.PROOF, rule, self.config.receiver_id, self.config.sender_id,
                               tuple(codec.pack(e) for e in evidence), self.config.conn_id)

    def _done(self, reports: list[ViolationReport]) -> list[ViolationReport]:
        self.log.extend(reports)
        return reports

    def on_message(self, m: OwacMessage) -> list[ViolationReport]:
        if self.frozen:
            return []
        if not signature_ok(m, self.config.sender_id):
            return self._done([self._claim(INVALID_SIGNATURE, m)])
        if m.conn_id != self.config.conn_id:
            return self._done([self._claim(INVALID_CONN_ID, m)])

        k = m.sender_last_conf
        last_ackd, pending = self.last_ackd, self.pending_confs
        if k < last_ackd:
            return self._done([self._claim(ACK_OUT_OF_SEQUENCE, m)])
        if k > last_ackd:
            # Acknowledging k also covers every earlier outstanding confirmation.
            pos = bisect.bisect_left(pending, k)
            if pos == len(pending) or pending[pos] != k:
                return self._done([self._claim(INVALID_ACK, m)])
            pending = pending[pos + 1:]
            last_ackd = k

        reports: list[ViolationReport] = []
        i = m.index
        if i > self.last_rcvd + 1:
            if not (self.forgive_gap and self.forgive_gap(self.last_rcvd + 1, i - 1, m)):
                reports.append(self._claim(SKIPPED, m))
        elif i < self.last_rcvd + 1:
            prev = self.msgs.get(i)
            if prev is None or prev == m:
                return self._done([self._claim(DUPLICATE, m)])
            return self._done([self._prove(CONFLICTING, (m, prev))])

        if i > last_ackd + self.config.grace_period + 1:
            log = [self.msgs[j] for j in range(last_ackd + 1, i) if j in self.msgs]
            return self._done(reports + [self._prove(TOO_FAR_AHEAD, log + [m])])

        self.msgs[i] = m
        if self.rules is not None:
            witness = self.rules(self.msgs, i)
            if witness is not None:
                del self.msgs[i]
                return self._done(reports + [self._prove(RULES_VIOLATED, witness)])

        self.last_ackd, self.pending_confs = last_ackd, pending
        self.last_rcvd = i
        self.seq_hash = codec.chain_hash(self.seq_hash, m.value)
        if self.process is not None:
            self.process(m.value)
        return self._done(reports)

    def maybe_confirm(self, event: bool = False) -> Optional[Confirmation]:
        if self.frozen or self.last_rcvd <= self.last_conf:
            return None
        if not self.policy(self.last_ackd, self.last_conf, self.last_rcvd, event):
            return None
        c = signed(Confirmation(self.config.conn_id, self.last_rcvd, self.seq_hash, self.summarize()),
                   self.key)
        self.last_conf = self.last_rcvd
        self.pending_confs.append(self.last_rcvd)
        return c

    def note_confirmation(self, c: Confirmation) -> None:
        """Record a confirmation observed on the wire as issued by this endpoint."""
        if c.confirmed_index > self.last_conf:
            self.last_conf = c.confirmed_index
            self.pending_confs.append(c.confirmed_index)

    def prune_messages(self, upto: int) -> None:
        """Drop retained messages with index below ``upto``."""
        for j in [j for j in self.msgs if j < upto]:
            del self.msgs[j]


# -- offline proof checking -------------------------------------------------

def _messages(report: ViolationReport) -> Optional[list[OwacMessage]]:
    try:
        items = [codec.unpack(b) for b in report.evidence]
    except codec.DecodeError:
        return None
    if not items or not all(type(x) is OwacMessage for x in items):
        return None
    return items


def verify_proof(report: ViolationReport, channels: Mapping[bytes, ChannelConfig],
                 rules_factory: Optional[Callable[[], RulesHook]] = None) -> bool:
    """Check a channel-level proof from its evidence and public channel config alone."""
    if report.kind != Kind.PROOF:
        return False
    msgs = _messages(report)
    if msgs is None:
        return False
    conn = msgs[0].conn_id
    cfg = channels.get(conn)
    if cfg is None or report.accused != cfg.sender_id:
        return False
    if any(m.conn_id != conn or not signature_ok(m, cfg.sender_id) for m in msgs):
        return False

    if report.rule == CONFLICTING:
        if len(msgs) != 2:
            return False
        a, b = msgs
        return a.index == b.index and codec.encode(a) != codec.encode(b)
    if report.rule == TOO_FAR_AHEAD:
        last = msgs[-1]
        return last.index > last.sender_last_conf + cfg.grace_period + 1
    if report.rule == RULES_VIOLATED:
        if rules_factory is None:
            return False
        by_index: dict[int, OwacMessage] = {}
        for m in msgs:
            if by_index.setdefault(m.index, m) != m:
                return False
        top = max(by_index)
        return rules_factory()(by_index, top) is not None
    return False

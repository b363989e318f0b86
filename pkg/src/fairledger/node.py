"""A full node: acceptor, outgoing queue, per-peer channels and proposer duty.

Every transaction a node accepts from a client or admits from a peer goes
into its outgoing queue once and is then forwarded, in queue order, to
every peer, including the one it came from. Each direction of each peer
link is an accountable channel whose receiver checks basic validity and
per-acceptor sequence order, and whose confirmations carry a signed
summary of the receiver's outgoing queue.

A node never talks to the network directly. Outbound frames accumulate in
``outbox`` as ``(peer_id, frame)`` pairs for the host to deliver.
"""
from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

from . import codec, owac
from .codec import Digest
from .crypto import KeyPair, verify
from .ledger import (
    Account, AcceptorReceipt, AdminKind, AdminReport, Reason, Transaction, TxKind, apply,
    attach_censorship, attach_receipt, make_admin, make_basic_check, receipt_verifies,
    validate_against_state,
)
from .outqueue import MembershipProof, MerkleQueue, QueueSnapshot, QueueSummary
from .owac import ChannelConfig, Kind, OwacMessage, ViolationReport
from .proposal import (
    Block, OrderedProposal, ProposalError, SelectionPolicy, apply_block, build_proposal,
    genesis_hash, make_block, verify_proposal,
)

CHANNEL_STALL = "channel stall"
CENSOR_REASON = b"blacklisted"


class ChainMismatch(ValueError):
    """A block that does not extend the node's committed chain."""


@dataclass
class NodeConfig:
    grace_period: int = 8
    batch_size: int = owac.DEFAULT_BATCH_SIZE
    stall_ticks: int = 3
    retention_blocks: int = 4
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)


@dataclass(frozen=True)
class Receipt:
    tx_id: Digest
    receipt: AcceptorReceipt
    tx: Transaction

    def verifies(self) -> bool:
        return self.tx.tx_id == self.tx_id and self.tx.receipt == self.receipt and receipt_verifies(self.tx)


@dataclass(frozen=True)
class Refused:
    reason: Reason


def decode_tx(value: bytes) -> Optional[Transaction]:
    try:
        tx = codec.unpack(value)
    except codec.DecodeError:
        return None
    return tx if type(tx) is Transaction else None


def outage_covers(sender: bytes, first: int, last: int, m: OwacMessage) -> bool:
    """True iff ``m`` carries the sender's own signed outage report for exactly ``first..last``."""
    tx = decode_tx(m.value)
    if tx is None or tx.kind != TxKind.ADMIN or tx.admin is None:
        return False
    a = tx.admin
    return (a.kind == AdminKind.OUTAGE and a.reporter == sender and a.subject == sender
            and a.conn_id == m.conn_id and (a.first_index, a.last_index) == (first, last)
            and a.verifies())


class GossipRules:
    """Channel admission rule: basic validity plus strictly rising acceptor sequence numbers.

    The hook is incremental; it remembers, per acceptor, the last accepted
    message so that a regression can be proven with just two messages.
    """

    def __init__(self) -> None:
        self.cursor = -1
        self.last: dict[bytes, tuple[int, OwacMessage]] = {}

    def _check(self, m: OwacMessage) -> Optional[list[OwacMessage]]:
        tx = decode_tx(m.value)
        if tx is None or make_basic_check(tx) is not None:
            return [m]
        if tx.kind == TxKind.ADMIN:
            return None
        r = tx.receipt
        prev = self.last.get(r.acceptor_id)
        if prev is not None and r.acceptor_seq <= prev[0]:
            return [prev[1], m]
        return None

    def _absorb(self, m: OwacMessage) -> None:
        tx = decode_tx(m.value)
        if tx is not None and tx.receipt is not None:
            self.last[tx.receipt.acceptor_id] = (tx.receipt.acceptor_seq, m)
        self.cursor = max(self.cursor, m.index)

    def __call__(self, msgs: Mapping[int, OwacMessage], index: int) -> Optional[list[OwacMessage]]:
        for j in sorted(j for j in msgs if self.cursor < j < index):
            self._absorb(msgs[j])
        m = msgs[index]
        witness = self._check(m)
        if witness is None:
            self._absorb(m)
        return witness


class Peer:
    """Both directions of one peer link plus the forwarding backlog."""

    def __init__(self, sender: owac.Sender, receiver: owac.Receiver, rules: GossipRules):
        self.sender = sender
        self.receiver = receiver
        self.rules = rules
        self.backlog: deque[tuple[Digest, bytes]] = deque()
        self.stall_mark = -2
        self.stalled = 0
        self.stall_claimed = False
        self.retention: deque[tuple[int, int]] = deque()


def channel_config(sender: bytes, receiver: bytes, grace_period: int, session: int = 0) -> ChannelConfig:
    return ChannelConfig(owac.make_conn_id(sender, receiver, session), sender, receiver, grace_period)


class Node:
    def __init__(self, key: KeyPair, genesis: Mapping[bytes, Account], peers: Iterable[bytes],
                 config: Optional[NodeConfig] = None, *, blacklist: Iterable[bytes] = ()):
        self.key = key
        self.id = key.public_id
        self.config = config or NodeConfig()
        self.blacklist = set(blacklist)
        self.chain: list[Block] = []
        self.state: dict[bytes, Account] = dict(genesis)
        self.accepted_queue: list[Transaction] = []
        self._accept_state: dict[bytes, Account] = dict(genesis)
        self.outgoing = MerkleQueue()
        self.committed_ids: set[Digest] = set()
        self.acceptor_seq = 0
        self.summary_seq = -1
        self.summaries: dict[int, tuple[QueueSummary, QueueSnapshot]] = {}
        self.receipts: dict[Digest, Receipt] = {}
        self.receipts_by_core: dict[Digest, Digest] = {}
        self.next_expected: dict[bytes, int] = {}
        self.held: dict[bytes, dict[int, Transaction]] = {}
        self.conflicting_copies: list[tuple[Transaction, Transaction]] = []
        self.outbox: list[tuple[bytes, bytes]] = []
        self.reports: list[ViolationReport] = []
        self.admin_txs: list[Transaction] = []
        self.on_summary: Optional[Callable[[QueueSummary, QueueSnapshot], None]] = None
        self.peers: dict[bytes, Peer] = {}
        for pid in sorted(peers):
            self._add_peer(pid)

    def _add_peer(self, pid: bytes) -> None:
        g = self.config.grace_period
        rules = GossipRules()
        incoming = channel_config(pid, self.id, g)
        receiver = owac.Receiver(
            incoming, self.key, rules=rules,
            process=lambda value, pid=pid: self.on_peer_tx(pid, value),
            summarize=self.make_summary,
            policy=owac.batch_policy(self.config.batch_size),
            forgive_gap=lambda first, last, m, pid=pid: outage_covers(pid, first, last, m),
        )
        sender = owac.Sender(channel_config(self.id, pid, g), self.key)
        self.peers[pid] = Peer(sender, receiver, rules)

    # -- chain view ---------------------------------------------------------

    @property
    def height(self) -> int:
        return len(self.chain)

    @property
    def tip_hash(self) -> Digest:
        return self.chain[-1].hash if self.chain else genesis_hash()

    # -- acceptor -----------------------------------------------------------

    def accept_tx(self, tx: Transaction) -> Receipt | Refused:
        """Client entry point: validate, receipt, censor if blacklisted, enqueue."""
        core = dataclasses.replace(tx, receipt=None, censorship=None)
        if core.tx_id in self.receipts_by_core:
            return self.receipts[self.receipts_by_core[core.tx_id]]
        if tx.kind != TxKind.SEND:
            return Refused(Reason.Malformed)
        reason = validate_against_state(core, self._accept_state)
        if reason is not None:
            return Refused(reason)
        censored = any(a in self.blacklist for a in core.spenders)
        seq = self.acceptor_seq
        self.acceptor_seq += 1
        out = attach_receipt(core, self.key, seq)
        if censored:
            out = attach_censorship(out, self.key, CENSOR_REASON)
        else:
            self._accept_state = apply(out, self._accept_state)
        self.accepted_queue.append(out)
        rec = Receipt(out.tx_id, out.receipt, out)
        self.receipts[out.tx_id] = rec
        self.receipts_by_core[core.tx_id] = out.tx_id
        self._admit(out)
        self.pump()
        return rec

    def submit(self, tx: Transaction) -> Receipt | Refused:
        return self.accept_tx(tx)

    def query_receipt(self, tx_id: Digest) -> Optional[Receipt]:
        return self.receipts.get(tx_id)

    def query_summary(self) -> QueueSummary:
        return codec.unpack(self.make_summary())

    def challenge(self, summary_seq: int, position: int) -> MembershipProof:
        """Prove that ``position`` was in the queue summarised by ``summary_seq``."""
        return self.summaries[summary_seq][1].prove_membership(position)

    # -- propagation --------------------------------------------------------

    def _admit(self, tx: Transaction) -> None:
        """Apply the propagation rule to a basic-valid transaction."""
        tid = tx.tx_id
        if tid in self.committed_ids:
            return
        pos = self.outgoing.by_tx.get(tid)
        if pos is not None:
            first = self.outgoing.get(pos)
            if first != tx:
                self.conflicting_copies.append((first, tx))
            return
        r = tx.receipt
        if r is None:
            self._enqueue(tx)
            return
        expected = self.next_expected.get(r.acceptor_id, 0)
        if r.acceptor_seq < expected:
            return
        if r.acceptor_seq > expected:
            # Forwarded copies can overtake each other on different paths;
            # hold this one until its acceptor predecessors have arrived.
            self.held.setdefault(r.acceptor_id, {}).setdefault(r.acceptor_seq, tx)
            return
        self._enqueue(tx)
        self.next_expected[r.acceptor_id] = expected + 1
        self._release(r.acceptor_id)

    def _release(self, acceptor: bytes) -> None:
        held = self.held.get(acceptor)
        while held:
            seq = self.next_expected.get(acceptor, 0)
            for s in [s for s in held if s < seq]:
                del held[s]
            tx = held.pop(seq, None)
            if tx is None:
                break
            if tx.tx_id not in self.committed_ids and tx.tx_id not in self.outgoing.by_tx:
                self._enqueue(tx)
            self.next_expected[acceptor] = seq + 1
        if not held:
            self.held.pop(acceptor, None)

    def _enqueue(self, tx: Transaction, urgent_for: Optional[bytes] = None) -> None:
        if self.outgoing.enqueue(tx, self.committed_ids) is None:
            return
        frame = codec.pack(tx)
        for pid, p in self.peers.items():
            if pid == urgent_for:
                p.backlog.appendleft((tx.tx_id, frame))
            else:
                p.backlog.append((tx.tx_id, frame))

    def on_peer_tx(self, peer: bytes, value: bytes) -> None:
        tx = decode_tx(value)
        if tx is None:
            return
        a = tx.admin
        if (tx.kind == TxKind.ADMIN and a.kind == AdminKind.OUTAGE and a.reporter == peer
                and a.conn_id == self.peers[peer].receiver.config.conn_id):
            self.report_omission(peer, a.first_index, a.last_index)
        self._admit(tx)

    def report_omission(self, peer: bytes, first: int, last: int) -> Transaction:
        conn = self.peers[peer].receiver.config.conn_id
        tx = make_admin(AdminReport(AdminKind.OMISSION, self.id, peer, conn, first, last), self.key)
        self.admin_txs.append(tx)
        self._enqueue(tx)
        return tx

    def restart(self, peer: bytes, lost: int) -> Transaction:
        """Recover from a crash that swallowed ``lost`` outbound messages to ``peer``.

        The lost channel indices stay unused and an outage report goes out
        on that channel ahead of everything else.
        """
        s = self.peers[peer].sender
        first, last = s.last_sent + 1, s.last_sent + lost
        s.last_sent = last
        tx = make_admin(AdminReport(AdminKind.OUTAGE, self.id, self.id, s.config.conn_id, first, last),
                        self.key)
        self.admin_txs.append(tx)
        self._enqueue(tx, urgent_for=peer)
        self.pump()
        return tx

    # -- channel plumbing ---------------------------------------------------

    def send_frame(self, peer: bytes, frame: bytes) -> None:
        self.outbox.append((peer, frame))

    def pump(self) -> None:
        """Forward as much of each backlog as flow control allows."""
        for pid, p in self.peers.items():
            while p.backlog and not p.sender.would_refuse():
                self.forward_next(pid, p)

    def forward_next(self, pid: bytes, p: Peer) -> None:
        _, value = p.backlog.popleft()
        self.send_frame(pid, codec.pack(p.sender.send(value)))

    def deliver(self, src: bytes, frame: bytes) -> None:
        p = self.peers.get(src)
        if p is None:
            return
        try:
            obj = codec.unpack(frame)
        except codec.DecodeError:
            return
        if type(obj) is OwacMessage:
            self.on_message(src, obj)
        elif type(obj) is owac.Confirmation:
            self.reports.extend(p.sender.on_confirmation(obj))
            self.pump()

    def on_message(self, src: bytes, m: OwacMessage) -> None:
        p = self.peers[src]
        self.reports.extend(p.receiver.on_message(m))
        c = p.receiver.maybe_confirm()
        if c is not None:
            self.send_frame(src, codec.pack(c))
        self.pump()

    def tick(self) -> None:
        """Host event: confirm everything outstanding and look for stalled channels."""
        for pid, p in self.peers.items():
            c = p.receiver.maybe_confirm(event=True)
            if c is not None:
                self.send_frame(pid, codec.pack(c))
            s = p.sender
            if p.backlog and s.would_refuse():
                if s.last_conf == p.stall_mark:
                    p.stalled += 1
                else:
                    p.stall_mark, p.stalled = s.last_conf, 1
                if p.stalled >= self.config.stall_ticks and not p.stall_claimed:
                    p.stall_claimed = True
                    self.reports.append(ViolationReport(Kind.CLAIM, CHANNEL_STALL, self.id, pid,
                                                        (), s.config.conn_id))
            else:
                p.stalled = 0
        self.pump()

    def make_summary(self) -> bytes:
        self.summary_seq += 1
        s = self.outgoing.summarize(self.key, (self.height, self.tip_hash), self.summary_seq)
        snap = self.outgoing.snapshot()
        self.summaries[s.summary_seq] = (s, snap)
        if self.on_summary is not None:
            self.on_summary(s, snap)
        return codec.pack(s)

    # -- blocks -------------------------------------------------------------

    def propose(self, policy: Optional[SelectionPolicy] = None) -> Block:
        p = build_proposal(self.outgoing.snapshot(), policy or self.config.policy, self.tip_hash, self.state)
        return make_block(p, self.height + 1, self.tip_hash, self.key)

    def check_block(self, block: Block, policy: Optional[SelectionPolicy] = None
                    ) -> Optional[ProposalError | str]:
        """Validator check before commit; None means the block is acceptable."""
        if block.height != self.height + 1 or block.prev_hash != self.tip_hash:
            return "chain mismatch"
        if not block.verifies():
            return "bad block signature"
        p = block.to_proposal()
        if p is None:
            return ProposalError.BadPrefix
        return verify_proposal(p, block.prev_hash, block.outqueue_root, policy or self.config.policy,
                               self.state)

    def on_commit(self, block: Block) -> None:
        if block.height != self.height + 1 or block.prev_hash != self.tip_hash:
            raise ChainMismatch(f"block {block.height} does not extend height {self.height}")
        self.state = apply_block(block, self.state)
        self.chain.append(block)
        txs = block.txs
        ids = {tx.tx_id for tx in txs}
        self.committed_ids |= ids
        self.outgoing.remove_committed(txs)
        for p in self.peers.values():
            if any(tid in ids for tid, _ in p.backlog):
                p.backlog = deque(item for item in p.backlog if item[0] not in ids)
        self.accepted_queue = [tx for tx in self.accepted_queue if tx.tx_id not in ids]
        self._accept_state = dict(self.state)
        for tx in self.accepted_queue:
            if tx.censorship is None and validate_against_state(tx, self._accept_state) is None:
                self._accept_state = apply(tx, self._accept_state)
        touched = set()
        for tx in txs:
            r = tx.receipt
            if r is not None and r.acceptor_seq >= self.next_expected.get(r.acceptor_id, 0):
                self.next_expected[r.acceptor_id] = r.acceptor_seq + 1
                touched.add(r.acceptor_id)
        for acceptor in sorted(touched):
            self._release(acceptor)
        self._retain()
        self.pump()

    def _retain(self) -> None:
        horizon = self.config.retention_blocks
        for p in self.peers.values():
            p.retention.append((p.receiver.last_ackd, p.sender.last_conf))
            if len(p.retention) > horizon:
                ackd, conf = p.retention.popleft()
                p.receiver.prune_messages(ackd + 1)
                p.sender.prune_confirmations(conf)
        floor = self.height - horizon
        for seq in [q for q, (s, _) in self.summaries.items() if s.block_height < floor]:
            del self.summaries[seq]

    # -- introspection ------------------------------------------------------

    def channels(self) -> list[ChannelConfig]:
        out = []
        for p in self.peers.values():
            out += [p.sender.config, p.receiver.config]
        return out

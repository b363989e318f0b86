"""Accountability checks over summaries, channel transcripts and blocks.

Everything here works offline from signed artifacts. A proof produced by
this module, or by a node's channel endpoint, can be re-checked by
:func:`verify_proof` with nothing but the public network configuration.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from . import codec, owac
from .codec import Digest
from .ledger import Account, Transaction, TxKind, make_basic_check
from .node import CHANNEL_STALL, GossipRules, channel_config, decode_tx, outage_covers
from .outqueue import EntryKind, PartialTree, QueueSnapshot, QueueSummary, recombine
from .owac import ChannelConfig, Confirmation, Kind, OwacMessage, ViolationReport
from .proposal import Block, ProposalError, SelectionPolicy, apply_block, genesis_hash, verify_proposal

LOST_TX = "LostTx"
REORDERED_TX = "ReorderedTx"
BLOCK_RULES = tuple(e.name for e in ProposalError)
CHANNEL_PROOF_RULES = (owac.CONFLICTING, owac.TOO_FAR_AHEAD, owac.RULES_VIOLATED)

AUDITOR_ID = b"auditor"


class BadDisclosure(ValueError):
    """A disclosure does not match the summary it claims to open."""


# -- public configuration ---------------------------------------------------

@dataclass
class PublicConfig:
    """What any third party needs to check proofs: identities, links and genesis."""

    nodes: list[bytes]
    links: list[tuple[int, int]]
    genesis: dict[bytes, Account]
    grace_period: int = 8
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    hash: str = "ripemd160"

    def channels(self) -> dict[bytes, ChannelConfig]:
        out = {}
        for i, j in self.links:
            for a, b in ((i, j), (j, i)):
                cfg = channel_config(self.nodes[a], self.nodes[b], self.grace_period)
                out[cfg.conn_id] = cfg
        return out

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "hash": self.hash,
            "grace_period": self.grace_period,
            "policy": str(self.policy),
            "nodes": [n.hex() for n in self.nodes],
            "links": [list(l) for l in self.links],
            "genesis": {a.hex(): [acct.balance, acct.next_nonce] for a, acct in sorted(self.genesis.items())},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PublicConfig":
        d = json.loads(text)
        if d.get("version") != 1:
            raise ValueError("unsupported config version")
        return cls(
            nodes=[bytes.fromhex(n) for n in d["nodes"]],
            links=[(int(a), int(b)) for a, b in d["links"]],
            genesis={bytes.fromhex(a): Account(int(b), int(n)) for a, (b, n) in d["genesis"].items()},
            grace_period=int(d["grace_period"]),
            policy=SelectionPolicy.parse(d["policy"]),
            hash=d["hash"],
        )


# -- proof files --------------------------------------------------------------

PROOF_VERSION = 1


def dump_proof(report: ViolationReport) -> str:
    """Self-contained JSON for one report; check it with ``verify_proof`` and the public config."""
    return json.dumps({
        "version": PROOF_VERSION,
        "kind": report.kind.name.lower(),
        "rule": report.rule,
        "reporter": report.reporter.hex(),
        "accused": report.accused.hex(),
        "conn_id": report.conn_id.hex(),
        "evidence": [e.hex() for e in report.evidence],
    }, sort_keys=True, indent=1) + "\n"


def load_proof(text: str) -> ViolationReport:
    """Inverse of ``dump_proof``; raises ValueError on anything malformed."""
    try:
        d = json.loads(text)
        if d.get("version") != PROOF_VERSION:
            raise ValueError("unsupported proof version")
        return ViolationReport(Kind[d["kind"].upper()], str(d["rule"]), bytes.fromhex(d["reporter"]),
                               bytes.fromhex(d["accused"]), tuple(bytes.fromhex(e) for e in d["evidence"]),
                               bytes.fromhex(d.get("conn_id", "")))
    except (KeyError, TypeError, AttributeError) as exc:
        raise ValueError(f"malformed proof: {exc}") from exc


# -- helpers ----------------------------------------------------------------

def _unpack_all(blobs: Iterable[bytes]) -> Optional[list]:
    try:
        return [codec.unpack(b) for b in blobs]
    except codec.DecodeError:
        return None


def full_queue(pt: PartialTree, root: Digest) -> list[tuple[int, Transaction]]:
    """Open a complete disclosure of a queue; raises BadDisclosure if it is not one."""
    if recombine(pt) != root:
        raise BadDisclosure("disclosure does not recombine to the summary root")
    out, last = [], None
    for e in pt.entries:
        if e.kind != EntryKind.LEAF or (last is not None and e.position <= last):
            raise BadDisclosure("disclosure is not a complete in-order queue")
        last = e.position
        out.append((e.position, e.tx))
    return out


def chain_links(blocks: Sequence[Block], start_height: int, start_hash: Digest,
                end_height: int, end_hash: Digest) -> bool:
    """True iff ``blocks`` are exactly heights start+1..end, hash-linked between the two references."""
    if len(blocks) != end_height - start_height:
        return False
    h = start_hash
    for n, b in enumerate(blocks, start_height + 1):
        if b.height != n or b.prev_hash != h or not b.verifies():
            return False
        h = b.hash
    return h == end_hash


def _acceptor_key(tx: Transaction) -> Optional[tuple[bytes, int]]:
    return None if tx.receipt is None else (tx.receipt.acceptor_id, tx.receipt.acceptor_seq)


# -- summary comparison -----------------------------------------------------

def _compare(q1: list[tuple[int, Transaction]], q2: list[tuple[int, Transaction]],
             committed_between: set[Digest]) -> Optional[str]:
    pos2 = {tx.tx_id: p for p, tx in q2}
    for p, tx in q1:
        tid = tx.tx_id
        if tid not in pos2 and tid not in committed_between:
            return LOST_TX
    pos1 = {tx.tx_id: p for p, tx in q1}
    top = max(pos1.values(), default=-1)
    for p, tx in q2:
        old = pos1.get(tx.tx_id)
        if (old is not None and old != p) or (old is None and p <= top):
            return REORDERED_TX
    return None


def compare_summaries(s1: QueueSummary, s2: QueueSummary, d1: PartialTree, d2: PartialTree,
                      blocks_between: Sequence[Block], reporter: bytes = AUDITOR_ID
                      ) -> Optional[ViolationReport]:
    """Check that a node's queue evolved only by appends and commits between two summaries.

    ``blocks_between`` are the committed blocks after ``s1``'s block
    reference up to and including ``s2``'s. Returns None when consistent.
    """
    assert s1.node_id == s2.node_id and s1.summary_seq < s2.summary_seq
    q1, q2 = full_queue(d1, s1.root), full_queue(d2, s2.root)
    committed = {tx.tx_id for b in blocks_between for tx in b.txs}
    rule = _compare(q1, q2, committed)
    if rule is None:
        return None
    evidence = (codec.pack(s1), codec.pack(s2), codec.pack(d1), codec.pack(d2),
                *(codec.pack(b) for b in blocks_between))
    return ViolationReport(Kind.PROOF, rule, reporter, s1.node_id, evidence)


def _verify_summary_proof(report: ViolationReport) -> bool:
    items = _unpack_all(report.evidence)
    if items is None or len(items) < 4:
        return False
    s1, s2, d1, d2, *blocks = items
    if not (type(s1) is QueueSummary and type(s2) is QueueSummary
            and type(d1) is PartialTree and type(d2) is PartialTree
            and all(type(b) is Block for b in blocks)):
        return False
    if not (s1.node_id == s2.node_id == report.accused and s1.summary_seq < s2.summary_seq
            and s1.verifies() and s2.verifies()):
        return False
    if not chain_links(blocks, s1.block_height, s1.block_hash, s2.block_height, s2.block_hash):
        return False
    try:
        q1, q2 = full_queue(d1, s1.root), full_queue(d2, s2.root)
    except BadDisclosure:
        return False
    return _compare(q1, q2, {tx.tx_id for b in blocks for tx in b.txs}) == report.rule


# -- channel transcripts ----------------------------------------------------

def _lost_from_confirmation(msgs: Sequence[OwacMessage], queue: list[tuple[int, Transaction]],
                            chain: Sequence[Block]) -> Optional[OwacMessage]:
    """First confirmed message whose transaction the receiver should hold but does not."""
    present: set[Digest] = {tx.tx_id for _, tx in queue}
    slots: set[tuple[bytes, int]] = set()
    for tx in [tx for _, tx in queue] + [tx for b in chain for tx in b.txs]:
        present.add(tx.tx_id)
        k = _acceptor_key(tx)
        if k is not None:
            slots.add(k)
    for m in msgs:
        tx = decode_tx(m.value)
        if tx is None or make_basic_check(tx) is not None or tx.tx_id in present:
            continue
        k = _acceptor_key(tx)
        if k is not None:
            acceptor, seq = k
            # Still waiting for an earlier transaction from the same acceptor,
            # or a different transaction already holds this slot.
            if k in slots or any((acceptor, s) not in slots for s in range(seq)):
                continue
        return m
    return None


def _segment_evidence(prev: Optional[Confirmation], seg: Sequence[OwacMessage], c: Confirmation,
                      pt: PartialTree, chain: Sequence[Block]) -> tuple[bytes, ...]:
    """Layout: confirmation, optional previous confirmation, the messages between, disclosure, blocks."""
    head = (codec.pack(c),) + ((codec.pack(prev),) if prev is not None else ())
    return head + tuple(codec.pack(m) for m in seg) + (codec.pack(pt),) + tuple(codec.pack(b) for b in chain)


def _verify_channel_lost(report: ViolationReport, channels: Mapping[bytes, ChannelConfig]) -> bool:
    items = _unpack_all(report.evidence)
    if not items or type(items[0]) is not Confirmation:
        return False
    c = items.pop(0)
    prev = items.pop(0) if items and type(items[0]) is Confirmation else None
    seg = []
    while items and type(items[0]) is OwacMessage:
        seg.append(items.pop(0))
    if not items or type(items[0]) is not PartialTree:
        return False
    pt, chain = items[0], items[1:]
    if not all(type(b) is Block for b in chain):
        return False
    cfg = channels.get(c.conn_id)
    if cfg is None or report.accused != cfg.receiver_id or not owac.signature_ok(c, cfg.receiver_id):
        return False
    start_index, h = -1, codec.zero_digest()
    if prev is not None:
        if prev.conn_id != c.conn_id or not owac.signature_ok(prev, cfg.receiver_id):
            return False
        start_index, h = prev.confirmed_index, prev.conf_hash
    last = start_index
    for m in seg:
        if m.conn_id != c.conn_id or m.index <= last or not owac.signature_ok(m, cfg.sender_id):
            return False
        last = m.index
        h = codec.chain_hash(h, m.value)
    if last > c.confirmed_index or h != c.conf_hash:
        return False
    try:
        s = codec.unpack(c.data_summary)
    except codec.DecodeError:
        return False
    if type(s) is not QueueSummary or s.node_id != cfg.receiver_id or not s.verifies():
        return False
    if not chain_links(chain, 0, genesis_hash(), s.block_height, s.block_hash):
        return False
    try:
        queue = full_queue(pt, s.root)
    except BadDisclosure:
        return False
    return _lost_from_confirmation(seg, queue, chain) is not None


@dataclass
class TranscriptEvent:
    """One frame seen at the receiving endpoint: a delivered message or an issued confirmation."""

    kind: str
    frame: bytes


def audit_channel(config: ChannelConfig, transcript: Sequence[TranscriptEvent],
                  disclosures: Mapping[tuple[bytes, int], PartialTree] = {},
                  chain: Sequence[Block] = (), reporter: bytes = AUDITOR_ID) -> list[ViolationReport]:
    """Replay a channel offline and check each confirmation against the receiver's own summary.

    ``disclosures`` maps (node_id, summary_seq) to a complete disclosure of
    that summary's queue; confirmations without one are only replayed.
    """
    sender = owac.Sender(config, None)
    receiver = owac.Receiver(config, None, rules=GossipRules(),
                             forgive_gap=lambda a, b, m: outage_covers(config.sender_id, a, b, m))
    reports: list[ViolationReport] = []
    accepted: list[OwacMessage] = []
    prev: Optional[Confirmation] = None
    blamed = False
    for ev in transcript:
        try:
            obj = codec.unpack(ev.frame)
        except codec.DecodeError:
            continue
        if ev.kind == "msg" and type(obj) is OwacMessage:
            sender.note_message(obj)
            before = receiver.last_rcvd
            reports += receiver.on_message(obj)
            if receiver.last_rcvd != before:
                accepted.append(obj)
        elif ev.kind == "conf" and type(obj) is Confirmation:
            reports += sender.on_confirmation(obj)
            receiver.note_confirmation(obj)
            if blamed or obj.conn_id != config.conn_id or not owac.signature_ok(obj, config.receiver_id):
                continue
            seg_start = prev.confirmed_index if prev is not None else -1
            seg = [m for m in accepted if seg_start < m.index <= obj.confirmed_index]
            try:
                s = codec.unpack(obj.data_summary)
            except codec.DecodeError:
                s = None
            pt = disclosures.get((s.node_id, s.summary_seq)) if type(s) is QueueSummary else None
            if pt is not None and s.node_id == config.receiver_id and s.block_height <= len(chain):
                try:
                    queue = full_queue(pt, s.root)
                except BadDisclosure:
                    queue = None
                done = chain[:s.block_height]
                if queue is not None and _lost_from_confirmation(seg, queue, done) is not None:
                    blamed = True
                    reports.append(ViolationReport(Kind.PROOF, LOST_TX, reporter, config.receiver_id,
                                                   _segment_evidence(prev, seg, obj, pt, done),
                                                   config.conn_id))
            prev = obj
    return reports


# -- block proofs -----------------------------------------------------------

def block_fault(block: Block, history: Sequence[Block], config: PublicConfig) -> Optional[str]:
    """Name of the rule ``block`` breaks given the committed ``history`` before it, else None."""
    state = dict(config.genesis)
    for b in history:
        state = apply_block(b, state)
    p = block.to_proposal()
    if p is None:
        return ProposalError.BadPrefix.name
    err = verify_proposal(p, block.prev_hash, block.outqueue_root, config.policy, state)
    return None if err is None else err.name


def block_proof(block: Block, history: Sequence[Block], rule: str, reporter: bytes) -> ViolationReport:
    evidence = (codec.pack(block),) + tuple(codec.pack(b) for b in history)
    return ViolationReport(Kind.PROOF, rule, reporter, block.proposer_id, evidence)


def _verify_block_proof(report: ViolationReport, config: PublicConfig) -> bool:
    items = _unpack_all(report.evidence)
    if not items or not all(type(b) is Block for b in items):
        return False
    block, history = items[0], items[1:]
    if block.proposer_id != report.accused or not block.verifies():
        return False
    if not chain_links(history, 0, genesis_hash(), block.height - 1, block.prev_hash):
        return False
    return block_fault(block, history, config) == report.rule


# -- dispatch ---------------------------------------------------------------

def verify_proof(report: ViolationReport, config: PublicConfig) -> bool:
    """Check any proof from its evidence and the public configuration alone."""
    if report.kind != Kind.PROOF:
        return False
    if config.hash != codec.hash_name():
        codec.set_hash(config.hash)
    channels = config.channels()
    if report.rule in CHANNEL_PROOF_RULES:
        return owac.verify_proof(report, channels, GossipRules)
    if report.rule == LOST_TX and report.evidence:
        try:
            first = codec.unpack(report.evidence[0])
        except codec.DecodeError:
            return False
        if type(first) is Confirmation:
            return _verify_channel_lost(report, channels)
    if report.rule in (LOST_TX, REORDERED_TX):
        return _verify_summary_proof(report)
    if report.rule in BLOCK_RULES:
        return _verify_block_proof(report, config)
    return False


# -- aggregation ------------------------------------------------------------

@dataclass
class ClaimTally:
    counts: dict[tuple[bytes, str], int]
    flagged: set[bytes]

    def count(self, accused: bytes, rule: Optional[str] = None) -> int:
        return sum(n for (a, r), n in self.counts.items() if a == accused and (rule is None or r == rule))


def tally_claims(reports: Iterable[ViolationReport], messages_seen: Mapping[bytes, int] = {},
                 threshold: float = 0.01, window: int = 1000) -> ClaimTally:
    """Count claims per (accused, rule); flag nodes whose claim rate exceeds ``threshold``.

    The rate is claims over the node's message count, capped at ``window``
    so a long clean history cannot dilute a recent burst indefinitely.
    """
    counts: Counter = Counter()
    per_node: Counter = Counter()
    for r in reports:
        if r.kind == Kind.CLAIM:
            counts[(r.accused, r.rule)] += 1
            per_node[r.accused] += 1
    flagged = {a for a, n in per_node.items()
               if n / max(1, min(messages_seen.get(a, 0), window)) > threshold}
    return ClaimTally(dict(counts), flagged)


class AuditLedger:
    """A global passive auditor: sees every summary, transcript and committed block."""

    def __init__(self) -> None:
        self.summaries: dict[bytes, list[tuple[QueueSummary, PartialTree]]] = defaultdict(list)
        self.transcripts: dict[bytes, list[TranscriptEvent]] = defaultdict(list)
        self.reports: list[ViolationReport] = []

    def record_summary(self, s: QueueSummary, snap: QueueSnapshot) -> None:
        self.record_disclosure(s, snap.disclose_prefix(snap.size))

    def record_disclosure(self, s: QueueSummary, full: PartialTree) -> None:
        self.summaries[s.node_id].append((s, full))

    def record_frame(self, conn_id: bytes, kind: str, frame: bytes) -> None:
        self.transcripts[conn_id].append(TranscriptEvent(kind, frame))

    def disclosures(self) -> dict[tuple[bytes, int], PartialTree]:
        return {(s.node_id, s.summary_seq): pt for items in self.summaries.values() for s, pt in items}

    def run(self, chain: Sequence[Block], channels: Mapping[bytes, ChannelConfig],
            exclude_accused: Iterable[bytes] = ()) -> list[ViolationReport]:
        """Compare consecutive summaries per node and replay every transcript; one report per (rule, accused)."""
        skip = set(exclude_accused)
        found: list[ViolationReport] = []
        seen: set[tuple[str, bytes]] = set()
        disclosures = self.disclosures()

        def add(r: ViolationReport) -> None:
            if (r.rule, r.accused) not in seen and r.accused not in skip:
                seen.add((r.rule, r.accused))
                found.append(r)

        for node_id in sorted(self.summaries):
            items = sorted(self.summaries[node_id], key=lambda x: x[0].summary_seq)
            for (s1, _), (s2, _) in zip(items, items[1:]):
                if s2.block_height > len(chain) or s1.block_height > s2.block_height:
                    continue
                between = chain[s1.block_height:s2.block_height]
                if not chain_links(between, s1.block_height, s1.block_hash, s2.block_height, s2.block_hash):
                    continue
                r = compare_summaries(s1, s2, disclosures[(node_id, s1.summary_seq)],
                                      disclosures[(node_id, s2.summary_seq)], between)
                if r is not None:
                    add(r)
                    break
        for conn in sorted(self.transcripts):
            cfg = channels.get(conn)
            if cfg is None:
                continue
            for r in audit_channel(cfg, self.transcripts[conn], disclosures, chain):
                if r.kind == Kind.PROOF:
                    add(r)
        self.reports = found
        return found


def replay_trace(events: Sequence[Mapping], config: PublicConfig) -> list[ViolationReport]:
    """Re-run the passive audit from a stored simulation trace alone.

    Confirmations are observed when issued and messages when delivered, the
    same vantage point the live auditor has. Rejected blocks are re-judged
    against the committed history. Node-local claims are not reconstructed.
    """
    codec.set_hash(config.hash)
    ledger = AuditLedger()
    chain: list[Block] = []
    blocks: list[ViolationReport] = []
    for ev in events:
        kind = ev.get("ev")
        if kind == "frame":
            frame = bytes.fromhex(ev["frame"])
            if frame[:1] == b"\x02":
                _observe(ledger, "conf", frame)
        elif kind == "deliver":
            frame = bytes.fromhex(events[ev["ref"]]["frame"])
            if frame[:1] == b"\x01":
                _observe(ledger, "msg", frame)
        elif kind == "summary":
            s = codec.unpack(bytes.fromhex(ev["summary"]))
            pt = codec.unpack(bytes.fromhex(ev["disclosure"]))
            if type(s) is not QueueSummary or type(pt) is not PartialTree:
                raise codec.DecodeError("summary event does not hold a summary and a tree")
            ledger.record_disclosure(s, pt)
        elif kind in ("commit", "reject"):
            block = codec.unpack(bytes.fromhex(ev["block"]))
            if type(block) is not Block:
                raise codec.DecodeError("block event does not hold a block")
            if kind == "commit":
                chain.append(block)
            else:
                rule = block_fault(block, chain, config)
                if rule is not None:
                    blocks.append(block_proof(block, chain, rule, AUDITOR_ID))
    return blocks + ledger.run(chain, config.channels())


def _observe(ledger: AuditLedger, kind: str, frame: bytes) -> None:
    try:
        obj = codec.unpack(frame)
    except codec.DecodeError:
        return
    ledger.record_frame(obj.conn_id, kind, frame)

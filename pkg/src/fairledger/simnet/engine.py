"""Deterministic discrete-event execution of a scenario.

Events are totally ordered by ``(time, rank, seq)``: ``rank`` is the index
of the node the event happens at (global consensus ticks use -1, so they
run first at their time) and ``seq`` is the order in which events were
scheduled. Pipes are FIFO per directed link. Consensus is a stand-in:
each tick the next proposer in round-robin order proposes, and the block
is committed everywhere at once if every honest validator accepts it.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Optional

from .. import codec
from ..audit import AuditLedger, PublicConfig, block_proof
from ..crypto import KeyPair
from ..ledger import Account, Transaction, make_send
from ..node import Node, NodeConfig, Receipt, Refused
from ..outqueue import QueueSnapshot, QueueSummary
from ..owac import Kind, ViolationReport
from ..proposal import Block
from .behaviors import BEHAVIORS, ByzantineNode
from .scenario import Scenario


def node_key(seed: int, i: int) -> KeyPair:
    return KeyPair.from_seed(f"node:{seed}:{i}".encode())


def account_key(seed: int, i: int) -> KeyPair:
    return KeyPair.from_seed(f"account:{seed}:{i}".encode())


@dataclass
class Trace:
    scenario: Scenario
    config: PublicConfig
    events: list[dict[str, Any]]
    chain: list[Block]
    reports: list[ViolationReport]
    end_states: dict[str, dict[str, Any]]
    receipts: list[Receipt]
    nodes: list[Node] = field(repr=False, default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)

    def reports_jsonl(self) -> str:
        return "".join(json.dumps(r.record(), sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.reports)

    def digest(self) -> str:
        h = hashlib.sha256(self.to_jsonl().encode())
        h.update(self.reports_jsonl().encode())
        h.update(json.dumps(self.end_states, sort_keys=True).encode())
        return h.hexdigest()

    def honest(self) -> list[int]:
        byz = {b.node for b in self.scenario.byzantine}
        return [i for i in range(self.scenario.nodes) if i not in byz]


class Simulator:
    def __init__(self, sc: Scenario):
        sc.validate()
        codec.set_hash(sc.hash)
        self.sc = sc
        self.rng = random.Random(sc.seed)
        self.keys = [node_key(sc.seed, i) for i in range(sc.nodes)]
        self.ids = tuple(k.public_id for k in self.keys)
        self.index = {pid: i for i, pid in enumerate(self.ids)}
        self.accounts = [account_key(sc.seed, i) for i in range(sc.accounts)]
        genesis = {k.public_id: Account(sc.initial_balance, 0) for k in self.accounts}
        links = sc.links()
        self.config = PublicConfig(list(self.ids), links, genesis, sc.grace_period, sc.policy, sc.hash)
        neighbours: dict[int, list[int]] = {i: [] for i in range(sc.nodes)}
        for a, b in links:
            neighbours[a].append(b)
            neighbours[b].append(a)
        self.byzantine = {b.node: b for b in sc.byzantine}
        self.auditor = AuditLedger()
        self.nodes: list[Node] = []
        for i, key in enumerate(self.keys):
            cfg = NodeConfig(sc.grace_period, sc.batch_size, sc.stall_ticks, policy=sc.policy)
            peers = [self.ids[j] for j in neighbours[i]]
            blacklist = [self.accounts[a].public_id for a in sc.blacklist.get(i, [])]
            b = self.byzantine.get(i)
            if b is None:
                node = Node(key, genesis, peers, cfg, blacklist=blacklist)
            else:
                node = BEHAVIORS[b.behavior](key, genesis, peers, cfg, blacklist=blacklist,
                                             params=b.params, ids=self.ids, account_keys=self.accounts)
            node.on_summary = self._summary
            self.nodes.append(node)
        self.channels = self.config.channels()
        self.queue: list[tuple[int, int, int, str, tuple]] = []
        self.seq = 0
        self.now = 0
        self.pipe_clock: dict[tuple[int, int], int] = {}
        self.events: list[dict[str, Any]] = []
        self.block_reports: list[ViolationReport] = []
        self.receipts: list[Receipt] = []
        self.client_nonce = [0] * sc.accounts
        self.round = 0

    # -- scheduling -----------------------------------------------------------

    def schedule(self, time: int, rank: int, kind: str, payload: tuple) -> None:
        heapq.heappush(self.queue, (time, rank, self.seq, kind, payload))
        self.seq += 1

    def _summary(self, s: QueueSummary, snap: QueueSnapshot) -> None:
        full = snap.disclose_prefix(snap.size)
        self.auditor.record_disclosure(s, full)
        self.log("summary", node=self.index[s.node_id], seq=s.summary_seq, size=snap.size, summary=codec.pack(s).hex(),
                 disclosure=codec.pack(full).hex())

    def log(self, ev: str, **fields: Any) -> None:
        fields.update(t=self.now, ev=ev)
        self.events.append(fields)

    def flush(self, i: int) -> None:
        node = self.nodes[i]
        out, node.outbox = node.outbox, []
        for dst_id, frame in out:
            j = self.index[dst_id]
            if frame[:1] == b"\x02":
                try:
                    c = codec.unpack(frame)
                    self.auditor.record_frame(c.conn_id, "conf", frame)
                except codec.DecodeError:
                    pass
            arrive = self.now + self.sc.delay + (self.rng.randint(0, self.sc.jitter) if self.sc.jitter else 0)
            arrive = max(arrive, self.pipe_clock.get((i, j), 0))
            self.pipe_clock[(i, j)] = arrive
            self.log("frame", src=i, dst=j, arrive=arrive, frame=frame.hex())
            self.schedule(arrive, j, "deliver", (i, frame, len(self.events) - 1))

    # -- workload ---------------------------------------------------------------

    def _workload(self) -> None:
        sc = self.sc
        for s in sc.submissions:
            self.schedule(s.time, s.sender % sc.nodes, "submit", (s.sender, s.recipient, s.amount))
        wl = random.Random(sc.seed ^ 0x5EED)
        for k in range(sc.workload_txs):
            a = wl.randrange(sc.accounts)
            b = wl.randrange(sc.accounts)
            amount = wl.randint(1, sc.max_amount)
            self.schedule(sc.workload_start + k * sc.workload_spacing, a % sc.nodes, "submit", (a, b, amount))
        for r in sc.restarts:
            self.schedule(r.time, r.node, "restart", (r.peer, r.lost))
        t = sc.interval
        while t <= sc.duration:
            self.schedule(t, -1, "tick", ())
            t += sc.interval

    def _submit(self, acceptor: int, sender: int, recipient: int, amount: int) -> None:
        key = self.accounts[sender]
        nonce = self.client_nonce[sender]
        tx = make_send([(key, amount, nonce)], [(self.accounts[recipient].public_id, amount)],
                       memo=f"{self.seq}".encode())
        res = self.nodes[acceptor].accept_tx(tx)
        if isinstance(res, Receipt):
            self.receipts.append(res)
            if res.tx.censorship is None:
                self.client_nonce[sender] += 1
            self.log("receipt", acceptor=acceptor, account=sender, tx=res.tx_id.hex(),
                     seq=res.receipt.acceptor_seq, censored=res.tx.censorship is not None)
        else:
            self.log("refused", acceptor=acceptor, account=sender, reason=int(res.reason))

    # -- consensus --------------------------------------------------------------

    def _tick(self) -> None:
        for i, node in enumerate(self.nodes):
            node.tick()
            self.flush(i)
        n = self.sc.nodes
        proposer = self.round % n
        self.round += 1
        block = self.nodes[proposer].propose()
        self.flush(proposer)
        verdicts = {}
        for i, node in enumerate(self.nodes):
            if i == proposer or i in self.byzantine:
                continue
            verdicts[i] = node.check_block(block)
        rejected = {i: v for i, v in verdicts.items() if v is not None}
        if rejected:
            history = self.nodes[min(verdicts)].chain
            for i, v in sorted(rejected.items()):
                name = v.name if hasattr(v, "name") else str(v)
                self.block_reports.append(block_proof(block, history, name, self.ids[i]))
            self.log("reject", proposer=proposer, height=block.height, block=codec.pack(block).hex(),
                     verdicts={str(i): (v.name if hasattr(v, "name") else str(v)) for i, v in rejected.items()})
            return
        for i, node in enumerate(self.nodes):
            node.on_commit(block)
        for i in range(n):
            self.flush(i)
        self.log("commit", proposer=proposer, height=block.height, hash=block.hash.hex(),
                 txs=len(block.entries), processed=len(block.processed), block=codec.pack(block).hex())

    # -- main loop --------------------------------------------------------------

    def run(self) -> Trace:
        self._workload()
        while self.queue:
            time, rank, _, kind, payload = heapq.heappop(self.queue)
            if time > self.sc.duration:
                break
            self.now = time
            if kind == "deliver":
                src, frame, ref = payload
                node = self.nodes[rank]
                self.log("deliver", src=src, dst=rank, ref=ref)
                if frame[:1] == b"\x01":
                    try:
                        m = codec.unpack(frame)
                        self.auditor.record_frame(m.conn_id, "msg", frame)
                    except codec.DecodeError:
                        pass
                node.deliver(self.ids[src], frame)
                self.flush(rank)
            elif kind == "submit":
                self._submit(rank, *payload)
                self.flush(rank)
            elif kind == "restart":
                peer, lost = payload
                tx = self.nodes[rank].restart(self.ids[peer], lost)
                self.log("restart", node=rank, peer=peer, lost=lost, tx=tx.tx_id.hex())
                self.flush(rank)
            elif kind == "tick":
                self._tick()
        return self._finish()

    def _finish(self) -> Trace:
        honest = [i for i in range(self.sc.nodes) if i not in self.byzantine]
        reports: list[ViolationReport] = []
        for i in honest:
            reports.extend(self.nodes[i].reports)
        reports.extend(self.block_reports)
        chain = self.nodes[honest[0]].chain if honest else self.nodes[0].chain
        reports.extend(self.auditor.run(chain, self.channels))
        for r in reports:
            self.log("report", **r.record())
        end = {}
        for i, node in enumerate(self.nodes):
            end[str(i)] = {
                "height": node.height,
                "tip": node.tip_hash.hex(),
                "queue_root": node.outgoing.root.hex(),
                "queue_size": len(node.outgoing),
                "state": hashlib.sha256(codec.encode(sorted(
                    (a, acct.balance, acct.next_nonce) for a, acct in node.state.items()))).hexdigest(),
                "byzantine": self.byzantine[i].behavior if i in self.byzantine else None,
            }
        return Trace(self.sc, self.config, self.events, list(chain), reports, end, self.receipts, self.nodes)


def run(sc: Scenario) -> Trace:
    return Simulator(sc).run()

"""Scenario files: versioned JSON describing one deterministic simulation.

Schema (version 1); every key except ``version`` is optional::

    {
      "version": 1,
      "name": "honest",
      "seed": 1,                        nonzero
      "nodes": 4,
      "topology": "full" | "ring" | [[0, 1], [1, 2], ...],
      "grace_period": 4,
      "batch_size": 16,
      "stall_ticks": 3,
      "delay": 1, "jitter": 1,          per-hop latency, FIFO preserved
      "consensus": {"interval": 10, "policy": "fixed:128"},
      "accounts": 8, "initial_balance": 1000,
      "workload": {"txs": 100, "start": 1, "spacing": 1, "max_amount": 5},
      "submissions": [{"time": 3, "from": 0, "to": 1, "amount": 2}],
      "byzantine": [{"node": 2, "behavior": "Equivocate", "params": {}}],
      "blacklist": [{"node": 0, "accounts": [3]}],
      "restarts": [{"time": 40, "node": 1, "peer": 2, "lost": 2}],
      "duration": 200,                  time horizon of the run
      "hash": "ripemd160"
    }

Accounts are submitted through a fixed acceptor, ``account % nodes``, the
way a client would keep talking to one endpoint.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

from .. import codec
from ..proposal import SelectionPolicy

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """The scenario document does not match the schema."""


@dataclass(frozen=True)
class Byzantine:
    node: int
    behavior: str
    params: dict = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class Submission:
    time: int
    sender: int
    recipient: int
    amount: int


@dataclass(frozen=True)
class Restart:
    time: int
    node: int
    peer: int
    lost: int


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 1
    nodes: int = 4
    topology: Union[str, list] = "full"
    grace_period: int = 4
    batch_size: int = 16
    stall_ticks: int = 3
    delay: int = 1
    jitter: int = 1
    interval: int = 10
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    accounts: int = 8
    initial_balance: int = 1000
    workload_txs: int = 0
    workload_start: int = 1
    workload_spacing: int = 1
    max_amount: int = 5
    submissions: list[Submission] = field(default_factory=list)
    byzantine: list[Byzantine] = field(default_factory=list)
    blacklist: dict[int, list[int]] = field(default_factory=dict)
    restarts: list[Restart] = field(default_factory=list)
    duration: int = 200
    hash: str = "ripemd160"

    def links(self) -> list[tuple[int, int]]:
        n = self.nodes
        if self.topology == "full":
            return [(i, j) for i in range(n) for j in range(i + 1, n)]
        if self.topology == "ring":
            return sorted({tuple(sorted((i, (i + 1) % n))) for i in range(n)}) if n > 1 else []
        return sorted({tuple(sorted((int(a), int(b)))) for a, b in self.topology})

    def validate(self) -> None:
        if self.seed == 0:
            raise ScenarioError("seed must be nonzero")
        if self.nodes < 1:
            raise ScenarioError("need at least one node")
        if self.hash not in codec.HASHES:
            raise ScenarioError(f"unknown hash {self.hash!r}")
        for name in ("grace_period", "batch_size", "stall_ticks", "interval", "accounts"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"{name} must be positive")
        if self.delay < 1 or self.jitter < 0 or self.duration < 0:
            raise ScenarioError("delay must be positive, jitter and duration non-negative")
        links = self.links()
        for a, b in links:
            if not (0 <= a < self.nodes and 0 <= b < self.nodes) or a == b:
                raise ScenarioError(f"bad link {a}-{b}")
        if not _connected(self.nodes, links):
            raise ScenarioError("topology is not connected")
        from .behaviors import BEHAVIORS
        for b in self.byzantine:
            if b.behavior not in BEHAVIORS:
                raise ScenarioError(f"unknown behavior {b.behavior!r}")
            if not 0 <= b.node < self.nodes:
                raise ScenarioError(f"byzantine node {b.node} out of range")
        if len({b.node for b in self.byzantine}) != len(self.byzantine):
            raise ScenarioError("at most one behavior per node")
        adjacent = {(a, b) for a, b in links} | {(b, a) for a, b in links}
        for r in self.restarts:
            if (r.node, r.peer) not in adjacent or r.lost < 1:
                raise ScenarioError(f"bad restart {r}")
        for s in self.submissions:
            if not (0 <= s.sender < self.accounts and 0 <= s.recipient < self.accounts) or s.amount < 0:
                raise ScenarioError(f"bad submission {s}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scenario":
        if not isinstance(d, dict) or d.get("version") != SCHEMA_VERSION:
            raise ScenarioError(f"scenario must be an object with version {SCHEMA_VERSION}")
        known = {"version", "name", "seed", "nodes", "topology", "grace_period", "batch_size",
                 "stall_ticks", "delay", "jitter", "consensus", "accounts", "initial_balance",
                 "workload", "submissions", "byzantine", "blacklist", "restarts", "duration", "hash"}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown keys: {sorted(extra)}")
        try:
            cons = d.get("consensus", {})
            work = d.get("workload", {})
            sc = cls(
                name=str(d.get("name", "scenario")),
                seed=int(d.get("seed", 1)),
                nodes=int(d.get("nodes", 4)),
                topology=d.get("topology", "full"),
                grace_period=int(d.get("grace_period", 4)),
                batch_size=int(d.get("batch_size", 16)),
                stall_ticks=int(d.get("stall_ticks", 3)),
                delay=int(d.get("delay", 1)),
                jitter=int(d.get("jitter", 1)),
                interval=int(cons.get("interval", 10)),
                policy=SelectionPolicy.parse(cons.get("policy", "fixed:128")),
                accounts=int(d.get("accounts", 8)),
                initial_balance=int(d.get("initial_balance", 1000)),
                workload_txs=int(work.get("txs", 0)),
                workload_start=int(work.get("start", 1)),
                workload_spacing=int(work.get("spacing", 1)),
                max_amount=int(work.get("max_amount", 5)),
                submissions=[Submission(int(s["time"]), int(s["from"]), int(s["to"]), int(s["amount"]))
                             for s in d.get("submissions", [])],
                byzantine=[Byzantine(int(b["node"]), str(b["behavior"]), dict(b.get("params", {})))
                           for b in d.get("byzantine", [])],
                blacklist={int(b["node"]): [int(a) for a in b["accounts"]] for b in d.get("blacklist", [])},
                restarts=[Restart(int(r["time"]), int(r["node"]), int(r["peer"]), int(r.get("lost", 1)))
                          for r in d.get("restarts", [])],
                duration=int(d.get("duration", 200)),
                hash=str(d.get("hash", "ripemd160")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"malformed scenario: {exc}") from exc
        if not (isinstance(sc.topology, str) and sc.topology in ("full", "ring")) and not isinstance(sc.topology, list):
            raise ScenarioError("topology must be 'full', 'ring' or a list of links")
        sc.validate()
        return sc

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "nodes": self.nodes,
            "topology": self.topology,
            "grace_period": self.grace_period,
            "batch_size": self.batch_size,
            "stall_ticks": self.stall_ticks,
            "delay": self.delay,
            "jitter": self.jitter,
            "consensus": {"interval": self.interval, "policy": str(self.policy)},
            "accounts": self.accounts,
            "initial_balance": self.initial_balance,
            "workload": {"txs": self.workload_txs, "start": self.workload_start,
                         "spacing": self.workload_spacing, "max_amount": self.max_amount},
            "submissions": [{"time": s.time, "from": s.sender, "to": s.recipient, "amount": s.amount}
                            for s in self.submissions],
            "byzantine": [{"node": b.node, "behavior": b.behavior, "params": b.params} for b in self.byzantine],
            "blacklist": [{"node": n, "accounts": a} for n, a in sorted(self.blacklist.items())],
            "restarts": [{"time": r.time, "node": r.node, "peer": r.peer, "lost": r.lost} for r in self.restarts],
            "duration": self.duration,
            "hash": self.hash,
        }


def _connected(n: int, links: list[tuple[int, int]]) -> bool:
    adj: dict[int, set[int]] = {i: set() for i in range(n)}
    for a, b in links:
        adj[a].add(b)
        adj[b].add(a)
    seen, stack = {0}, [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


def load(path: Union[str, Path]) -> Scenario:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return Scenario.from_dict(d)


def dump(sc: Scenario, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(sc.to_dict(), indent=2, sort_keys=True) + "\n")

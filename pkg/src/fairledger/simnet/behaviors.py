"""Byzantine node behaviors and the rule each one is expected to trip.

Each behavior is a :class:`~fairledger.node.Node` subclass. Most misbehave
once (``count``, default 1) after ``after`` channel frames to one target
peer (``peer``, a node index; default the lowest-indexed neighbour), and do
it by sending an extra frame so the rest of the run stays well-formed.
"""
from __future__ import annotations

import dataclasses
from typing import Optional

from .. import codec, owac
from ..ledger import make_send
from ..node import CHANNEL_STALL, Node, Peer, Receipt, decode_tx
from ..owac import Confirmation, Kind, OwacMessage, signed
from ..proposal import OrderedProposal, Block, build_proposal, make_block, order_selection, select_prefix
from ..audit import LOST_TX, REORDERED_TX


class ByzantineNode(Node):
    behavior = ""

    def __init__(self, *args, params: Optional[dict] = None, ids: tuple[bytes, ...] = (),
                 account_keys: dict = {}, **kwargs):
        super().__init__(*args, **kwargs)
        self.params = dict(params or {})
        self.ids = ids
        self.account_keys = account_keys
        peer_idx = self.params.get("peer")
        if peer_idx is not None:
            self.target = ids[peer_idx]
        else:
            order = {pid: ids.index(pid) for pid in self.peers}
            self.target = min(self.peers, key=order.get) if self.peers else b""
        self.after = int(self.params.get("after", 3))
        self.count = int(self.params.get("count", 1))
        self.fired = 0
        self._frames = 0

    def armed(self) -> bool:
        return self.fired < self.count

    def _due(self, peer: bytes, frame: bytes, tag: int) -> bool:
        if peer != self.target or frame[0] != tag:
            return False
        self._frames += 1
        return self._frames > self.after and self.armed()


# -- sending side of a channel ----------------------------------------------

class _MessageInjector(ByzantineNode):
    def send_frame(self, peer: bytes, frame: bytes) -> None:
        super().send_frame(peer, frame)
        if self._due(peer, frame, 0x01):
            extra = self.inject(codec.unpack(frame))
            if extra is not None:
                self.fired += 1
                super().send_frame(peer, codec.pack(extra))

    def inject(self, m: OwacMessage) -> Optional[OwacMessage]:
        raise NotImplementedError


class CorruptSignature(_MessageInjector):
    behavior = "CorruptSignature"

    def inject(self, m):
        sig = bytearray(m.signature)
        sig[0] ^= 0x01
        return dataclasses.replace(m, signature=bytes(sig))


class WrongConnId(_MessageInjector):
    behavior = "WrongConnId"

    def inject(self, m):
        return signed(dataclasses.replace(m, conn_id=codec.H(b"elsewhere" + m.conn_id)), self.key)


class RegressAck(_MessageInjector):
    behavior = "RegressAck"

    def inject(self, m):
        if m.sender_last_conf < 0:
            return None
        return signed(dataclasses.replace(m, sender_last_conf=m.sender_last_conf - 1), self.key)


class FakeAck(_MessageInjector):
    behavior = "FakeAck"

    def inject(self, m):
        return signed(dataclasses.replace(m, sender_last_conf=m.sender_last_conf + 1000), self.key)


class DuplicateMessage(_MessageInjector):
    behavior = "DuplicateMessage"

    def inject(self, m):
        return m


class Equivocate(_MessageInjector):
    behavior = "Equivocate"

    def inject(self, m):
        return signed(dataclasses.replace(m, value=b"equivocation:" + m.value), self.key)


class SkipChannelIndex(ByzantineNode):
    """Leaves one channel index unused every ``every`` messages to the target."""

    behavior = "SkipChannelIndex"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.every = int(self.params.get("every", 100))
        self.count = int(self.params.get("count", 1 << 30))
        self.sent = 0
        self.owed = 0

    def forward_next(self, pid: bytes, p: Peer) -> None:
        if pid == self.target:
            self.sent += 1
            if self.sent % self.every == 0 and self.armed():
                self.owed += 1
            s = p.sender
            # Skip only when the message after the gap still fits the grace window.
            if self.owed and s.last_sent + 1 <= s.last_conf + s.config.grace_period:
                s.last_sent += 1
                self.owed -= 1
                self.fired += 1
        super().forward_next(pid, p)


class ExceedGrace(ByzantineNode):
    """Sends one message past the grace window instead of waiting."""

    behavior = "ExceedGrace"

    def pump(self) -> None:
        super().pump()
        p = self.peers.get(self.target)
        if p is None or not self.armed() or not p.backlog or not p.sender.would_refuse():
            return
        if p.sender.last_sent < self.after:
            return
        self.fired += 1
        s = p.sender
        _, value = p.backlog.popleft()
        s.last_sent += 1
        s.vals_sent[s.last_sent] = value
        self.send_frame(self.target, codec.pack(s._message(s.last_sent, value)))


class ViolateAcceptorOrder(ByzantineNode):
    """Forwards an already-forwarded transaction again, regressing its acceptor's sequence."""

    behavior = "ViolateAcceptorOrder"

    def forward_next(self, pid: bytes, p: Peer) -> None:
        super().forward_next(pid, p)
        if pid != self.target or not self.armed() or p.sender.would_refuse():
            return
        if p.sender.last_sent < self.after:
            return
        value = p.sender.vals_sent.get(p.sender.last_sent)
        tx = decode_tx(value) if value is not None else None
        if tx is None or tx.receipt is None:
            return
        self.fired += 1
        self.send_frame(pid, codec.pack(p.sender.send(value)))


# -- receiving side of a channel --------------------------------------------

class _ConfirmationTamperer(ByzantineNode):
    def send_frame(self, peer: bytes, frame: bytes) -> None:
        if not self._due(peer, frame, 0x02):
            super().send_frame(peer, frame)
            return
        c = codec.unpack(frame)
        before, after = self.tamper(c)
        if before is not None or after is not None:
            self.fired += 1
        if before is not None:
            super().send_frame(peer, codec.pack(before))
        super().send_frame(peer, frame)
        if after is not None:
            super().send_frame(peer, codec.pack(after))

    def tamper(self, c: Confirmation) -> tuple[Optional[Confirmation], Optional[Confirmation]]:
        raise NotImplementedError


class ReplayConfirmation(_ConfirmationTamperer):
    behavior = "ReplayConfirmation"
    previous: Optional[Confirmation] = None

    def tamper(self, c):
        prev, self.previous = self.previous, c
        return None, prev


class ConfirmUnsent(_ConfirmationTamperer):
    behavior = "ConfirmUnsent"

    def tamper(self, c):
        return None, signed(dataclasses.replace(c, confirmed_index=c.confirmed_index + 1000), self.key)


class ForgeConfHash(_ConfirmationTamperer):
    behavior = "ForgeConfHash"

    def tamper(self, c):
        return signed(dataclasses.replace(c, conf_hash=codec.H(b"forged" + c.conf_hash)), self.key), None


class SilentCensor(ByzantineNode):
    """Silently ignores the target's messages from index ``after`` on, without confirming them."""

    behavior = "SilentCensor"

    def on_message(self, src: bytes, m: OwacMessage) -> None:
        if src == self.target and m.index >= self.after:
            self.fired = 1
            return
        super().on_message(src, m)


# -- outgoing queue ----------------------------------------------------------

class DropTx(ByzantineNode):
    """Deletes its newest queued transaction right after summarising it."""

    behavior = "DropTx"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.count = int(self.params.get("count", 3))

    def make_summary(self) -> bytes:
        out = super().make_summary()
        if self.armed() and len(self.outgoing) and self.summary_seq >= self.after:
            self.fired += 1
            self.outgoing.discard(self.outgoing.order_array()[-1][0])
        return out


class ReorderQueue(ByzantineNode):
    """Swaps its two newest queued transactions right after summarising them."""

    behavior = "ReorderQueue"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.count = int(self.params.get("count", 3))

    def make_summary(self) -> bytes:
        out = super().make_summary()
        if self.armed() and len(self.outgoing) >= 2 and self.summary_seq >= self.after:
            self.fired += 1
            (p1, _), (p2, _) = self.outgoing.order_array()[-2:]
            self.outgoing.swap(p1, p2)
        return out


# -- proposer -----------------------------------------------------------------

class NonPrefixProposal(ByzantineNode):
    """Proposes its queue minus the second entry."""

    behavior = "NonPrefixProposal"

    def propose(self, policy=None) -> Block:
        policy = policy or self.config.policy
        snap = self.outgoing.snapshot()
        if not self.armed() or snap.size < 3:
            return super().propose(policy)
        self.fired += 1
        items = list(snap.items())
        del items[1]
        items = items[:policy.limit] if policy.mode == "fixed" else items
        selection = [tx for _, tx in items]
        processed, rejected = order_selection(selection, self.tip_hash, self.state)
        disclosure = snap.disclose_positions({pos for pos, _ in items})
        p = OrderedProposal(tuple(processed), tuple(rejected), disclosure, snap.root)
        return make_block(p, self.height + 1, self.tip_hash, self.key)


class ManipulatedOrdering(ByzantineNode):
    """Swaps the first two processed transactions that spend from different accounts."""

    behavior = "ManipulatedOrdering"

    def propose(self, policy=None) -> Block:
        policy = policy or self.config.policy
        p = build_proposal(self.outgoing.snapshot(), policy, self.tip_hash, self.state)
        txs = list(p.processed)
        if self.armed():
            for i in range(len(txs) - 1):
                if not set(txs[i].spenders) & set(txs[i + 1].spenders):
                    txs[i], txs[i + 1] = txs[i + 1], txs[i]
                    self.fired += 1
                    p = dataclasses.replace(p, processed=tuple(txs))
                    break
        return make_block(p, self.height + 1, self.tip_hash, self.key)


class FrontRunInject(ByzantineNode):
    """Before proposing, slips in its own transaction aimed at the oldest foreign one in its queue."""

    behavior = "FrontRunInject"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.count = int(self.params.get("count", 1 << 30))
        self.account = self.account_keys[int(self.params.get("account", 0))]
        self.injections: list[tuple[bytes, bytes]] = []

    def propose(self, policy=None) -> Block:
        mine = self.account.public_id
        target = next((tx for _, tx in self.outgoing.order_array()
                       if tx.censorship is None and mine not in tx.spenders and tx.receipt is not None), None)
        if target is not None and self.armed():
            nonce = self._accept_state.get(mine, None)
            nonce = nonce.next_nonce if nonce is not None else 0
            tx = make_send([(self.account, 1, nonce)], [(self.ids[0], 1)],
                           memo=b"front-run:" + target.tx_id)
            res = self.accept_tx(tx)
            if isinstance(res, Receipt):
                self.fired += 1
                self.injections.append((res.tx_id, target.tx_id))
        return super().propose(policy)


BEHAVIORS: dict[str, type[ByzantineNode]] = {cls.behavior: cls for cls in (
    CorruptSignature, WrongConnId, RegressAck, FakeAck, DuplicateMessage, Equivocate, SkipChannelIndex,
    ExceedGrace, ViolateAcceptorOrder, ReplayConfirmation, ConfirmUnsent, ForgeConfHash, SilentCensor,
    DropTx, ReorderQueue, NonPrefixProposal, ManipulatedOrdering, FrontRunInject,
)}

# behavior -> (rule, report kind); None where no report is expected.
EXPECTED: dict[str, Optional[tuple[str, Kind]]] = {
    "CorruptSignature": (owac.INVALID_SIGNATURE, Kind.CLAIM),
    "WrongConnId": (owac.INVALID_CONN_ID, Kind.CLAIM),
    "ReplayConfirmation": (owac.CONF_OUT_OF_SEQUENCE, Kind.CLAIM),
    "ConfirmUnsent": (owac.CONF_UNSENT, Kind.CLAIM),
    "ForgeConfHash": (owac.INCORRECT_HASH, Kind.CLAIM),
    "RegressAck": (owac.ACK_OUT_OF_SEQUENCE, Kind.CLAIM),
    "FakeAck": (owac.INVALID_ACK, Kind.CLAIM),
    "SkipChannelIndex": (owac.SKIPPED, Kind.CLAIM),
    "DuplicateMessage": (owac.DUPLICATE, Kind.CLAIM),
    "Equivocate": (owac.CONFLICTING, Kind.PROOF),
    "ExceedGrace": (owac.TOO_FAR_AHEAD, Kind.PROOF),
    "ViolateAcceptorOrder": (owac.RULES_VIOLATED, Kind.PROOF),
    "DropTx": (LOST_TX, Kind.PROOF),
    "ReorderQueue": (REORDERED_TX, Kind.PROOF),
    "NonPrefixProposal": ("BadPrefix", Kind.PROOF),
    "ManipulatedOrdering": ("BadOrdering", Kind.PROOF),
    "SilentCensor": (CHANNEL_STALL, Kind.CLAIM),
    "FrontRunInject": None,
}


def expected_detection(behavior: str) -> Optional[str]:
    """Rule name an honest network reports for ``behavior``; None if it is undetectable by design."""
    e = EXPECTED[behavior]
    return None if e is None else e[0]

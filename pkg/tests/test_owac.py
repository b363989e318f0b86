import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairledger import codec, owac
from fairledger.crypto import KeyPair
from fairledger.owac import (ChannelConfig, Confirmation, Kind, OwacMessage, Receiver, Sender, ViolationReport,
                             make_conn_id, signed)

A, B = KeyPair.from_seed(b"owac:a"), KeyPair.from_seed(b"owac:b")


def channel(grace=2, **kw):
    cfg = ChannelConfig(make_conn_id(A.public_id, B.public_id), A.public_id, B.public_id, grace)
    return cfg, Sender(cfg, A), Receiver(cfg, B, **kw)


def msg(cfg, i, v, ack=-1, key=A):
    return signed(OwacMessage(cfg.conn_id, i, v, ack), key)


def rules(reports):
    return [(r.rule, r.kind) for r in reports]


# -- sender -----------------------------------------------------------------------

def test_first_send():
    cfg, s, _ = channel()
    m = s.send(b"x")
    assert (m.index, m.sender_last_conf) == (0, -1)
    assert owac.signature_ok(m, A.public_id)


def test_grace_boundary():
    _, s, _ = channel(grace=2)
    assert [s.send(b"%d" % i).index for i in range(3)] == [0, 1, 2]  # last_sent=1 still sends index 2
    assert s.last_sent == 2 and s.send(b"3") is None


def test_full_confirmation_and_loopback():
    cfg, s, r = channel(grace=4)
    for i in range(3):
        assert r.on_message(s.send(b"v%d" % i)) == []
    c = r.maybe_confirm(event=True)
    assert s.on_confirmation(c) == []
    assert s.last_conf == s.last_sent == 2
    assert r.maybe_confirm(event=True) is None


def test_reordered_fold_is_incorrect_hash():
    cfg, s, r = channel(grace=4)
    vals = [b"a", b"b", b"c"]
    for v in vals:
        s.send(v)
    wrong = codec.chain_fold([vals[1], vals[0], vals[2]])
    assert wrong != codec.chain_fold(vals)
    c = signed(Confirmation(cfg.conn_id, 2, wrong, b""), B)
    assert rules(s.on_confirmation(c)) == [(owac.INCORRECT_HASH, Kind.CLAIM)]
    assert s.last_conf == -1


def test_duplicate_confirmation_is_out_of_sequence():
    cfg, s, r = channel(grace=4)
    r.on_message(s.send(b"a"))
    c = r.maybe_confirm(event=True)
    assert s.on_confirmation(c) == []
    assert rules(s.on_confirmation(c)) == [(owac.CONF_OUT_OF_SEQUENCE, Kind.CLAIM)]


def test_sender_rejects_bad_confirmations():
    cfg, s, r = channel(grace=4)
    r.on_message(s.send(b"a"))
    good = r.maybe_confirm(event=True)
    assert rules(s.on_confirmation(dataclasses.replace(good, signature=bytes(64)))) == [
        (owac.INVALID_SIGNATURE, Kind.CLAIM)]
    other = signed(dataclasses.replace(good, conn_id=b"elsewhere", signature=b""), B)
    assert rules(s.on_confirmation(other)) == [(owac.INVALID_CONN_ID, Kind.CLAIM)]
    ahead = signed(Confirmation(cfg.conn_id, 5, good.conf_hash, b""), B)
    assert rules(s.on_confirmation(ahead)) == [(owac.CONF_UNSENT, Kind.CLAIM)]
    assert s.on_confirmation(good) == []


# -- receiver ---------------------------------------------------------------------

def test_in_order_messages_fold():
    cfg, s, r = channel(grace=4)
    vals = [b"p", b"q", b"r"]
    for v in vals:
        assert r.on_message(s.send(v)) == []
    assert r.seq_hash == codec.H(codec.H(codec.H(bytes(20) + b"p") + b"q") + b"r")


def test_conflicting_messages_proof_verifies_standalone():
    cfg, s, r = channel(grace=4)
    r.on_message(s.send(b"a"))
    m1 = s.send(b"b")
    r.on_message(m1)
    twin = msg(cfg, 1, b"b'")
    (rep,) = r.on_message(twin)
    assert (rep.rule, rep.kind) == (owac.CONFLICTING, Kind.PROOF)
    assert owac.verify_proof(rep, {cfg.conn_id: cfg})
    assert r.frozen and r.on_message(s.send(b"c")) == []
    broken = dataclasses.replace(rep, evidence=(rep.evidence[0], rep.evidence[1][:-1] + b"\x00"))
    assert not owac.verify_proof(broken, {cfg.conn_id: cfg})


def test_identical_replay_is_duplicate():
    cfg, s, r = channel(grace=4)
    m = s.send(b"a")
    r.on_message(m)
    assert rules(r.on_message(m)) == [(owac.DUPLICATE, Kind.CLAIM)]


def test_skipped_message_is_claimed_then_accepted():
    cfg, s, r = channel(grace=8)
    r.on_message(msg(cfg, 0, b"0"))
    r.on_message(msg(cfg, 1, b"1"))
    assert rules(r.on_message(msg(cfg, 5, b"5"))) == [(owac.SKIPPED, Kind.CLAIM)]
    assert r.last_rcvd == 5


def test_receiver_ack_rules():
    cfg, s, r = channel(grace=8)
    r.on_message(msg(cfg, 0, b"0"))
    c = r.maybe_confirm(event=True)
    assert rules(r.on_message(msg(cfg, 1, b"1", ack=3))) == [(owac.INVALID_ACK, Kind.CLAIM)]
    assert r.on_message(msg(cfg, 1, b"1", ack=c.confirmed_index)) == []
    assert rules(r.on_message(msg(cfg, 2, b"2", ack=-1))) == [(owac.ACK_OUT_OF_SEQUENCE, Kind.CLAIM)]


def test_receiver_rejects_bad_signature_and_conn():
    cfg, s, r = channel()
    assert rules(r.on_message(msg(cfg, 0, b"x", key=B))) == [(owac.INVALID_SIGNATURE, Kind.CLAIM)]
    wrong = signed(OwacMessage(b"other", 0, b"x", -1), A)
    assert rules(r.on_message(wrong)) == [(owac.INVALID_CONN_ID, Kind.CLAIM)]
    assert r.last_rcvd == -1


def _too_far(grace, index):
    cfg, _, r = channel(grace=grace)
    for i in range(index):
        r.on_message(msg(cfg, i, b"%d" % i))
    return cfg, r.on_message(msg(cfg, index, b"%d" % index))


@pytest.mark.parametrize("grace", [1, 2, 3, 5])
def test_too_far_ahead_boundary(grace):
    # With nothing acknowledged an honest sender can reach index ``grace`` and no further.
    cfg, reps = _too_far(grace, grace)
    assert reps == []
    cfg, reps = _too_far(grace, grace + 1)
    (rep,) = reps
    assert (rep.rule, rep.kind) == (owac.TOO_FAR_AHEAD, Kind.PROOF)
    assert owac.verify_proof(rep, {cfg.conn_id: cfg})
    # The same log presented as evidence one message earlier does not exceed the bound.
    shorter = dataclasses.replace(rep, evidence=rep.evidence[:-1])
    assert not owac.verify_proof(shorter, {cfg.conn_id: cfg})


def test_rules_hook_proof():
    def no_odd_values(msgs, i):
        return [msgs[i]] if msgs[i].value.endswith(b"!") else None

    cfg, s, r = channel(grace=4, rules=no_odd_values)
    r.on_message(s.send(b"fine"))
    (rep,) = r.on_message(s.send(b"bad!"))
    assert (rep.rule, rep.kind) == (owac.RULES_VIOLATED, Kind.PROOF)
    assert owac.verify_proof(rep, {cfg.conn_id: cfg}, lambda: no_odd_values)
    assert not owac.verify_proof(rep, {cfg.conn_id: cfg})
    assert r.last_rcvd == 0


def test_batch_policy_threshold():
    cfg, s, r = channel(grace=40, policy=owac.batch_policy(16))
    for i in range(15):
        r.on_message(s.send(b"%d" % i))
        assert r.maybe_confirm() is None
    r.on_message(s.send(b"15"))
    c = r.maybe_confirm()
    assert c is not None and c.confirmed_index == 15
    assert r.maybe_confirm(event=True) is None


def test_claims_do_not_verify_as_proofs():
    cfg, s, r = channel()
    (rep,) = r.on_message(msg(cfg, 0, b"x", key=B))
    assert not owac.verify_proof(rep, {cfg.conn_id: cfg})
    assert not owac.verify_proof(dataclasses.replace(rep, kind=Kind.PROOF), {cfg.conn_id: cfg})


def test_replicas_track_the_wire():
    cfg, s, r = channel(grace=4)
    rs, rr = Sender(cfg, None), Receiver(cfg, None)
    for i in range(3):
        m = s.send(b"%d" % i)
        rs.note_message(m)
        assert r.on_message(m) == rr.on_message(m) == []
    c = r.maybe_confirm(event=True)
    rr.note_confirmation(c)
    assert rs.on_confirmation(c) == []
    assert (rr.last_conf, rs.last_conf) == (2, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.lists(st.sampled_from("sdca"), max_size=60))
def test_honest_interleavings_never_report(grace, actions):
    cfg, s, r = channel(grace=grace)
    to_r, to_s = [], []
    for a in actions:
        if a == "s":
            refuse = s.last_sent > s.last_conf + grace
            m = s.send(b"v")
            assert (m is None) == refuse
            if m is not None:
                to_r.append(m)
        elif a == "d" and to_r:
            assert r.on_message(to_r.pop(0)) == []
        elif a == "c":
            c = r.maybe_confirm(event=True)
            if c is not None:
                to_s.append(c)
        elif a == "a" and to_s:
            assert s.on_confirmation(to_s.pop(0)) == []
        assert s.last_sent <= s.last_conf + grace + 1
    assert r.last_rcvd <= s.last_sent


def test_report_record_is_stable():
    rep = ViolationReport(Kind.PROOF, "x", b"\x01", b"\x02", (b"e",), b"c")
    assert rep.record() == {"kind": "proof", "rule": "x", "reporter": "01", "accused": "02", "conn_id": "63",
                            "evidence_digest": codec.H(codec.encode((b"e",))).hex()}

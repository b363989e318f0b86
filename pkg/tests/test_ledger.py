import dataclasses
import random

from hypothesis import given, settings
from hypothesis import strategies as st

from fairledger.crypto import KeyPair
from fairledger.ledger import (Account, AdminKind, AdminReport, Reason, TxKind, apply, attach_censorship,
                               attach_receipt, make_admin, make_basic_check, make_send, total_balance,
                               validate_against_state)


def test_exact_balance_is_valid(keys, send):
    state = {keys[0].public_id: Account(5, 0)}
    assert validate_against_state(send(0, 5, 0, to=1), state) is None


def test_nonce_ahead_is_bad_nonce(keys, send, genesis):
    assert validate_against_state(send(0, 1, 1), genesis) == Reason.BadNonce


def test_insufficient_balance(keys, send, genesis):
    assert validate_against_state(send(0, 101, 0, to=1), genesis) == Reason.InsufficientBalance


def test_forged_input_signature(keys, send, genesis):
    tx = send(0, 1, 0, to=1)
    bad = dataclasses.replace(tx, inputs=(dataclasses.replace(tx.inputs[0], signature=bytes(64)),))
    assert validate_against_state(bad, genesis) == Reason.BadSignature


def test_unbalanced_is_malformed(keys, genesis):
    tx = make_send([(keys[0], 3, 0)], [(keys[1].public_id, 2)])
    assert validate_against_state(tx, genesis) == Reason.Malformed


def test_censored_tx_never_valid(keys, send, genesis, acceptor):
    tx = attach_censorship(send(0, 1, 0, to=1), acceptor, b"blacklisted")
    assert make_basic_check(tx) is None
    assert validate_against_state(tx, genesis) == Reason.Censored


def test_zero_self_send(keys, send, genesis):
    s = apply(send(0, 0, 0, to=0), genesis)
    assert s[keys[0].public_id] == Account(100, 1)


def test_dependent_chain_advances_nonce(keys, send, genesis):
    s = genesis
    for k in range(7):
        s = apply(send(0, 2, k, to=1), s)
    assert s[keys[0].public_id] == Account(100 - 14, 7)
    assert s[keys[1].public_id].balance == 114


def test_gossip_check_ignores_state(keys, send):
    assert make_basic_check(send(0, 10_000, 99, to=1)) is None


def test_gossip_check_needs_a_good_receipt(keys, send, acceptor):
    tx = send(0, 1, 0, to=1)
    assert make_basic_check(dataclasses.replace(tx, receipt=None)) == Reason.BadReceipt
    forged = dataclasses.replace(tx, receipt=dataclasses.replace(tx.receipt, acceptor_seq=tx.receipt.acceptor_seq + 1))
    assert make_basic_check(forged) == Reason.BadReceipt


def test_admin_txs_carry_no_receipt(acceptor):
    rep = AdminReport(AdminKind.OUTAGE, acceptor.public_id, acceptor.public_id, b"c", 3, 4)
    tx = make_admin(rep, acceptor)
    assert tx.kind == TxKind.ADMIN
    assert make_basic_check(tx) is None
    assert make_basic_check(attach_receipt(tx, acceptor, 0)) == Reason.Malformed
    other = KeyPair.from_seed(b"other")
    forged = dataclasses.replace(tx, admin=dataclasses.replace(tx.admin, reporter=other.public_id))
    assert make_basic_check(forged) == Reason.BadSignature


def _naive(tx_meta, bal, nonce):
    frm, amount, n, forged = tx_meta
    if forged:
        return Reason.BadSignature
    if n != nonce[frm]:
        return Reason.BadNonce
    if bal[frm] < amount:
        return Reason.InsufficientBalance
    return None


def test_validation_against_naive_interpreter(keys, acceptor):
    rng = random.Random(5)
    bal = {i: rng.randint(0, 20) for i in range(4)}
    nonce = {i: 0 for i in range(4)}
    state = {keys[i].public_id: Account(bal[i], 0) for i in range(4)}
    for n in range(100):
        frm, to = rng.randrange(4), rng.randrange(4)
        amount, nn = rng.randint(0, 12), nonce[frm] + rng.choice([0, 0, 0, 1, -1])
        forged = rng.random() < 0.1
        signer = keys[(frm + 1) % 4] if forged else keys[frm]
        tx = make_send([(signer, amount, max(nn, 0))], [(keys[to].public_id, amount)], memo=b"%d" % n)
        if forged:
            tx = dataclasses.replace(tx, inputs=(dataclasses.replace(tx.inputs[0], address=keys[frm].public_id),))
        tx = attach_receipt(tx, acceptor, n)
        want = _naive((frm, amount, max(nn, 0), forged), bal, nonce)
        got = validate_against_state(tx, state)
        assert got == want
        if got is None:
            assert make_basic_check(tx) is None
            state = apply(tx, state)
            bal[frm] -= amount
            bal[to] += amount
            nonce[frm] += 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 30)), max_size=25))
def test_balance_conserved(moves):
    ks = [KeyPair.from_seed(b"cons:%d" % i) for i in range(4)]
    state = {k.public_id: Account(50, 0) for k in ks}
    total = total_balance(state)
    for frm, to, amount in moves:
        tx = make_send([(ks[frm], amount, state[ks[frm].public_id].next_nonce)], [(ks[to].public_id, amount)])
        if validate_against_state(tx, state) is None:
            state = apply(tx, state)
    assert total_balance(state) == total

import re

import pytest

from fairledger import codec
from fairledger.crypto import KeyPair
from fairledger.ledger import Account, attach_receipt, make_send

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture(autouse=True)
def _default_hash():
    codec.set_hash("ripemd160")
    yield
    codec.set_hash("ripemd160")


@pytest.fixture(scope="session")
def keys():
    return [KeyPair.from_seed(f"test-account:{i}".encode()) for i in range(6)]


@pytest.fixture(scope="session")
def acceptor():
    return KeyPair.from_seed(b"test-acceptor")


@pytest.fixture
def send(keys, acceptor):
    """send(i, amount, nonce, to=j, seq=None) -> receipted SendTx from account i."""
    counter = iter(range(1 << 30))

    def make(i, amount, nonce, to=0, seq=None, memo=b""):
        tx = make_send([(keys[i], amount, nonce)], [(keys[to].public_id, amount)], memo=memo)
        return attach_receipt(tx, acceptor, next(counter) if seq is None else seq)

    return make


@pytest.fixture
def genesis(keys):
    return {k.public_id: Account(100, 0) for k in keys}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[n] = (m.group(2), "PASS" if report.outcome == "passed" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, verdict = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}  {verdict}  {name.replace('_', ' ')}")

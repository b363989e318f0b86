"""Accountable transaction propagation, proposal selection and ordering for permissioned ledgers."""
from . import codec, crypto, ledger, owac, outqueue, proposal, node, audit

__version__ = "0.1.0"

"""Permissioned ledger for patient-controlled sharing of encrypted health data.

Modules, bottom up: ``crypto`` (hash, AEAD, signatures), ``codec`` (canonical
wire records), ``ledger`` (state machine and chain), ``offchain`` (content
addressed blob store), ``consensus`` (PBFT replica), ``netsim`` (deterministic
network simulator), ``wallet`` (patient and staff clients), ``scenario`` and
``cli``.
"""

__version__ = "0.1.0"

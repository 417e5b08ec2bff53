"""Replicated ledger: transaction validation, the access/data state machine,
and the hash-chained block log.

``LedgerState`` is the blockchain memory the protocols read and write. It is
a pure fold over committed blocks: two replicas that apply the same blocks
end with byte-identical ``state.digest()`` values.
"""

from __future__ import annotations

import enum
import logging
import os
from collections import Counter, deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Protocol, Sequence

from . import codec, crypto
from .codec import CodecError, DataType, Phase
from .crypto import Ciphertext, Digest, Signature, SigningIdentity

log = logging.getLogger(__name__)

DataTypeSet = frozenset  # frozenset[DataType]; empty means "revoke all"

DEFAULT_RATE_BUDGET = 16
DEFAULT_RATE_WINDOW = 10
DEFAULT_MAX_BLOCK_TXS = 100


class TxKind(enum.IntEnum):
    ACCESS = codec.TAG_ACCESS
    DATA = codec.TAG_DATA


class RejectReason(str, enum.Enum):
    BAD_SIGNATURE = "bad_signature"
    UNKNOWN_KIND = "unknown_kind"
    RATE_LIMITED = "rate_limited"
    MALFORMED = "malformed"
    DUPLICATE = "duplicate"


class LedgerError(Exception):
    pass


class BlockRejected(LedgerError):
    """A block failed validation; nothing in it was applied."""

    def __init__(self, reason: str, height: int, detail: str = "") -> None:
        super().__init__(f"{reason} at height {height}: {detail}" if detail else f"{reason} at height {height}")
        self.reason = reason
        self.height = height
        self.detail = detail


class TransactionRejected(LedgerError):
    def __init__(self, reason: RejectReason | str, tx_id: bytes | None = None) -> None:
        reason = RejectReason(reason)
        super().__init__(reason.value)
        self.reason = reason
        self.tx_id = tx_id


class BlobStore(Protocol):
    def put(self, ct: Ciphertext) -> Digest: ...

    def get(self, digest: bytes) -> Ciphertext: ...


# -- transactions -------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    """Signed envelope around an access or data message.

    ``nonce`` is chosen by the sender so that re-issuing an identical message
    (for example re-granting an earlier policy) yields a new transaction id,
    while a verbatim replay of an old envelope is caught as a duplicate.
    """

    body: bytes
    nonce: int
    sender: bytes
    signature: Signature

    @classmethod
    def create(cls, identity: SigningIdentity, body: bytes, nonce: int) -> "Transaction":
        sig = crypto.sign(identity, codec.encode_tx_preimage(body, nonce))
        return cls(body=body, nonce=nonce, sender=identity.public_key, signature=sig)

    @cached_property
    def encoded(self) -> bytes:
        return codec.encode_transaction(self.body, self.nonce, self.sender, self.signature)

    def encode(self) -> bytes:
        return self.encoded

    @cached_property
    def id(self) -> Digest:
        return crypto.hash(self.encoded)

    @property
    def kind(self) -> TxKind | None:
        if not self.body:
            return None
        try:
            return TxKind(self.body[0])
        except ValueError:
            return None

    def signature_ok(self) -> bool:
        return crypto.verify(self.sender, codec.encode_tx_preimage(self.body, self.nonce), self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        body, nonce, sender, sig = codec.decode_transaction(data)
        return cls(body=body, nonce=nonce, sender=sender, signature=Signature(sig))


def access_transaction(identity: SigningIdentity, patient: bytes, staff: bytes,
                       policy: Iterable[DataType], nonce: int) -> Transaction:
    return Transaction.create(identity, codec.encode_access_message(patient, staff, frozenset(policy)), nonce)


def write_transaction(identity: SigningIdentity, ct: Ciphertext, dtype: DataType, nonce: int) -> Transaction:
    return Transaction.create(identity, codec.encode_data_message(ct.to_bytes(), dtype, codec.RW_WRITE), nonce)


def read_transaction(identity: SigningIdentity, owner: bytes, dtype: DataType,
                     digest: bytes, nonce: int) -> Transaction:
    return Transaction.create(identity, codec.encode_data_message(digest, dtype, codec.RW_READ, owner), nonce)


# -- blocks -------------------------------------------------------------------

def tx_root(txs: Sequence[Transaction]) -> Digest:
    return crypto.hash(b"".join(tx.id for tx in txs))


def validator_root(validators: Sequence[bytes]) -> Digest:
    return crypto.hash(b"".join(validators))


def quorum_size(n: int) -> int:
    return 2 * ((n - 1) // 3) + 1


def commit_preimage(view: int, seq: int, block_hash: bytes, sender: int) -> bytes:
    return codec.encode_pbft_preimage(Phase.COMMIT, view, seq, block_hash, sender, crypto.hash(b""))


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: Digest
    tx_root: Digest
    validator_root: Digest
    timestamp: int
    proposer: int

    @cached_property
    def encoded(self) -> bytes:
        return codec.encode_block_header(
            self.height, self.prev_hash, self.tx_root, self.validator_root, self.timestamp, self.proposer
        )

    def hash(self) -> Digest:
        return crypto.hash(self.encoded)

    @classmethod
    def decode(cls, data: bytes) -> "BlockHeader":
        _, height, prev, root, vroot, ts, proposer = codec.decode_block_header(data)
        return cls(height, Digest(prev), Digest(root), Digest(vroot), ts, proposer)


@dataclass(frozen=True)
class CommitCertificate:
    """2f+1 signed COMMIT votes for one block, kept next to it in the chain."""

    view: int
    votes: tuple[tuple[int, Signature], ...]

    def encode(self) -> bytes:
        return codec.encode_certificate(self.view, self.votes)

    @classmethod
    def decode(cls, data: bytes) -> "CommitCertificate":
        view, votes = codec.decode_certificate(data)
        return cls(view, tuple((s, Signature(sig)) for s, sig in votes))

    def verify(self, block_hash: bytes, height: int, validators: Sequence[bytes]) -> bool:
        senders = [s for s, _ in self.votes]
        if len(set(senders)) != len(senders) or len(senders) < quorum_size(len(validators)):
            return False
        for sender, sig in self.votes:
            if sender >= len(validators):
                return False
            if not crypto.verify(validators[sender], commit_preimage(self.view, height, block_hash, sender), sig):
                return False
        return True


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...] = ()
    validators: tuple[bytes, ...] = ()  # listed in genesis only
    certificate: CommitCertificate | None = None

    @property
    def height(self) -> int:
        return self.header.height

    @cached_property
    def hash(self) -> Digest:
        return self.header.hash()

    def with_certificate(self, cert: CommitCertificate) -> "Block":
        return Block(self.header, self.transactions, self.validators, cert)

    def encode(self) -> bytes:
        cert = self.certificate.encode() if self.certificate else b""
        return codec.encode_block(self.header.encoded, self.validators, [t.encoded for t in self.transactions], cert)

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        header, validators, txs, cert = codec.decode_block(data)
        return cls(
            header=BlockHeader.decode(header),
            transactions=tuple(Transaction.decode(t) for t in txs),
            validators=tuple(validators),
            certificate=CommitCertificate.decode(cert) if cert else None,
        )


def make_genesis(validators: Sequence[bytes], timestamp: int = 0) -> Block:
    validators = tuple(bytes(v) for v in validators)
    header = BlockHeader(
        height=0,
        prev_hash=crypto.ZERO_DIGEST,
        tx_root=tx_root(()),
        validator_root=validator_root(validators),
        timestamp=timestamp,
        proposer=0,
    )
    return Block(header=header, validators=validators)


# -- state ----------------------------------------------------------------------

@dataclass(frozen=True)
class AccessRecord:
    patient: bytes
    staff: bytes
    policy: frozenset
    granted_at: int
    nonce: int


@dataclass(frozen=True)
class AuditEntry:
    height: int
    tx_id: Digest
    actor: bytes
    action: str
    detail: str
    outcome: str

    def summary(self) -> str:
        return f"{self.action} by {self.actor.hex()[:12]} {self.detail} -> {self.outcome}"


@dataclass
class Receipt:
    """Per-transaction result of applying a block on one replica."""

    tx_id: Digest
    height: int
    outcome: str  # granted | ignored | written | read | denied | storage_error
    result: object = None


class LedgerState:
    def __init__(
        self,
        genesis: Block,
        rate_budget: int = DEFAULT_RATE_BUDGET,
        rate_window: int = DEFAULT_RATE_WINDOW,
        max_block_txs: int = DEFAULT_MAX_BLOCK_TXS,
    ) -> None:
        if genesis.height != 0 or genesis.header.prev_hash != crypto.ZERO_DIGEST:
            raise LedgerError("not a genesis block")
        if genesis.header.validator_root != validator_root(genesis.validators):
            raise LedgerError("genesis validator list does not match its root")
        self.genesis_hash = genesis.hash
        self.validators: tuple[bytes, ...] = genesis.validators
        self.rate_budget = rate_budget
        self.rate_window = rate_window
        self.max_block_txs = max_block_txs
        # keyed by H(address); each value maps (patient, staff) -> live record
        self.policy_index: dict[Digest, dict[tuple[bytes, bytes], AccessRecord]] = {}
        self.data_index: dict[tuple[bytes, DataType], list[Digest]] = {}
        self._data_members: set[tuple[bytes, DataType, bytes]] = set()
        # per-block sender counts for the preceding window-1 blocks
        self.rate_blocks: deque[Counter] = deque()
        self.rate_ledger: Counter = Counter()
        self.committed_ids: set[bytes] = set()
        self.audit: dict[bytes, list[AuditEntry]] = {}
        self.head_hash: Digest = genesis.hash
        self.height = 0
        self.head_timestamp = genesis.header.timestamp

    def records_for(self, address: bytes) -> list[AccessRecord]:
        return list(self.policy_index.get(crypto.hash(address), {}).values())

    def live_record(self, patient: bytes, staff: bytes) -> AccessRecord | None:
        return self.policy_index.get(crypto.hash(patient), {}).get((patient, staff))

    def data_digests(self, owner: bytes, dtype: DataType) -> list[Digest]:
        return list(self.data_index.get((owner, dtype), ()))

    def window_count(self, sender: bytes) -> int:
        return self.rate_ledger.get(sender, 0)

    def digest(self) -> Digest:
        """Canonical hash of the full state, for cross-replica comparison."""
        parts = [codec.u64(self.height), self.head_hash, codec.u64(self.head_timestamp)]
        records = sorted(
            {(r.patient, r.staff): r for recs in self.policy_index.values() for r in recs.values()}.values(),
            key=lambda r: (r.patient, r.staff),
        )
        parts.append(codec.pack_list(
            codec.encode_access_message(r.patient, r.staff, r.policy) + codec.u64(r.granted_at) + codec.u64(r.nonce)
            for r in records
        ))
        parts.append(codec.pack_list(
            owner + codec.u16(dt) + b"".join(ds) for (owner, dt), ds in sorted(self.data_index.items())
        ))
        parts.append(codec.pack_list(
            codec.pack_list(s + codec.u32(c) for s, c in sorted(block.items())) for block in self.rate_blocks
        ))
        parts.append(crypto.hash(b"".join(sorted(self.committed_ids))))
        parts.append(codec.pack_list(
            addr + codec.pack_list(
                codec.u64(e.height) + e.tx_id + e.actor + f"{e.action}|{e.detail}|{e.outcome}".encode()
                for e in entries
            )
            for addr, entries in sorted(self.audit.items())
        ))
        return crypto.hash(codec.encode_record(0x7F, parts))

    def _record_audit(self, patient: bytes, height: int, tx: Transaction, action: str, detail: str, outcome: str) -> None:
        self.audit.setdefault(patient, []).append(
            AuditEntry(height, tx.id, tx.sender, action, detail, outcome)
        )


def _policy_text(policy: Iterable[DataType]) -> str:
    items = sorted(policy)
    return "{" + ",".join(d.label for d in items) + "}"


# -- operations -------------------------------------------------------------------

def validate_transaction(
    state: LedgerState,
    tx: Transaction,
    pending: Counter | None = None,
    pending_ids: Iterable[bytes] = (),
) -> RejectReason | None:
    """Return ``None`` if ``tx`` is acceptable, else the reason it is not.

    ``pending`` counts transactions per sender already accepted for the block
    being built (or the mempool); they share the sender's rate budget.
    """
    if tx.kind is None:
        return RejectReason.UNKNOWN_KIND
    try:
        if tx.kind is TxKind.ACCESS:
            codec.decode_access_message(tx.body)
        else:
            codec.decode_data_message(tx.body)
    except CodecError:
        return RejectReason.MALFORMED
    if not tx.signature_ok():
        return RejectReason.BAD_SIGNATURE
    if tx.id in state.committed_ids or tx.id in pending_ids:
        return RejectReason.DUPLICATE
    used = state.window_count(tx.sender) + (pending.get(tx.sender, 0) if pending else 0)
    if used >= state.rate_budget:
        return RejectReason.RATE_LIMITED
    return None


def apply_access_tx(state: LedgerState, tx: Transaction, height: int | None = None) -> int:
    """Register a policy if the sender is the patient named in it.

    Returns 1 when the live record for (patient, staff) was replaced, 0 when the
    transaction was a no-op (impersonation attempt or stale nonce).
    """
    height = state.height + 1 if height is None else height
    patient, staff, policy = codec.decode_access_message(tx.body)
    detail = f"staff={staff.hex()[:12]} policy={_policy_text(policy)}"
    if tx.sender != patient:
        state._record_audit(patient, height, tx, "grant", detail, "rejected_impersonation")
        return 0
    current = state.live_record(patient, staff)
    if current is not None and current.nonce >= tx.nonce:
        state._record_audit(patient, height, tx, "grant", detail, "stale")
        return 0
    record = AccessRecord(patient, staff, frozenset(policy), height, tx.nonce)
    for party in (patient, staff):
        state.policy_index.setdefault(crypto.hash(party), {})[(patient, staff)] = record
    state._record_audit(patient, height, tx, "revoke" if not policy else "grant", detail, "applied")
    return 1


def policy_check(state: LedgerState, requester: bytes, dtype: DataType, owner: bytes | None = None) -> bool:
    """Does ``requester`` hold permission for data type ``dtype``?

    Scans every live record indexed under H(requester): the requester passes
    as the record's patient, or as its staff member when ``dtype`` is in the
    granted policy. ``owner`` restricts the scan to records of that patient.
    """
    records = state.policy_index.get(crypto.hash(requester))
    if not records:
        return False
    for rec in records.values():
        if owner is not None and rec.patient != owner:
            continue
        if requester == rec.patient or (requester == rec.staff and dtype in rec.policy):
            return True
    return False


def apply_data_tx(state: LedgerState, tx: Transaction, store: BlobStore | None, height: int | None = None):
    """Execute a data transaction.

    Write: returns H(C) after indexing it and putting C into ``store``.
    Read: returns the stored ciphertext. Any failed guard returns ``None``.
    Authorization depends only on ledger state; a store failure during a read
    propagates to the caller after the (deterministic) audit entry is made.
    """
    height = state.height + 1 if height is None else height
    payload, dtype, rw, owner = codec.decode_data_message(tx.body)
    if rw == codec.RW_WRITE:
        owner = tx.sender
        ct = Ciphertext.from_bytes(payload) if len(payload) >= 28 else None
        if ct is None or not policy_check(state, tx.sender, dtype, owner=tx.sender):
            state._record_audit(owner, height, tx, "write", f"type={dtype.label}", "denied")
            return None
        digest = crypto.hash(payload)
        key = (owner, dtype)
        if (owner, dtype, digest) not in state._data_members:
            state._data_members.add((owner, dtype, digest))
            state.data_index.setdefault(key, []).append(digest)
        state._record_audit(owner, height, tx, "write", f"type={dtype.label} digest={digest.hex()[:16]}", "written")
        if store is not None:
            store.put(ct)
        return digest

    digest = Digest(payload)
    detail = f"type={dtype.label} digest={digest.hex()[:16]}"
    allowed = (owner, dtype, digest) in state._data_members and policy_check(state, tx.sender, dtype, owner=owner)
    state._record_audit(owner, height, tx, "read", detail, "granted" if allowed else "denied")
    if not allowed or store is None:
        return None
    return store.get(digest)


def build_block(
    state: LedgerState,
    mempool: Iterable[Transaction],
    proposer: int,
    timestamp: int,
    max_txs: int | None = None,
) -> Block:
    """Propose the next block: valid mempool transactions ordered by id, capped."""
    cap = state.max_block_txs if max_txs is None else max_txs
    chosen: list[Transaction] = []
    counts: Counter = Counter()
    ids: set[bytes] = set()
    for tx in sorted(mempool, key=lambda t: t.id):
        if len(chosen) >= cap:
            break
        if validate_transaction(state, tx, counts, ids) is None:
            chosen.append(tx)
            counts[tx.sender] += 1
            ids.add(tx.id)
    header = BlockHeader(
        height=state.height + 1,
        prev_hash=state.head_hash,
        tx_root=tx_root(chosen),
        validator_root=validator_root(state.validators),
        timestamp=max(timestamp, state.head_timestamp),
        proposer=proposer,
    )
    return Block(header=header, transactions=tuple(chosen))


def check_block(state: LedgerState, block: Block) -> None:
    """Raise ``BlockRejected`` unless ``block`` can extend the chain head."""
    h = block.header
    if h.height != state.height + 1 or h.prev_hash != state.head_hash:
        raise BlockRejected("chain_mismatch", h.height, "does not extend head")
    if h.validator_root != validator_root(state.validators) or block.validators:
        raise BlockRejected("chain_mismatch", h.height, "validator set changed")
    if h.timestamp < state.head_timestamp:
        raise BlockRejected("chain_mismatch", h.height, "timestamp went backwards")
    if h.proposer >= len(state.validators):
        raise BlockRejected("chain_mismatch", h.height, "unknown proposer")
    if len(block.transactions) > state.max_block_txs:
        raise BlockRejected("bad_tx_in_block", h.height, "too many transactions")
    if h.tx_root != tx_root(block.transactions):
        raise BlockRejected("bad_tx_in_block", h.height, "tx_root mismatch")
    counts: Counter = Counter()
    prev_id = b""
    for tx in block.transactions:
        if tx.id <= prev_id:
            raise BlockRejected("bad_tx_in_block", h.height, "transactions not in id order")
        prev_id = tx.id
        reason = validate_transaction(state, tx, counts)
        if reason is not None:
            raise BlockRejected("bad_tx_in_block", h.height, f"{tx.id.hex()[:16]}: {reason.value}")
        counts[tx.sender] += 1


def apply_block(state: LedgerState, block: Block, store: BlobStore | None = None) -> list[Receipt]:
    """Validate then apply every transaction of ``block`` atomically.

    Validation happens in full before any mutation, so a rejected block leaves
    ``state`` untouched.
    """
    check_block(state, block)
    height = block.height
    receipts = []
    counts: Counter = Counter()
    for tx in block.transactions:
        counts[tx.sender] += 1
        state.committed_ids.add(tx.id)
        if tx.kind is TxKind.ACCESS:
            s = apply_access_tx(state, tx, height)
            receipts.append(Receipt(tx.id, height, "granted" if s else "ignored", s))
            continue
        try:
            result = apply_data_tx(state, tx, store, height)
        except Exception as exc:  # store failures are per-replica, not consensus
            log.warning("blob fetch failed for %s: %s", tx.id.hex()[:16], exc)
            receipts.append(Receipt(tx.id, height, "storage_error", exc))
            continue
        if result is None:
            receipts.append(Receipt(tx.id, height, "denied"))
        elif isinstance(result, Ciphertext):
            receipts.append(Receipt(tx.id, height, "read", result))
        else:
            receipts.append(Receipt(tx.id, height, "written", result))
    # roll the rate window
    state.rate_blocks.append(counts)
    state.rate_ledger.update(counts)
    while len(state.rate_blocks) > state.rate_window - 1:
        old = state.rate_blocks.popleft()
        state.rate_ledger.subtract(old)
        for sender in old:
            if state.rate_ledger[sender] <= 0:
                del state.rate_ledger[sender]
    state.height = height
    state.head_hash = block.hash
    state.head_timestamp = block.header.timestamp
    return receipts


def audit_log(state: LedgerState, patient: bytes) -> list[AuditEntry]:
    return list(state.audit.get(patient, ()))


# -- chain verification and storage ------------------------------------------------

@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    first_bad_height: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_chain(blocks: Sequence[Block], genesis_hash: bytes | None = None) -> ChainVerdict:
    """Check genesis, links, heights, tx roots, commit certificates and signatures."""
    if not blocks:
        return ChainVerdict(False, 0, "empty chain")
    genesis = blocks[0]
    g = genesis.header
    if (
        g.height != 0
        or g.proposer != 0
        or g.prev_hash != crypto.ZERO_DIGEST
        or genesis.transactions
        or genesis.certificate is not None
        or g.tx_root != tx_root(())
        or g.validator_root != validator_root(genesis.validators)
        or not genesis.validators
        or (genesis_hash is not None and genesis.hash != genesis_hash)
    ):
        return ChainVerdict(False, 0, "bad genesis")
    validators = genesis.validators
    vroot = g.validator_root
    prev = genesis
    for i, block in enumerate(blocks[1:], start=1):
        h = block.header
        if h.height != i:
            return ChainVerdict(False, i, "height out of sequence")
        if h.prev_hash != prev.hash:
            return ChainVerdict(False, i, "prev_hash does not link")
        if h.validator_root != vroot or block.validators:
            return ChainVerdict(False, i, "validator set changed")
        if h.timestamp < prev.header.timestamp:
            return ChainVerdict(False, i, "timestamp went backwards")
        if h.tx_root != tx_root(block.transactions):
            return ChainVerdict(False, i, "tx_root mismatch")
        if block.certificate is None or not block.certificate.verify(block.hash, i, validators):
            return ChainVerdict(False, i, "missing or invalid commit certificate")
        for tx in block.transactions:
            if not tx.signature_ok():
                return ChainVerdict(False, i, f"bad signature on {tx.id.hex()[:16]}")
        prev = block
    return ChainVerdict(True)


class ChainFileError(LedgerError):
    def __init__(self, height: int, detail: str) -> None:
        super().__init__(f"unreadable block at height {height}: {detail}")
        self.height = height


def encode_chain(blocks: Iterable[Block]) -> bytes:
    return b"".join(codec.u32(len(raw)) + raw for raw in (b.encode() for b in blocks))


def decode_chain(data: bytes) -> list[Block]:
    blocks = []
    pos = 0
    while pos < len(data):
        height = len(blocks)
        if pos + 4 > len(data):
            raise ChainFileError(height, "truncated length prefix")
        n = int.from_bytes(data[pos:pos + 4], "big")
        pos += 4
        if pos + n > len(data):
            raise ChainFileError(height, "truncated block")
        try:
            blocks.append(Block.decode(data[pos:pos + n]))
        except (CodecError, ValueError) as exc:
            raise ChainFileError(height, str(exc)) from None
        pos += n
    return blocks


def verify_chain_bytes(data: bytes, genesis_hash: bytes | None = None) -> ChainVerdict:
    try:
        blocks = decode_chain(data)
    except ChainFileError as exc:
        # blocks before the unreadable one still have to verify
        prefix = verify_chain(decode_chain_prefix(data), genesis_hash) if exc.height else ChainVerdict(True)
        if not prefix.ok:
            return prefix
        return ChainVerdict(False, exc.height, str(exc))
    return verify_chain(blocks, genesis_hash)


def decode_chain_prefix(data: bytes) -> list[Block]:
    """All blocks that decode before the first unreadable one."""
    blocks = []
    pos = 0
    while pos + 4 <= len(data):
        n = int.from_bytes(data[pos:pos + 4], "big")
        if pos + 4 + n > len(data):
            break
        try:
            blocks.append(Block.decode(data[pos + 4:pos + 4 + n]))
        except (CodecError, ValueError):
            break
        pos += 4 + n
    return blocks


def chain_file_name(node: str | int) -> str:
    return f"chain-{node}.bin"


def write_chain(path: str | os.PathLike, blocks: Iterable[Block]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_chain(blocks))


def append_block(path: str | os.PathLike, block: Block) -> None:
    with open(path, "ab") as fh:
        fh.write(encode_chain([block]))


def read_chain(path: str | os.PathLike) -> list[Block]:
    with open(path, "rb") as fh:
        return decode_chain(fh.read())


def replay(blocks: Sequence[Block], store: BlobStore | None = None, **params) -> LedgerState:
    """Rebuild a state by applying ``blocks[1:]`` on top of ``blocks[0]``."""
    state = LedgerState(blocks[0], **params)
    for block in blocks[1:]:
        apply_block(state, block, store)
    return state


# -- single-node chain ----------------------------------------------------------------

class LocalChain:
    """A one-validator chain committing each submitted transaction in its own block.

    Implements the same ``submit`` / ``announce`` / ``deliver_key`` surface as the
    simulator, which makes it handy for wallet tests and small demos.
    """

    def __init__(self, identity: SigningIdentity | None = None, store: BlobStore | None = None,
                 timestamp: int = 0, **params) -> None:
        from .offchain import ContentStore

        self.identity = identity or crypto.gen_signing_identity()
        self.blocks: list[Block] = [make_genesis([self.identity.public_key], timestamp)]
        self.state = LedgerState(self.blocks[0], **params)
        self.store = store if store is not None else ContentStore()
        self.directory: dict[bytes, object] = {}

    def announce(self, address: bytes, wallet: object) -> None:
        self.directory.setdefault(bytes(address), wallet)

    def deliver_key(self, sender: bytes, recipient: bytes, key: crypto.SymmetricKey) -> None:
        wallet = self.directory.get(bytes(recipient))
        if wallet is None:
            raise KeyError(f"unknown address {recipient.hex()}")
        wallet.receive_key(sender, key)

    def submit(self, tx: Transaction) -> Receipt:
        reason = validate_transaction(self.state, tx)
        if reason is not None:
            raise TransactionRejected(reason, tx.id)
        return self.commit([tx])[0]

    def commit(self, txs: Sequence[Transaction]) -> list[Receipt]:
        block = build_block(self.state, txs, proposer=0, timestamp=self.state.head_timestamp)
        vote = crypto.sign(self.identity, commit_preimage(0, block.height, block.hash, 0))
        block = block.with_certificate(CommitCertificate(0, ((0, vote),)))
        receipts = apply_block(self.state, block, self.store)
        self.blocks.append(block)
        return receipts

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

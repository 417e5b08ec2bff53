"""PBFT replica state machine.

A ``Replica`` is a single-threaded event handler: feed it a client request,
a wire message or a timer expiry and it queues outbound messages, client
replies and timer requests in its outbox for the host (the simulator) to
deliver. Blocks are ordered one sequence number at a time; sequence number
equals block height.

Normal case: PRE-PREPARE -> PREPARE (2f matching) -> COMMIT (2f+1 matching).
View change: VIEW-CHANGE carries the sender's committed head (with its commit
certificate) and its prepared certificate for the next height; the new
primary's NEW-VIEW re-proposes the highest-view prepared block, if any.
Replicas that fall behind fetch certified blocks from peers (state transfer).
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

from . import codec, crypto
from .codec import CodecError, Phase
from .crypto import Digest, Signature, SigningIdentity
from .ledger import (
    Block,
    BlockRejected,
    CommitCertificate,
    LedgerState,
    Receipt,
    RejectReason,
    Transaction,
    apply_block,
    build_block,
    check_block,
    validate_transaction,
)

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 500
DEFAULT_BATCH_DELAY_MS = 5
SYNC_RETRY_MS = 200
MEMPOOL_SLACK = 4  # per-sender mempool cap, in multiples of the rate budget
BUFFER_LIMIT = 20_000


@dataclass(frozen=True)
class ValidatorConfig:
    keys: tuple[bytes, ...]
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    batch_delay_ms: int = DEFAULT_BATCH_DELAY_MS

    def __post_init__(self) -> None:
        n = len(self.keys)
        if n < 4 or (n - 1) % 3:
            raise ValueError(f"need n = 3f+1 >= 4 validators, got {n}")

    @property
    def n(self) -> int:
        return len(self.keys)

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def primary(self, view: int) -> int:
        return view % self.n


@dataclass(frozen=True)
class PbftMessage:
    phase: Phase
    view: int
    sequence: int
    block_hash: Digest
    sender: int
    payload: bytes
    signature: Signature

    @classmethod
    def signed(cls, identity: SigningIdentity, phase: Phase, view: int, sequence: int,
               block_hash: bytes, sender: int, payload: bytes = b"") -> "PbftMessage":
        pre = codec.encode_pbft_preimage(phase, view, sequence, block_hash, sender, crypto.hash(payload))
        return cls(Phase(phase), view, sequence, Digest(block_hash), sender, payload, crypto.sign(identity, pre))

    def preimage(self) -> bytes:
        return codec.encode_pbft_preimage(
            self.phase, self.view, self.sequence, self.block_hash, self.sender, crypto.hash(self.payload)
        )

    def verify(self, keys: Sequence[bytes]) -> bool:
        return 0 <= self.sender < len(keys) and crypto.verify(keys[self.sender], self.preimage(), self.signature)

    @cached_property
    def encoded(self) -> bytes:
        return codec.encode_pbft(
            self.phase, self.view, self.sequence, self.block_hash, self.sender, self.payload, self.signature
        )

    def encode(self) -> bytes:
        return self.encoded

    @classmethod
    def decode(cls, data: bytes) -> "PbftMessage":
        phase, view, seq, bh, sender, payload, sig = codec.decode_pbft(data)
        try:
            phase = Phase(phase)
        except ValueError:
            raise CodecError(f"unknown phase {phase}") from None
        return cls(phase, view, seq, Digest(bh), sender, payload, Signature(sig))

    def trace(self) -> str:
        return f"v{self.view} s{self.sequence} {self.phase.label} {self.sender}"


def quorum_check(votes: Iterable[PbftMessage], threshold: int, keys: Sequence[bytes]) -> bool:
    """True iff at least ``threshold`` distinct senders cast validly signed votes."""
    senders = {v.sender for v in votes if v.verify(keys)}
    return len(senders) >= threshold


# -- view-change payloads -------------------------------------------------------

@dataclass(frozen=True)
class PreparedProof:
    """A PRE-PREPARE plus 2f matching PREPAREs: the block may have committed."""

    preprepare: PbftMessage
    prepares: tuple[PbftMessage, ...]

    @property
    def view(self) -> int:
        return self.preprepare.view

    @property
    def sequence(self) -> int:
        return self.preprepare.sequence

    @cached_property
    def block(self) -> Block:
        return Block.decode(self.preprepare.payload)

    def encode(self) -> bytes:
        return codec.encode_record(
            codec.TAG_PREPARED, [self.preprepare.encoded, codec.pack_list(p.encoded for p in self.prepares)]
        )

    @classmethod
    def decode(cls, data: bytes) -> "PreparedProof":
        _, segs = codec.decode_record(data, codec.TAG_PREPARED)
        codec.expect_segments(segs, 2, "prepared proof")
        return cls(PbftMessage.decode(segs[0]), tuple(PbftMessage.decode(p) for p in codec.unpack_list(segs[1])))

    def valid(self, cfg: ValidatorConfig) -> bool:
        pp = self.preprepare
        if pp.phase is not Phase.PRE_PREPARE or pp.sender != cfg.primary(pp.view) or not pp.verify(cfg.keys):
            return False
        try:
            block = self.block
        except (CodecError, ValueError):
            return False
        if block.hash != pp.block_hash or block.height != pp.sequence:
            return False
        good = {
            p.sender for p in self.prepares
            if p.phase is Phase.PREPARE and p.view == pp.view and p.sequence == pp.sequence
            and p.block_hash == pp.block_hash and p.sender != pp.sender and p.verify(cfg.keys)
        }
        return len(good) >= 2 * cfg.f


@dataclass(frozen=True)
class ViewChangeClaim:
    message: PbftMessage
    height: int
    head_hash: Digest
    proof: PreparedProof | None


def parse_view_change(msg: PbftMessage, cfg: ValidatorConfig, genesis_hash: bytes) -> ViewChangeClaim | None:
    """Validate a VIEW-CHANGE message; ``None`` if anything fails to check out."""
    if msg.phase is not Phase.VIEW_CHANGE or not msg.verify(cfg.keys):
        return None
    try:
        _, segs = codec.decode_record(msg.payload, codec.TAG_VIEW_CHANGE)
        codec.expect_segments(segs, 2, "view change")
        cert_raw, proof_raw = segs
        if msg.sequence == 0:
            if msg.block_hash != genesis_hash or cert_raw:
                return None
        else:
            cert = CommitCertificate.decode(cert_raw)
            if not cert.verify(msg.block_hash, msg.sequence, cfg.keys):
                return None
        proof = PreparedProof.decode(proof_raw) if proof_raw else None
    except (CodecError, ValueError):
        return None
    if proof is not None:
        if (
            proof.sequence != msg.sequence + 1
            or proof.view >= msg.view
            or not proof.valid(cfg)
            or proof.block.header.prev_hash != msg.block_hash
        ):
            return None
    return ViewChangeClaim(msg, msg.sequence, msg.block_hash, proof)


def select_reproposal(claims: Sequence[ViewChangeClaim]) -> tuple[int, PreparedProof | None]:
    """Highest claimed height, and the highest-view prepared block above it."""
    top = max(c.height for c in claims)
    proofs = [c.proof for c in claims if c.height == top and c.proof is not None]
    if not proofs:
        return top, None
    return top, max(proofs, key=lambda p: (p.view, p.block.hash))


# -- replica --------------------------------------------------------------------------

@dataclass
class Slot:
    preprepare: PbftMessage | None = None
    block: Block | None = None
    prepares: dict[int, PbftMessage] = field(default_factory=dict)
    commits: dict[int, PbftMessage] = field(default_factory=dict)
    prepared: bool = False
    committed: bool = False


@dataclass
class Outbox:
    sends: list[tuple[int | None, bytes, str]] = field(default_factory=list)  # (to, data, trace)
    replies: list[tuple[str, bytes]] = field(default_factory=list)
    timers: list[tuple[str, int, int]] = field(default_factory=list)  # (name, delay, token)
    commits: list[tuple[Block, list[Receipt]]] = field(default_factory=list)

    def drain(self) -> "Outbox":
        out = Outbox(self.sends, self.replies, self.timers, self.commits)
        self.sends, self.replies, self.timers, self.commits = [], [], [], []
        return out


def encode_reply(replica: int, tx_id: bytes, outcome: str, result: bytes = b"", height: int = 0) -> bytes:
    return codec.encode_record(
        codec.TAG_REPLY, [codec.u32(replica), tx_id, codec.u64(height), outcome.encode(), result]
    )


def decode_reply(data: bytes) -> tuple[int, Digest, int, str, bytes]:
    """Returns (replica, tx_id, height, outcome, result)."""
    _, segs = codec.decode_record(data, codec.TAG_REPLY)
    codec.expect_segments(segs, 5, "reply")
    return (codec.read_uint(segs[0], 4), Digest(segs[1]), codec.read_uint(segs[2], 8),
            segs[3].decode(), segs[4])


def receipt_reply(replica: int, receipt: Receipt) -> bytes:
    res = receipt.result
    if receipt.outcome == "read":
        raw = res.to_bytes()
    elif receipt.outcome == "written":
        raw = bytes(res)
    elif receipt.outcome in ("granted", "ignored"):
        raw = codec.u8(res)
    else:
        raw = b""
    return encode_reply(replica, receipt.tx_id, receipt.outcome, raw, receipt.height)


class Replica:
    def __init__(
        self,
        index: int,
        identity: SigningIdentity,
        config: ValidatorConfig,
        genesis: Block,
        store=None,
        clock: Callable[[], int] = lambda: 0,
        **ledger_params,
    ) -> None:
        if config.keys[index] != identity.public_key:
            raise ValueError("identity does not match the configured validator key")
        self.index = index
        self.identity = identity
        self.config = config
        self.genesis = genesis
        self.state = LedgerState(genesis, **ledger_params)
        self.blocks: list[Block] = [genesis]
        self.store = store
        self.clock = clock
        self.outbox = Outbox()

        self.view = 0
        self.in_view_change = False
        self.backoff = 0
        self.mempool: dict[Digest, Transaction] = {}
        self._pending: Counter = Counter()
        self.clients: dict[Digest, list[str]] = {}
        self.results: dict[Digest, bytes] = {}

        self.slots: dict[tuple[int, int], Slot] = {}
        self.prepared_proof: PreparedProof | None = None
        self.view_changes: dict[int, dict[int, ViewChangeClaim]] = {}
        self.buffer: list[PbftMessage] = []
        self.ahead: dict[int, int] = {}

        self.equivocations: list[tuple[PbftMessage, PbftMessage]] = []
        self.rejections: Counter = Counter()
        self.invalid_proposals = 0
        self.flagged_peers: set[int] = set()
        self.max_commit_votes_seen = 0
        self.view_changes_started = 0

        self._tokens: Counter = Counter()
        self._armed: set[str] = set()
        self._sync_outstanding = False
        self._nv_sent: set[int] = set()

    # -- small helpers ---------------------------------------------------------

    @property
    def f(self) -> int:
        return self.config.f

    @property
    def height(self) -> int:
        return self.state.height

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def is_primary(self, view: int | None = None) -> bool:
        return self.config.primary(self.view if view is None else view) == self.index

    def _set_timer(self, name: str, delay: int) -> None:
        self._tokens[name] += 1
        self._armed.add(name)
        self.outbox.timers.append((name, delay, self._tokens[name]))

    def _cancel_timer(self, name: str) -> None:
        self._tokens[name] += 1
        self._armed.discard(name)

    def _timeout(self) -> int:
        return self.config.timeout_ms * (2 ** min(self.backoff, 16))

    def _broadcast(self, msg: PbftMessage) -> None:
        self.outbox.sends.append((None, msg.encoded, msg.trace()))

    def _send(self, to: int, data: bytes, trace: str) -> None:
        self.outbox.sends.append((to, data, trace))

    def _reply(self, tx_id: Digest, data: bytes) -> None:
        for client in self.clients.get(tx_id, ()):
            self.outbox.replies.append((client, data))

    def _sign(self, phase: Phase, view: int, seq: int, block_hash: bytes, payload: bytes = b"") -> PbftMessage:
        return PbftMessage.signed(self.identity, phase, view, seq, block_hash, self.index, payload)

    # -- client requests ----------------------------------------------------------

    def on_request(self, tx: Transaction, client: str) -> None:
        tx_id = tx.id
        clients = self.clients.setdefault(tx_id, [])
        if client not in clients:
            clients.append(client)
        if tx_id in self.results:
            self.outbox.replies.append((client, self.results[tx_id]))
            return
        if tx_id in self.mempool:
            return
        reason = validate_transaction(self.state, tx)
        if reason is None and self._pending[tx.sender] >= MEMPOOL_SLACK * self.state.rate_budget:
            reason = RejectReason.RATE_LIMITED
        if reason is not None:
            self._reject(tx_id, reason)
            return
        self.mempool[tx_id] = tx
        self._pending[tx.sender] += 1
        if not self.in_view_change and "request" not in self._armed:
            self._set_timer("request", self._timeout())
        self._maybe_propose()

    def _reject(self, tx_id: Digest, reason: RejectReason) -> None:
        self.rejections[reason.value] += 1
        payload = encode_reply(self.index, tx_id, f"rejected:{reason.value}")
        self.results[tx_id] = payload
        self._reply(tx_id, payload)

    # -- message dispatch ---------------------------------------------------------

    def on_message(self, data: bytes, link_sender: int | None = None) -> None:
        if not data:
            return
        tag = data[0]
        try:
            if tag == codec.TAG_PBFT:
                self._on_pbft(PbftMessage.decode(data))
            elif tag == codec.TAG_STATE_REQUEST:
                self._on_state_request(data)
            elif tag == codec.TAG_STATE_REPLY:
                self._on_state_reply(data)
        except (CodecError, ValueError) as exc:
            log.debug("replica %d dropped malformed message: %s", self.index, exc)

    def _on_pbft(self, msg: PbftMessage) -> None:
        if not msg.verify(self.config.keys):
            return
        if msg.phase is Phase.VIEW_CHANGE:
            self._on_view_change(msg)
            return
        if msg.phase is Phase.NEW_VIEW:
            self._on_new_view(msg)
            return
        if msg.sequence > self.height + 1:
            self._note_ahead(msg.sender, msg.sequence)
        if msg.sequence <= self.height:
            return
        if msg.view < self.view:
            if msg.phase is Phase.COMMIT and msg.sequence == self.height + 1:
                # the rest of the cluster may still be committing in an older view
                self._on_commit(msg)
            return
        if msg.view > self.view or self.in_view_change or msg.sequence > self.height + 1:
            self._buffer(msg)
            return
        if msg.phase is Phase.PRE_PREPARE:
            self._on_preprepare(msg)
        elif msg.phase is Phase.PREPARE:
            self._on_prepare(msg)
        elif msg.phase is Phase.COMMIT:
            self._on_commit(msg)

    def _buffer(self, msg: PbftMessage) -> None:
        self.buffer.append(msg)
        if len(self.buffer) > BUFFER_LIMIT:
            del self.buffer[: len(self.buffer) - BUFFER_LIMIT]

    def _drain_buffer(self) -> None:
        pending, self.buffer = self.buffer, []
        for msg in pending:
            self._on_pbft(msg)

    def _slot(self, view: int, seq: int) -> Slot:
        slot = self.slots.get((view, seq))
        if slot is None:
            slot = self.slots[(view, seq)] = Slot()
        return slot

    # -- normal case ----------------------------------------------------------------

    def _maybe_propose(self) -> None:
        if (
            self.is_primary()
            and not self.in_view_change
            and self.mempool
            and "batch" not in self._armed
            and self._slot(self.view, self.height + 1).preprepare is None
        ):
            self._set_timer("batch", self.config.batch_delay_ms)

    def _propose(self) -> None:
        if not self.is_primary() or self.in_view_change:
            return
        seq = self.height + 1
        if self._slot(self.view, seq).preprepare is not None:
            return
        timestamp = self.genesis.header.timestamp + self.clock() // 1000
        block = build_block(self.state, self.mempool.values(), self.index, timestamp)
        if not block.transactions:
            self._evict_invalid()
            return
        msg = self._sign(Phase.PRE_PREPARE, self.view, seq, block.hash, block.encode())
        self._broadcast(msg)
        self._on_preprepare(msg, block)

    def _on_preprepare(self, msg: PbftMessage, block: Block | None = None) -> None:
        if msg.sender != self.config.primary(msg.view):
            return
        slot = self._slot(msg.view, msg.sequence)
        if slot.preprepare is not None:
            if slot.preprepare.block_hash != msg.block_hash:
                self.equivocations.append((slot.preprepare, msg))
            return
        try:
            block = block or Block.decode(msg.payload)
        except (CodecError, ValueError):
            self.invalid_proposals += 1
            return
        if block.hash != msg.block_hash or block.height != msg.sequence or block.certificate is not None:
            self.invalid_proposals += 1
            return
        try:
            check_block(self.state, block)
        except BlockRejected as exc:
            log.info("replica %d rejects proposal v%d s%d: %s", self.index, msg.view, msg.sequence, exc)
            self.invalid_proposals += 1
            return
        slot.preprepare = msg
        slot.block = block
        if not self.is_primary(msg.view):
            vote = self._sign(Phase.PREPARE, msg.view, msg.sequence, msg.block_hash)
            self._broadcast(vote)
            slot.prepares[self.index] = vote
        self._check_prepared(msg.view, msg.sequence)

    def _on_prepare(self, msg: PbftMessage) -> None:
        if msg.sender == self.config.primary(msg.view):
            return
        slot = self._slot(msg.view, msg.sequence)
        slot.prepares.setdefault(msg.sender, msg)
        self._check_prepared(msg.view, msg.sequence)

    def _check_prepared(self, view: int, seq: int) -> None:
        slot = self._slot(view, seq)
        if slot.prepared or slot.preprepare is None:
            return
        matching = [p for p in slot.prepares.values() if p.block_hash == slot.preprepare.block_hash]
        if len({p.sender for p in matching}) < 2 * self.f:
            return
        slot.prepared = True
        self.prepared_proof = PreparedProof(slot.preprepare, tuple(sorted(matching, key=lambda p: p.sender)))
        vote = self._sign(Phase.COMMIT, view, seq, slot.preprepare.block_hash)
        self._broadcast(vote)
        slot.commits[self.index] = vote
        self._check_committed(view, seq)

    def _on_commit(self, msg: PbftMessage) -> None:
        slot = self._slot(msg.view, msg.sequence)
        slot.commits.setdefault(msg.sender, msg)
        self._check_committed(msg.view, msg.sequence)
        if not slot.committed:
            by_hash = Counter(c.block_hash for c in slot.commits.values())
            for bh, count in by_hash.items():
                if count >= self.config.quorum and (slot.block is None or slot.block.hash != bh):
                    # the others committed a block we never accepted
                    self.request_sync([c.sender for c in slot.commits.values() if c.block_hash == bh])

    def _check_committed(self, view: int, seq: int) -> None:
        slot = self._slot(view, seq)
        if slot.committed or not slot.prepared:
            return
        votes = sorted(
            (c for c in slot.commits.values() if c.block_hash == slot.preprepare.block_hash),
            key=lambda c: c.sender,
        )
        if len(votes) < self.config.quorum:
            return
        assert len({c.sender for c in votes}) >= self.config.quorum
        self.max_commit_votes_seen = max(self.max_commit_votes_seen, len(votes))
        slot.committed = True
        cert = CommitCertificate(view, tuple((c.sender, c.signature) for c in votes[: self.config.quorum]))
        self._execute(slot.block.with_certificate(cert))

    def _execute(self, block: Block) -> None:
        receipts = apply_block(self.state, block, self.store)
        self.blocks.append(block)
        self.outbox.commits.append((block, receipts))
        for receipt in receipts:
            tx = self.mempool.pop(receipt.tx_id, None)
            if tx is not None:
                self._pending[tx.sender] -= 1
            payload = receipt_reply(self.index, receipt)
            self.results[receipt.tx_id] = payload
            self._reply(receipt.tx_id, payload)
        self._evict_invalid()
        self.prepared_proof = None
        self.backoff = 0
        for key in [k for k in self.slots if k[1] <= block.height]:
            del self.slots[key]
        self.ahead = {s: q for s, q in self.ahead.items() if q > block.height + 1}
        if self.mempool and not self.in_view_change:
            self._set_timer("request", self._timeout())
        else:
            self._cancel_timer("request")
        self._cancel_timer("batch")
        self._maybe_propose()

    def _evict_invalid(self) -> None:
        kept: Counter = Counter()
        for tx_id, tx in list(self.mempool.items()):
            reason = validate_transaction(self.state, tx, kept)
            if reason is None:
                kept[tx.sender] += 1
                continue
            del self.mempool[tx_id]
            self._pending[tx.sender] -= 1
            self._reject(tx_id, reason)
        if not self.mempool:
            self._cancel_timer("request")

    # -- timers ---------------------------------------------------------------------

    def on_timer(self, name: str, token: int) -> None:
        if self._tokens[name] != token:
            return
        self._armed.discard(name)
        if name == "batch":
            self._propose()
        elif name == "request":
            if self.mempool and not self.in_view_change:
                self.start_view_change(self.view + 1)
        elif name == "viewchange":
            if self.in_view_change:
                self.start_view_change(self.view + 1)
        elif name == "sync":
            self._sync_outstanding = False

    # -- view change ------------------------------------------------------------------

    def _make_view_change(self, view: int) -> PbftMessage:
        head = self.head
        cert = head.certificate.encode() if head.certificate else b""
        proof = self.prepared_proof
        if proof is not None and proof.sequence != self.height + 1:
            proof = None
        payload = codec.encode_record(codec.TAG_VIEW_CHANGE, [cert, proof.encode() if proof else b""])
        return self._sign(Phase.VIEW_CHANGE, view, self.height, head.hash, payload)

    def start_view_change(self, view: int) -> None:
        if view <= self.view and (self.in_view_change or view < self.view):
            return
        self.view = view
        self.in_view_change = True
        self.backoff += 1
        self.view_changes_started += 1
        self._cancel_timer("request")
        self._cancel_timer("batch")
        self._cancel_timer("viewchange")
        msg = self._make_view_change(view)
        self._broadcast(msg)
        claim = parse_view_change(msg, self.config, self.genesis.hash)
        self.view_changes.setdefault(view, {})[self.index] = claim
        self._view_change_progress()

    def _on_view_change(self, msg: PbftMessage) -> None:
        if msg.view < self.view:
            return
        claim = parse_view_change(msg, self.config, self.genesis.hash)
        if claim is None:
            return
        if claim.height > self.height:
            self._note_ahead(msg.sender, claim.height + 1)
        self.view_changes.setdefault(msg.view, {})[msg.sender] = claim
        if msg.view == self.view and not self.in_view_change:
            # a straggler; the primary re-sends its NEW-VIEW
            return
        higher = {}
        for v, claims in self.view_changes.items():
            if v > self.view or (v == self.view and not self.in_view_change):
                for sender in claims:
                    if sender != self.index:
                        higher[sender] = min(v, higher.get(sender, v))
        if len(higher) >= self.f + 1 and (not self.in_view_change or min(higher.values()) > self.view):
            self.start_view_change(min(higher.values()))
            return
        self._view_change_progress()

    def _view_change_progress(self) -> None:
        if not self.in_view_change:
            return
        claims = self.view_changes.get(self.view, {})
        if len(claims) >= self.config.quorum:
            if "viewchange" not in self._armed:
                self._set_timer("viewchange", self._timeout())
            if self.is_primary():
                self._try_new_view()

    def _try_new_view(self) -> None:
        view = self.view
        if view in self._nv_sent:
            return
        claims = self.view_changes.get(view, {})
        own = parse_view_change(self._make_view_change(view), self.config, self.genesis.hash)
        claims[self.index] = own
        others = [claims[s] for s in sorted(claims) if s != self.index]
        chosen = [own] + others[: self.config.quorum - 1]
        if len(chosen) < self.config.quorum:
            return
        top, proof = select_reproposal(chosen)
        if self.height < top:
            self.request_sync([c.message.sender for c in chosen if c.height == top])
            return
        proposal = b""
        if proof is not None:
            block = proof.block
            pp = self._sign(Phase.PRE_PREPARE, view, top + 1, block.hash, proof.preprepare.payload)
            proposal = pp.encoded
        payload = codec.encode_record(
            codec.TAG_NEW_VIEW, [codec.pack_list(c.message.encoded for c in chosen), proposal]
        )
        nv = self._sign(Phase.NEW_VIEW, view, top, crypto.ZERO_DIGEST, payload)
        self._nv_sent.add(view)
        self._broadcast(nv)
        self._enter_view(view, PbftMessage.decode(proposal) if proposal else None, top)

    def _on_new_view(self, msg: PbftMessage) -> None:
        if msg.view < self.view or (msg.view == self.view and not self.in_view_change):
            return
        if msg.sender != self.config.primary(msg.view):
            return
        try:
            _, segs = codec.decode_record(msg.payload, codec.TAG_NEW_VIEW)
            codec.expect_segments(segs, 2, "new view")
            vcs = [PbftMessage.decode(raw) for raw in codec.unpack_list(segs[0])]
            proposal = PbftMessage.decode(segs[1]) if segs[1] else None
        except (CodecError, ValueError):
            return
        claims = [parse_view_change(v, self.config, self.genesis.hash) for v in vcs]
        if any(c is None or c.message.view != msg.view for c in claims):
            return
        if len({c.message.sender for c in claims}) < self.config.quorum:
            return
        top, proof = select_reproposal(claims)
        if msg.sequence != top:
            return
        if proof is not None:
            if proposal is None or proposal.block_hash != proof.block.hash:
                return
        if proposal is not None and (
            proposal.phase is not Phase.PRE_PREPARE
            or proposal.view != msg.view
            or proposal.sequence != top + 1
            or proposal.sender != msg.sender
            or not proposal.verify(self.config.keys)
        ):
            return
        self._enter_view(msg.view, proposal, top)

    def _enter_view(self, view: int, proposal: PbftMessage | None, top: int) -> None:
        self.view = view
        self.in_view_change = False
        self._cancel_timer("viewchange")
        for key in [k for k in self.slots if k[0] < view]:
            del self.slots[key]
        for v in [v for v in self.view_changes if v <= view]:
            del self.view_changes[v]
        if self.height < top:
            self.request_sync(range(self.config.n))
        if proposal is not None:
            self._on_pbft(proposal)
        if self.mempool:
            self._set_timer("request", self._timeout())
        self._maybe_propose()
        self._drain_buffer()

    # -- state transfer ---------------------------------------------------------------

    def _note_ahead(self, sender: int, seq: int) -> None:
        if sender == self.index:
            return
        self.ahead[sender] = max(seq, self.ahead.get(sender, 0))
        peers = [s for s, q in self.ahead.items() if q > self.height + 1]
        if len(peers) >= self.f + 1:
            self.request_sync(peers)

    def request_sync(self, peers: Iterable[int]) -> None:
        if self._sync_outstanding:
            return
        targets = sorted({p for p in peers if p != self.index})
        if not targets:
            return
        self._sync_outstanding = True
        self._set_timer("sync", SYNC_RETRY_MS)
        req = codec.encode_record(codec.TAG_STATE_REQUEST, [codec.u32(self.index), codec.u64(self.height + 1)])
        for peer in targets:
            self._send(peer, req, f"state-request {self.index} from={self.height + 1}")

    def _on_state_request(self, data: bytes) -> None:
        _, segs = codec.decode_record(data, codec.TAG_STATE_REQUEST)
        codec.expect_segments(segs, 2, "state request")
        requester, start = codec.read_uint(segs[0], 4), codec.read_uint(segs[1], 8)
        if requester >= self.config.n or start > self.height:
            return
        blocks = self.blocks[start:]
        reply = codec.encode_record(
            codec.TAG_STATE_REPLY, [codec.u32(self.index), codec.pack_list(b.encode() for b in blocks)]
        )
        self._send(requester, reply, f"state-reply {self.index} blocks={len(blocks)}")

    def _on_state_reply(self, data: bytes) -> None:
        _, segs = codec.decode_record(data, codec.TAG_STATE_REPLY)
        codec.expect_segments(segs, 2, "state reply")
        peer = codec.read_uint(segs[0], 4)
        blocks = []
        for raw in codec.unpack_list(segs[1]):
            try:
                blocks.append(Block.decode(raw))
            except (CodecError, ValueError):
                self.flagged_peers.add(peer)
                break
        self.apply_synced_blocks(blocks, peer)

    def apply_synced_blocks(self, blocks: Sequence[Block], peer: int | None = None) -> int:
        """Apply certified blocks that extend our head. Stops at the first bad one."""
        applied = 0
        last_view = None
        for block in blocks:
            if block.height <= self.height:
                continue
            cert = block.certificate
            ok = (
                block.height == self.height + 1
                and cert is not None
                and cert.verify(block.hash, block.height, self.config.keys)
            )
            if ok:
                try:
                    check_block(self.state, block)
                except BlockRejected:
                    ok = False
            if not ok:
                if peer is not None:
                    self.flagged_peers.add(peer)
                break
            self._execute(block)
            last_view = cert.view
            applied += 1
        if applied:
            self._sync_outstanding = False
            self._cancel_timer("sync")
            if last_view is not None and (last_view > self.view or (self.in_view_change and last_view == self.view)):
                # a commit certificate in that view proves the view is live
                self._enter_view(last_view, None, self.height)
            elif self.in_view_change and self.is_primary():
                self._try_new_view()
            self._drain_buffer()
        return applied

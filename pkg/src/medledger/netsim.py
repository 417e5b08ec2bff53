"""Deterministic discrete-event network hosting validators, wallets and stores.

Every source of randomness (latency, drops, identities, wallet entropy) is
derived from ``SimConfig.seed``, so a run is a pure function of its config
and the actions driven against it.
"""

from __future__ import annotations

import heapq
import json
import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence, TextIO

from . import codec, crypto
from .codec import CodecError, Phase
from .consensus import Outbox, PbftMessage, Replica, ValidatorConfig, decode_reply, encode_reply
from .crypto import Ciphertext, Digest, Signature
from .ledger import (
    DEFAULT_MAX_BLOCK_TXS,
    DEFAULT_RATE_BUDGET,
    DEFAULT_RATE_WINDOW,
    Block,
    Receipt,
    Transaction,
    TransactionRejected,
    make_genesis,
    tx_root,
)
from .offchain import NodeStore

log = logging.getLogger(__name__)

GENESIS_EPOCH = 1_700_000_000
DEFAULT_HORIZON_MS = 600_000
RETRY_DELAY_MS = 20


class SimError(Exception):
    pass


class UnknownNode(SimError, KeyError):
    pass


class ConsensusTimeout(SimError, TimeoutError):
    """The horizon passed (or the network went quiet) before a request resolved."""


def validator_id(index: int) -> str:
    return f"v{index}"


def seeded_entropy(seed: int | str, name: str) -> Callable[[int], bytes]:
    rng = random.Random(f"{seed}:{name}")
    return rng.randbytes


@dataclass(frozen=True)
class Partition:
    start: int
    end: int | None
    groups: tuple[frozenset[str], ...]

    def separates(self, a: str, b: str) -> bool:
        def group(x: str) -> int:
            for i, g in enumerate(self.groups):
                if x in g:
                    return i
            return -1

        return group(a) != group(b)


@dataclass
class SimConfig:
    seed: int = 0
    n: int = 4
    latency_min: int = 1
    latency_max: int = 10
    drop_prob: float = 0.0
    max_retries: int = 50
    fifo: bool = True
    partitions: tuple[Partition, ...] = ()
    byzantine: dict[int, str] = field(default_factory=dict)
    dos: tuple[str, int] | None = None
    timeout_ms: int = 500
    batch_delay_ms: int = 5
    horizon_ms: int = DEFAULT_HORIZON_MS
    rate_budget: int = DEFAULT_RATE_BUDGET
    rate_window: int = DEFAULT_RATE_WINDOW
    max_block_txs: int = DEFAULT_MAX_BLOCK_TXS
    replication_k: int | None = None

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    def __post_init__(self) -> None:
        if self.n < 4 or (self.n - 1) % 3:
            raise ValueError(f"n must be 3f+1 >= 4, got {self.n}")
        if not 0 <= self.drop_prob < 1:
            raise ValueError("drop probability must be in [0, 1)")
        if not 0 <= self.latency_min <= self.latency_max:
            raise ValueError("bad latency bounds")
        for idx, profile in self.byzantine.items():
            if not 0 <= idx < self.n:
                raise ValueError(f"byzantine node {idx} out of range")
            if profile not in BEHAVIORS:
                raise ValueError(f"unknown byzantine profile {profile!r}")


@dataclass(frozen=True)
class Envelope:
    sender: str
    recipient: str
    payload: bytes
    sent_at: int
    deliver_at: int
    attempt: int = 0


@dataclass(frozen=True)
class Fault:
    kind: str  # drop | partition | heal | crash | recover | corrupt_blob | flood
    params: dict[str, Any] = field(default_factory=dict)


# -- byzantine behaviors ---------------------------------------------------------------

def _flip(data: bytes, offset: int) -> bytes:
    raw = bytearray(data)
    raw[offset % len(raw)] ^= 0x01
    return bytes(raw)


def _is_pbft(data: bytes) -> bool:
    return len(data) > 5 and data[0] == codec.TAG_PBFT


class Behavior:
    """Filters a replica's outbound traffic. The honest behavior passes everything."""

    name = "honest"

    def outbound(self, sim: "Simulation", replica: Replica, out: Outbox) -> Outbox:
        return out


class Silent(Behavior):
    name = "silent"

    def outbound(self, sim, replica, out):
        out.sends, out.replies = [], []
        return out


class Equivocate(Behavior):
    """As primary, sends one block to most backups and a conflicting one to the rest."""

    name = "equivocate"

    def outbound(self, sim, replica, out):
        sends = []
        for to, data, trace in out.sends:
            if to is None and _is_pbft(data) and data[5] == Phase.PRE_PREPARE:
                msg = PbftMessage.decode(data)
                block = Block.decode(msg.payload)
                alt = Block(replace(block.header, timestamp=block.header.timestamp + 1), block.transactions)
                alt_msg = PbftMessage.signed(
                    replica.identity, Phase.PRE_PREPARE, msg.view, msg.sequence, alt.hash, replica.index, alt.encode()
                )
                others = [i for i in range(replica.config.n) if i != replica.index]
                split = len(others) - max(1, len(others) // 3)
                for i in others[:split]:
                    sends.append((i, data, trace))
                for i in others[split:]:
                    sends.append((i, alt_msg.encoded, alt_msg.trace()))
            else:
                sends.append((to, data, trace))
        out.sends = sends
        return out


class Tamper(Behavior):
    """Corrupts everything it sends: proposals, votes, served chains and replies."""

    name = "tamper"

    def outbound(self, sim, replica, out):
        sends = []
        for to, data, trace in out.sends:
            if _is_pbft(data):
                msg = PbftMessage.decode(data)
                if msg.phase is Phase.PRE_PREPARE:
                    data = self._bad_proposal(replica, msg).encoded
                else:
                    data = replace(msg, signature=Signature(_flip(msg.signature, 40))).encoded
            elif data and data[0] == codec.TAG_STATE_REPLY:
                data = _flip(data, len(data) // 2)
            sends.append((to, data, trace))
        replies = []
        for client, data in out.replies:
            replica_idx, tx_id, height, outcome, result = decode_reply_safe(data)
            replies.append((client, encode_reply(replica_idx, tx_id, "denied", b"", height)))
        out.sends, out.replies = sends, replies
        return out

    @staticmethod
    def _bad_proposal(replica: Replica, msg: PbftMessage) -> PbftMessage:
        block = Block.decode(msg.payload)
        txs = list(block.transactions)
        if txs:
            tx = txs[0]
            txs[0] = replace(tx, signature=Signature(_flip(tx.signature, 7)))
        txs.sort(key=lambda t: t.id)
        header = replace(block.header, tx_root=tx_root(txs))
        bad = Block(header, tuple(txs))
        return PbftMessage.signed(
            replica.identity, Phase.PRE_PREPARE, msg.view, msg.sequence, bad.hash, replica.index, bad.encode()
        )


def decode_reply_safe(data: bytes):
    try:
        return decode_reply(data)
    except (CodecError, ValueError):
        return (0, crypto.ZERO_DIGEST, 0, "malformed", b"")


BEHAVIORS: dict[str, type[Behavior]] = {
    "honest": Behavior,
    "silent": Silent,
    "equivocate": Equivocate,
    "tamper": Tamper,
}


# -- clients ------------------------------------------------------------------------------

@dataclass
class ClientLedger:
    """Reply collection for one client: a request resolves on f+1 matching replies."""

    latest: dict[Digest, dict[int, tuple[int, str, bytes]]] = field(default_factory=dict)
    resolved: dict[Digest, Receipt] = field(default_factory=dict)

    def offer(self, replica: int, tx_id: Digest, height: int, outcome: str, result: bytes, f: int) -> None:
        votes = self.latest.setdefault(tx_id, {})
        votes[replica] = (height, outcome, result)
        if tx_id in self.resolved and not self.resolved[tx_id].outcome.startswith("rejected"):
            return
        tally = Counter(votes.values())
        answer, count = max(tally.items(), key=lambda kv: (kv[1], kv[0]))
        if count >= f + 1:
            height, outcome, raw = answer
            self.resolved[tx_id] = Receipt(tx_id, height, outcome, _result_value(outcome, raw))


def _result_value(outcome: str, raw: bytes):
    if outcome == "read":
        return Ciphertext.from_bytes(raw)
    if outcome == "written":
        return Digest(raw)
    if outcome in ("granted", "ignored"):
        return raw[0] if raw else None
    return None


# -- the simulator ------------------------------------------------------------------------

class Simulation:
    def __init__(self, config: SimConfig, trace: TextIO | None = None) -> None:
        self.config = config
        self.trace = trace
        self.rng = random.Random(f"net:{config.seed}")
        self.now = 0
        self._queue: list[tuple[int, int, str, Any]] = []
        self._seq = 0

        identities = [
            crypto.gen_signing_identity(seeded_entropy(config.seed, f"validator:{i}")) for i in range(config.n)
        ]
        keys = tuple(ident.public_key for ident in identities)
        self.genesis = make_genesis(keys, GENESIS_EPOCH + config.seed % 86_400)
        self.validator_config = ValidatorConfig(keys, config.timeout_ms, config.batch_delay_ms)
        self.stores = [NodeStore(i, config.n, config.replication_k) for i in range(config.n)]
        for store in self.stores:
            store.peers = self.stores
        params = dict(
            rate_budget=config.rate_budget, rate_window=config.rate_window, max_block_txs=config.max_block_txs
        )
        self.replicas = [
            Replica(i, identities[i], self.validator_config, self.genesis, self.stores[i], self._clock, **params)
            for i in range(config.n)
        ]
        self.behaviors: dict[int, Behavior] = {
            i: BEHAVIORS[profile]() for i, profile in sorted(config.byzantine.items())
        }

        self.wallets: dict[str, Any] = {}
        self.names: dict[bytes, str] = {}
        self.clients: dict[str, ClientLedger] = {}
        self.outstanding: set[Digest] = set()
        self.submitted: dict[Digest, str] = {}

        self.crashed: set[str] = set()
        self.drop_prob = config.drop_prob
        self.partitions: list[Partition] = []
        self._last_delivery: dict[tuple[str, str], int] = {}

        self.sent = self.delivered = self.dropped = self.retransmissions = 0
        self.bytes_sent = 0
        self.by_kind: Counter = Counter()
        self.drop_log: list[tuple[int, str, str, str]] = []
        self.key_deliveries = 0
        self.fault_log: list[dict[str, Any]] = []
        self.tampered_blobs: list[tuple[str, Digest]] = []
        self.written: list[Digest] = []
        self.commit_hashes: dict[int, Digest] = {}
        self.conflicts: list[dict[str, Any]] = []
        self.horizon_hit = False
        self.assertions: list[dict[str, Any]] = []
        self.wire_log: list[bytes] | None = None

        for part in config.partitions:
            self._schedule(part.start, "fault", Fault("partition", {"groups": part.groups, "activate": part}))
            if part.end is not None:
                self._schedule(part.end, "fault", Fault("heal", {"partition": part}))
        if config.dos is not None:
            sender, count = config.dos
            self._schedule(0, "fault", Fault("flood", {"sender": sender, "count": count}))

    # -- plumbing ---------------------------------------------------------------

    def _clock(self) -> int:
        return self.now

    @property
    def f(self) -> int:
        return self.config.f

    def honest(self) -> list[int]:
        return [i for i in range(self.config.n) if i not in self.behaviors]

    def _schedule(self, at: int, kind: str, item: Any) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, kind, item))

    def _emit_trace(self, line: str) -> None:
        if self.trace is not None:
            self.trace.write(f"{self.now:>8} {line}\n")

    @staticmethod
    def kind_of(data: bytes) -> str:
        if _is_pbft(data):
            try:
                return Phase(data[5]).label
            except ValueError:
                return "pbft?"
        return {
            codec.TAG_REQUEST: "request",
            codec.TAG_REPLY: "reply",
            codec.TAG_STATE_REQUEST: "state-request",
            codec.TAG_STATE_REPLY: "state-reply",
        }.get(data[0] if data else -1, "other")

    def _post(self, src: str, dst: str, payload: bytes, attempt: int = 0) -> None:
        delay = self.rng.randint(self.config.latency_min, self.config.latency_max)
        at = self.now + delay
        if self.config.fifo:
            at = max(at, self._last_delivery.get((src, dst), 0))
            self._last_delivery[(src, dst)] = at
        env = Envelope(src, dst, payload, self.now, at, attempt)
        self.sent += 1
        self.bytes_sent += len(payload)
        self.by_kind[self.kind_of(payload)] += 1
        if self.wire_log is not None:
            self.wire_log.append(payload)
        self._schedule(at, "deliver", env)

    def _drop(self, env: Envelope, why: str) -> None:
        self.dropped += 1
        self.drop_log.append((self.now, env.sender, env.recipient, why))
        if why == "loss" and env.attempt < self.config.max_retries:
            self._schedule(self.now + RETRY_DELAY_MS, "retry", env)

    def _blocked(self, a: str, b: str) -> bool:
        return any(p.separates(a, b) for p in self.partitions if p.start <= self.now)

    def _deliver(self, env: Envelope) -> None:
        if env.recipient in self.crashed or env.sender in self.crashed:
            self._drop(env, "crashed")
            return
        if self._blocked(env.sender, env.recipient):
            self._drop(env, "partition")
            return
        if self.drop_prob and self.rng.random() < self.drop_prob:
            self._drop(env, "loss")
            return
        self.delivered += 1
        if env.recipient.startswith("v") and env.recipient[1:].isdigit():
            idx = int(env.recipient[1:])
            replica = self.replicas[idx]
            if env.payload[:1] == bytes([codec.TAG_REQUEST]):
                try:
                    _, segs = codec.decode_record(env.payload, codec.TAG_REQUEST)
                    codec.expect_segments(segs, 2, "request")
                    tx = Transaction.decode(segs[1])
                except (CodecError, ValueError):
                    return
                replica.on_request(tx, segs[0].decode())
            else:
                sender = int(env.sender[1:]) if env.sender.startswith("v") else None
                replica.on_message(env.payload, sender)
            self._flush(idx)
        else:
            self._client_receive(env.recipient, env.payload)

    def _flush(self, idx: int) -> None:
        replica = self.replicas[idx]
        out = replica.outbox.drain()
        behavior = self.behaviors.get(idx)
        if behavior is not None:
            out = behavior.outbound(self, replica, out)
        src = validator_id(idx)
        for block, receipts in out.commits:
            self._on_commit(idx, block, receipts)
        for to, data, trace in out.sends:
            targets = [j for j in range(self.config.n) if j != idx] if to is None else [to]
            if self.trace is not None:
                self._emit_trace(f"{trace} -> {','.join(str(j) for j in targets)}")
            for j in targets:
                self._post(src, validator_id(j), data)
        for client, data in out.replies:
            self._post(src, client, data)
        for name, delay, token in out.timers:
            self._schedule(self.now + delay, "timer", (idx, name, token))

    def _on_commit(self, idx: int, block: Block, receipts: Sequence[Receipt]) -> None:
        if idx in self.behaviors:
            return
        known = self.commit_hashes.setdefault(block.height, block.hash)
        if known != block.hash:
            self.conflicts.append({"height": block.height, "node": idx, "a": known.hex(), "b": block.hash.hex()})
        if idx == min(self.honest()):
            for r in receipts:
                if r.outcome == "written":
                    self.written.append(r.result)

    def _client_receive(self, client: str, payload: bytes) -> None:
        try:
            replica, tx_id, height, outcome, result = decode_reply(payload)
        except (CodecError, ValueError):
            return
        ledger = self.clients.setdefault(client, ClientLedger())
        ledger.offer(replica, tx_id, height, outcome, result, self.f)
        if tx_id in ledger.resolved:
            self.outstanding.discard(tx_id)

    def _apply_fault(self, fault: Fault) -> None:
        p = fault.params
        self.fault_log.append({"at": self.now, "kind": fault.kind, **{k: _plain(v) for k, v in p.items() if k != "activate"}})
        self._emit_trace(f"fault {fault.kind} {_plain(p)}")
        if fault.kind == "drop":
            self.drop_prob = float(p["rate"])
        elif fault.kind == "partition":
            part = p.get("activate") or Partition(self.now, None, tuple(frozenset(g) for g in p["groups"]))
            if part not in self.partitions:
                self.partitions.append(part)
        elif fault.kind == "heal":
            target = p.get("partition")
            self.partitions = [] if target is None else [x for x in self.partitions if x != target]
            self._resync_all()
        elif fault.kind == "crash":
            self.crashed.add(p["node"])
        elif fault.kind == "recover":
            self.crashed.discard(p["node"])
            self._resync_all()
        elif fault.kind == "corrupt_blob":
            self._corrupt_blob(p["node"], p.get("digest"))
        elif fault.kind == "flood":
            self.flood(p["sender"], int(p["count"]))
        else:
            raise SimError(f"unknown fault kind {fault.kind!r}")

    def _resync_all(self) -> None:
        for i, replica in enumerate(self.replicas):
            if validator_id(i) in self.crashed:
                continue
            replica._sync_outstanding = False
            replica.request_sync(range(self.config.n))
            self._flush(i)

    def _corrupt_blob(self, node: str, digest: bytes | None) -> None:
        idx = self._validator_index(node)
        store = self.stores[idx].local
        if digest is None:
            held = [d for d in self.written if d in store]
            if not held:
                raise SimError(f"{node} holds no blobs to corrupt")
            digest = held[-1]
        store.tamper(digest, offset=self.rng.randrange(1 << 16))
        self.tampered_blobs.append((node, Digest(digest)))

    def _validator_index(self, node: str) -> int:
        if node.startswith("v") and node[1:].isdigit() and int(node[1:]) < self.config.n:
            return int(node[1:])
        raise UnknownNode(node)

    # -- event loop ------------------------------------------------------------------------

    def step(self) -> bool:
        if not self._queue:
            return False
        at, _, kind, item = self._queue[0]
        if at > self.config.horizon_ms:
            self.now = self.config.horizon_ms
            self.horizon_hit = True
            return False
        heapq.heappop(self._queue)
        self.now = at
        if kind == "deliver":
            self._deliver(item)
        elif kind == "retry":
            self.retransmissions += 1
            self._post(item.sender, item.recipient, item.payload, item.attempt + 1)
        elif kind == "timer":
            idx, name, token = item
            if validator_id(idx) not in self.crashed:
                self.replicas[idx].on_timer(name, token)
                self._flush(idx)
        elif kind == "fault":
            self._apply_fault(item)
        return True

    def run_until(self, done: Callable[[], bool]) -> bool:
        while not done():
            if not self.step():
                break
        return done()

    def settle(self) -> bool:
        """Run to quiescence. False if the horizon cut the run short."""
        self.run_until(lambda: False)
        if self.outstanding:
            self._stall()
        return not self.horizon_hit

    def _stall(self) -> None:
        # nothing left to happen, yet requests are unresolved: liveness is lost
        self.horizon_hit = True
        self.now = max(self.now, self.config.horizon_ms)

    def inject_fault(self, at: int, fault: Fault) -> None:
        if at < self.now:
            raise SimError(f"cannot schedule a fault in the past ({at} < {self.now})")
        node = fault.params.get("node")
        if node is not None:
            self._validator_index(node)
        self._schedule(at, "fault", fault)

    # -- network surface used by wallets ------------------------------------------------

    def announce(self, address: bytes, wallet: Any) -> None:
        name = getattr(wallet, "name", None) or f"c-{bytes(address).hex()[:8]}"
        self.names.setdefault(bytes(address), name)
        self.wallets.setdefault(name, wallet)

    def deliver_key(self, sender: bytes, recipient: bytes, key: crypto.SymmetricKey) -> None:
        """Out-of-band secure channel: never touches an envelope."""
        name = self.names.get(bytes(recipient))
        if name is None:
            raise UnknownNode(f"unknown address {bytes(recipient).hex()}")
        self.wallets[name].receive_key(sender, key)
        self.key_deliveries += 1

    def client_name(self, tx: Transaction) -> str:
        return self.names.get(bytes(tx.sender), f"c-{bytes(tx.sender).hex()[:8]}")

    def send(self, tx: Transaction) -> Digest:
        client = self.client_name(tx)
        payload = codec.encode_record(codec.TAG_REQUEST, [client.encode(), tx.encode()])
        self.outstanding.add(tx.id)
        self.submitted[tx.id] = client
        self._emit_trace(f"request {tx.id.hex()[:12]} {client} -> all")
        for i in range(self.config.n):
            self._post(client, validator_id(i), payload)
        return tx.id

    def outcome(self, tx_id: bytes) -> Receipt | None:
        client = self.submitted.get(Digest(tx_id))
        ledger = self.clients.get(client) if client else None
        return ledger.resolved.get(Digest(tx_id)) if ledger else None

    def wait(self, tx_ids: Iterable[bytes]) -> dict[Digest, Receipt]:
        ids = [Digest(t) for t in tx_ids]
        if not self.run_until(lambda: all(self.outcome(t) is not None for t in ids)):
            if not self._queue:
                self._stall()
            raise ConsensusTimeout(f"{sum(self.outcome(t) is None for t in ids)} request(s) unresolved at {self.now} ms")
        return {t: self.outcome(t) for t in ids}

    def submit(self, tx: Transaction) -> Receipt:
        receipt = self.wait([self.send(tx)])[tx.id]
        if receipt.outcome.startswith("rejected:"):
            raise TransactionRejected(receipt.outcome.split(":", 1)[1], tx.id)
        return receipt

    def flood(self, sender: str, count: int) -> list[Digest]:
        """Fire ``count`` distinct signed transactions from wallet ``sender`` at once."""
        wallet = self.wallets.get(sender)
        if wallet is None:
            raise UnknownNode(sender)
        return [self.send(wallet.noise_transaction()) for _ in range(count)]

    # -- reporting ---------------------------------------------------------------------

    def reference_replica(self) -> Replica:
        honest = self.honest() or list(range(self.config.n))
        return max((self.replicas[i] for i in honest), key=lambda r: (r.height, -r.index))

    def heads_equal(self) -> bool:
        heads = {self.replicas[i].head.hash for i in self.honest() if validator_id(i) not in self.crashed}
        return len(heads) <= 1

    def states_equal(self) -> bool:
        digests = {self.replicas[i].state.digest() for i in self.honest() if validator_id(i) not in self.crashed}
        return len(digests) <= 1

    def report(self) -> "SimReport":
        nodes = {}
        for i, r in enumerate(self.replicas):
            store = self.stores[i]
            nodes[validator_id(i)] = {
                "behavior": self.behaviors[i].name if i in self.behaviors else "honest",
                "crashed": validator_id(i) in self.crashed,
                "height": r.height,
                "head": r.head.hash.hex(),
                "state_digest": r.state.digest().hex(),
                "view": r.view,
                "view_changes": r.view_changes_started,
                "rejections": dict(sorted(r.rejections.items())),
                "invalid_proposals": r.invalid_proposals,
                "equivocations": len(r.equivocations),
                "flagged_peers": sorted(validator_id(p) for p in r.flagged_peers),
                "storage_violations": len(store.violations),
                "repaired_blobs": len(store.repaired),
                "blobs": len(store.local),
            }
        ref = self.reference_replica()
        committed = [tx.id.hex() for b in ref.blocks[1:] for tx in b.transactions]
        outcomes: Counter = Counter()
        for ledger in self.clients.values():
            for receipt in ledger.resolved.values():
                outcomes[receipt.outcome] += 1
        honest = self.honest()
        in_flight = sum(1 for e in self._queue if e[2] == "deliver")
        data = {
            "outcome": "horizon_exceeded" if self.horizon_hit else "ok",
            "seed": self.config.seed,
            "n": self.config.n,
            "f": self.f,
            "time_ms": self.now,
            "nodes": nodes,
            "heads_equal": self.heads_equal(),
            "states_equal": self.states_equal(),
            "committed_count": len(committed),
            "committed_txs": committed,
            "height": ref.height,
            "conflicts": self.conflicts,
            "messages": {
                "sent": self.sent,
                "delivered": self.delivered,
                "dropped": self.dropped,
                "retransmissions": self.retransmissions,
                "in_flight": in_flight,
                "bytes": self.bytes_sent,
                "by_kind": dict(sorted(self.by_kind.items())),
            },
            "client_outcomes": dict(sorted(outcomes.items())),
            "unresolved": len(self.outstanding),
            "detections": {
                "storage_attack": any(self.stores[i].violations for i in range(self.config.n)),
                "equivocation": any(self.replicas[i].equivocations for i in honest),
                "invalid_proposals": sum(self.replicas[i].invalid_proposals for i in honest),
                "flagged_peers": sorted({validator_id(p) for i in honest for p in self.replicas[i].flagged_peers}),
                "rate_limited": sum(self.replicas[i].rejections.get("rate_limited", 0) for i in honest),
            },
            "faults": self.fault_log,
            "tampered_blobs": [[node, d.hex()] for node, d in self.tampered_blobs],
            "key_deliveries": self.key_deliveries,
            "assertions": self.assertions,
        }
        return SimReport(data)


def _plain(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, (frozenset, set)):
        return sorted(_plain(v) for v in value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, Partition):
        return _plain(asdict(value))
    return value


@dataclass
class SimReport:
    data: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    @property
    def outcome(self) -> str:
        return self.data["outcome"]

    def to_json(self) -> str:
        return json.dumps(_plain(self.data), sort_keys=True, indent=2) + "\n"

    def field(self, path: str) -> Any:
        """Look up a dotted path such as ``messages.sent`` or ``nodes.v0.height``."""
        value: Any = self.data
        for part in path.split("."):
            if isinstance(value, dict) and part in value:
                value = value[part]
            else:
                raise KeyError(path)
        return value


def catch_up(sim: Simulation, node: int, peer: int) -> int:
    """Copy the blocks ``node`` is missing from ``peer``'s chain; returns how many applied.

    A peer whose served bytes do not decode, or whose blocks fail verification,
    is flagged and nothing past the bad block is applied.
    """
    target, source = sim.replicas[node], sim.replicas[peer]
    served = [b.encode() for b in source.blocks[target.height + 1:]]
    if served and peer in sim.behaviors and isinstance(sim.behaviors[peer], Tamper):
        served[0] = _flip(served[0], len(served[0]) // 2)
    blocks = []
    for raw in served:
        try:
            blocks.append(Block.decode(raw))
        except (CodecError, ValueError):
            target.flagged_peers.add(peer)
            break
    applied = target.apply_synced_blocks(blocks, peer)
    sim._flush(node)
    return applied


def run(config: SimConfig, scenario: Any = None, trace: TextIO | None = None) -> SimReport:
    """Build a simulation, drive ``scenario`` against it and settle.

    ``scenario`` is a callable taking the simulation, or an object with an
    ``execute(sim)`` method. A liveness stall yields ``outcome = horizon_exceeded``.
    """
    sim = Simulation(config, trace)
    try:
        if scenario is not None:
            (scenario.execute if hasattr(scenario, "execute") else scenario)(sim)
        sim.settle()
    except ConsensusTimeout:
        sim.horizon_hit = True
    return sim.report()

import heapq
import random

import pytest

from chains import identity
from medledger import codec, crypto, ledger
from medledger.codec import Phase
from medledger.consensus import (PbftMessage, PreparedProof, Replica, ValidatorConfig, decode_reply, encode_reply,
                                 quorum_check, select_reproposal, parse_view_change)
from medledger.ledger import RejectReason, validate_transaction


class Cluster:
    """Drives replicas directly: a message pool plus timers fired only when the pool is empty."""

    def __init__(self, n=4, seed=0, order="fifo", **params):
        self.ids = [identity(f"cluster:{seed}:{i}") for i in range(n)]
        self.cfg = ValidatorConfig(tuple(i.public_key for i in self.ids))
        self.genesis = ledger.make_genesis(self.cfg.keys, 1_700_000_000)
        self.now = 0
        self.replicas = [Replica(i, self.ids[i], self.cfg, self.genesis, clock=lambda: self.now, **params)
                         for i in range(n)]
        self.rng = random.Random(seed)
        self.order = order
        self.pool = []  # (src, dst, data)
        self.timers = []
        self.tseq = 0
        self.replies = []
        self.silent = set()
        self.log = []  # (src, dst, phase) of delivered PBFT messages

    def collect(self, i):
        out = self.replicas[i].outbox.drain()
        if i in self.silent:
            return
        for to, data, _ in out.sends:
            for dst in (range(len(self.replicas)) if to is None else [to]):
                if dst != i:
                    self.pool.append((i, dst, data))
        for name, delay, token in out.timers:
            self.tseq += 1
            heapq.heappush(self.timers, (self.now + delay, self.tseq, i, name, token))
        self.replies.extend(out.replies)

    def request(self, tx, to=None):
        for i in (range(len(self.replicas)) if to is None else to):
            self.replicas[i].on_request(tx, "client")
            self.collect(i)

    def deliver(self, item):
        src, dst, data = item
        if data[:1] == bytes([codec.TAG_PBFT]):
            self.log.append((src, dst, PbftMessage.decode(data).phase))
        self.replicas[dst].on_message(data, src)
        self.collect(dst)

    def run(self, timers=True, limit=100_000, until=lambda: False):
        for _ in range(limit):
            if until():
                return
            if self.pool:
                k = 0 if self.order == "fifo" else self.rng.randrange(len(self.pool))
                self.deliver(self.pool.pop(k))
            elif timers and self.timers:
                at, _, i, name, token = heapq.heappop(self.timers)
                self.now = max(self.now, at)
                self.replicas[i].on_timer(name, token)
                self.collect(i)
            else:
                return
        raise AssertionError("cluster did not quiesce")

    def honest(self):
        return [r for r in self.replicas if r.index not in self.silent]


def tx(seed, nonce=1):
    who = identity(f"client:{seed}")
    return ledger.access_transaction(who, who.public_key, who.public_key, (), nonce)


def test_validator_config_requires_3f_plus_1():
    keys = tuple(identity(f"k{i}").public_key for i in range(7))
    assert ValidatorConfig(keys[:4]).quorum == 3 and ValidatorConfig(keys).f == 2
    with pytest.raises(ValueError):
        ValidatorConfig(keys[:5])
    with pytest.raises(ValueError):
        ValidatorConfig(keys[:1])


def test_quorum_check_counts_distinct_valid_senders():
    ids = [identity(f"q{i}") for i in range(4)]
    keys = [i.public_key for i in ids]
    h = crypto.hash(b"block")
    votes = [PbftMessage.signed(ids[i], Phase.COMMIT, 0, 1, h, i) for i in range(3)]
    assert quorum_check(votes, 3, keys)
    assert not quorum_check(votes[:2] + [votes[0]], 3, keys)
    forged = PbftMessage(Phase.COMMIT, 0, 1, h, 3, b"", votes[0].signature)
    assert not quorum_check(votes[:2] + [forged], 3, keys)
    assert not quorum_check([], 1, keys)


def test_message_roundtrip_and_tamper():
    me = identity("m")
    keys = [me.public_key] + [identity(f"o{i}").public_key for i in range(3)]
    msg = PbftMessage.signed(me, Phase.PREPARE, 2, 7, crypto.hash(b"b"), 0, b"payload")
    back = PbftMessage.decode(msg.encode())
    assert back == msg and back.verify(keys)
    assert not PbftMessage(msg.phase, 3, msg.sequence, msg.block_hash, 0, msg.payload, msg.signature).verify(keys)


def test_reply_roundtrip():
    raw = encode_reply(2, crypto.hash(b"t"), "written", b"\x01" * 32, 5)
    assert decode_reply(raw) == (2, crypto.hash(b"t"), 5, "written", b"\x01" * 32)


def test_primary_batches_and_backup_only_arms_timer():
    c = Cluster()
    t = tx(1)
    c.replicas[1].on_request(t, "client")
    out = c.replicas[1].outbox.drain()
    assert out.sends == [] and [name for name, _, _ in out.timers] == ["request"]
    c.replicas[0].on_request(t, "client")
    out = c.replicas[0].outbox.drain()
    assert out.sends == [] and "batch" in [name for name, _, _ in out.timers]
    token = [tok for name, _, tok in out.timers if name == "batch"][0]
    c.replicas[0].on_timer("batch", token)
    out = c.replicas[0].outbox.drain()
    msgs = [PbftMessage.decode(d) for _, d, _ in out.sends]
    assert [m.phase for m in msgs] == [Phase.PRE_PREPARE]
    block = ledger.Block.decode(msgs[0].payload)
    assert [x.id for x in block.transactions] == [t.id]


def test_normal_case_commits_identical_block():
    c = Cluster()
    t = tx(2)
    c.request(t)
    c.run()
    heads = {r.head.hash for r in c.replicas}
    assert len(heads) == 1 and all(r.height == 1 for r in c.replicas)
    block = c.replicas[0].head
    assert block.certificate.verify(block.hash, 1, c.cfg.keys)
    assert ledger.verify_chain(c.replicas[2].blocks)
    replies = [decode_reply(d) for _, d in c.replies]
    assert {r[0] for r in replies} == {0, 1, 2, 3}
    assert all(r[3] == "granted" for r in replies)
    phases = {p for _, _, p in c.log}
    assert phases == {Phase.PRE_PREPARE, Phase.PREPARE, Phase.COMMIT}
    assert all(r.view == 0 and r.view_changes_started == 0 for r in c.replicas)


def test_rate_limited_request_is_dropped_without_timer():
    c = Cluster(rate_budget=1)
    c.request(tx(3, 1))
    c.run()
    r = c.replicas[1]
    late = tx(3, 2)
    assert validate_transaction(r.state, late) is RejectReason.RATE_LIMITED  # oracle
    r.on_request(late, "client")
    out = r.outbox.drain()
    assert out.timers == [] and out.sends == []
    assert late.id not in r.mempool
    assert decode_reply(out.replies[0][1])[3] == "rejected:rate_limited"
    assert r.rejections["rate_limited"] == 1


def test_no_pending_requests_means_no_view_change():
    c = Cluster()
    c.run()
    c.now = 10_000
    c.run()
    assert all(r.view == 0 and r.view_changes_started == 0 for r in c.replicas)


def equivocating_run(seed, split):
    """Primary v0 sends block A to ``split`` backups and block B to the rest, plus COMMITs for both."""
    c = Cluster(seed=seed % 3, order="random")
    c.rng = random.Random(seed)
    c.silent.add(0)
    t1, t2 = tx(f"e{seed}a"), tx(f"e{seed}b")
    primary = c.replicas[0]
    a = ledger.build_block(primary.state, [t1], 0, 1_700_000_000)
    b = ledger.build_block(primary.state, [t2], 0, 1_700_000_001)
    assert a.hash != b.hash
    for dst in (1, 2, 3):
        chosen = a if dst <= split else b
        pp = PbftMessage.signed(c.ids[0], Phase.PRE_PREPARE, 0, 1, chosen.hash, 0, chosen.encode())
        c.pool.append((0, dst, pp.encode()))
        for blk in (a, b):
            c.pool.append((0, dst, PbftMessage.signed(c.ids[0], Phase.COMMIT, 0, 1, blk.hash, 0).encode()))
    for i in (1, 2, 3):
        c.replicas[i].on_request(t1, "client")
        c.replicas[i].on_request(t2, "client")
        c.replicas[i].outbox.drain()
    c.run(timers=False)
    return c, a, b


@pytest.mark.parametrize("split", [1, 2])
def test_equivocating_primary_never_commits_both(split):
    for seed in range(60):
        c, a, b = equivocating_run(seed, split)
        committed = {r.blocks[1].hash for r in c.honest() if r.height >= 1}
        assert len(committed) <= 1, seed
        assert not {a.hash, b.hash} <= committed


def test_reordered_commits_before_prepares_still_commit():
    c = Cluster()
    t = tx(5)
    c.request(t)
    # hold everything for replica 3, then deliver its COMMITs first and PRE-PREPARE last
    held = []
    while c.pool:
        item = c.pool.pop(0)
        if item[1] == 3:
            held.append(item)
        else:
            c.deliver(item)
    assert c.replicas[3].height == 0
    rank = {Phase.COMMIT: 0, Phase.PREPARE: 1, Phase.PRE_PREPARE: 2}
    held.sort(key=lambda it: rank[PbftMessage.decode(it[2]).phase])
    for item in held:
        c.deliver(item)
    c.run()
    assert len({r.head.hash for r in c.replicas}) == 1
    assert c.replicas[3].height == 1


def test_random_delivery_orders_agree():
    for seed in range(40):
        c = Cluster(seed=seed, order="random")
        for k in range(3):
            c.request(tx(f"r{seed}:{k}"))
        c.run()
        assert len({r.head.hash for r in c.replicas}) == 1, seed
        assert sum(len(b.transactions) for b in c.replicas[0].blocks) == 3


def test_silent_primary_view_change_commits_pending():
    c = Cluster()
    c.silent.add(0)
    t = tx(6)
    c.request(t)
    c.run()
    honest = c.honest()
    assert all(r.view == 1 for r in honest)
    assert c.cfg.primary(1) == 1
    assert all(r.height == 1 and r.blocks[1].transactions[0].id == t.id for r in honest)
    assert len({r.head.hash for r in honest}) == 1


def test_two_consecutive_silent_primaries_with_seven_replicas():
    c = Cluster(n=7)
    c.silent.update({0, 1})
    t = tx(7)
    c.request(t)
    c.run()
    honest = c.honest()
    assert all(r.view == 2 for r in honest)
    assert all(r.height == 1 for r in honest)
    assert honest[0].blocks[1].certificate.view == 2


def test_two_silent_of_four_cannot_commit():
    c = Cluster()
    c.silent.update({0, 1})
    c.request(tx(8))
    for _ in range(20):  # bounded number of timer rounds
        c.run(limit=10_000)
        if not c.timers:
            break
    assert all(r.height == 0 for r in c.honest())


def test_prepared_proof_roundtrip_and_reproposal():
    c = Cluster()
    c.silent.add(3)  # keep one backup out so nothing else interferes
    t = tx(9)
    c.request(t)
    # run only until replica 1 has prepared
    c.run(until=lambda: c.replicas[1].prepared_proof is not None)
    proof = c.replicas[1].prepared_proof
    assert proof is not None and proof.valid(c.cfg)
    assert PreparedProof.decode(proof.encode()) == proof
    vc = c.replicas[1]._make_view_change(1)
    claim = parse_view_change(vc, c.cfg, c.genesis.hash)
    assert claim is not None and claim.proof == proof
    top, chosen = select_reproposal([claim])
    assert top == 0 and chosen.block.hash == proof.block.hash
    weak = PreparedProof(proof.preprepare, proof.prepares[:1])
    assert not weak.valid(c.cfg)

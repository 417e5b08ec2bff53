"""One test per acceptance criterion; each records a PASS/FAIL line for the summary."""

import hashlib
import itertools
import time
from contextlib import contextmanager

import ecdsa
from Crypto.Cipher import AES
from Crypto.Hash import SHA256 as OracleSHA256

from chains import build_chain, identity
from medledger import crypto, ledger, netsim
from medledger.codec import DataType
from medledger.ledger import LedgerState, apply_access_tx, policy_check
from medledger.netsim import Fault, SimConfig, Simulation
from medledger.offchain import ContentStore, IntegrityViolation
from medledger.scenario import BUNDLED, Scenario
from medledger.wallet import PatientWallet, StaffWallet, VitalSample, synth_vitals
from workloads import honest_agree, make_actors, mixed_workload

RESULTS: dict[int, tuple[str, bool, str]] = {}
TYPES = (DataType.BODY_TEMPERATURE, DataType.BLOOD_PRESSURE, DataType.HEART_RATE)


@contextmanager
def criterion(number: int, title: str):
    note: dict[str, str] = {"detail": ""}
    start = time.perf_counter()
    try:
        yield note
    except BaseException as exc:
        RESULTS[number] = (title, False, f"{type(exc).__name__}: {exc}".splitlines()[0][:160])
        raise
    elapsed = time.perf_counter() - start
    RESULTS[number] = (title, True, f"{note['detail']} ({elapsed:.2f} s)".strip())


def people(sim, seed, *names):
    out = []
    for name in names:
        cls = PatientWallet if name.startswith("p") else StaffWallet
        w = cls(name, entropy=netsim.seeded_entropy(seed, f"acc:{name}"))
        w.enroll(sim)
        out.append(w)
    return out


def test_01_access_control_oracle_equivalence():
    with criterion(1, "access-control oracle equivalence") as note:
        start = time.perf_counter()
        patients = [identity(f"acc:p{i}") for i in range(2)]
        staff = [identity(f"acc:s{i}").public_key for i in range(2)]
        subsets = [frozenset(c) for r in range(4) for c in itertools.combinations(TYPES, r)]
        genesis = ledger.make_genesis([identity("acc:v").public_key])
        cases = 0
        for p, m, policy in itertools.product(patients, staff, subsets):
            state = LedgerState(genesis)
            apply_access_tx(state, ledger.access_transaction(p, p.public_key, m, policy, 1))
            records = [(p.public_key, m, policy)]  # what the oracle reads: L[H(pk)] as plain tuples
            for dtype, k in itertools.product(TYPES, (p.public_key, m)):
                expected = any(
                    k == pat or (k == stf and dtype in pol) for pat, stf, pol in records if k in (pat, stf)
                )
                assert policy_check(state, k, dtype) == expected, (policy, dtype)
                cases += 1
        elapsed = time.perf_counter() - start
        assert cases == 192
        assert elapsed < 1.0
        note["detail"] = f"{cases} cases match"


def test_02_end_to_end_confidentiality_roundtrip():
    with criterion(2, "end-to-end confidentiality roundtrip") as note:
        start = time.perf_counter()
        sim = Simulation(SimConfig(seed=2))
        p, s, outsider = people(sim, 2, "p-alice", "s-bob", "s-eve")
        p.share_key(sim, s.address)
        sim.submit(p.grant(s.address, {DataType.BODY_TEMPERATURE, DataType.BLOOD_PRESSURE}))
        sample = VitalSample(DataType.BODY_TEMPERATURE, 3712, 60_000)
        digest = p.store_vital(sim, s.address, sample)
        got = s.retrieve_vital(sim, p.address, DataType.BODY_TEMPERATURE, digest)
        assert got == sample and got.encode() == sample.encode()
        assert outsider.retrieve_vital(sim, p.address, DataType.BODY_TEMPERATURE, digest) is None
        assert time.perf_counter() - start < 5.0
        note["detail"] = "bit-identical sample; ungranted read returned nothing"


def test_03_revocation():
    with criterion(3, "revocation across 100 schedules") as note:
        after = 0
        for seed in range(100):
            cfg = SimConfig(seed=seed, latency_max=5 + seed % 20, fifo=seed % 2 == 0, drop_prob=(seed % 5) / 50)
            sim = Simulation(cfg)
            p, s = people(sim, seed, "p-alice", "s-bob")
            p.share_key(sim, s.address)
            sim.submit(p.grant(s.address, set(TYPES)))
            digests = {t: p.store_vital(sim, s.address, synth_vitals(seed, t, 1)[0]) for t in TYPES}
            assert s.retrieve_vital(sim, p.address, DataType.HEART_RATE, digests[DataType.HEART_RATE]) is not None
            assert sim.submit(p.revoke(s.address)).outcome == "granted"
            for t, d in digests.items():
                assert s.retrieve_vital(sim, p.address, t, d) is None, (seed, t)
                after += 1
        note["detail"] = f"{after} post-revocation reads all empty"


def test_04_pbft_agreement_under_byzantine_profiles():
    with criterion(4, "PBFT agreement, 3 profiles x 50 seeds x 200 tx") as note:
        start = time.perf_counter()
        runs = 0
        for profile in ("silent", "equivocate", "tamper"):
            for seed in range(50):
                sim = Simulation(SimConfig(seed=seed, byzantine={0: profile}))
                result = mixed_workload(sim)
                sim.settle()
                assert result["total"] == 200
                honest = [sim.replicas[i] for i in sim.honest()]
                assert len({r.head.hash for r in honest}) == 1, (profile, seed)
                assert len({r.state.digest() for r in honest}) == 1, (profile, seed)
                assert not sim.conflicts, (profile, seed)
                # per-height cross check over every honest chain
                for h in range(1, honest[0].height + 1):
                    assert len({r.blocks[h].hash for r in honest}) == 1
                runs += 1
        elapsed = time.perf_counter() - start
        assert elapsed < 60.0
        note["detail"] = f"{runs} runs, identical heads and state digests, no conflicting commits"


def test_05_view_change_liveness():
    with criterion(5, "view-change liveness") as note:
        for seed in range(50):
            sim = Simulation(SimConfig(seed=seed, byzantine={0: "silent"}))
            ps, _ = make_actors(sim, 5, 0)
            receipts = sim.wait([sim.send(p.grant(p.address, ())) for p in ps])
            sim.settle()
            assert all(r.outcome == "granted" for r in receipts.values()), seed
            assert all(sim.replicas[i].view >= 1 for i in sim.honest()), seed
            assert honest_agree(sim) and not sim.outstanding
        control = netsim.run(SimConfig(seed=0, byzantine={0: "silent", 1: "silent"}, horizon_ms=30_000),
                             lambda sim: people(sim, 0, "p-alice"))
        assert control.outcome == "horizon_exceeded"
        note["detail"] = "50/50 seeds commit after view advance; 2-silent control horizon_exceeded"


def test_06_modification_detection():
    with criterion(6, "immutability: exhaustive byte flips") as note:
        start = time.perf_counter()
        blocks, _ = build_chain(5, seed="acceptance")
        data = ledger.encode_chain(blocks)
        anchor = blocks[0].hash
        bounds, pos = [], 0
        for b in blocks:
            pos += 4 + len(b.encode())
            bounds.append(pos)
        flips = 0
        for i in range(len(data)):
            height = next(h for h, end in enumerate(bounds) if i < end)
            bad = bytearray(data)
            bad[i] ^= 0xFF
            verdict = ledger.verify_chain_bytes(bytes(bad), anchor)
            assert not verdict.ok and verdict.first_bad_height <= height, (i, verdict)
            flips += 1
        assert time.perf_counter() - start < 30.0
        note["detail"] = f"{flips} flips over {len(blocks)} blocks all caught"


def test_07_offchain_tamper_detection():
    with criterion(7, "off-chain tamper detection") as note:
        store = ContentStore()
        key = crypto.SymmetricKey(bytes(range(32)))
        digests = [store.put(crypto.encrypt(key, f"v{i}".encode() * (i + 1), i.to_bytes(12, "big")))
                   for i in range(10)]
        caught = 0
        for d in digests:
            for offset in range(len(store.get_bytes(d))):
                store.tamper(d, offset)
                try:
                    store.get(d)
                except IntegrityViolation:
                    caught += 1
                else:
                    raise AssertionError(f"tamper at {offset} undetected")
                store.tamper(d, offset)
        sample = VitalSample(DataType.BLOOD_PRESSURE, 128, 0)
        for node in range(4):
            sim = Simulation(SimConfig(seed=7))
            p, s = people(sim, 7, "p-alice", "s-bob")
            p.share_key(sim, s.address)
            sim.submit(p.grant(s.address, {DataType.BLOOD_PRESSURE}))
            digest = p.store_vital(sim, s.address, sample)
            sim.inject_fault(sim.now, Fault("corrupt_blob", {"node": f"v{node}", "digest": digest}))
            assert s.retrieve_vital(sim, p.address, DataType.BLOOD_PRESSURE, digest) == sample
            sim.settle()
            report = sim.report()
            assert report["detections"]["storage_attack"] is True
            assert report.field(f"nodes.v{node}.storage_violations") == 1
            assert report.field(f"nodes.v{node}.repaired_blobs") == 1
        note["detail"] = f"{caught} corruptions raised integrity_violation; simulator flagged the storage attack"


def test_08_dos_rate_limiting():
    with criterion(8, "DoS rate limiting") as note:
        budget, window, flood = 16, 10, 200
        sim = Simulation(SimConfig(seed=8, rate_budget=budget, rate_window=window))
        (spammer,), _ = make_actors(sim, 1, 0)
        receipts = sim.wait(sim.flood(spammer.name, flood))
        sim.settle()
        outcomes = [r.outcome for r in receipts.values()]
        committed = sum(o in ("granted", "ignored") for o in outcomes)
        rejected = [o for o in outcomes if o.startswith("rejected:")]
        # counting oracle: the sender's transactions in every window of consecutive blocks
        chain = sim.reference_replica().blocks
        per_block = [sum(tx.sender == spammer.address for tx in b.transactions) for b in chain[1:]]
        worst = max(sum(per_block[i:i + window]) for i in range(len(per_block)))
        expected_committed = min(flood, budget)  # the whole flood lands inside one window
        assert committed == sum(per_block) == expected_committed
        assert worst <= budget
        assert len(rejected) == flood - expected_committed
        assert set(rejected) == {"rejected:rate_limited"}
        note["detail"] = f"{committed} committed, {len(rejected)} rejected, all rate_limited"


def test_09_crypto_known_answers():
    with criterion(9, "crypto known answers") as note:
        vectors = {b"": "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
                   b"abc": "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"}
        for msg, hexd in vectors.items():
            assert crypto.hash(msg).hex() == hexd == OracleSHA256.new(msg).hexdigest()
        key = bytes.fromhex("feffe9928665731c6d6a8f9467308308feffe9928665731c6d6a8f9467308308")
        iv = bytes.fromhex("cafebabefacedbaddecaf888")
        pt = bytes.fromhex("d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
                           "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255")
        ct = crypto.encrypt(crypto.SymmetricKey(key), pt, iv)
        body, tag = AES.new(key, AES.MODE_GCM, nonce=iv).encrypt_and_digest(pt)
        assert (ct.body, ct.auth_tag) == (body, tag)
        assert tag.hex() == "b094dac5d93471bdec1a502270e3cc6c"
        ident = crypto.gen_signing_identity(netsim.seeded_entropy(9, "kat"))
        msg = b"grant body_temperature"
        sig = crypto.sign(ident, msg)
        assert crypto.verify(ident.public_key, msg, sig)
        vk = ecdsa.VerifyingKey.from_string(ident.public_key, curve=ecdsa.SECP256k1, hashfunc=hashlib.sha256)
        assert vk.verify(sig, msg)
        flips = 0
        for bit in range(len(sig) * 8):
            bad = bytearray(sig)
            bad[bit // 8] ^= 1 << (bit % 8)
            assert not crypto.verify(ident.public_key, msg, bytes(bad))
            flips += 1
        note["detail"] = f"SHA-256 x2, AES-256-GCM, ECDSA roundtrip, {flips} bit flips rejected"


def test_10_determinism():
    with criterion(10, "determinism") as note:
        for name in BUNDLED:
            scenario = Scenario.load(name)
            first = netsim.run(scenario.config, Scenario.load(name)).to_json()
            second = netsim.run(Scenario.load(name).config, Scenario.load(name)).to_json()
            assert first == second, name

        def workload(sim):
            mixed_workload(sim, patients=4, staff=3, writes_each=3, reads_each=4)

        for profile in ("silent", "equivocate", "tamper"):
            cfg = dict(seed=10, byzantine={0: profile}, drop_prob=0.1, fifo=False)
            assert netsim.run(SimConfig(**cfg), workload).to_json() == netsim.run(SimConfig(**cfg), workload).to_json()
        note["detail"] = f"{len(BUNDLED)} scenarios and 3 adversarial runs byte-identical on rerun"


def test_11_throughput_smoke():
    with criterion(11, "throughput smoke") as note:
        start = time.perf_counter()
        sim = Simulation(SimConfig(seed=11))
        ps, ss = make_actors(sim, 100, 10)
        txs = [p.grant(s.address, {TYPES[(i + j) % 3]}) for i, p in enumerate(ps) for j, s in enumerate(ss)]
        receipts = sim.wait([sim.send(tx) for tx in txs])
        sim.settle()
        elapsed = time.perf_counter() - start
        report = sim.report()
        assert len(txs) == 1000
        assert all(r.outcome == "granted" for r in receipts.values())
        assert report["committed_count"] == 1000 and honest_agree(sim)
        assert elapsed < 60.0
        note["detail"] = f"1000 tx committed in {report['height']} blocks, {elapsed:.1f} s wall"

import json
import os
import stat

import pytest

from medledger import crypto, netsim
from medledger.codec import DataType
from medledger.ledger import LocalChain
from medledger.netsim import SimConfig, Simulation
from medledger.wallet import (VITALS, AccessDenied, DecryptFailure, PatientWallet, StaffWallet, UnknownParty,
                              VitalSample, Wallet, WalletError, synth_vitals)


def actors(network, seed=0):
    p = PatientWallet("alice", entropy=netsim.seeded_entropy(seed, "alice"))
    s = StaffWallet("bob", entropy=netsim.seeded_entropy(seed, "bob"))
    t = StaffWallet("carol", entropy=netsim.seeded_entropy(seed, "carol"))
    for w in (p, s, t):
        w.enroll(network)
    return p, s, t


def test_enroll_is_idempotent_per_network():
    chain = LocalChain()
    p = PatientWallet("alice")
    assert p.enroll(chain) == p.address
    height = chain.state.height
    assert p.enroll(chain) == p.address
    assert chain.state.height == height == 1
    # a different network gets its own bootstrap record
    other = LocalChain()
    p.enroll(other)
    assert other.state.height == 1


def test_share_key_gives_both_sides_the_same_per_pair_key():
    chain = LocalChain()
    p, s, t = actors(chain)
    k1 = p.share_key(chain, s.address)
    k2 = p.share_key(chain, t.address)
    assert s.keys[p.address] == k1 == p.keys[s.address]
    assert len(bytes(k1)) == 32 and k1 != k2
    with pytest.raises(UnknownParty):
        p.share_key(chain, crypto.gen_signing_identity().public_key)


def test_roundtrip_and_ungranted_staff_gets_nothing():
    chain = LocalChain()
    p, s, t = actors(chain)
    p.share_key(chain, s.address)
    p.share_key(chain, t.address)
    chain.submit(p.grant(s.address, {DataType.BODY_TEMPERATURE, DataType.BLOOD_PRESSURE}))
    sample = VitalSample(DataType.BODY_TEMPERATURE, 3712, 60_000)
    digest = p.store_vital(chain, s.address, sample)
    got = s.retrieve_vital(chain, p.address, DataType.BODY_TEMPERATURE, digest)
    assert got == sample and got.encode() == sample.encode()
    assert t.retrieve_vital(chain, p.address, DataType.BODY_TEMPERATURE, digest) is None


def test_regrant_is_latest_wins_and_revocation_is_forward_only():
    chain = LocalChain()
    p, s, _ = actors(chain)
    p.share_key(chain, s.address)
    chain.submit(p.grant(s.address, {DataType.BLOOD_PRESSURE}))
    bp = p.store_vital(chain, s.address, VitalSample(DataType.BLOOD_PRESSURE, 120, 0))
    early = s.retrieve_vital(chain, p.address, DataType.BLOOD_PRESSURE, bp)
    chain.submit(p.grant(s.address, {DataType.HEART_RATE}))
    hr = p.store_vital(chain, s.address, VitalSample(DataType.HEART_RATE, 70, 0))
    assert s.retrieve_vital(chain, p.address, DataType.HEART_RATE, hr).value == 70
    assert s.retrieve_vital(chain, p.address, DataType.BLOOD_PRESSURE, bp) is None
    chain.submit(p.revoke(s.address))
    assert s.retrieve_vital(chain, p.address, DataType.HEART_RATE, hr) is None
    assert early.value == 120  # plaintext already obtained stays with the reader


def test_equal_samples_encrypt_to_distinct_ciphertexts():
    chain = LocalChain()
    p, s, _ = actors(chain)
    p.share_key(chain, s.address)
    sample = VitalSample(DataType.HEART_RATE, 72, 0)
    a, b = p.seal(s.address, sample), p.seal(s.address, sample)
    assert a.nonce != b.nonce and a.to_bytes() != b.to_bytes() and a.digest() != b.digest()
    d1 = p.store_vital(chain, s.address, sample)
    d2 = p.store_vital(chain, s.address, sample)
    assert d1 != d2


def test_decrypt_failure_is_distinct_from_denial():
    chain = LocalChain()
    p, s, t = actors(chain)
    p.share_key(chain, s.address)
    chain.submit(p.grant(t.address, {DataType.HEART_RATE}))  # granted, but carol holds no key
    digest = p.store_vital(chain, s.address, VitalSample(DataType.HEART_RATE, 65, 0))
    with pytest.raises(DecryptFailure):
        t.retrieve_vital(chain, p.address, DataType.HEART_RATE, digest)
    t.receive_key(p.address, crypto.SymmetricKey(bytes(32)))  # the wrong key
    with pytest.raises(DecryptFailure):
        t.retrieve_vital(chain, p.address, DataType.HEART_RATE, digest)


def test_store_without_bootstrap_is_denied():
    chain = LocalChain()
    p = PatientWallet("alice")
    s = StaffWallet("bob")
    chain.announce(p.address, p)
    s.enroll(chain)
    p.share_key(chain, s.address)
    with pytest.raises(AccessDenied):
        p.store_vital(chain, s.address, VitalSample(DataType.HEART_RATE, 65, 0))


def test_key_never_appears_on_the_wire_or_in_blocks():
    sim = Simulation(SimConfig(seed=21))
    sim.wire_log = []
    p, s, t = actors(sim, 21)
    keys = [p.share_key(sim, s.address), p.share_key(sim, t.address)]
    sim.submit(p.grant(s.address, {DataType.HEART_RATE}))
    digest = p.store_vital(sim, s.address, VitalSample(DataType.HEART_RATE, 90, 0))
    assert s.retrieve_vital(sim, p.address, DataType.HEART_RATE, digest).value == 90
    sim.settle()
    streams = list(sim.wire_log) + [b.encode() for r in sim.replicas for b in r.blocks]
    assert len(sim.wire_log) > 50
    for key in keys:
        assert not any(bytes(key) in raw for raw in streams)
    assert sim.key_deliveries == 2


def test_synth_vitals_are_reproducible_and_in_band():
    for dtype, spec in VITALS.items():
        series = synth_vitals(5, dtype, 200, start_ms=1000, interval_ms=500)
        assert series == synth_vitals(5, dtype, 200, start_ms=1000, interval_ms=500)
        assert all(spec.synth_low <= v.value <= spec.synth_high for v in series)
        assert [v.captured_at for v in series[:3]] == [1000, 1500, 2000]
        steps = [abs(a.value - b.value) for a, b in zip(series, series[1:])]
        assert max(steps) <= spec.step
    assert synth_vitals(5, DataType.HEART_RATE, 10) != synth_vitals(6, DataType.HEART_RATE, 10)


def test_vital_sample_validation_and_codec():
    with pytest.raises(ValueError):
        VitalSample(DataType.HEART_RATE, 400, 0)
    with pytest.raises(ValueError):
        VitalSample(DataType.HEART_RATE, 60, -1)
    s = VitalSample(DataType.BLOOD_GLUCOSE, 99, 123)
    assert VitalSample.decode(s.encode()) == s and s.unit == "mg/dL"


def test_keystore_roundtrip_and_permissions(tmp_path):
    chain = LocalChain()
    p, s, _ = actors(chain)
    p.share_key(chain, s.address)
    path = tmp_path / "alice.json"
    p.save(path)
    assert stat.S_IMODE(os.stat(path).st_mode) == 0o600
    back = Wallet.load(path)
    assert isinstance(back, PatientWallet)
    assert back.address == p.address and back.nonce == p.nonce and back.keys == p.keys
    data = json.loads(path.read_text())
    data["address"] = s.address.hex()
    with pytest.raises(WalletError):
        Wallet.from_export(data)
    data["role"] = "admin"
    with pytest.raises(WalletError):
        Wallet.from_export(data)


def test_wallet_over_simulated_network():
    sim = Simulation(SimConfig(seed=22, byzantine={3: "tamper"}))
    p, s, t = actors(sim, 22)
    p.share_key(sim, s.address)
    sim.submit(p.grant(s.address, {DataType.BODY_TEMPERATURE}))
    sample = synth_vitals(22, DataType.BODY_TEMPERATURE, 1)[0]
    digest = p.store_vital(sim, s.address, sample)
    assert s.retrieve_vital(sim, p.address, DataType.BODY_TEMPERATURE, digest) == sample
    assert t.retrieve_vital(sim, p.address, DataType.BODY_TEMPERATURE, digest) is None

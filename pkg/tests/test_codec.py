import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from medledger import codec, crypto
from medledger.codec import CodecError, DataType

PK_A = b"\x02" + bytes(range(32))
PK_B = b"\x03" + bytes(range(32, 64))

addresses = st.binary(min_size=33, max_size=33)
policies = st.frozensets(st.sampled_from(list(DataType)))


def test_empty_policy_access_message_layout():
    raw = codec.encode_access_message(PK_A, PK_B, frozenset())
    assert raw == b"\x01" + (33).to_bytes(4, "big") + PK_A + (33).to_bytes(4, "big") + PK_B + bytes(4)


def test_policy_is_sorted_regardless_of_insertion_order():
    one = codec.encode_access_message(PK_A, PK_B, {DataType.BLOOD_PRESSURE, DataType.BODY_TEMPERATURE})
    two = codec.encode_access_message(PK_A, PK_B, {DataType.BODY_TEMPERATURE, DataType.BLOOD_PRESSURE})
    assert one == two
    assert one.endswith(codec.u16(DataType.BODY_TEMPERATURE) + codec.u16(DataType.BLOOD_PRESSURE))


def test_unsorted_or_duplicate_sequences_are_refused():
    with pytest.raises(CodecError):
        codec.encode_access_message(PK_A, PK_B, [DataType.BLOOD_PRESSURE, DataType.BODY_TEMPERATURE])
    with pytest.raises(CodecError):
        codec.encode_access_message(PK_A, PK_B, [1, 1])
    with pytest.raises(CodecError):
        codec.encode_access_message(PK_A, PK_B, [99])


def test_access_roundtrip_on_random_records():
    rng = random.Random(0)
    for _ in range(1000):
        a, b = b"\x02" + rng.randbytes(32), b"\x03" + rng.randbytes(32)
        policy = frozenset(t for t in DataType if rng.random() < 0.5)
        assert codec.decode_access_message(codec.encode_access_message(a, b, policy)) == (a, b, policy)


def test_decoder_rejects_unsorted_wire_policy():
    raw = codec.encode_record(codec.TAG_ACCESS, [PK_A, PK_B, codec.u16(2) + codec.u16(1)])
    with pytest.raises(CodecError):
        codec.decode_access_message(raw)


def test_data_message_payloads():
    ct = crypto.encrypt(crypto.SymmetricKey(bytes(32)), b"x", bytes(12))
    write = codec.encode_data_message(ct.to_bytes(), DataType.HEART_RATE, codec.RW_WRITE)
    assert codec.decode_data_message(write) == (ct.to_bytes(), DataType.HEART_RATE, 0, b"")
    read = codec.encode_data_message(ct.digest(), DataType.HEART_RATE, codec.RW_READ, PK_A)
    assert codec.decode_data_message(read) == (ct.digest(), DataType.HEART_RATE, 1, PK_A)
    # RW is one byte
    assert read[read.index(codec.u32(1) + b"\x01") + 4] == 1


def test_data_message_guards():
    with pytest.raises(CodecError):
        codec.encode_data_message(b"x" * 32, 1, 2, PK_A)
    with pytest.raises(CodecError):
        codec.encode_data_message(b"x" * 31, 1, codec.RW_READ, PK_A)
    with pytest.raises(CodecError):
        codec.encode_data_message(b"x" * 40, 1, codec.RW_WRITE, PK_A)
    with pytest.raises(CodecError):
        codec.encode_data_message(b"x" * 40, 42, codec.RW_WRITE)


@given(st.binary(max_size=200), st.sampled_from(list(DataType)))
def test_write_message_roundtrip(payload, dtype):
    raw = codec.encode_data_message(payload, dtype, codec.RW_WRITE)
    assert codec.decode_data_message(raw) == (payload, dtype, 0, b"")


@given(addresses, addresses, policies)
def test_access_message_roundtrip_property(a, b, policy):
    assert codec.decode_access_message(codec.encode_access_message(a, b, policy)) == (a, b, policy)


def test_data_message_injectivity_over_random_samples():
    rng = random.Random(1)
    seen = {}
    keys = set()
    for _ in range(100_000):
        rw = rng.randint(0, 1)
        dtype = rng.choice(list(DataType))
        if rw:
            key = (rng.randbytes(32), dtype, rw, b"\x02" + rng.randbytes(32))
        else:
            key = (rng.randbytes(rng.randint(0, 48)), dtype, rw, b"")
        keys.add(key)
        raw = codec.encode_data_message(*key)
        assert seen.setdefault(raw, key) == key
    assert len(seen) == len(keys)


def test_length_prefix_prevents_concatenation_ambiguity():
    a = codec.encode_record(0x7F, [b"ab", b"c"])
    b = codec.encode_record(0x7F, [b"a", b"bc"])
    assert a != b


def test_record_decoder_rejects_bad_input():
    with pytest.raises(CodecError):
        codec.decode_record(b"")
    with pytest.raises(CodecError):
        codec.decode_record(b"\x01\x00\x00\x00\x05ab")
    with pytest.raises(CodecError):
        codec.decode_record(codec.encode_record(1, [b"x"]), expected_tag=2)
    oversized = b"\x01" + (codec.MAX_SEGMENT + 1).to_bytes(4, "big")
    with pytest.raises(CodecError):
        codec.decode_record(oversized)


def test_vital_roundtrip_and_width():
    raw = codec.encode_vital(DataType.BODY_TEMPERATURE, 3712, 60_000)
    assert codec.decode_vital(raw) == (DataType.BODY_TEMPERATURE, 3712, 60_000)


def test_transaction_envelope_roundtrip():
    body = codec.encode_access_message(PK_A, PK_B, {DataType.HEART_RATE})
    raw = codec.encode_transaction(body, 7, PK_A, bytes(64))
    assert codec.decode_transaction(raw) == (body, 7, PK_A, bytes(64))
    with pytest.raises(CodecError):
        codec.decode_transaction(codec.encode_transaction(body, 7, PK_A[:32], bytes(64)))


def test_header_encoding_is_fixed():
    raw = codec.encode_block_header(0, bytes(32), bytes(32), bytes(32), 1_700_000_000, 0)
    assert codec.decode_block_header(raw) == (1, 0, bytes(32), bytes(32), bytes(32), 1_700_000_000, 0)
    assert crypto.hash(raw) == crypto.hash(codec.encode_block_header(0, bytes(32), bytes(32), bytes(32),
                                                                    1_700_000_000, 0))


def test_list_packing_roundtrip():
    items = [b"", b"a", bytes(300)]
    assert codec.unpack_list(codec.pack_list(items)) == items


def test_data_type_parsing():
    assert DataType.parse("blood_pressure") is DataType.BLOOD_PRESSURE
    assert DataType.HEART_RATE.label == "heart_rate"
    with pytest.raises(CodecError):
        DataType.parse("mood")


def test_hexdump_shape():
    lines = codec.hexdump(bytes(range(40))).splitlines()
    assert len(lines) == 3 and lines[1].startswith("00000010")

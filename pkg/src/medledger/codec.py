"""Canonical byte encoding for everything that is hashed, signed or sent.

A record is a one-byte tag followed by segments, each prefixed with a 4-byte
big-endian length. Integers are fixed-width big-endian. Decoders are strict:
trailing bytes, wrong widths or non-canonical policy sets are errors, so
every byte string has at most one meaning.
"""

from __future__ import annotations

import enum
import struct
from typing import Iterable, Sequence

MAX_SEGMENT = 16 * 1024 * 1024

TAG_ACCESS = 0x01
TAG_DATA = 0x02
TAG_TX = 0x10
TAG_TX_SIGNED = 0x11
TAG_HEADER = 0x20
TAG_BLOCK = 0x21
TAG_CERT = 0x22
TAG_VITAL = 0x30
TAG_PBFT = 0x40
TAG_PBFT_SIGNED = 0x41
TAG_VIEW_CHANGE = 0x42
TAG_NEW_VIEW = 0x43
TAG_PREPARED = 0x44
TAG_REQUEST = 0x50
TAG_REPLY = 0x51
TAG_STATE_REQUEST = 0x52
TAG_STATE_REPLY = 0x53

RW_WRITE = 0
RW_READ = 1

HEADER_VERSION = 1


class CodecError(ValueError):
    pass


class DataType(enum.IntEnum):
    """Registered healthcare data types (u16 codes on the wire)."""

    BODY_TEMPERATURE = 1
    BLOOD_PRESSURE = 2
    HEART_RATE = 3
    BLOOD_GLUCOSE = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "DataType":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise CodecError(f"unknown data type {text!r}") from None


def data_type(code: int) -> DataType:
    try:
        return DataType(code)
    except ValueError:
        raise CodecError(f"unknown data type code {code}") from None


# -- primitives -------------------------------------------------------------

def u8(v: int) -> bytes:
    return struct.pack(">B", v)


def u16(v: int) -> bytes:
    return struct.pack(">H", v)


def u32(v: int) -> bytes:
    return struct.pack(">I", v)


def u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def read_uint(seg: bytes, width: int) -> int:
    if len(seg) != width:
        raise CodecError(f"expected {width}-byte integer, got {len(seg)} bytes")
    return int.from_bytes(seg, "big")


def encode_record(tag: int, segments: Iterable[bytes]) -> bytes:
    out = bytearray((tag,))
    for seg in segments:
        if len(seg) > MAX_SEGMENT:
            raise CodecError("segment exceeds 16 MiB")
        out += struct.pack(">I", len(seg))
        out += seg
    return bytes(out)


def decode_record(data: bytes, expected_tag: int | None = None) -> tuple[int, list[bytes]]:
    if not data:
        raise CodecError("empty record")
    tag = data[0]
    if expected_tag is not None and tag != expected_tag:
        raise CodecError(f"expected tag 0x{expected_tag:02x}, got 0x{tag:02x}")
    segments = []
    pos, end = 1, len(data)
    while pos < end:
        if pos + 4 > end:
            raise CodecError("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if n > MAX_SEGMENT or pos + n > end:
            raise CodecError("segment overruns record")
        segments.append(bytes(data[pos:pos + n]))
        pos += n
    return tag, segments


def expect_segments(segments: Sequence[bytes], count: int, what: str) -> None:
    if len(segments) != count:
        raise CodecError(f"{what}: expected {count} segments, got {len(segments)}")


def pack_list(items: Iterable[bytes]) -> bytes:
    """Concatenate length-prefixed items into one segment payload."""
    return b"".join(struct.pack(">I", len(i)) + i for i in items)


def unpack_list(data: bytes) -> list[bytes]:
    # a headerless record body
    return decode_record(b"\x00" + data)[1]


def hexdump(data: bytes, width: int = 16) -> str:
    lines = []
    for off in range(0, len(data), width):
        chunk = data[off:off + width]
        lines.append(f"{off:08x}  {chunk.hex(' '):<{width * 3}} |{''.join(chr(b) if 32 <= b < 127 else '.' for b in chunk)}|")
    return "\n".join(lines)


# -- protocol messages ------------------------------------------------------

def canonical_policy(policy: Iterable[int]) -> list[int]:
    """Codes in ascending order. Sets are sorted; sequences must already be."""
    if isinstance(policy, (set, frozenset)):
        codes = sorted(int(p) for p in policy)
    else:
        codes = [int(p) for p in policy]
        if any(a >= b for a, b in zip(codes, codes[1:])):
            raise CodecError("policy elements must be sorted and unique")
    for c in codes:
        data_type(c)
    return codes


def encode_access_message(patient: bytes, staff: bytes, policy: Iterable[int]) -> bytes:
    """``patient || staff || POLICY`` as a tag-0x01 record."""
    codes = canonical_policy(policy)
    return encode_record(TAG_ACCESS, [patient, staff, b"".join(u16(c) for c in codes)])


def decode_access_message(data: bytes) -> tuple[bytes, bytes, frozenset[DataType]]:
    _, segs = decode_record(data, TAG_ACCESS)
    expect_segments(segs, 3, "access message")
    patient, staff, raw = segs
    if len(patient) != 33 or len(staff) != 33:
        raise CodecError("addresses must be 33-byte compressed keys")
    if len(raw) % 2:
        raise CodecError("policy segment has odd length")
    codes = [int.from_bytes(raw[i:i + 2], "big") for i in range(0, len(raw), 2)]
    canonical_policy(codes)
    return patient, staff, frozenset(DataType(c) for c in codes)


def encode_data_message(payload: bytes, data_type_code: int, rw: int, owner: bytes = b"") -> bytes:
    """``C || T || RW`` plus the owner address for reads.

    Writes carry the encoded ciphertext and an empty owner segment (the owner
    is the sender). Reads carry the 32-byte digest of the wanted ciphertext
    and the 33-byte address of the patient who owns it.
    """
    if rw not in (RW_WRITE, RW_READ):
        raise CodecError(f"rw flag must be 0 or 1, got {rw}")
    data_type(data_type_code)
    if rw == RW_READ and (len(payload) != 32 or len(owner) != 33):
        raise CodecError("read requests carry a 32-byte digest and a 33-byte owner")
    if rw == RW_WRITE and owner:
        raise CodecError("write requests must not name an owner")
    return encode_record(TAG_DATA, [payload, u16(data_type_code), u8(rw), owner])


def decode_data_message(data: bytes) -> tuple[bytes, DataType, int, bytes]:
    _, segs = decode_record(data, TAG_DATA)
    expect_segments(segs, 4, "data message")
    payload, t, rw, owner = segs
    code = data_type(read_uint(t, 2))
    flag = read_uint(rw, 1)
    if flag not in (RW_WRITE, RW_READ):
        raise CodecError(f"rw flag must be 0 or 1, got {flag}")
    if flag == RW_READ and (len(payload) != 32 or len(owner) != 33):
        raise CodecError("read requests carry a 32-byte digest and a 33-byte owner")
    if flag == RW_WRITE and owner:
        raise CodecError("write requests must not name an owner")
    return payload, code, flag, owner


def encode_vital(code: int, value: int, captured_at: int) -> bytes:
    return encode_record(TAG_VITAL, [u16(code), struct.pack(">q", value), u64(captured_at)])


def decode_vital(data: bytes) -> tuple[DataType, int, int]:
    _, segs = decode_record(data, TAG_VITAL)
    expect_segments(segs, 3, "vital sample")
    if len(segs[1]) != 8:
        raise CodecError("vital value must be 8 bytes")
    return data_type(read_uint(segs[0], 2)), struct.unpack(">q", segs[1])[0], read_uint(segs[2], 8)


# -- transactions and blocks ------------------------------------------------

def encode_tx_preimage(body: bytes, nonce: int) -> bytes:
    """What a transaction signature covers."""
    return encode_record(TAG_TX_SIGNED, [body, u64(nonce)])


def encode_transaction(body: bytes, nonce: int, sender: bytes, signature: bytes) -> bytes:
    return encode_record(TAG_TX, [body, u64(nonce), sender, signature])


def decode_transaction(data: bytes) -> tuple[bytes, int, bytes, bytes]:
    _, segs = decode_record(data, TAG_TX)
    expect_segments(segs, 4, "transaction")
    body, nonce, sender, sig = segs
    if len(sender) != 33 or len(sig) != 64:
        raise CodecError("transaction sender/signature have wrong width")
    return body, read_uint(nonce, 8), sender, sig


def encode_block_header(
    height: int,
    prev_hash: bytes,
    tx_root: bytes,
    validator_root: bytes,
    timestamp: int,
    proposer: int,
    version: int = HEADER_VERSION,
) -> bytes:
    return encode_record(
        TAG_HEADER,
        [u8(version), u64(height), prev_hash, tx_root, validator_root, u64(timestamp), u32(proposer)],
    )


def decode_block_header(data: bytes) -> tuple[int, int, bytes, bytes, bytes, int, int]:
    """Returns ``(version, height, prev_hash, tx_root, validator_root, timestamp, proposer)``."""
    _, segs = decode_record(data, TAG_HEADER)
    expect_segments(segs, 7, "block header")
    version = read_uint(segs[0], 1)
    if version != HEADER_VERSION:
        raise CodecError(f"unsupported header version {version}")
    for seg in segs[2:5]:
        if len(seg) != 32:
            raise CodecError("header hash fields must be 32 bytes")
    return (
        version,
        read_uint(segs[1], 8),
        segs[2],
        segs[3],
        segs[4],
        read_uint(segs[5], 8),
        read_uint(segs[6], 4),
    )


def encode_certificate(view: int, votes: Sequence[tuple[int, bytes]]) -> bytes:
    return encode_record(TAG_CERT, [u64(view), *(u32(s) + sig for s, sig in votes)])


def decode_certificate(data: bytes) -> tuple[int, list[tuple[int, bytes]]]:
    _, segs = decode_record(data, TAG_CERT)
    if not segs:
        raise CodecError("certificate missing view")
    votes = []
    for seg in segs[1:]:
        if len(seg) != 68:
            raise CodecError("certificate vote must be 68 bytes")
        votes.append((int.from_bytes(seg[:4], "big"), seg[4:]))
    return read_uint(segs[0], 8), votes


def encode_block(header: bytes, validators: Sequence[bytes], txs: Sequence[bytes], cert: bytes) -> bytes:
    return encode_record(TAG_BLOCK, [header, pack_list(validators), pack_list(txs), cert])


def decode_block(data: bytes) -> tuple[bytes, list[bytes], list[bytes], bytes]:
    _, segs = decode_record(data, TAG_BLOCK)
    expect_segments(segs, 4, "block")
    return segs[0], unpack_list(segs[1]), unpack_list(segs[2]), segs[3]


# -- consensus and client wire messages ---------------------------------------

def encode_pbft(phase: int, view: int, seq: int, block_hash: bytes, sender: int, payload: bytes, sig: bytes) -> bytes:
    return encode_record(TAG_PBFT, [u8(phase), u64(view), u64(seq), block_hash, u32(sender), payload, sig])


def encode_pbft_preimage(phase: int, view: int, seq: int, block_hash: bytes, sender: int, payload_hash: bytes) -> bytes:
    return encode_record(TAG_PBFT_SIGNED, [u8(phase), u64(view), u64(seq), block_hash, u32(sender), payload_hash])


def decode_pbft(data: bytes) -> tuple[int, int, int, bytes, int, bytes, bytes]:
    _, segs = decode_record(data, TAG_PBFT)
    expect_segments(segs, 7, "pbft message")
    if len(segs[3]) != 32 or len(segs[6]) != 64:
        raise CodecError("pbft message hash/signature have wrong width")
    return (
        read_uint(segs[0], 1),
        read_uint(segs[1], 8),
        read_uint(segs[2], 8),
        segs[3],
        read_uint(segs[4], 4),
        segs[5],
        segs[6],
    )


class Phase(enum.IntEnum):
    PRE_PREPARE = 1
    PREPARE = 2
    COMMIT = 3
    VIEW_CHANGE = 4
    NEW_VIEW = 5

    @property
    def label(self) -> str:
        return self.name.replace("_", "-")

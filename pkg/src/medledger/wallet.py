"""Patient and staff wallets, plus synthetic vital signs.

A wallet talks to any *network* offering ``announce(address, wallet)``,
``deliver_key(sender, recipient, key)`` and ``submit(tx) -> Receipt``. The
simulator and ``ledger.LocalChain`` both do.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol

from . import codec, crypto
from .codec import DataType
from .crypto import Ciphertext, Digest, Entropy, SymmetricKey
from .ledger import Receipt, Transaction, access_transaction, read_transaction, write_transaction


class WalletError(Exception):
    pass


class AccessDenied(WalletError):
    """The ledger's policy check refused the operation."""


class DecryptFailure(WalletError):
    """Ciphertext arrived but could not be opened: key missing or wrong."""


class UnknownParty(WalletError, KeyError):
    pass


class Network(Protocol):
    def announce(self, address: bytes, wallet: Any) -> None: ...

    def deliver_key(self, sender: bytes, recipient: bytes, key: SymmetricKey) -> None: ...

    def submit(self, tx: Transaction) -> Receipt: ...


# -- vital signs ----------------------------------------------------------------------

@dataclass(frozen=True)
class VitalSpec:
    unit: str
    low: int  # plausible range, inclusive
    high: int
    synth_low: int  # band used by the generator
    synth_high: int
    step: int


VITALS: dict[DataType, VitalSpec] = {
    DataType.BODY_TEMPERATURE: VitalSpec("centi-degC", 3000, 4500, 3600, 3850, 5),
    DataType.BLOOD_PRESSURE: VitalSpec("mmHg", 50, 260, 95, 160, 3),
    DataType.HEART_RATE: VitalSpec("bpm", 20, 250, 50, 130, 4),
    DataType.BLOOD_GLUCOSE: VitalSpec("mg/dL", 20, 600, 70, 180, 5),
}


@dataclass(frozen=True)
class VitalSample:
    """A reading in fixed-point units (see ``VITALS``), captured at simulated ms."""

    data_type: DataType
    value: int
    captured_at: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "data_type", DataType(self.data_type))
        spec = VITALS[self.data_type]
        if not spec.low <= self.value <= spec.high:
            raise ValueError(f"{self.data_type.label} reading {self.value} outside [{spec.low}, {spec.high}]")
        if self.captured_at < 0:
            raise ValueError("captured_at must be non-negative")

    @property
    def unit(self) -> str:
        return VITALS[self.data_type].unit

    def encode(self) -> bytes:
        return codec.encode_vital(self.data_type, self.value, self.captured_at)

    @classmethod
    def decode(cls, data: bytes) -> "VitalSample":
        dtype, value, captured_at = codec.decode_vital(data)
        return cls(dtype, value, captured_at)


def synth_vitals(seed: int | str, data_type: DataType | int, count: int,
                 start_ms: int = 0, interval_ms: int = 60_000) -> list[VitalSample]:
    """A bounded random walk inside the type's generator band."""
    dtype = DataType(data_type)
    spec = VITALS[dtype]
    rng = random.Random(f"vitals:{seed}:{int(dtype)}")
    value = rng.randint(spec.synth_low, spec.synth_high)
    out = []
    for i in range(count):
        out.append(VitalSample(dtype, value, start_ms + i * interval_ms))
        value = min(spec.synth_high, max(spec.synth_low, value + rng.randint(-spec.step, spec.step)))
    return out


# -- wallets ---------------------------------------------------------------------------

class Wallet:
    role = "wallet"

    def __init__(self, name: str = "", identity: crypto.SigningIdentity | None = None,
                 entropy: Entropy = crypto.default_entropy, nonce: int = 0) -> None:
        self.name = name
        self.entropy = entropy
        self.identity = identity or crypto.gen_signing_identity(entropy)
        self.keys: dict[bytes, SymmetricKey] = {}
        self.nonce = nonce
        self.enrolled_with: set[int] = set()

    @property
    def address(self) -> bytes:
        return self.identity.public_key

    def next_nonce(self) -> int:
        self.nonce += 1
        return self.nonce

    def _fresh_gcm_nonce(self) -> bytes:
        # the counter never repeats, so neither does a nonce under any key
        return bytes(4) + self.next_nonce().to_bytes(8, "big")

    def enroll(self, network: Network) -> bytes:
        if id(network) in self.enrolled_with:
            return self.address
        network.announce(self.address, self)
        self._bootstrap(network)
        self.enrolled_with.add(id(network))
        return self.address

    def _bootstrap(self, network: Network) -> None:
        pass

    def receive_key(self, sender: bytes, key: SymmetricKey) -> None:
        self.keys[bytes(sender)] = SymmetricKey(key)

    def noise_transaction(self) -> Transaction:
        """A cheap, well-formed transaction; used to drive flood experiments."""
        return access_transaction(self.identity, self.address, self.address, (), self.next_nonce())

    # keystore ------------------------------------------------------------------

    def export(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "name": self.name,
            "secret_key": self.identity.secret_key.hex(),
            "address": self.address.hex(),
            "nonce": self.nonce,
            "keys": {peer.hex(): key.hex() for peer, key in sorted(self.keys.items())},
        }

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.export(), indent=2, sort_keys=True) + "\n")
        os.chmod(path, 0o600)

    @staticmethod
    def from_export(data: dict[str, Any]) -> "Wallet":
        cls = {"patient": PatientWallet, "staff": StaffWallet}.get(data.get("role"))
        if cls is None:
            raise WalletError(f"unknown wallet role {data.get('role')!r}")
        wallet = cls(data.get("name", ""), crypto.SigningIdentity(bytes.fromhex(data["secret_key"])),
                     nonce=int(data.get("nonce", 0)))
        if "address" in data and bytes.fromhex(data["address"]) != wallet.address:
            raise WalletError("keystore address does not match its secret key")
        for peer, key in data.get("keys", {}).items():
            wallet.keys[bytes.fromhex(peer)] = SymmetricKey.from_hex(key)
        return wallet

    @staticmethod
    def load(path: str | os.PathLike) -> "Wallet":
        return Wallet.from_export(json.loads(Path(path).read_text()))


class PatientWallet(Wallet):
    role = "patient"

    def _bootstrap(self, network: Network) -> None:
        # a self-record with an empty policy makes the owner's own lookups non-empty
        network.submit(self.grant(self.address, ()))

    def share_key(self, network: Network, staff: bytes) -> SymmetricKey:
        key = crypto.gen_symmetric_key(self.entropy)
        try:
            network.deliver_key(self.address, staff, key)
        except KeyError as exc:
            raise UnknownParty(f"unknown staff address {bytes(staff).hex()}") from exc
        self.keys[bytes(staff)] = key
        return key

    def grant(self, staff: bytes, policy: Iterable[DataType | int]) -> Transaction:
        types = frozenset(codec.data_type(int(t)) for t in policy)
        return access_transaction(self.identity, self.address, bytes(staff), types, self.next_nonce())

    def revoke(self, staff: bytes) -> Transaction:
        return self.grant(staff, ())

    def seal(self, staff: bytes, sample: VitalSample) -> Ciphertext:
        key = self.keys.get(bytes(staff))
        if key is None:
            raise UnknownParty(f"no key shared with {bytes(staff).hex()}")
        return crypto.encrypt(key, sample.encode(), self._fresh_gcm_nonce())

    def write_tx(self, staff: bytes, sample: VitalSample) -> Transaction:
        return write_transaction(self.identity, self.seal(staff, sample), sample.data_type, self.next_nonce())

    def store_vital(self, network: Network, staff: bytes, sample: VitalSample) -> Digest:
        receipt = network.submit(self.write_tx(staff, sample))
        if receipt.outcome != "written":
            raise AccessDenied(f"write refused: {receipt.outcome}")
        return receipt.result


class StaffWallet(Wallet):
    role = "staff"

    def read_tx(self, patient: bytes, data_type: DataType | int, digest: bytes) -> Transaction:
        return read_transaction(self.identity, bytes(patient), DataType(data_type), digest, self.next_nonce())

    def open(self, patient: bytes, ct: Ciphertext) -> VitalSample:
        key = self.keys.get(bytes(patient))
        if key is None:
            raise DecryptFailure(f"no key from {bytes(patient).hex()[:16]}")
        try:
            return VitalSample.decode(crypto.decrypt(key, ct))
        except crypto.AuthenticationError as exc:
            raise DecryptFailure("ciphertext does not open under the shared key") from exc

    def retrieve_vital(self, network: Network, patient: bytes, data_type: DataType | int,
                       digest: bytes) -> VitalSample | None:
        """The decrypted sample, or ``None`` when the ledger denies the read."""
        receipt = network.submit(self.read_tx(patient, data_type, digest))
        if receipt.outcome != "read":
            return None
        return self.open(patient, receipt.result)

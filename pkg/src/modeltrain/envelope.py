"""Hop-by-hop envelope encryption, signing keys, and the tamper-evident audit chain.

Suite 1 (the only mandatory suite): X25519 key encapsulation, AES-256-GCM
authenticated payload encryption, Ed25519 signatures. A fresh symmetric key
and nonce are drawn per seal; the symmetric key is wrapped under an
ephemeral ECDH shared secret so only the designated recipient can unwrap
it. The manifest digest travels as associated data, binding the ciphertext
to one train.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

SUITE_X25519_AESGCM_ED25519 = 1

KEY_ID_LEN = 32  # sha-256 of the public part
_WRAP_NONCE = b"\x00" * 12  # wrap key is single-use, fixed nonce is safe


class EnvelopeError(Exception):
    pass


class WrongRecipient(EnvelopeError):
    """Key decapsulation failed: this private key cannot unwrap the payload key."""


class TamperDetected(EnvelopeError):
    """Authentication failed on the ciphertext or its associated data."""


class BadSignature(EnvelopeError):
    pass


class KeyRole(str, Enum):
    STATION = "Station"
    RESEARCHER = "Researcher"
    SERVICE_CENTER = "ServiceCenter"


def fingerprint(public_part: bytes) -> str:
    return hashlib.sha256(public_part).hexdigest()


@dataclass(frozen=True)
class PublicKey:
    """Public half of a key pair: X25519 sealing key + Ed25519 verify key."""

    key_id: str
    encrypt_part: bytes  # 32 bytes, X25519
    verify_part: bytes  # 32 bytes, Ed25519

    @property
    def public_part(self) -> bytes:
        return self.encrypt_part + self.verify_part

    def to_wire(self) -> dict:
        return {
            "key_id": self.key_id,
            "encrypt_part": base64.b64encode(self.encrypt_part).decode("ascii"),
            "verify_part": base64.b64encode(self.verify_part).decode("ascii"),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "PublicKey":
        return cls(
            key_id=d["key_id"],
            encrypt_part=base64.b64decode(d["encrypt_part"]),
            verify_part=base64.b64decode(d["verify_part"]),
        )

    def verify(self, signature: bytes, message: bytes) -> None:
        try:
            Ed25519PublicKey.from_public_bytes(self.verify_part).verify(signature, message)
        except InvalidSignature as exc:
            raise BadSignature("signature does not verify") from exc


@dataclass(frozen=True)
class KeyPair:
    key_id: str
    role: KeyRole
    decrypt_part: bytes  # 32 bytes, X25519 private
    sign_part: bytes  # 32 bytes, Ed25519 private
    public: PublicKey

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.sign_part).sign(message)

    def to_wire(self) -> dict:
        return {
            "key_id": self.key_id,
            "role": self.role.value,
            "decrypt_part": base64.b64encode(self.decrypt_part).decode("ascii"),
            "sign_part": base64.b64encode(self.sign_part).decode("ascii"),
            "public": self.public.to_wire(),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "KeyPair":
        return cls(
            key_id=d["key_id"],
            role=KeyRole(d["role"]),
            decrypt_part=base64.b64decode(d["decrypt_part"]),
            sign_part=base64.b64decode(d["sign_part"]),
            public=PublicKey.from_wire(d["public"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_wire(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "KeyPair":
        with open(path, encoding="utf-8") as fh:
            return cls.from_wire(json.load(fh))


def generate_keypair(role: KeyRole, seed: Optional[bytes] = None) -> KeyPair:
    """New key pair; a seed makes generation deterministic (tests only)."""
    if seed is None:
        decrypt_raw = os.urandom(32)
        sign_raw = os.urandom(32)
    else:
        decrypt_raw = hashlib.sha256(b"encrypt|" + seed).digest()
        sign_raw = hashlib.sha256(b"sign|" + seed).digest()
    x_priv = X25519PrivateKey.from_private_bytes(decrypt_raw)
    e_priv = Ed25519PrivateKey.from_private_bytes(sign_raw)
    encrypt_part = x_priv.public_key().public_bytes_raw()
    verify_part = e_priv.public_key().public_bytes_raw()
    public = PublicKey(
        key_id=fingerprint(encrypt_part + verify_part),
        encrypt_part=encrypt_part,
        verify_part=verify_part,
    )
    return KeyPair(
        key_id=public.key_id,
        role=role,
        decrypt_part=decrypt_raw,
        sign_part=sign_raw,
        public=public,
    )


@dataclass(frozen=True)
class EncryptedEnvelope:
    suite_id: int
    recipient_key_id: str
    sender_key_id: str
    wrapped_key: bytes  # ephemeral X25519 public key (32) + AES-GCM wrap of payload key
    nonce: bytes
    ciphertext: bytes
    signature: bytes

    def signing_body(self) -> bytes:
        return b"".join(
            [
                struct.pack(">H", self.suite_id),
                bytes.fromhex(self.recipient_key_id),
                self.wrapped_key,
                self.nonce,
                self.ciphertext,
            ]
        )

    def to_bytes(self) -> bytes:
        """Wire blob: suite u16 | recipient id 32 | sender id 32 | length-prefixed fields."""
        return b"".join(
            [
                struct.pack(">H", self.suite_id),
                bytes.fromhex(self.recipient_key_id),
                bytes.fromhex(self.sender_key_id),
                struct.pack(">H", len(self.wrapped_key)),
                self.wrapped_key,
                struct.pack(">B", len(self.nonce)),
                self.nonce,
                struct.pack(">I", len(self.ciphertext)),
                self.ciphertext,
                struct.pack(">H", len(self.signature)),
                self.signature,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedEnvelope":
        try:
            (suite_id,) = struct.unpack_from(">H", data, 0)
            recipient = data[2:34].hex()
            sender = data[34:66].hex()
            offset = 66
            (wk_len,) = struct.unpack_from(">H", data, offset)
            offset += 2
            wrapped_key = data[offset : offset + wk_len]
            offset += wk_len
            nonce_len = data[offset]
            offset += 1
            nonce = data[offset : offset + nonce_len]
            offset += nonce_len
            (ct_len,) = struct.unpack_from(">I", data, offset)
            offset += 4
            ciphertext = data[offset : offset + ct_len]
            offset += ct_len
            (sig_len,) = struct.unpack_from(">H", data, offset)
            offset += 2
            signature = data[offset : offset + sig_len]
            offset += sig_len
        except (struct.error, IndexError) as exc:
            raise TamperDetected(f"malformed envelope blob: {exc}") from exc
        if offset != len(data) or len(data) < 66:
            raise TamperDetected("malformed envelope blob: bad length")
        return cls(suite_id, recipient, sender, wrapped_key, nonce, ciphertext, signature)


def seal(payload: bytes, recipient: PublicKey, sender: KeyPair, associated: bytes) -> EncryptedEnvelope:
    payload_key = AESGCM.generate_key(bit_length=256)
    nonce = os.urandom(12)
    ciphertext = AESGCM(payload_key).encrypt(nonce, payload, associated)

    ephemeral = X25519PrivateKey.generate()
    shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(recipient.encrypt_part))
    kek = hashlib.sha256(b"wrap|" + shared).digest()
    wrapped = AESGCM(kek).encrypt(_WRAP_NONCE, payload_key, None)
    wrapped_key = ephemeral.public_key().public_bytes_raw() + wrapped

    env = EncryptedEnvelope(
        suite_id=SUITE_X25519_AESGCM_ED25519,
        recipient_key_id=recipient.key_id,
        sender_key_id=sender.key_id,
        wrapped_key=wrapped_key,
        nonce=nonce,
        ciphertext=ciphertext,
        signature=b"",
    )
    signature = sender.sign(env.signing_body())
    return EncryptedEnvelope(
        env.suite_id,
        env.recipient_key_id,
        env.sender_key_id,
        env.wrapped_key,
        env.nonce,
        env.ciphertext,
        signature,
    )


def open_envelope(
    env: EncryptedEnvelope, recipient: KeyPair, sender: PublicKey, associated: bytes
) -> bytes:
    """Open a sealed envelope, verifying sender authenticity and payload integrity.

    Error classification: an intact envelope addressed to someone else fails
    with WrongRecipient; a mutated envelope fails with BadSignature (signed
    region) or TamperDetected (ciphertext/associated-data authentication).
    """
    if env.suite_id != SUITE_X25519_AESGCM_ED25519:
        # The suite id is inside the signed region; an unexpected value on an
        # envelope we produced means the blob was altered.
        raise TamperDetected(f"unsupported suite {env.suite_id}")
    if env.sender_key_id != sender.key_id:
        raise BadSignature("sender key id does not match the supplied sender key")

    def _fail_decapsulation(reason: str):
        # Distinguish "wrong key" from "mutated envelope": only an intact
        # signed region earns WrongRecipient.
        try:
            sender.verify(env.signature, env.signing_body())
        except BadSignature:
            raise BadSignature("signature invalid over mutated envelope") from None
        raise WrongRecipient(reason)

    if env.recipient_key_id != recipient.key_id or len(env.wrapped_key) < 32:
        _fail_decapsulation("envelope is not addressed to this key")
    ephemeral_pub = X25519PublicKey.from_public_bytes(env.wrapped_key[:32])
    shared = X25519PrivateKey.from_private_bytes(recipient.decrypt_part).exchange(ephemeral_pub)
    kek = hashlib.sha256(b"wrap|" + shared).digest()
    try:
        payload_key = AESGCM(kek).decrypt(_WRAP_NONCE, env.wrapped_key[32:], None)
    except InvalidTag:
        _fail_decapsulation("key decapsulation failed")
    try:
        payload = AESGCM(payload_key).decrypt(env.nonce, env.ciphertext, associated)
    except InvalidTag as exc:
        raise TamperDetected("payload authentication failed") from exc
    sender.verify(env.signature, env.signing_body())
    return payload


# ---------------------------------------------------------------------------
# Audit chain

GENESIS_HASH = "0" * 64


class AuditEvent(str, Enum):
    TASK_SUBMITTED = "TaskSubmitted"
    APPROVED = "Approved"
    DISPATCHED = "Dispatched"
    HOP_FETCHED = "HopFetched"
    HOP_PUSHED = "HopPushed"
    ADMIN_DECISION = "AdminDecision"
    EXIT_CONTROL = "ExitControl"
    RELEASED = "Released"
    BLOCKED = "Blocked"


@dataclass(frozen=True)
class AuditEntry:
    index: int
    prev_hash: str
    event: AuditEvent
    actor_key_id: str
    payload_digest: str
    timestamp: str
    signature: bytes

    def signing_body(self) -> bytes:
        return json.dumps(
            {
                "index": self.index,
                "prev_hash": self.prev_hash,
                "event": self.event.value,
                "actor_key_id": self.actor_key_id,
                "payload_digest": self.payload_digest,
                "timestamp": self.timestamp,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("ascii")

    def entry_hash(self) -> str:
        return hashlib.sha256(
            self.signing_body() + b"|" + base64.b64encode(self.signature)
        ).hexdigest()

    def to_wire(self) -> dict:
        return {
            "index": self.index,
            "prev_hash": self.prev_hash,
            "event": self.event.value,
            "actor_key_id": self.actor_key_id,
            "payload_digest": self.payload_digest,
            "timestamp": self.timestamp,
            "signature": base64.b64encode(self.signature).decode("ascii"),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "AuditEntry":
        return cls(
            index=d["index"],
            prev_hash=d["prev_hash"],
            event=AuditEvent(d["event"]),
            actor_key_id=d["actor_key_id"],
            payload_digest=d["payload_digest"],
            timestamp=d["timestamp"],
            signature=base64.b64decode(d["signature"]),
        )


def chain_append(
    ledger: list[AuditEntry],
    event: AuditEvent,
    actor_key_id: str,
    payload_digest: str,
    signer: KeyPair,
    timestamp: str,
) -> AuditEntry:
    prev_hash = ledger[-1].entry_hash() if ledger else GENESIS_HASH
    entry = AuditEntry(
        index=len(ledger),
        prev_hash=prev_hash,
        event=event,
        actor_key_id=actor_key_id,
        payload_digest=payload_digest,
        timestamp=timestamp,
        signature=b"",
    )
    signed = AuditEntry(
        entry.index,
        entry.prev_hash,
        entry.event,
        entry.actor_key_id,
        entry.payload_digest,
        entry.timestamp,
        signer.sign(entry.signing_body()),
    )
    ledger.append(signed)
    return signed


def chain_verify(ledger: list[AuditEntry], signer_public: PublicKey) -> Union[str, int]:
    """"ok" for a valid chain, else the smallest index that fails a check."""
    prev_hash = GENESIS_HASH
    for i, entry in enumerate(ledger):
        if entry.index != i or entry.prev_hash != prev_hash:
            return i
        try:
            signer_public.verify(entry.signature, entry.signing_body())
        except BadSignature:
            return i
        prev_hash = entry.entry_hash()
    return "ok"

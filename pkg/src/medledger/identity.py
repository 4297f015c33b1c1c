"""Actors, keys and role certificates.

All participants (care providers, patients, representatives, peers,
orderers) are modeled as identities with Ed25519 keypairs derived from a
seed, so a whole network can be re-provisioned byte-for-byte. A licensing
authority issues role certificates and tracks revocations; endorsement
rejects any identity whose certificate is missing, invalid or revoked.

Signatures are Ed25519 over the SHA-256 digest of the message, which makes
them deterministic for a given (key, message) pair.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import codec

SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32


class IdentityError(Exception):
    """Base error for identity and credential handling."""


class DuplicateIdError(IdentityError):
    pass


class NotAuthorityError(IdentityError):
    pass


class UnknownActorError(IdentityError):
    pass


class Role(enum.Enum):
    HOSPITAL = "hospital"
    DOCTOR = "doctor"
    CLINIC = "clinic"
    PHARMACY = "pharmacy"
    PATIENT = "patient"
    REPRESENTATIVE = "representative"
    ORDERER = "orderer"
    PEER = "peer"
    LICENSING_AUTHORITY = "licensing-authority"


PROVIDER_ROLES = frozenset({Role.DOCTOR, Role.HOSPITAL, Role.CLINIC})


@dataclass(frozen=True)
class Identity:
    """An actor with deterministic Ed25519 key material."""

    id: str
    role: Role
    public_key: bytes
    private_key: Ed25519PrivateKey = field(repr=False, compare=False)


@dataclass(frozen=True)
class Certificate:
    """Role credential: the issuer signs (subject, role, public key)."""

    subject_id: str
    role: Role
    issuer_id: str
    subject_public_key: bytes
    signature: bytes

    def signed_content(self) -> bytes:
        return certificate_content(self.subject_id, self.role, self.subject_public_key)


def certificate_content(subject_id: str, role: Role, public_key: bytes) -> bytes:
    return (
        codec.enc_str(subject_id)
        + codec.enc_str(role.value)
        + codec.enc_bytes(public_key)
    )


def encode_certificate(cert: Certificate) -> bytes:
    return (
        codec.enc_str(cert.subject_id)
        + codec.enc_str(cert.role.value)
        + codec.enc_str(cert.issuer_id)
        + codec.enc_bytes(cert.subject_public_key)
        + codec.enc_bytes(cert.signature)
    )


def decode_certificate(reader: codec.Reader) -> Certificate:
    subject_id = reader.str_()
    role = Role(reader.str_())
    issuer_id = reader.str_()
    public_key = reader.bytes_()
    signature = reader.bytes_()
    return Certificate(subject_id, role, issuer_id, public_key, signature)


def derive_identity(actor_id: str, role: Role, seed: int) -> Identity:
    """Derive key material from (id, role, seed); stable across runs."""
    material = codec.sha256(
        codec.enc_str(actor_id) + codec.enc_str(role.value) + codec.enc_u64(seed)
    )
    private = Ed25519PrivateKey.from_private_bytes(material)
    public = private.public_key().public_bytes_raw()
    return Identity(actor_id, role, public, private)


def sign(identity: Identity, message: bytes) -> bytes:
    """Sign the SHA-256 digest of the message. Deterministic."""
    return identity.private_key.sign(codec.sha256(message))


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        key = Ed25519PublicKey.from_public_bytes(public_key)
        key.verify(signature, codec.sha256(message))
        return True
    except (InvalidSignature, ValueError):
        return False


def issue_certificate(authority: Identity, subject: Identity) -> Certificate:
    if authority.role is not Role.LICENSING_AUTHORITY:
        raise NotAuthorityError(
            f"{authority.id} ({authority.role.value}) cannot issue certificates"
        )
    content = certificate_content(subject.id, subject.role, subject.public_key)
    return Certificate(
        subject_id=subject.id,
        role=subject.role,
        issuer_id=authority.id,
        subject_public_key=subject.public_key,
        signature=sign(authority, content),
    )


def verify_certificate(cert: Certificate, issuer_public_key: bytes) -> bool:
    return verify(issuer_public_key, cert.signed_content(), cert.signature)


class Registry:
    """Network-wide actor roster plus the licensing authority's records.

    Registration is serialized through a lock; everything handed out is
    immutable and safe to share across channel executors.
    """

    def __init__(self, authority_id: str = "licensing0", authority_seed: int = 0):
        self._lock = threading.Lock()
        self._identities: dict[str, Identity] = {}
        self._certificates: dict[str, Certificate] = {}
        self._revoked: set[str] = set()
        self._cert_ok_cache: dict[str, bool] = {}
        self.authority = derive_identity(
            authority_id, Role.LICENSING_AUTHORITY, authority_seed
        )
        self._identities[authority_id] = self.authority

    def generate_identity(self, actor_id: str, role: Role, seed: int) -> Identity:
        with self._lock:
            if actor_id in self._identities:
                raise DuplicateIdError(f"actor id already registered: {actor_id}")
            identity = derive_identity(actor_id, role, seed)
            self._identities[actor_id] = identity
            return identity

    def certificate_for(self, actor_id: str) -> Certificate:
        with self._lock:
            if actor_id not in self._identities:
                raise UnknownActorError(actor_id)
            cert = self._certificates.get(actor_id)
            if cert is None:
                cert = issue_certificate(self.authority, self._identities[actor_id])
                self._certificates[actor_id] = cert
            return cert

    def identity(self, actor_id: str) -> Identity:
        try:
            return self._identities[actor_id]
        except KeyError:
            raise UnknownActorError(actor_id) from None

    def exists(self, actor_id: str) -> bool:
        return actor_id in self._identities

    def role_of(self, actor_id: str) -> Role | None:
        identity = self._identities.get(actor_id)
        return identity.role if identity else None

    def public_key(self, actor_id: str) -> bytes | None:
        identity = self._identities.get(actor_id)
        return identity.public_key if identity else None

    def revoke_certificate(self, actor_id: str) -> None:
        with self._lock:
            self._revoked.add(actor_id)

    def is_revoked(self, actor_id: str) -> bool:
        return actor_id in self._revoked

    def certificate_valid(self, cert: Certificate) -> bool:
        """Issued here, intact, and not revoked. Verification is memoized
        per subject since certificates are immutable."""
        if self.is_revoked(cert.subject_id):
            return False
        issued = self._certificates.get(cert.subject_id)
        if issued is None or issued != cert:
            return False
        ok = self._cert_ok_cache.get(cert.subject_id)
        if ok is None:
            ok = verify_certificate(cert, self.authority.public_key)
            self._cert_ok_cache[cert.subject_id] = ok
        return ok

    def actor_ids(self) -> list[str]:
        return sorted(self._identities)

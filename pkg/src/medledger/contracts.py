"""Smart-contract layer: health-record and drug-supply transaction logic.

Contract execution is a pure function from (state snapshot, registry
snapshot, inputs) to a read/write set; nothing here mutates a ledger.
Reads are tracked with the version they were observed at so the commit
path can detect conflicts. Raw record contents never enter a write set,
only their digests.

Covered actions: recording health-file abstracts, granting/revoking
access, delegating authority to a representative, dual-signed record
sharing, drug-lot registration, prescription-backed sales, and drug
queries. Two aggregation reports (health-file audit, supply monitoring)
read the committed state without writing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol

from . import codec
from .identity import Certificate, Role, PROVIDER_ROLES, sign, verify

MS_PER_DAY = 86_400_000

WILDCARD = "*"


def day_of(now: int) -> int:
    """Calendar day (days since epoch) for a tick timestamp."""
    return now // MS_PER_DAY


# ---------------------------------------------------------------------------
# errors


class ContractError(Exception):
    """Raised by contract execution; the name identifies the failure."""

    @property
    def code(self) -> str:
        return type(self).__name__.removesuffix("Error")


class CertificateRejectedError(ContractError):
    pass


class UnauthorizedAuthorError(ContractError):
    pass


class UnknownPatientError(ContractError):
    pass


class DuplicateRecordError(ContractError):
    pass


class NotOwnerError(ContractError):
    pass


class DelegationRevokedError(ContractError):
    pass


class UnknownRecordError(ContractError):
    pass


class UnknownGrantError(ContractError):
    pass


class NotPatientError(ContractError):
    pass


class UnknownActorError(ContractError):
    pass


class AccessDeniedError(ContractError):
    pass


class BadSenderSignatureError(ContractError):
    pass


class BadReceiverSignatureError(ContractError):
    pass


class NotPharmacyError(ContractError):
    pass


class DuplicateQrError(ContractError):
    pass


class ExpiredLotError(ContractError):
    pass


class BadPrescriptionSignatureError(ContractError):
    pass


class PrescriptionConsumedError(ContractError):
    pass


class OutOfStockError(ContractError):
    pass


class UnknownLotError(ContractError):
    pass


class DrugMismatchError(ContractError):
    pass


# ---------------------------------------------------------------------------
# views


class StateView(Protocol):
    def get(self, key: str) -> bytes | None: ...

    def version(self, key: str) -> int: ...

    def items_with_prefix(self, prefix: str) -> Iterable[tuple[str, bytes]]: ...


class RegistryView(Protocol):
    def exists(self, actor_id: str) -> bool: ...

    def role_of(self, actor_id: str) -> Role | None: ...

    def public_key(self, actor_id: str) -> bytes | None: ...

    def certificate_valid(self, cert: Certificate) -> bool: ...


class _Tracker:
    """Records reads (with observed versions) and buffered writes."""

    def __init__(self, state: StateView):
        self._state = state
        self.reads: dict[str, int] = {}
        self.writes: dict[str, bytes] = {}

    def get(self, key: str) -> bytes | None:
        if key in self.writes:
            return self.writes[key]
        if key not in self.reads:
            self.reads[key] = self._state.version(key)
        return self._state.get(key)

    def put(self, key: str, value: bytes) -> None:
        self.writes[key] = value

    def rwset(self) -> "RwSet":
        return RwSet(tuple(self.reads.items()), tuple(self.writes.items()))


@dataclass(frozen=True)
class RwSet:
    reads: tuple[tuple[str, int], ...]
    writes: tuple[tuple[str, bytes], ...]


# ---------------------------------------------------------------------------
# rights


class Right(enum.Enum):
    READ = "read"
    WRITE = "write"
    UPDATE = "update"
    DELETE = "delete"


def _enc_rights(rights: frozenset[Right]) -> bytes:
    return codec.enc_seq(codec.enc_str(r.value) for r in sorted(rights, key=lambda r: r.value))


def _dec_rights(reader: codec.Reader) -> frozenset[Right]:
    return frozenset(Right(reader.str_()) for _ in range(reader.count()))


# ---------------------------------------------------------------------------
# state keys


def abstract_key(record_id: bytes) -> str:
    return f"hfa/{record_id.hex()}"


def grant_key(patient_id: str, record_ref: str, grantee_id: str) -> str:
    return f"grant/{patient_id}/{record_ref}/{grantee_id}"


def delegation_key(patient_id: str, representative_id: str) -> str:
    return f"deleg/{patient_id}/{representative_id}"


def share_key(request_id: bytes) -> str:
    return f"share/{request_id.hex()}"


def lot_key(qr_code: str) -> str:
    return f"lot/{qr_code}"


def prescription_key(prescription_id: bytes) -> str:
    return f"rx/{prescription_id.hex()}"


def sale_key(prescription_id: bytes) -> str:
    return f"sale/{prescription_id.hex()}"


# ---------------------------------------------------------------------------
# state records


@dataclass(frozen=True)
class HealthFileAbstract:
    record_id: bytes
    patient_id: str
    author_id: str
    created_at: int

    def encode(self) -> bytes:
        return (
            codec.enc_bytes(self.record_id)
            + codec.enc_str(self.patient_id)
            + codec.enc_str(self.author_id)
            + codec.enc_u64(self.created_at)
        )

    @classmethod
    def decode(cls, data: bytes) -> "HealthFileAbstract":
        r = codec.Reader(data)
        return cls(r.bytes_(), r.str_(), r.str_(), r.u64())


@dataclass(frozen=True)
class PermissionGrant:
    patient_id: str
    grantor_id: str
    grantee_id: str
    record_ref: str
    rights: frozenset[Right]
    expires_at: int | None
    revoked: bool
    granted_at: int

    def encode(self) -> bytes:
        return (
            codec.enc_str(self.patient_id)
            + codec.enc_str(self.grantor_id)
            + codec.enc_str(self.grantee_id)
            + codec.enc_str(self.record_ref)
            + _enc_rights(self.rights)
            + codec.enc_opt_u64(self.expires_at)
            + codec.enc_u8(int(self.revoked))
            + codec.enc_u64(self.granted_at)
        )

    @classmethod
    def decode(cls, data: bytes) -> "PermissionGrant":
        r = codec.Reader(data)
        return cls(
            r.str_(), r.str_(), r.str_(), r.str_(),
            _dec_rights(r), r.opt_u64(), bool(r.u8()), r.u64(),
        )


@dataclass(frozen=True)
class Delegation:
    patient_id: str
    representative_id: str
    granted_at: int
    revoked: bool

    def encode(self) -> bytes:
        return (
            codec.enc_str(self.patient_id)
            + codec.enc_str(self.representative_id)
            + codec.enc_u64(self.granted_at)
            + codec.enc_u8(int(self.revoked))
        )

    @classmethod
    def decode(cls, data: bytes) -> "Delegation":
        r = codec.Reader(data)
        return cls(r.str_(), r.str_(), r.u64(), bool(r.u8()))


@dataclass(frozen=True)
class ShareRecord:
    record_id: bytes
    sender_id: str
    receiver_id: str
    request_id: bytes
    payload_digest: bytes
    sender_signature: bytes
    receiver_signature: bytes
    shared_at: int

    def encode(self) -> bytes:
        return (
            codec.enc_bytes(self.record_id)
            + codec.enc_str(self.sender_id)
            + codec.enc_str(self.receiver_id)
            + codec.enc_bytes(self.request_id)
            + codec.enc_bytes(self.payload_digest)
            + codec.enc_bytes(self.sender_signature)
            + codec.enc_bytes(self.receiver_signature)
            + codec.enc_u64(self.shared_at)
        )

    @classmethod
    def decode(cls, data: bytes) -> "ShareRecord":
        r = codec.Reader(data)
        return cls(
            r.bytes_(), r.str_(), r.str_(), r.bytes_(),
            r.bytes_(), r.bytes_(), r.bytes_(), r.u64(),
        )


@dataclass(frozen=True)
class DrugLot:
    qr_code: str
    name: str
    expiration_day: int
    tracking_number: str
    pharmacy_id: str
    quantity: int
    registered_at: int

    def encode(self) -> bytes:
        return (
            codec.enc_str(self.qr_code)
            + codec.enc_str(self.name)
            + codec.enc_u64(self.expiration_day)
            + codec.enc_str(self.tracking_number)
            + codec.enc_str(self.pharmacy_id)
            + codec.enc_u64(self.quantity)
            + codec.enc_u64(self.registered_at)
        )

    @classmethod
    def decode(cls, data: bytes) -> "DrugLot":
        r = codec.Reader(data)
        return cls(r.str_(), r.str_(), r.u64(), r.str_(), r.str_(), r.u64(), r.u64())


@dataclass(frozen=True)
class PrescriptionUse:
    """Consumption marker; present in state only once the sale committed."""

    prescription_id: bytes
    patient_id: str
    prescriber_id: str
    drug_name: str
    consumed_at: int

    def encode(self) -> bytes:
        return (
            codec.enc_bytes(self.prescription_id)
            + codec.enc_str(self.patient_id)
            + codec.enc_str(self.prescriber_id)
            + codec.enc_str(self.drug_name)
            + codec.enc_u64(self.consumed_at)
        )

    @classmethod
    def decode(cls, data: bytes) -> "PrescriptionUse":
        r = codec.Reader(data)
        return cls(r.bytes_(), r.str_(), r.str_(), r.str_(), r.u64())


@dataclass(frozen=True)
class SaleRecord:
    patient_id: str
    prescription_id: bytes
    qr_code: str
    pharmacy_id: str
    sold_at: int

    def encode(self) -> bytes:
        return (
            codec.enc_str(self.patient_id)
            + codec.enc_bytes(self.prescription_id)
            + codec.enc_str(self.qr_code)
            + codec.enc_str(self.pharmacy_id)
            + codec.enc_u64(self.sold_at)
        )

    @classmethod
    def decode(cls, data: bytes) -> "SaleRecord":
        r = codec.Reader(data)
        return cls(r.str_(), r.bytes_(), r.str_(), r.str_(), r.u64())


# ---------------------------------------------------------------------------
# wire payloads


@dataclass(frozen=True)
class Prescription:
    """Signed prescription presented at a sale; not stored until consumed."""

    prescription_id: bytes
    patient_id: str
    prescriber_id: str
    drug_name: str
    signed_hash: bytes

    def signed_content(self) -> bytes:
        return (
            codec.enc_bytes(self.prescription_id)
            + codec.enc_str(self.patient_id)
            + codec.enc_str(self.drug_name)
        )

    def encode(self) -> bytes:
        return (
            codec.enc_bytes(self.prescription_id)
            + codec.enc_str(self.patient_id)
            + codec.enc_str(self.prescriber_id)
            + codec.enc_str(self.drug_name)
            + codec.enc_bytes(self.signed_hash)
        )

    @classmethod
    def decode(cls, r: codec.Reader) -> "Prescription":
        return cls(r.bytes_(), r.str_(), r.str_(), r.str_(), r.bytes_())


@dataclass(frozen=True)
class AbstractPayload:
    kind = "abstract"
    patient_id: str
    record_id: bytes


@dataclass(frozen=True)
class GrantPayload:
    kind = "grant"
    record_ref: str
    grantee_id: str
    rights: frozenset[Right]
    expires_at: int | None
    patient_id: str | None = None  # required for wildcard grants


@dataclass(frozen=True)
class RevokePayload:
    kind = "revoke"
    grant_key: str


@dataclass(frozen=True)
class DelegatePayload:
    kind = "delegate"
    representative_id: str


@dataclass(frozen=True)
class RevokeDelegationPayload:
    kind = "revoke-delegation"
    representative_id: str


@dataclass(frozen=True)
class SharePayload:
    kind = "share"
    record_id: bytes
    sender_id: str
    receiver_id: str
    request_id: bytes
    payload_digest: bytes
    sender_signature: bytes
    receiver_signature: bytes

    def signed_content(self) -> bytes:
        return (
            codec.enc_bytes(self.record_id)
            + codec.enc_bytes(self.request_id)
            + codec.enc_bytes(self.payload_digest)
        )


@dataclass(frozen=True)
class RegisterLotPayload:
    kind = "register"
    qr_code: str
    name: str
    expiration_day: int
    tracking_number: str
    quantity: int


@dataclass(frozen=True)
class SellPayload:
    kind = "sale"
    qr_code: str
    prescription: Prescription


@dataclass(frozen=True)
class QueryDrugPayload:
    kind = "query"
    qr_code: str


Payload = (
    AbstractPayload
    | GrantPayload
    | RevokePayload
    | DelegatePayload
    | RevokeDelegationPayload
    | SharePayload
    | RegisterLotPayload
    | SellPayload
    | QueryDrugPayload
)

PAYLOAD_KINDS = (
    "abstract",
    "grant",
    "revoke",
    "delegate",
    "revoke-delegation",
    "share",
    "register",
    "sale",
    "query",
)


def encode_payload(payload: Payload) -> bytes:
    head = codec.enc_str(payload.kind)
    if isinstance(payload, AbstractPayload):
        body = codec.enc_str(payload.patient_id) + codec.enc_bytes(payload.record_id)
    elif isinstance(payload, GrantPayload):
        body = (
            codec.enc_str(payload.record_ref)
            + codec.enc_str(payload.grantee_id)
            + _enc_rights(payload.rights)
            + codec.enc_opt_u64(payload.expires_at)
            + codec.enc_str(payload.patient_id or "")
        )
    elif isinstance(payload, RevokePayload):
        body = codec.enc_str(payload.grant_key)
    elif isinstance(payload, DelegatePayload):
        body = codec.enc_str(payload.representative_id)
    elif isinstance(payload, RevokeDelegationPayload):
        body = codec.enc_str(payload.representative_id)
    elif isinstance(payload, SharePayload):
        body = (
            codec.enc_bytes(payload.record_id)
            + codec.enc_str(payload.sender_id)
            + codec.enc_str(payload.receiver_id)
            + codec.enc_bytes(payload.request_id)
            + codec.enc_bytes(payload.payload_digest)
            + codec.enc_bytes(payload.sender_signature)
            + codec.enc_bytes(payload.receiver_signature)
        )
    elif isinstance(payload, RegisterLotPayload):
        body = (
            codec.enc_str(payload.qr_code)
            + codec.enc_str(payload.name)
            + codec.enc_u64(payload.expiration_day)
            + codec.enc_str(payload.tracking_number)
            + codec.enc_u64(payload.quantity)
        )
    elif isinstance(payload, SellPayload):
        body = codec.enc_str(payload.qr_code) + payload.prescription.encode()
    elif isinstance(payload, QueryDrugPayload):
        body = codec.enc_str(payload.qr_code)
    else:
        raise TypeError(f"unknown payload type: {type(payload)!r}")
    return head + body


def decode_payload(r: codec.Reader) -> Payload:
    kind = r.str_()
    if kind == "abstract":
        return AbstractPayload(r.str_(), r.bytes_())
    if kind == "grant":
        record_ref = r.str_()
        grantee = r.str_()
        rights = _dec_rights(r)
        expires = r.opt_u64()
        patient = r.str_() or None
        return GrantPayload(record_ref, grantee, rights, expires, patient)
    if kind == "revoke":
        return RevokePayload(r.str_())
    if kind == "delegate":
        return DelegatePayload(r.str_())
    if kind == "revoke-delegation":
        return RevokeDelegationPayload(r.str_())
    if kind == "share":
        return SharePayload(
            r.bytes_(), r.str_(), r.str_(), r.bytes_(), r.bytes_(), r.bytes_(), r.bytes_()
        )
    if kind == "register":
        return RegisterLotPayload(r.str_(), r.str_(), r.u64(), r.str_(), r.u64())
    if kind == "sale":
        return SellPayload(r.str_(), Prescription.decode(r))
    if kind == "query":
        return QueryDrugPayload(r.str_())
    raise codec.DecodeError(f"unknown payload kind: {kind!r}")


# ---------------------------------------------------------------------------
# execution


def _require_cert(registry: RegistryView, cert: Certificate) -> None:
    if not registry.certificate_valid(cert):
        raise CertificateRejectedError(f"certificate rejected for {cert.subject_id}")


def execute_payload(
    state: StateView,
    registry: RegistryView,
    creator_cert: Certificate,
    payload: Payload,
    now: int,
) -> RwSet:
    """Run one contract action and return its read/write set."""
    if isinstance(payload, AbstractPayload):
        return _record_abstract(state, registry, creator_cert, payload, now)
    if isinstance(payload, GrantPayload):
        return grant_permission(
            state, registry, creator_cert, payload.grantee_id, payload.record_ref,
            payload.rights, payload.expires_at, now, patient_id=payload.patient_id,
        )
    if isinstance(payload, RevokePayload):
        return revoke_permission(state, registry, creator_cert, payload.grant_key, now)
    if isinstance(payload, DelegatePayload):
        return delegate_authority(state, registry, creator_cert, payload.representative_id, now)
    if isinstance(payload, RevokeDelegationPayload):
        return revoke_delegation(state, registry, creator_cert, payload.representative_id, now)
    if isinstance(payload, SharePayload):
        return share_health_record(state, registry, creator_cert, payload, now)
    if isinstance(payload, RegisterLotPayload):
        return register_medicine_receipt(state, registry, creator_cert, payload, now)
    if isinstance(payload, SellPayload):
        return sell_medicine(
            state, registry, creator_cert, payload.prescription, payload.qr_code, now
        )
    raise TypeError(f"payload is not an ordered contract action: {type(payload)!r}")


def record_health_abstract(
    state: StateView,
    registry: RegistryView,
    author_cert: Certificate,
    patient_id: str,
    record_bytes: bytes,
    now: int,
) -> RwSet:
    """Store digest + metadata for an off-chain record; never the bytes."""
    payload = AbstractPayload(patient_id, codec.sha256(record_bytes))
    return _record_abstract(state, registry, author_cert, payload, now)


def _record_abstract(
    state: StateView,
    registry: RegistryView,
    author_cert: Certificate,
    payload: AbstractPayload,
    now: int,
) -> RwSet:
    _require_cert(registry, author_cert)
    if author_cert.role not in PROVIDER_ROLES:
        raise UnauthorizedAuthorError(
            f"role {author_cert.role.value} cannot author health records"
        )
    if registry.role_of(payload.patient_id) is not Role.PATIENT:
        raise UnknownPatientError(payload.patient_id)
    t = _Tracker(state)
    key = abstract_key(payload.record_id)
    if t.get(key) is not None:
        raise DuplicateRecordError(key)
    record = HealthFileAbstract(payload.record_id, payload.patient_id, author_cert.subject_id, now)
    t.put(key, record.encode())
    return t.rwset()


def _active_delegation(t: _Tracker, patient_id: str, representative_id: str) -> bool:
    raw = t.get(delegation_key(patient_id, representative_id))
    if raw is None:
        return False
    return not Delegation.decode(raw).revoked


def _resolve_grantor(
    t: _Tracker, grantor_cert: Certificate, record_ref: str, patient_id: str | None
) -> str:
    """Return the patient whose record(s) the grantor may manage."""
    grantor = grantor_cert.subject_id
    if record_ref == WILDCARD:
        if patient_id is None:
            raise UnknownRecordError("wildcard grant requires a patient id")
        owner = patient_id
    else:
        raw = t.get(abstract_key(bytes.fromhex(record_ref)))
        if raw is None:
            raise UnknownRecordError(record_ref)
        owner = HealthFileAbstract.decode(raw).patient_id
    if grantor == owner:
        return owner
    if grantor_cert.role is Role.REPRESENTATIVE:
        if not _active_delegation(t, owner, grantor):
            raise DelegationRevokedError(f"{grantor} does not represent {owner}")
        return owner
    raise NotOwnerError(f"{grantor} does not own records of {owner}")


def grant_permission(
    state: StateView,
    registry: RegistryView,
    grantor_cert: Certificate,
    grantee_id: str,
    record_ref: str,
    rights: frozenset[Right],
    expires_at: int | None,
    now: int,
    patient_id: str | None = None,
) -> RwSet:
    _require_cert(registry, grantor_cert)
    t = _Tracker(state)
    owner = _resolve_grantor(t, grantor_cert, record_ref, patient_id)
    grant = PermissionGrant(
        patient_id=owner,
        grantor_id=grantor_cert.subject_id,
        grantee_id=grantee_id,
        record_ref=record_ref,
        rights=rights,
        expires_at=expires_at,
        revoked=False,
        granted_at=now,
    )
    t.put(grant_key(owner, record_ref, grantee_id), grant.encode())
    return t.rwset()


def revoke_permission(
    state: StateView,
    registry: RegistryView,
    grantor_cert: Certificate,
    key: str,
    now: int,
) -> RwSet:
    _require_cert(registry, grantor_cert)
    t = _Tracker(state)
    raw = t.get(key)
    if raw is None:
        raise UnknownGrantError(key)
    grant = PermissionGrant.decode(raw)
    _resolve_grantor(t, grantor_cert, grant.record_ref, grant.patient_id)
    if not grant.revoked:  # revoking twice is a silent success
        t.put(key, PermissionGrant(
            grant.patient_id, grant.grantor_id, grant.grantee_id, grant.record_ref,
            grant.rights, grant.expires_at, True, grant.granted_at,
        ).encode())
    return t.rwset()


def delegate_authority(
    state: StateView,
    registry: RegistryView,
    patient_cert: Certificate,
    representative_id: str,
    now: int,
) -> RwSet:
    _require_cert(registry, patient_cert)
    if patient_cert.role is not Role.PATIENT:
        raise NotPatientError(patient_cert.subject_id)
    if not registry.exists(representative_id):
        raise UnknownActorError(representative_id)
    t = _Tracker(state)
    patient = patient_cert.subject_id
    t.put(
        delegation_key(patient, representative_id),
        Delegation(patient, representative_id, now, False).encode(),
    )
    return t.rwset()


def revoke_delegation(
    state: StateView,
    registry: RegistryView,
    patient_cert: Certificate,
    representative_id: str,
    now: int,
) -> RwSet:
    _require_cert(registry, patient_cert)
    if patient_cert.role is not Role.PATIENT:
        raise NotPatientError(patient_cert.subject_id)
    t = _Tracker(state)
    patient = patient_cert.subject_id
    key = delegation_key(patient, representative_id)
    raw = t.get(key)
    if raw is None:
        raise UnknownActorError(f"no delegation for {representative_id}")
    existing = Delegation.decode(raw)
    if not existing.revoked:
        t.put(key, Delegation(patient, representative_id, existing.granted_at, True).encode())
    return t.rwset()


@dataclass(frozen=True)
class AccessDecision:
    allowed: bool
    reason: str  # owner | grant | no-grant | expired | revoked


def _grant_status(t: _Tracker, grant: PermissionGrant, action: Right, now: int) -> str:
    """One grant's standing for an action: ok, revoked, expired or no-right."""
    if action not in grant.rights:
        return "no-right"
    if grant.revoked:
        return "revoked"
    if grant.grantor_id != grant.patient_id and not _active_delegation(
        t, grant.patient_id, grant.grantor_id
    ):
        return "revoked"
    if grant.expires_at is not None and now >= grant.expires_at:
        return "expired"
    return "ok"


def check_access(
    state: StateView,
    registry: RegistryView,
    requester_cert: Certificate,
    record_id: bytes,
    action: Right,
    now: int,
) -> AccessDecision:
    """Decide whether the requester may perform the action on the record.

    The owner always may; otherwise there must be a live grant (exact or
    wildcard) carrying the right. Denials distinguish revoked, expired and
    absent grants, with revocation reported ahead of expiry.
    """
    return _check_access_tracked(_Tracker(state), requester_cert, record_id, action, now)


def share_health_record(
    state: StateView,
    registry: RegistryView,
    sender_cert: Certificate,
    envelope: SharePayload,
    now: int,
) -> RwSet:
    """Commit a dual-signed share event; content stays off-chain."""
    _require_cert(registry, sender_cert)
    content = envelope.signed_content()
    sender_key = registry.public_key(envelope.sender_id)
    if sender_key is None or not verify(sender_key, content, envelope.sender_signature):
        raise BadSenderSignatureError(envelope.sender_id)
    receiver_key = registry.public_key(envelope.receiver_id)
    if receiver_key is None or not verify(receiver_key, content, envelope.receiver_signature):
        raise BadReceiverSignatureError(envelope.receiver_id)

    t = _Tracker(state)
    receiver_cert_role = registry.role_of(envelope.receiver_id)
    if receiver_cert_role is None:
        raise AccessDeniedError(f"unknown receiver {envelope.receiver_id}")
    receiver_cert = Certificate(envelope.receiver_id, receiver_cert_role, "", receiver_key, b"")
    decision = _check_access_tracked(t, receiver_cert, envelope.record_id, Right.READ, now)
    if not decision.allowed:
        raise AccessDeniedError(decision.reason)
    record = ShareRecord(
        envelope.record_id, envelope.sender_id, envelope.receiver_id,
        envelope.request_id, envelope.payload_digest,
        envelope.sender_signature, envelope.receiver_signature, now,
    )
    t.put(share_key(envelope.request_id), record.encode())
    return t.rwset()


def _check_access_tracked(
    t: _Tracker, requester_cert: Certificate, record_id: bytes, action: Right, now: int
) -> AccessDecision:
    raw = t.get(abstract_key(record_id))
    if raw is None:
        raise UnknownRecordError(record_id.hex())
    abstract = HealthFileAbstract.decode(raw)
    if requester_cert.subject_id == abstract.patient_id:
        return AccessDecision(True, "owner")
    statuses = []
    for ref in (record_id.hex(), WILDCARD):
        raw_grant = t.get(grant_key(abstract.patient_id, ref, requester_cert.subject_id))
        if raw_grant is not None:
            statuses.append(_grant_status(t, PermissionGrant.decode(raw_grant), action, now))
    if "ok" in statuses:
        return AccessDecision(True, "grant")
    if "revoked" in statuses:
        return AccessDecision(False, "revoked")
    if "expired" in statuses:
        return AccessDecision(False, "expired")
    return AccessDecision(False, "no-grant")


def register_medicine_receipt(
    state: StateView,
    registry: RegistryView,
    pharmacy_cert: Certificate,
    lot: RegisterLotPayload,
    now: int,
) -> RwSet:
    _require_cert(registry, pharmacy_cert)
    if pharmacy_cert.role is not Role.PHARMACY:
        raise NotPharmacyError(pharmacy_cert.subject_id)
    if lot.expiration_day < day_of(now):
        raise ExpiredLotError(lot.qr_code)
    t = _Tracker(state)
    key = lot_key(lot.qr_code)
    if t.get(key) is not None:
        raise DuplicateQrError(lot.qr_code)
    record = DrugLot(
        lot.qr_code, lot.name, lot.expiration_day, lot.tracking_number,
        pharmacy_cert.subject_id, lot.quantity, now,
    )
    t.put(key, record.encode())
    return t.rwset()


def sell_medicine(
    state: StateView,
    registry: RegistryView,
    pharmacy_cert: Certificate,
    prescription: Prescription,
    qr_code: str,
    now: int,
) -> RwSet:
    """Dispense one unit against a single-use signed prescription."""
    _require_cert(registry, pharmacy_cert)
    if pharmacy_cert.role is not Role.PHARMACY:
        raise NotPharmacyError(pharmacy_cert.subject_id)
    prescriber_key = registry.public_key(prescription.prescriber_id)
    if (
        prescriber_key is None
        or registry.role_of(prescription.prescriber_id) not in PROVIDER_ROLES
        or not verify(prescriber_key, prescription.signed_content(), prescription.signed_hash)
    ):
        raise BadPrescriptionSignatureError(prescription.prescription_id.hex())

    t = _Tracker(state)
    rx_key = prescription_key(prescription.prescription_id)
    if t.get(rx_key) is not None:
        raise PrescriptionConsumedError(prescription.prescription_id.hex())
    raw_lot = t.get(lot_key(qr_code))
    if raw_lot is None:
        raise UnknownLotError(qr_code)
    lot = DrugLot.decode(raw_lot)
    if lot.name != prescription.drug_name:
        raise DrugMismatchError(f"{lot.name} != {prescription.drug_name}")
    if lot.expiration_day < day_of(now):
        raise ExpiredLotError(qr_code)
    if lot.quantity < 1:
        raise OutOfStockError(qr_code)

    t.put(lot_key(qr_code), DrugLot(
        lot.qr_code, lot.name, lot.expiration_day, lot.tracking_number,
        lot.pharmacy_id, lot.quantity - 1, lot.registered_at,
    ).encode())
    t.put(rx_key, PrescriptionUse(
        prescription.prescription_id, prescription.patient_id,
        prescription.prescriber_id, prescription.drug_name, now,
    ).encode())
    t.put(sale_key(prescription.prescription_id), SaleRecord(
        prescription.patient_id, prescription.prescription_id, qr_code,
        pharmacy_cert.subject_id, now,
    ).encode())
    return t.rwset()


def query_drug(state: StateView, qr_code: str) -> DrugLot:
    raw = state.get(lot_key(qr_code))
    if raw is None:
        raise UnknownLotError(qr_code)
    return DrugLot.decode(raw)


# ---------------------------------------------------------------------------
# controller reports


@dataclass(frozen=True)
class HealthAuditReport:
    abstracts: int
    grants_active: int
    grants_revoked: int
    grants_expired: int
    delegations_active: int
    shares: int
    share_violations: int


def audit_health_files(state: StateView, registry: RegistryView, now: int) -> HealthAuditReport:
    """Health-file control summary over the committed state.

    Any committed share whose two signatures no longer verify is counted
    as a violation; contract preconditions keep that at zero.
    """
    abstracts = sum(1 for _ in state.items_with_prefix("hfa/"))
    active = revoked = expired = 0
    tracker = _Tracker(state)
    for _, raw in state.items_with_prefix("grant/"):
        grant = PermissionGrant.decode(raw)
        if grant.revoked or (
            grant.grantor_id != grant.patient_id
            and not _active_delegation(tracker, grant.patient_id, grant.grantor_id)
        ):
            revoked += 1
        elif grant.expires_at is not None and now >= grant.expires_at:
            expired += 1
        else:
            active += 1
    delegations = sum(
        1 for _, raw in state.items_with_prefix("deleg/") if not Delegation.decode(raw).revoked
    )
    shares = violations = 0
    for _, raw in state.items_with_prefix("share/"):
        shares += 1
        rec = ShareRecord.decode(raw)
        content = (
            codec.enc_bytes(rec.record_id)
            + codec.enc_bytes(rec.request_id)
            + codec.enc_bytes(rec.payload_digest)
        )
        sender_key = registry.public_key(rec.sender_id)
        receiver_key = registry.public_key(rec.receiver_id)
        if (
            sender_key is None
            or receiver_key is None
            or not verify(sender_key, content, rec.sender_signature)
            or not verify(receiver_key, content, rec.receiver_signature)
        ):
            violations += 1
    return HealthAuditReport(
        abstracts, active, revoked, expired, delegations, shares, violations
    )


@dataclass(frozen=True)
class DrugAvailability:
    name: str
    total_quantity: int
    lots: int
    shortage: bool


@dataclass(frozen=True)
class SupplyReport:
    availability: tuple[DrugAvailability, ...]
    near_expiry: tuple[str, ...]  # qr codes expiring within the window
    shortages: tuple[str, ...]
    sales_total: int


def supply_report(
    state: StateView,
    now: int,
    shortage_threshold: int,
    expiry_window_days: int = 30,
) -> SupplyReport:
    """Drug-supply control summary: availability, shortages, near expiry."""
    totals: dict[str, list[int]] = {}
    near: list[str] = []
    today = day_of(now)
    for _, raw in state.items_with_prefix("lot/"):
        lot = DrugLot.decode(raw)
        bucket = totals.setdefault(lot.name, [0, 0])
        bucket[0] += lot.quantity
        bucket[1] += 1
        if today <= lot.expiration_day <= today + expiry_window_days:
            near.append(lot.qr_code)
    sales = sum(1 for _ in state.items_with_prefix("sale/"))
    rows = tuple(
        DrugAvailability(name, qty, lots, qty < shortage_threshold)
        for name, (qty, lots) in sorted(totals.items())
    )
    shortages = tuple(row.name for row in rows if row.shortage)
    return SupplyReport(rows, tuple(sorted(near)), shortages, sales)


# ---------------------------------------------------------------------------
# helpers for building prescriptions and share envelopes


def make_prescription(
    prescriber_identity, patient_id: str, drug_name: str, nonce: bytes
) -> Prescription:
    """Create a prescription signed by the prescriber. The nonce makes the
    id unique per issuance."""
    prescription_id = codec.sha256(
        codec.enc_str(patient_id) + codec.enc_str(drug_name) + codec.enc_bytes(nonce)
    )
    unsigned = Prescription(prescription_id, patient_id, prescriber_identity.id, drug_name, b"")
    return Prescription(
        prescription_id, patient_id, prescriber_identity.id, drug_name,
        sign(prescriber_identity, unsigned.signed_content()),
    )


def make_share_envelope(
    sender_identity, receiver_identity, record_id: bytes, payload_bytes: bytes, nonce: bytes
) -> SharePayload:
    """Dual-signed share envelope over (record, request, payload digest)."""
    request_id = codec.sha256(
        codec.enc_bytes(record_id)
        + codec.enc_str(sender_identity.id)
        + codec.enc_str(receiver_identity.id)
        + codec.enc_bytes(nonce)
    )
    payload_digest = codec.sha256(payload_bytes)
    content = (
        codec.enc_bytes(record_id)
        + codec.enc_bytes(request_id)
        + codec.enc_bytes(payload_digest)
    )
    return SharePayload(
        record_id=record_id,
        sender_id=sender_identity.id,
        receiver_id=receiver_identity.id,
        request_id=request_id,
        payload_digest=payload_digest,
        sender_signature=sign(sender_identity, content),
        receiver_signature=sign(receiver_identity, content),
    )

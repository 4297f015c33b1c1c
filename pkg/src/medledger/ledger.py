"""Hash-chained per-channel block storage and derived key-value state.

Each channel owns one ledger: an append-only chain of blocks starting at
a genesis block plus the world state produced by applying every valid
transaction in chain order. Blocks link through a digest of the previous
header (number, prev hash, data hash), and the data hash covers the full
canonical encoding of every transaction, so any byte change anywhere in
a committed block is detectable.

Validation is Fabric-style: a transaction commits only if its signatures
verify, the endorsement policy is met, and every key it read is still at
the version it observed. Within a block the first writer wins; later
transactions touching the same key are flagged invalid.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from . import codec
from .contracts import Payload, decode_payload, encode_payload
from .identity import (
    Certificate,
    Role,
    decode_certificate,
    encode_certificate,
    verify,
    verify_certificate,
)

GENESIS_PREV = b"\x00" * codec.DIGEST_SIZE

KeyResolver = Callable[[str], "bytes | None"]


class LedgerError(Exception):
    pass


class EmptyQueueError(LedgerError):
    pass


class ChainGapError(LedgerError):
    pass


class HashMismatchError(LedgerError):
    pass


class NotValidatedError(LedgerError):
    pass


class DumpFormatError(LedgerError):
    pass


def hash_content(data: bytes) -> bytes:
    """32-byte content digest used everywhere on the ledger (SHA-256)."""
    return codec.sha256(data)


# ---------------------------------------------------------------------------
# transactions


@dataclass(frozen=True)
class Transaction:
    tx_id: bytes
    channel_id: str
    payload: Payload
    read_set: tuple[tuple[str, int], ...]
    write_set: tuple[tuple[str, bytes], ...]
    creator_cert: Certificate
    signatures: tuple[tuple[str, bytes], ...]
    created_at: int


def transaction_content(tx: Transaction) -> bytes:
    """Canonical encoding of everything the tx id commits to."""
    return (
        codec.enc_str(tx.channel_id)
        + codec.enc_bytes(encode_payload(tx.payload))
        + codec.enc_seq(
            codec.enc_str(k) + codec.enc_u64(v) for k, v in tx.read_set
        )
        + codec.enc_seq(
            codec.enc_str(k) + codec.enc_bytes(v) for k, v in tx.write_set
        )
        + codec.enc_bytes(encode_certificate(tx.creator_cert))
        + codec.enc_seq(
            codec.enc_str(signer) + codec.enc_bytes(sig)
            for signer, sig in tx.signatures
        )
        + codec.enc_u64(tx.created_at)
    )


def make_transaction(
    channel_id: str,
    payload: Payload,
    read_set: Sequence[tuple[str, int]],
    write_set: Sequence[tuple[str, bytes]],
    creator_cert: Certificate,
    signatures: Sequence[tuple[str, bytes]],
    created_at: int,
) -> Transaction:
    tx = Transaction(
        b"", channel_id, payload, tuple(read_set), tuple(write_set),
        creator_cert, tuple(signatures), created_at,
    )
    return replace(tx, tx_id=codec.sha256(transaction_content(tx)))


def encode_transaction(tx: Transaction) -> bytes:
    return codec.enc_bytes(tx.tx_id) + transaction_content(tx)


def decode_transaction(r: codec.Reader) -> Transaction:
    tx_id = r.bytes_()
    channel_id = r.str_()
    payload = decode_payload(codec.Reader(r.bytes_()))
    read_set = tuple((r.str_(), r.u64()) for _ in range(r.count()))
    write_set = tuple((r.str_(), r.bytes_()) for _ in range(r.count()))
    creator_cert = decode_certificate(codec.Reader(r.bytes_()))
    signatures = tuple((r.str_(), r.bytes_()) for _ in range(r.count()))
    created_at = r.u64()
    return Transaction(
        tx_id, channel_id, payload, read_set, write_set,
        creator_cert, signatures, created_at,
    )


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class Block:
    number: int
    prev_hash: bytes
    data_hash: bytes
    transactions: tuple[Transaction, ...]
    validity: tuple[bool, ...] | None = None


def compute_data_hash(transactions: Sequence[Transaction]) -> bytes:
    return codec.sha256(
        codec.enc_seq(codec.enc_bytes(encode_transaction(tx)) for tx in transactions)
    )


def header_bytes(block: Block) -> bytes:
    return (
        codec.enc_u64(block.number)
        + codec.enc_bytes(block.prev_hash)
        + codec.enc_bytes(block.data_hash)
    )


def header_digest(block: Block) -> bytes:
    return codec.sha256(header_bytes(block))


def make_block(number: int, prev_hash: bytes, transactions: Sequence[Transaction]) -> Block:
    txs = tuple(transactions)
    return Block(number, prev_hash, compute_data_hash(txs), txs)


def genesis_block() -> Block:
    return Block(0, GENESIS_PREV, compute_data_hash(()), (), ())


def encode_block(block: Block) -> bytes:
    out = header_bytes(block)
    out += codec.enc_seq(
        codec.enc_bytes(encode_transaction(tx)) for tx in block.transactions
    )
    if block.validity is None:
        out += codec.enc_u8(0)
    else:
        out += codec.enc_u8(1) + codec.enc_seq(
            codec.enc_u8(int(flag)) for flag in block.validity
        )
    return out


def decode_block(data: bytes) -> Block:
    r = codec.Reader(data)
    number = r.u64()
    prev_hash = r.bytes_()
    data_hash = r.bytes_()
    txs = tuple(
        decode_transaction(codec.Reader(r.bytes_())) for _ in range(r.count())
    )
    validity: tuple[bool, ...] | None = None
    if r.u8() == 1:
        validity = tuple(bool(r.u8()) for _ in range(r.count()))
    r.expect_done()
    return Block(number, prev_hash, data_hash, txs, validity)


# ---------------------------------------------------------------------------
# world state


class WorldState:
    """Key-value view derived from the chain; versions only ever grow."""

    def __init__(self) -> None:
        self._entries: dict[str, tuple[bytes, int]] = {}

    def get(self, key: str) -> bytes | None:
        entry = self._entries.get(key)
        return entry[0] if entry else None

    def version(self, key: str) -> int:
        entry = self._entries.get(key)
        return entry[1] if entry else 0

    def put(self, key: str, value: bytes) -> None:
        _, version = self._entries.get(key, (b"", 0))
        self._entries[key] = (value, version + 1)

    def items_with_prefix(self, prefix: str) -> Iterable[tuple[str, bytes]]:
        for key in sorted(self._entries):
            if key.startswith(prefix):
                yield key, self._entries[key][0]

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, WorldState) and self._entries == other._entries

    def copy(self) -> "WorldState":
        dup = WorldState()
        dup._entries = dict(self._entries)
        return dup


@dataclass
class Ledger:
    channel_id: str
    blocks: list[Block] = field(default_factory=lambda: [genesis_block()])
    state: WorldState = field(default_factory=WorldState)

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def last_block(self) -> Block:
        return self.blocks[-1]


def new_ledger(channel_id: str) -> Ledger:
    return Ledger(channel_id)


# ---------------------------------------------------------------------------
# block lifecycle


@dataclass(frozen=True)
class BlockConfig:
    """Orderer batching policy. Both knobs shape throughput directly."""

    max_txs: int = 10
    timeout_ticks: int = 2000


def cut_block(
    pending: Sequence[Transaction], config: BlockConfig, prev: Block
) -> Block:
    """Cut the next block from the front of the pending queue."""
    if not pending:
        raise EmptyQueueError("no pending transactions")
    take = list(pending[: config.max_txs])
    return make_block(prev.number + 1, header_digest(prev), take)


def validate_block(
    ledger: Ledger,
    block: Block,
    endorsement_policy: int,
    key_resolver: KeyResolver,
) -> tuple[bool, ...]:
    """Per-transaction validity flags for the next block of this chain.

    A transaction is valid iff its id recomputes, its creator certificate
    verifies, all its signatures verify over the payload bytes with at
    least `endorsement_policy` endorsers besides the creator, and its
    read set still matches the (in-block effective) state versions with
    no write collision against an earlier valid transaction.
    """
    last = ledger.last_block
    if block.number != last.number + 1:
        raise ChainGapError(f"expected block {last.number + 1}, got {block.number}")
    if block.prev_hash != header_digest(last):
        raise HashMismatchError(f"prev_hash mismatch at block {block.number}")
    if block.data_hash != compute_data_hash(block.transactions):
        raise HashMismatchError(f"data_hash mismatch at block {block.number}")

    effective: dict[str, int] = {}
    flags: list[bool] = []
    for tx in block.transactions:
        flags.append(
            _transaction_valid(ledger, tx, endorsement_policy, key_resolver, effective)
        )
        if flags[-1]:
            for key, _ in tx.write_set:
                effective[key] = effective.get(key, ledger.state.version(key)) + 1
    return tuple(flags)


def _transaction_valid(
    ledger: Ledger,
    tx: Transaction,
    endorsement_policy: int,
    key_resolver: KeyResolver,
    effective: dict[str, int],
) -> bool:
    if tx.channel_id != ledger.channel_id:
        return False
    if codec.sha256(transaction_content(tx)) != tx.tx_id:
        return False
    issuer_key = key_resolver(tx.creator_cert.issuer_id)
    if issuer_key is None or not verify_certificate(tx.creator_cert, issuer_key):
        return False

    payload_bytes = encode_payload(tx.payload)
    endorsers = 0
    creator_signed = False
    for signer_id, sig in tx.signatures:
        signer_key = (
            tx.creator_cert.subject_public_key
            if signer_id == tx.creator_cert.subject_id
            else key_resolver(signer_id)
        )
        if signer_key is None or not verify(signer_key, payload_bytes, sig):
            return False
        if signer_id == tx.creator_cert.subject_id:
            creator_signed = True
        else:
            endorsers += 1
    if not creator_signed or endorsers < endorsement_policy:
        return False

    written = set(effective)
    for key, version in tx.read_set:
        current = effective.get(key, ledger.state.version(key))
        if current != version:
            return False
    for key, _ in tx.write_set:
        if key in written:
            return False
    return True


def apply_block(ledger: Ledger, block: Block) -> Ledger:
    """Append a validated block and fold valid write sets into the state."""
    if block.validity is None or len(block.validity) != len(block.transactions):
        raise NotValidatedError(f"block {block.number} has no validity flags")
    if block.number != ledger.last_block.number + 1:
        raise ChainGapError(
            f"expected block {ledger.last_block.number + 1}, got {block.number}"
        )
    for tx, valid in zip(block.transactions, block.validity):
        if not valid:
            continue
        for key, value in tx.write_set:
            ledger.state.put(key, value)
    ledger.blocks.append(block)
    return ledger


# ---------------------------------------------------------------------------
# verification and replay


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    first_bad_block: int | None = None
    reason: str | None = None


def verify_chain_detail(
    ledger: Ledger,
    *,
    key_resolver: KeyResolver | None = None,
    endorsement_policy: int | None = None,
) -> ChainCheck:
    """Structural chain verification; deep when a resolver is supplied.

    Structural: numbering, header linkage, data hashes and tx ids from
    genesis. Deep additionally replays validation from a fresh state and
    requires the stored validity flags and the derived world state to
    match exactly.
    """
    blocks = ledger.blocks
    if not blocks:
        return ChainCheck(False, None, "empty chain")
    g = blocks[0]
    if g.number != 0 or g.prev_hash != GENESIS_PREV or g.transactions:
        return ChainCheck(False, 0, "bad genesis")
    if g.data_hash != compute_data_hash(()):
        return ChainCheck(False, 0, "bad genesis data hash")

    for i in range(1, len(blocks)):
        block, prev = blocks[i], blocks[i - 1]
        if block.number != i:
            return ChainCheck(False, i, "block number out of sequence")
        if block.prev_hash != header_digest(prev):
            return ChainCheck(False, i, "prev_hash mismatch")
        if block.data_hash != compute_data_hash(block.transactions):
            return ChainCheck(False, i, "data_hash mismatch")
        for tx in block.transactions:
            if codec.sha256(transaction_content(tx)) != tx.tx_id:
                return ChainCheck(False, i, "tx id mismatch")
            if tx.channel_id != ledger.channel_id:
                return ChainCheck(False, i, "tx channel mismatch")
        if block.validity is None or len(block.validity) != len(block.transactions):
            return ChainCheck(False, i, "missing validity flags")

    if key_resolver is not None:
        if endorsement_policy is None:
            raise ValueError("deep verification requires the endorsement policy")
        shadow = Ledger(ledger.channel_id)
        for i in range(1, len(blocks)):
            block = blocks[i]
            flags = validate_block(shadow, block, endorsement_policy, key_resolver)
            if flags != block.validity:
                return ChainCheck(False, i, "validity flags do not replay")
            apply_block(shadow, block)
        if shadow.state != ledger.state:
            return ChainCheck(False, len(blocks) - 1, "replayed state differs")
    return ChainCheck(True)


def verify_chain(
    ledger: Ledger,
    *,
    key_resolver: KeyResolver | None = None,
    endorsement_policy: int | None = None,
) -> bool:
    return verify_chain_detail(
        ledger, key_resolver=key_resolver, endorsement_policy=endorsement_policy
    ).ok


def replay_state(ledger: Ledger) -> WorldState:
    """Rebuild the world state from the chain using the stored flags."""
    state = WorldState()
    for block in ledger.blocks:
        if block.validity is None:
            raise NotValidatedError(f"block {block.number} has no validity flags")
        for tx, valid in zip(block.transactions, block.validity):
            if not valid:
                continue
            for key, value in tx.write_set:
                state.put(key, value)
    return state


# ---------------------------------------------------------------------------
# dump format


DUMP_HEADER = "medledger-dump v1"


def export_ledger(
    ledger: Ledger,
    actors: Iterable[tuple[str, Role, bytes]],
    endorsement_policy: int,
) -> str:
    """Newline-delimited dump: diffable fields plus full block bytes.

    The actor roster carries the public keys needed to re-verify every
    signature offline, so a dump is self-contained for verification.
    """
    lines = [
        f"{DUMP_HEADER} channel={ledger.channel_id} "
        f"blocks={len(ledger.blocks)} policy={endorsement_policy}"
    ]
    for actor_id, role, public_key in actors:
        lines.append(f"actor {actor_id} {role.value} {public_key.hex()}")
    for block in ledger.blocks:
        tx_ids = ",".join(tx.tx_id.hex() for tx in block.transactions) or "-"
        flags = (
            "".join("V" if f else "I" for f in block.validity)
            if block.validity is not None
            else ""
        ) or "-"
        raw = base64.b64encode(encode_block(block)).decode("ascii")
        lines.append(
            f"block {block.number} prev={block.prev_hash.hex()} "
            f"data={block.data_hash.hex()} txs={tx_ids} flags={flags} raw={raw}"
        )
    return "\n".join(lines) + "\n"


def verify_dump(text: str) -> ChainCheck:
    """Parse and fully verify a ledger dump.

    The textual fields are cross-checked against the decoded block bytes,
    then the chain is verified deeply with the embedded roster. Any parse
    failure is treated as tampering, not as a benign format issue.
    """
    try:
        ledger, policy, resolver = import_ledger(text)
    except DumpFormatError as exc:
        bad = getattr(exc, "block_number", None)
        return ChainCheck(False, bad, f"unreadable dump: {exc}")
    return verify_chain_detail(
        ledger, key_resolver=resolver, endorsement_policy=policy
    )


def import_ledger(text: str) -> tuple[Ledger, int, KeyResolver]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or not lines[0].startswith(DUMP_HEADER):
        raise DumpFormatError("missing dump header")
    header_fields = dict(
        part.split("=", 1) for part in lines[0].split()[2:] if "=" in part
    )
    try:
        channel_id = header_fields["channel"]
        declared_blocks = int(header_fields["blocks"])
        policy = int(header_fields["policy"])
    except (KeyError, ValueError) as exc:
        raise DumpFormatError(f"bad header: {exc}") from exc

    roster: dict[str, bytes] = {}
    blocks: list[Block] = []
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "actor":
            try:
                actor_id, _role, pub_hex = rest.split(" ")
                roster[actor_id] = bytes.fromhex(pub_hex)
            except ValueError as exc:
                raise DumpFormatError(f"bad actor line: {exc}") from exc
        elif kind == "block":
            blocks.append(_parse_block_line(rest, channel_id))
        else:
            raise DumpFormatError(f"unknown line kind: {kind}")

    if len(blocks) != declared_blocks:
        raise DumpFormatError(
            f"header declares {declared_blocks} blocks, found {len(blocks)}"
        )
    ledger = Ledger(channel_id, blocks, WorldState())
    for block in blocks:
        if block.validity is None:
            continue
        for tx, valid in zip(block.transactions, block.validity):
            if valid:
                for key, value in tx.write_set:
                    ledger.state.put(key, value)
    return ledger, policy, roster.get


def _parse_block_line(rest: str, channel_id: str) -> Block:
    fields: dict[str, str] = {}
    head, *pairs = rest.split(" ")
    for pair in pairs:
        key, _, value = pair.partition("=")
        fields[key] = value
    try:
        number = int(head)
        prev_hash = bytes.fromhex(fields["prev"])
        data_hash = bytes.fromhex(fields["data"])
        raw = base64.b64decode(fields["raw"], validate=True)
        block = decode_block(raw)
    except (KeyError, ValueError, codec.DecodeError) as exc:
        err = DumpFormatError(f"unreadable block line: {exc}")
        err.block_number = _safe_int(head)  # type: ignore[attr-defined]
        raise err from exc

    tx_ids = fields.get("txs", "-")
    flags = fields.get("flags", "-")
    expect_ids = ",".join(tx.tx_id.hex() for tx in block.transactions) or "-"
    expect_flags = (
        "".join("V" if f else "I" for f in block.validity)
        if block.validity is not None
        else ""
    ) or "-"
    if (
        block.number != number
        or block.prev_hash != prev_hash
        or block.data_hash != data_hash
        or tx_ids != expect_ids
        or flags != expect_flags
    ):
        err = DumpFormatError("text fields disagree with block bytes")
        err.block_number = number  # type: ignore[attr-defined]
        raise err
    return block


def _safe_int(value: str) -> int | None:
    try:
        return int(value)
    except ValueError:
        return None

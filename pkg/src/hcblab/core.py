"""Domain types, hashing, short IDs and the canonical wire encoding.

Wire layout (all integers big-endian):

Transaction (110 + len(payload) bytes)::

    sender            20   account id, unsigned
    nonce              8
    max_fee            8   wei
    max_priority_fee   8   wei
    signature         62   zero filler, kept so the minimal tx is 110 bytes
    payload_len        4
    payload            payload_len

BlockHeader (120 bytes)::

    height 8 | parent_hash 32 | body_hash 32 | base_fee 8 | gas_used 8 |
    timestamp 8 (ms) | coinbase 20 | reserved 4

Block::

    header 120 | count 4 | tx ...

CompactBlock and HcbBlock share one layout; a compact block is an HCB block
with no full entries::

    header 120 | count 4 | n_full 4 | full index 2 * n_full |
    short ids 6 * (count - n_full) | full tx ...
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

GWEI = 10**9
SHORT_ID_LEN = 6
HASH_LEN = 32
TX_MIN_SIZE = 110
HEADER_SIZE = 120
ANNOUNCE_SIZE = HASH_LEN + 8

_TX_PREFIX = struct.Struct(">20sQQQ62sI")
_HEADER = struct.Struct(">Q32s32sQQQ20s4s")
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")
_ZERO_SIG = bytes(62)

ShortId = bytes


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


EMPTY_DIGEST = digest(b"")


def derive_short_id(tx_hash: bytes) -> ShortId:
    """First six bytes of the transaction hash (unsalted)."""
    return tx_hash[:SHORT_ID_LEN]


@dataclass(frozen=True, eq=False, slots=True)
class Transaction:
    sender: int
    nonce: int
    max_fee: int
    max_priority_fee: int
    payload_seed: bytes = b""
    tx_hash: bytes = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.nonce < 0 or self.max_fee < 0 or self.max_priority_fee < 0:
            raise ValueError("transaction integers must be unsigned")
        if self.max_priority_fee > self.max_fee:
            raise ValueError("max_priority_fee exceeds max_fee")
        object.__setattr__(self, "tx_hash", digest(self.encode()))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Transaction) and other.tx_hash == self.tx_hash

    def __hash__(self) -> int:
        return hash(self.tx_hash)

    @property
    def size_bytes(self) -> int:
        return TX_MIN_SIZE + len(self.payload_seed)

    @property
    def short_id(self) -> ShortId:
        return self.tx_hash[:SHORT_ID_LEN]

    def effective_fee(self, base_fee: int) -> int:
        """EIP-1559 price paid per unit: min(max_fee, base_fee + tip)."""
        return min(self.max_fee, base_fee + self.max_priority_fee)

    def encode(self) -> bytes:
        return _TX_PREFIX.pack(
            self.sender.to_bytes(20, "big"),
            self.nonce,
            self.max_fee,
            self.max_priority_fee,
            _ZERO_SIG,
            len(self.payload_seed),
        ) + self.payload_seed

    @classmethod
    def decode_from(cls, buf: bytes, offset: int = 0) -> tuple["Transaction", int]:
        sender, nonce, max_fee, prio, _sig, plen = _TX_PREFIX.unpack_from(buf, offset)
        start = offset + _TX_PREFIX.size
        payload = bytes(buf[start:start + plen])
        if len(payload) != plen:
            raise ValueError("truncated transaction payload")
        tx = cls(int.from_bytes(sender, "big"), nonce, max_fee, prio, payload)
        return tx, start + plen


@dataclass(frozen=True, slots=True)
class BlockHeader:
    height: int
    parent_hash: bytes
    body_hash: bytes
    base_fee: int
    gas_used: int
    timestamp: int
    coinbase: int = 0

    def encode(self) -> bytes:
        return _HEADER.pack(
            self.height,
            self.parent_hash,
            self.body_hash,
            self.base_fee,
            self.gas_used,
            self.timestamp,
            self.coinbase.to_bytes(20, "big"),
            bytes(4),
        )

    @classmethod
    def decode_from(cls, buf: bytes, offset: int = 0) -> tuple["BlockHeader", int]:
        h, parent, body, base, gas, ts, coinbase, _ = _HEADER.unpack_from(buf, offset)
        return cls(h, parent, body, base, gas, ts, int.from_bytes(coinbase, "big")), offset + HEADER_SIZE

    @property
    def block_hash(self) -> bytes:
        return digest(self.encode())


GENESIS = BlockHeader(0, bytes(HASH_LEN), EMPTY_DIGEST, 0, 0, 0)


def compute_body_hash(body: Iterable[Transaction]) -> bytes:
    return digest(b"".join(tx.tx_hash for tx in body))


@dataclass(frozen=True, slots=True)
class Block:
    header: BlockHeader
    body: tuple[Transaction, ...]

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def block_hash(self) -> bytes:
        return self.header.block_hash

    def encode(self) -> bytes:
        parts = [self.header.encode(), _U32.pack(len(self.body))]
        parts.extend(tx.encode() for tx in self.body)
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "Block":
        header, off = BlockHeader.decode_from(buf)
        (n,) = _U32.unpack_from(buf, off)
        off += 4
        body = []
        for _ in range(n):
            tx, off = Transaction.decode_from(buf, off)
            body.append(tx)
        return cls(header, tuple(body))

    def serialized_size(self) -> int:
        return HEADER_SIZE + 4 + sum(tx.size_bytes for tx in self.body)


def nonce_order_ok(body: Sequence[Transaction]) -> bool:
    last: dict[int, int] = {}
    for tx in body:
        prev = last.get(tx.sender)
        if prev is not None and tx.nonce <= prev:
            return False
        last[tx.sender] = tx.nonce
    return True


def check_block(block: Block) -> None:
    """Raise ValueError if the block violates its structural invariants."""
    if compute_body_hash(block.body) != block.header.body_hash:
        raise ValueError(f"body hash mismatch at height {block.height}")
    if not nonce_order_ok(block.body):
        raise ValueError(f"per-sender nonce order violated at height {block.height}")


def make_block(
    parent: BlockHeader,
    body: Sequence[Transaction],
    base_fee: int,
    timestamp: int,
    coinbase: int = 0,
) -> Block:
    body = tuple(body)
    header = BlockHeader(
        height=parent.height + 1,
        parent_hash=parent.block_hash,
        body_hash=compute_body_hash(body),
        base_fee=base_fee,
        gas_used=len(body),
        timestamp=int(timestamp),
        coinbase=coinbase,
    )
    return Block(header, body)


Entry = Union[Transaction, ShortId]


def _encode_entries(header: BlockHeader, entries: Sequence[Entry]) -> bytes:
    full_idx = [i for i, e in enumerate(entries) if isinstance(e, Transaction)]
    if len(entries) > 0xFFFF:
        raise ValueError("too many entries for a 16-bit index")
    parts = [header.encode(), _U32.pack(len(entries)), _U32.pack(len(full_idx))]
    parts.extend(_U16.pack(i) for i in full_idx)
    parts.extend(e for e in entries if not isinstance(e, Transaction))
    parts.extend(entries[i].encode() for i in full_idx)
    return b"".join(parts)


def _decode_entries(buf: bytes) -> tuple[BlockHeader, list[Entry]]:
    header, off = BlockHeader.decode_from(buf)
    n, k = struct.unpack_from(">II", buf, off)
    off += 8
    full_idx = [_U16.unpack_from(buf, off + 2 * j)[0] for j in range(k)]
    off += 2 * k
    full_set = set(full_idx)
    entries: list[Entry | None] = [None] * n
    for i in range(n):
        if i not in full_set:
            entries[i] = bytes(buf[off:off + SHORT_ID_LEN])
            off += SHORT_ID_LEN
    for i in full_idx:
        tx, off = Transaction.decode_from(buf, off)
        entries[i] = tx
    return header, entries  # type: ignore[return-value]


@dataclass(frozen=True, slots=True)
class HcbBlock:
    header: BlockHeader
    entries: tuple[Entry, ...]

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def block_hash(self) -> bytes:
        return self.header.block_hash

    @property
    def n_full(self) -> int:
        return sum(1 for e in self.entries if isinstance(e, Transaction))

    def encode(self) -> bytes:
        return _encode_entries(self.header, self.entries)

    @classmethod
    def decode(cls, buf: bytes) -> "HcbBlock":
        header, entries = _decode_entries(buf)
        return cls(header, tuple(entries))

    def serialized_size(self) -> int:
        size = HEADER_SIZE + 8
        for e in self.entries:
            if isinstance(e, Transaction):
                size += 2 + e.size_bytes
            else:
                size += SHORT_ID_LEN
        return size


@dataclass(frozen=True, slots=True)
class CompactBlock:
    header: BlockHeader
    entries: tuple[ShortId, ...]

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def block_hash(self) -> bytes:
        return self.header.block_hash

    def encode(self) -> bytes:
        return _encode_entries(self.header, self.entries)

    @classmethod
    def decode(cls, buf: bytes) -> "CompactBlock":
        header, entries = _decode_entries(buf)
        if any(isinstance(e, Transaction) for e in entries):
            raise ValueError("compact block carries full transactions")
        return cls(header, tuple(entries))  # type: ignore[arg-type]

    def serialized_size(self) -> int:
        return HEADER_SIZE + 8 + SHORT_ID_LEN * len(self.entries)


def to_compact(block: Block) -> CompactBlock:
    return CompactBlock(block.header, tuple(tx.short_id for tx in block.body))


def to_hcb(block: Block, miss_flags: Sequence[bool]) -> HcbBlock:
    """Carry full transactions where a miss is predicted, short IDs elsewhere."""
    if len(miss_flags) != len(block.body):
        raise ValueError(
            f"miss_flags has {len(miss_flags)} entries for a {len(block.body)}-tx body"
        )
    entries = tuple(tx if miss else tx.short_id for tx, miss in zip(block.body, miss_flags))
    return HcbBlock(block.header, entries)

"""Per-node block propagation for BHP, BCB, SCB, PCB and HCB.

A node pushes each new block to ceil(sqrt(n)) randomly chosen neighbours
that are not yet known to have it and announces the hash to the rest. What
a push carries depends on the protocol kind:

* BHP: the full block.
* BCB / SCB: a compact block (short IDs only).
* PCB / HCB: a hybrid block, with full transactions where the predictor
  expects the receiver to miss them.

SCB and HCB nodes also keep a secondary pool of fee-evicted transactions,
which is consulted when short IDs are identified.

Compact and hybrid blocks share one wire layout, so a hybrid block with no
full entries is byte-for-byte a compact block.
"""

from __future__ import annotations

import enum
import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np

from .core import (
    ANNOUNCE_SIZE,
    HASH_LEN,
    HEADER_SIZE,
    Block,
    BlockHeader,
    CompactBlock,
    HcbBlock,
    ShortId,
    Transaction,
    check_block,
    compute_body_hash,
    to_compact,
    to_hcb,
)
from .prediction import FeatureVector, Predictor
from .secondary_pool import DualPool, FeeContext
from .txpool import DEFAULT_GAS_BUDGET

if TYPE_CHECKING:
    from .netsim import World

COMBINATION_CAP = 1024
ANNOUNCE_WAIT_MS = 500.0


class ProtocolKind(str, enum.Enum):
    BHP = "BHP"
    BCB = "BCB"
    SCB = "SCB"
    PCB = "PCB"
    HCB = "HCB"

    @property
    def compact(self) -> bool:
        return self is not ProtocolKind.BHP

    @property
    def uses_secondary(self) -> bool:
        return self in (ProtocolKind.SCB, ProtocolKind.HCB)

    @property
    def uses_prediction(self) -> bool:
        return self in (ProtocolKind.PCB, ProtocolKind.HCB)


class ProtocolError(Exception):
    """A peer sent something that cannot be honoured (misbehaviour signal)."""


# ----- messages -----

_U32 = struct.Struct(">I")
_ANNOUNCE = struct.Struct(">Q32s")


def _encode_txs(txs: Sequence[Transaction]) -> bytes:
    return _U32.pack(len(txs)) + b"".join(tx.encode() for tx in txs)


def _txs_size(txs: Sequence[Transaction]) -> int:
    return 4 + sum(tx.size_bytes for tx in txs)


@dataclass(frozen=True)
class SendHcbHello:
    tag = "hello"

    def encode(self) -> bytes:
        return b"\x01"

    def wire_size(self) -> int:
        return 1


@dataclass(frozen=True)
class FullBlockMsg:
    block: Block
    tag = "full_block"

    def encode(self) -> bytes:
        return self.block.encode()

    def wire_size(self) -> int:
        return self.block.serialized_size()


@dataclass(frozen=True)
class EntriesBlockMsg:
    """CompactBlock or HcbBlock; `features` is sender-side metadata, never on the wire."""

    block: Union[CompactBlock, HcbBlock]
    features: Optional[dict] = field(default=None, compare=False)
    tag = "entries_block"

    def encode(self) -> bytes:
        return self.block.encode()

    def wire_size(self) -> int:
        return self.block.serialized_size()


@dataclass(frozen=True)
class BlockHashAnnounce:
    height: int
    block_hash: bytes
    tag = "announce"

    def encode(self) -> bytes:
        return _ANNOUNCE.pack(self.height, self.block_hash)

    def wire_size(self) -> int:
        return ANNOUNCE_SIZE


@dataclass(frozen=True)
class GetHeader:
    block_hash: bytes
    tag = "get_header"

    def encode(self) -> bytes:
        return self.block_hash

    def wire_size(self) -> int:
        return HASH_LEN


@dataclass(frozen=True)
class HeaderMsg:
    header: BlockHeader
    tag = "header"

    def encode(self) -> bytes:
        return self.header.encode()

    def wire_size(self) -> int:
        return HEADER_SIZE


@dataclass(frozen=True)
class GetBody:
    block_hash: bytes
    tag = "get_body"

    def encode(self) -> bytes:
        return self.block_hash

    def wire_size(self) -> int:
        return HASH_LEN


@dataclass(frozen=True)
class BodyMsg:
    block_hash: bytes
    txs: tuple[Transaction, ...]
    tag = "body"

    def encode(self) -> bytes:
        return self.block_hash + _encode_txs(self.txs)

    def wire_size(self) -> int:
        return HASH_LEN + _txs_size(self.txs)


@dataclass(frozen=True)
class GetMissingTxs:
    block_hash: bytes
    sids: tuple[ShortId, ...]
    tag = "get_missing"

    def __post_init__(self) -> None:
        if len(set(self.sids)) != len(self.sids):
            raise ValueError("GetMissingTxs lists must be duplicate-free")

    def encode(self) -> bytes:
        return self.block_hash + _U32.pack(len(self.sids)) + b"".join(self.sids)

    def wire_size(self) -> int:
        return HASH_LEN + 4 + 6 * len(self.sids)


@dataclass(frozen=True)
class MissingTxs:
    block_hash: bytes
    txs: tuple[Transaction, ...]
    tag = "missing_txs"

    def encode(self) -> bytes:
        return self.block_hash + _encode_txs(self.txs)

    def wire_size(self) -> int:
        return HASH_LEN + _txs_size(self.txs)


Message = Union[
    SendHcbHello, FullBlockMsg, EntriesBlockMsg, BlockHashAnnounce, GetHeader,
    HeaderMsg, GetBody, BodyMsg, GetMissingTxs, MissingTxs,
]


# ----- identification and reconstruction -----

@dataclass
class ReconstructionState:
    pending_block: Union[CompactBlock, HcbBlock]
    u_m: set = field(default_factory=set)
    u_p: dict = field(default_factory=dict)  # sid -> the single candidate
    u_c: dict = field(default_factory=dict)  # sid -> list of candidates
    requested_from: Optional[int] = None
    t_arrive: float = 0.0
    t_send: float = 0.0
    t_request: float = 0.0
    requested: tuple = ()
    first: bool = True

    @property
    def n_short(self) -> int:
        return sum(1 for e in self.pending_block.entries if not isinstance(e, Transaction))


@dataclass(frozen=True)
class Reconstructed:
    block: Block


@dataclass(frozen=True)
class NeedTxs:
    sids: tuple[ShortId, ...]


def identify(index, entries_block: Union[CompactBlock, HcbBlock]) -> ReconstructionState:
    """Split the Short entries into missing / unique / collided by map lookup."""
    st = ReconstructionState(entries_block)
    for e in entries_block.entries:
        if isinstance(e, Transaction):
            continue
        if e in st.u_m or e in st.u_p or e in st.u_c:
            continue
        cand = index.lookup(e)
        if not cand:
            st.u_m.add(e)
        elif len(cand) == 1:
            st.u_p[e] = cand[0]
        else:
            st.u_c[e] = cand
    return st


def _ordered(sids, entries) -> tuple:
    """Deterministic order: first appearance in the block."""
    out, seen = [], set()
    wanted = set(sids)
    for e in entries:
        if not isinstance(e, Transaction) and e in wanted and e not in seen:
            seen.add(e)
            out.append(e)
    return tuple(out)


def _assemble(entries, chosen: dict) -> tuple[Transaction, ...]:
    return tuple(e if isinstance(e, Transaction) else chosen[e] for e in entries)


def resolve(st: ReconstructionState, cap: int = COMBINATION_CAP) -> Union[Reconstructed, NeedTxs]:
    entries = st.pending_block.entries
    header = st.pending_block.header
    if st.u_m:
        return NeedTxs(_ordered(st.u_m | set(st.u_c), entries))
    if not st.u_c:
        body = _assemble(entries, st.u_p)
        if compute_body_hash(body) != header.body_hash:
            raise ProtocolError(f"body hash mismatch at height {header.height}")
        return Reconstructed(Block(header, body))
    collided = _ordered(st.u_c, entries)
    count = math.prod(len(st.u_c[s]) for s in collided)
    if count <= cap:
        for combo in itertools.product(*(st.u_c[s] for s in collided)):
            chosen = dict(st.u_p)
            chosen.update(zip(collided, combo))
            body = _assemble(entries, chosen)
            if compute_body_hash(body) == header.body_hash:
                return Reconstructed(Block(header, body))
    return NeedTxs(collided)


def fill_missing(st: ReconstructionState, txs: Sequence[Transaction]) -> Block:
    """Complete a pending block with a MissingTxs response; verifies the body hash."""
    supplied: dict[ShortId, list[Transaction]] = {}
    for tx in txs:
        supplied.setdefault(tx.short_id, []).append(tx)
    requested = set(st.requested)
    cursor = {sid: 0 for sid in supplied}
    body = []
    for e in st.pending_block.entries:
        if isinstance(e, Transaction):
            body.append(e)
        elif e in requested:
            got = supplied.get(e)
            if not got:
                raise ProtocolError("response lacks a requested short id")
            i = cursor[e]
            body.append(got[min(i, len(got) - 1)])
            cursor[e] = i + 1
        else:
            body.append(st.u_p[e])
    block = Block(st.pending_block.header, tuple(body))
    if compute_body_hash(block.body) != block.header.body_hash:
        raise ProtocolError(f"body hash mismatch at height {block.height}")
    return block


def on_get_missing(sent: Block, sids: Sequence[ShortId]) -> MissingTxs:
    """Answer with every body transaction carrying each requested short id."""
    by_sid: dict[ShortId, list[Transaction]] = {}
    for tx in sent.body:
        by_sid.setdefault(tx.short_id, []).append(tx)
    out = []
    for sid in sids:
        txs = by_sid.get(sid)
        if not txs:
            raise ProtocolError(f"short id {sid.hex()} not in block {sent.height}")
        out.extend(txs)
    return MissingTxs(sent.block_hash, tuple(out))


# ----- node state machine -----

@dataclass
class NodeConfig:
    node_id: int
    kind: ProtocolKind
    hcb_capable: bool = True
    miner: bool = False
    selfish: bool = False
    pending_cap: int = 5120
    queue_cap: int = 1024
    secondary_cap: int = 200_000


class Node:
    def __init__(
        self,
        cfg: NodeConfig,
        world: "World",
        neighbors: Sequence[int],
        predictor: Predictor,
        rng: np.random.Generator,
        genesis: BlockHeader,
        gas_budget: int = DEFAULT_GAS_BUDGET,
    ):
        self.cfg = cfg
        self.id = cfg.node_id
        self.kind = cfg.kind
        self.world = world
        self.neighbors = sorted(neighbors)
        self.predictor = predictor
        self.rng = rng
        self.gas_budget = gas_budget
        sec_cap = cfg.secondary_cap if cfg.kind.uses_secondary else 0
        self.pools = DualPool(cfg.pending_cap, cfg.queue_cap, sec_cap, genesis.base_fee)
        self.head = genesis
        self.head_time = float("-inf")
        self.have: set[bytes] = {genesis.block_hash}
        self.sent: dict[bytes, Block] = {}
        self.known_by_peer: dict[bytes, set[int]] = {}
        self.peer_capable: dict[int, bool] = {}
        self.reconstructing: dict[bytes, ReconstructionState] = {}
        self.fetching: dict[bytes, int] = {}
        self.waiting: dict[bytes, int] = {}
        self.buffer: dict[int, tuple[Block, float]] = {}
        self.counted: set[bytes] = set()
        self.headers: dict[bytes, BlockHeader] = {}

    # ----- helpers -----

    def _send(self, dst: int, msg: Message, now: float) -> None:
        self.world.send(self.id, dst, msg, now)

    def _knows(self, block_hash: bytes, peer: int) -> None:
        self.known_by_peer.setdefault(block_hash, set()).add(peer)

    def start(self, now: float) -> None:
        if self.kind.compact and self.cfg.hcb_capable:
            for p in self.neighbors:
                self._send(p, SendHcbHello(), now)

    def handle(self, src: int, msg: Message, now: float) -> None:
        self.world.catch_up(self, now)
        tag = msg.tag
        if tag == "entries_block":
            self.on_entries_block(src, msg, now)
        elif tag == "full_block":
            self._knows(msg.block.block_hash, src)
            self._log_reception(src, msg.block.header, "full_block", msg.wire_size(), now)
            self.on_block_complete(msg.block, now)
        elif tag == "announce":
            self.on_announce(src, msg, now)
        elif tag == "get_missing":
            sent = self.sent.get(msg.block_hash)
            if sent is None:
                self.world.log({"event": "protocol_error", "t": now, "node": self.id,
                                "peer": src, "reason": "get_missing for unsent block"})
                return
            try:
                resp = on_get_missing(sent, msg.sids)
            except ProtocolError as exc:
                self.world.log({"event": "protocol_error", "t": now, "node": self.id,
                                "peer": src, "reason": str(exc)})
                return
            self._send(src, resp, now)
        elif tag == "missing_txs":
            self.on_missing_txs(src, msg, now)
        elif tag == "get_header":
            blk = self.sent.get(msg.block_hash)
            if blk is not None:
                self._send(src, HeaderMsg(blk.header), now)
        elif tag == "header":
            h = msg.header.block_hash
            if not self._busy(h):
                self.headers[h] = msg.header
                self._send(src, GetBody(h), now)
        elif tag == "get_body":
            blk = self.sent.get(msg.block_hash)
            if blk is not None:
                self._send(src, BodyMsg(blk.block_hash, blk.body), now)
        elif tag == "body":
            self.on_body(src, msg, now)
        elif tag == "hello":
            self.peer_capable[src] = True

    def _busy(self, block_hash: bytes) -> bool:
        return block_hash in self.have or block_hash in self.reconstructing or any(
            b.block_hash == block_hash for b, _ in self.buffer.values()
        )

    # ----- block receipt paths -----

    def on_entries_block(self, src: int, msg: EntriesBlockMsg, now: float) -> None:
        blk = msg.block
        h = blk.block_hash
        self._knows(h, src)
        if self._busy(h) or blk.height <= self.head.height:
            return
        self._log_reception(src, blk.header, "entries_block", msg.wire_size(), now)
        st = identify(self.pools.index, blk)
        st.requested_from = src
        st.t_arrive = now
        st.t_send = self.world.current_send_time
        first = h not in self.counted
        self.counted.add(h)
        if first and self.world.collect_samples and msg.features is not None:
            self._log_samples(blk, msg.features)
        try:
            res = resolve(st)
        except ProtocolError as exc:
            self.world.log({"event": "protocol_error", "t": now, "node": self.id,
                            "peer": src, "reason": str(exc)})
            return
        if isinstance(res, Reconstructed):
            if first:
                self._log_reconstruct(st, now, matched=True)
            self.on_block_complete(res.block, now)
            return
        st.requested = res.sids
        st.t_request = now
        st.first = first
        self.reconstructing[h] = st
        self._send(src, GetMissingTxs(h, res.sids), now)

    def on_missing_txs(self, src: int, msg: MissingTxs, now: float) -> None:
        st = self.reconstructing.pop(msg.block_hash, None)
        if st is None:
            return
        try:
            block = fill_missing(st, msg.txs)
        except ProtocolError as exc:
            self.world.log({"event": "protocol_error", "t": now, "node": self.id,
                            "peer": src, "reason": str(exc)})
            return
        if st.first:
            self._log_reconstruct(st, now, matched=False)
            self._log_misses(st, block)
        self.on_block_complete(block, now)

    def on_announce(self, src: int, msg: BlockHashAnnounce, now: float) -> None:
        h = msg.block_hash
        self._knows(h, src)
        if self._busy(h) or msg.height <= self.head.height or h in self.fetching or h in self.waiting:
            return
        self.waiting[h] = src
        self.world.set_timer(self, now + ANNOUNCE_WAIT_MS, h)

    def on_timer(self, block_hash: bytes, now: float) -> None:
        self.world.catch_up(self, now)
        src = self.waiting.pop(block_hash, None)
        if src is None or self._busy(block_hash):
            return
        self.fetching[block_hash] = src
        self._send(src, GetHeader(block_hash), now)

    def on_body(self, src: int, msg: BodyMsg, now: float) -> None:
        self.fetching.pop(msg.block_hash, None)
        header = self.headers.pop(msg.block_hash, None)
        if header is None or self._busy(msg.block_hash):
            return
        block = Block(header, msg.txs)
        self._log_reception(src, header, "body", msg.wire_size(), now)
        self.on_block_complete(block, now)

    # ----- completion, application, forwarding -----

    def on_block_complete(self, block: Block, now: float) -> None:
        h = block.block_hash
        if h in self.have:
            return
        try:
            check_block(block)
        except ValueError as exc:
            self.world.log({"event": "protocol_error", "t": now, "node": self.id,
                            "reason": str(exc)})
            return
        if block.height == self.head.height + 1 and block.header.parent_hash == self.head.block_hash:
            self._apply(block, now)
            while self.head.height + 1 in self.buffer:
                nxt, _ = self.buffer.pop(self.head.height + 1)
                if nxt.header.parent_hash == self.head.block_hash:
                    self._apply(nxt, now)
        elif self.head.height + 1 < block.height <= self.head.height + 2:
            self.buffer[block.height] = (block, now)
        else:
            self.world.log({"event": "block_dropped", "t": now, "node": self.id,
                            "height": block.height})

    def _apply(self, block: Block, now: float, held: Optional[list[bool]] = None) -> None:
        if held is None:
            held = [tx.tx_hash in self.pools for tx in block.body]
        fee_ctx = FeeContext.after(block.header, self.gas_budget)
        self.pools.apply_block(block, fee_ctx, run_restore=self.kind.uses_secondary)
        if self.world.debug:
            self.pools.check_invariants()
        self.head = block.header
        self.head_time = now
        self.have.add(block.block_hash)
        self.world.on_applied(self, block, now)
        self.on_new_block(block, held, now)

    def mine(self, block: Block, now: float) -> None:
        """Adopt a block this node just assembled and push it out."""
        self._apply(block, now, held=[True] * len(block.body))

    def _features(self, block: Block, held: list[bool], now: float) -> dict:
        m = len(block.body)
        base = block.header.base_fee
        ages = np.zeros(m)
        for i, tx in enumerate(block.body):
            t = self.world.first_seen(self.id, tx.tx_hash)
            if t is not None and t <= now:
                ages[i] = (now - t) / 1000.0
        return {
            "fee_gwei": np.array([tx.effective_fee(base) / 1e9 for tx in block.body]),
            "age_s": ages,
            "rank_ratio": np.arange(1, m + 1) / max(m, 1),
            "present_at_sender": np.array(held, dtype=bool),
        }

    def _miss_flags(self, features: dict) -> list[bool]:
        m = len(features["rank_ratio"])
        fvs = [
            FeatureVector(
                float(features["fee_gwei"][i]), float(features["age_s"][i]),
                float(features["rank_ratio"][i]), bool(features["present_at_sender"][i]),
            )
            for i in range(m)
        ]
        return self.predictor.predict_missing(fvs)

    def on_new_block(self, block: Block, held: list[bool], now: float) -> None:
        h = block.block_hash
        self.sent[h] = block
        known = self.known_by_peer.get(h, set())
        unaware = [p for p in self.neighbors if p not in known]
        if not unaware:
            return
        k = math.ceil(math.sqrt(len(unaware)))
        picks = self.rng.choice(len(unaware), size=k, replace=False)
        chosen = sorted(unaware[i] for i in picks)
        features = None
        if self.kind.uses_prediction or self.world.collect_samples:
            features = self._features(block, held, now)
        entries_msg = None
        if self.kind.compact:
            if self.kind.uses_prediction:
                flags = self._miss_flags(features)
                entries_msg = EntriesBlockMsg(to_hcb(block, flags), features)
            else:
                entries_msg = EntriesBlockMsg(to_compact(block), features)
        full_msg = None
        chosen_set = set(chosen)
        for p in unaware:
            self._knows(h, p)
            if p in chosen_set:
                if entries_msg is not None and self.peer_capable.get(p, False):
                    self._send(p, entries_msg, now)
                else:
                    if full_msg is None:
                        full_msg = FullBlockMsg(block)
                    self._send(p, full_msg, now)
            else:
                self._send(p, BlockHashAnnounce(block.height, h), now)

    # ----- metrics -----

    def _log_reception(self, src, header, via, size, now) -> None:
        self.world.log({"event": "block_received", "t": now, "node": self.id, "peer": src,
                        "height": header.height, "via": via, "bytes": size})

    def _log_reconstruct(self, st: ReconstructionState, now: float, matched: bool) -> None:
        blk = st.pending_block
        n = len(blk.entries)
        n_full = n - st.n_short
        self.world.log({
            "event": "reconstruct", "t": now, "node": self.id, "peer": st.requested_from,
            "height": blk.height, "entries": n, "full": n_full,
            "u_m": len(st.u_m), "u_p": len(st.u_p), "u_c": len(st.u_c),
            "short": st.n_short, "matched": matched,
            "t_send": st.t_send, "t_arrive": st.t_arrive, "t_done": now,
            "rtt": 0.0 if matched else now - st.t_request,
            "present": n if matched else n - self._missing_positions(st),
        })

    @staticmethod
    def _missing_positions(st: ReconstructionState) -> int:
        req = set(st.requested)
        return sum(1 for e in st.pending_block.entries
                   if not isinstance(e, Transaction) and e in req)

    def _log_misses(self, st: ReconstructionState, block: Block) -> None:
        t_c = st.t_arrive
        for e, tx in zip(st.pending_block.entries, block.body):
            if isinstance(e, Transaction) or e not in st.u_m:
                continue
            self.world.log({
                "event": "miss", "node": self.id, "height": block.height,
                "tx": tx.tx_hash.hex(), "t_r": self.world.first_seen(self.id, tx.tx_hash),
                "t_c": t_c,
            })

    def _log_samples(self, blk, features: dict) -> None:
        labels = []
        for e in blk.entries:
            if isinstance(e, Transaction):
                labels.append(e.tx_hash in self.pools)
            else:
                labels.append(bool(self.pools.index.lookup(e)))
        self.world.add_samples(features, np.array(labels, dtype=bool))

"""Secondary pool for fee-evicted transactions, the shared short-ID map, and
the block-wise update with transaction restore.

The secondary pool never feeds block assembly. It only widens the set of
transactions a node can recognise when a compact block arrives.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional

from sortedcontainers import SortedList

from .core import Block, BlockHeader, ShortId, Transaction, derive_short_id
from .txpool import (
    DEFAULT_GAS_BUDGET,
    AdmitOutcome,
    AdmitStatus,
    TxPool,
    next_base_fee,
)

DEFAULT_SECONDARY_CAP = 200_000


class ShortIdMap:
    """ShortId -> transactions currently held by a node (both pools)."""

    def __init__(self) -> None:
        self._map: dict[ShortId, list[Transaction]] = {}

    def add(self, tx: Transaction) -> None:
        bucket = self._map.setdefault(tx.short_id, [])
        if tx not in bucket:
            bucket.append(tx)

    def remove(self, tx: Transaction) -> None:
        bucket = self._map.get(tx.short_id)
        if bucket is None:
            return
        try:
            bucket.remove(tx)
        except ValueError:
            return
        if not bucket:
            del self._map[tx.short_id]

    def lookup(self, sid: ShortId) -> list[Transaction]:
        return list(self._map.get(sid, ()))

    def __contains__(self, sid: ShortId) -> bool:
        return sid in self._map

    def __len__(self) -> int:
        return sum(len(b) for b in self._map.values())

    def as_sets(self) -> dict[ShortId, frozenset]:
        return {sid: frozenset(tx.tx_hash for tx in b) for sid, b in self._map.items()}

    @classmethod
    def rebuild(cls, txs: Iterable[Transaction]) -> "ShortIdMap":
        m = cls()
        for tx in txs:
            m.add(tx)
        return m


@dataclass(frozen=True)
class FeeContext:
    base_fee: int
    elasticity: Fraction = Fraction(1, 8)

    def __post_init__(self) -> None:
        if self.base_fee <= 0:
            raise ValueError("base_fee must be positive")

    @classmethod
    def after(cls, header: BlockHeader, gas_budget: int = DEFAULT_GAS_BUDGET) -> "FeeContext":
        """Pricing context for the block that will extend `header`."""
        return cls(next_base_fee(header, gas_budget))


class AcceptStatus(enum.Enum):
    STORED = "stored"
    DROPPED_LOWEST_FEE = "dropped_lowest_fee"
    DROPPED_SELF = "dropped_self"


@dataclass
class AcceptResult:
    status: AcceptStatus
    dropped: Optional[Transaction] = None


class SecondaryPool:
    def __init__(
        self,
        cap: int = DEFAULT_SECONDARY_CAP,
        index: Optional[ShortIdMap] = None,
        base_fee: int = 1,
    ):
        self.cap = cap
        self.index = index if index is not None else ShortIdMap()
        self.base_fee = base_fee
        self.by_hash: dict[bytes, Transaction] = {}
        self.t_r: dict[bytes, float] = {}
        self.fee: dict[bytes, int] = {}
        self.by_sender: dict[int, set[bytes]] = {}
        # descending by fee; among equal fees the older entry sorts last so it drops first
        self._keys = SortedList()

    def __len__(self) -> int:
        return len(self.by_hash)

    def __contains__(self, tx_hash: bytes) -> bool:
        return tx_hash in self.by_hash

    def _key(self, h: bytes) -> tuple:
        return (-self.fee[h], -self.t_r[h], h)

    def top(self) -> Optional[Transaction]:
        return self.by_hash[self._keys[0][2]] if self._keys else None

    def lowest(self) -> Optional[Transaction]:
        return self.by_hash[self._keys[-1][2]] if self._keys else None

    def txs_descending(self) -> list[Transaction]:
        return [self.by_hash[k[2]] for k in self._keys]

    def insert(self, tx: Transaction, t_r: float, reindex: bool = True) -> None:
        """Store without a cap check (restore demotions; trimmed afterwards).

        reindex=False skips the short-ID map, for moves between pools that
        share it.
        """
        h = tx.tx_hash
        if h in self.by_hash:
            return
        self.by_hash[h] = tx
        self.t_r[h] = t_r
        self.fee[h] = tx.effective_fee(self.base_fee)
        self.by_sender.setdefault(tx.sender, set()).add(h)
        self._keys.add(self._key(h))
        if reindex:
            self.index.add(tx)

    def remove(self, tx: Transaction, reindex: bool = True) -> None:
        h = tx.tx_hash
        self._keys.remove(self._key(h))
        del self.by_hash[h]
        del self.t_r[h]
        del self.fee[h]
        own = self.by_sender[tx.sender]
        own.discard(h)
        if not own:
            del self.by_sender[tx.sender]
        if reindex:
            self.index.remove(tx)

    def pop_top(self) -> tuple[Transaction, float]:
        tx = self.top()
        t_r = self.t_r[tx.tx_hash]
        self.remove(tx)
        return tx, t_r

    def accept_evicted(self, tx: Transaction, t_r: float = 0.0) -> AcceptResult:
        if tx.tx_hash in self.by_hash:
            return AcceptResult(AcceptStatus.STORED)
        if len(self.by_hash) < self.cap:
            self.insert(tx, t_r)
            return AcceptResult(AcceptStatus.STORED)
        low = self.lowest()
        if low is None or tx.effective_fee(self.base_fee) <= self.fee[low.tx_hash]:
            return AcceptResult(AcceptStatus.DROPPED_SELF, tx)
        self.remove(low)
        self.insert(tx, t_r)
        return AcceptResult(AcceptStatus.DROPPED_LOWEST_FEE, low)

    def trim(self) -> int:
        dropped = 0
        while len(self.by_hash) > self.cap:
            self.remove(self.lowest())
            dropped += 1
        return dropped

    def set_dynamic_cap(self, unconfirmed_estimate: int) -> int:
        if unconfirmed_estimate <= 0:
            raise ValueError("unconfirmed_estimate must be positive")
        self.cap = unconfirmed_estimate
        self.trim()
        return self.cap

    def lookup(self, sid: ShortId) -> list[Transaction]:
        return self.index.lookup(sid)

    def refresh_fees(self, base_fee: int) -> int:
        self.base_fee = base_fee
        changed = 0
        for h, tx in self.by_hash.items():
            f = tx.effective_fee(base_fee)
            if f != self.fee[h]:
                self.fee[h] = f
                changed += 1
        if changed:
            self._keys = SortedList(self._key(h) for h in self.by_hash)
        return changed

    def drop_invalid(self, pool: TxPool, senders: Iterable[int]) -> int:
        """Remove stale-nonce and unaffordable entries, judged by the pool's account view."""
        removed = 0
        for sender in senders:
            hashes = self.by_sender.get(sender)
            if not hashes:
                continue
            acct = pool.account(sender)
            for h in sorted(hashes):
                tx = self.by_hash[h]
                if tx.nonce < acct.next_nonce or tx.max_fee > acct.balance:
                    self.remove(tx)
                    removed += 1
        return removed

    def check_invariants(self) -> None:
        assert len(self.by_hash) <= self.cap
        assert len(self._keys) == len(self.by_hash)


@dataclass
class RestoreReport:
    restored_pending: int = 0
    restored_queue: int = 0
    demoted: int = 0
    iterations: int = 0


def restore(pool: TxPool, sp: SecondaryPool, max_iterations: Optional[int] = None) -> RestoreReport:
    """Move high-fee secondary transactions back into Pending or Queue.

    Each pass looks at the highest-fee secondary transaction and at the
    current minimum fees of Pending and Queue. A continuous-nonce candidate
    may enter Pending and a gapped one may enter Queue, each only when it
    pays strictly more than that sub-pool's minimum. A full sub-pool first
    gives up its minimum (plus, for Pending, every tx left nonce-discontinuous)
    to the secondary pool. A candidate that fits neither branch is passed
    over; after any move the scan starts again from the top.

    If demoting the Pending minimum breaks the candidate's own nonce
    continuity, the candidate stays in the secondary pool and the scan
    restarts. The loop stops after len(sp) passes even if moves remain.

    Restarting naively rescans every passed-over transaction. A move only
    raises the two minimum fees and only changes nonce continuity for the
    senders it touched, so every other passed-over transaction would be
    passed over again; those rescans are counted in bulk.
    """
    report = RestoreReport()
    limit = len(sp) if max_iterations is None else max_iterations
    active = SortedList(sp._keys)
    skipped = SortedList()
    skipped_of: dict[int, list[tuple]] = {}
    frontier: Optional[tuple] = None  # skipped keys up to here were rescanned since the last move
    neg_inf = float("-inf")

    def minima() -> tuple[float, float]:
        p_keys = pool._pending_keys
        q_keys = pool._queue_keys
        return (p_keys[0][0] if p_keys else neg_inf, q_keys[0][0] if q_keys else neg_inf)

    def rescan(upto: Optional[tuple]) -> bool:
        """Account for skipped keys between the frontier and `upto`; True means stop."""
        nonlocal frontier
        lo = 0 if frontier is None else skipped.bisect_right(frontier)
        hi = len(skipped) if upto is None else skipped.bisect_left(upto)
        if hi <= lo:
            return False
        gamma = min(minima())
        # the first rescanned key whose fee no longer beats the minimum ends the loop
        stop_at = max(lo, skipped.bisect_left((-gamma,))) if gamma > neg_inf else hi
        if stop_at < hi:
            report.iterations = min(report.iterations + stop_at - lo + 1, limit)
            return True
        report.iterations = min(report.iterations + hi - lo, limit)
        frontier = skipped[hi - 1]
        return report.iterations >= limit

    def unskip(senders) -> None:
        for s in senders:
            for key in skipped_of.pop(s, ()):
                skipped.remove(key)
                active.add(key)

    def put_back(tx: Transaction, t_r: float) -> None:
        sp.insert(tx, t_r, reindex=False)
        active.add(sp._key(tx.tx_hash))

    def take(key: tuple) -> float:
        active.remove(key)
        h = key[2]
        t_r = sp.t_r[h]
        sp.remove(sp.by_hash[h], reindex=False)
        return t_r

    def moved(touched: set, before: tuple[float, float]) -> None:
        nonlocal frontier
        frontier = None
        after = minima()
        if after[0] < before[0] or after[1] < before[1]:
            unskip(list(skipped_of))
        else:
            unskip(touched)

    while report.iterations < limit:
        key = active[0] if active else None
        if rescan(key) or key is None:
            break
        report.iterations += 1
        beta = -key[0]
        gamma_p, gamma_q = before = minima()
        if not min(gamma_p, gamma_q) < beta:
            break
        cand = sp.by_hash[key[2]]
        continuous = pool.is_continuous(cand)
        if continuous and gamma_p < beta:
            touched = {cand.sender}
            if pool.pending_full:
                for tx, t_r in pool.pop_pending_min(reindex=False):
                    put_back(tx, t_r)
                    touched.add(tx.sender)
                    report.demoted += 1
                if not pool.is_continuous(cand):
                    moved(touched, before)
                    continue
            pool.insert_pending(cand, take(key), reindex=False)
            report.restored_pending += 1
            moved(touched, before)
        elif not continuous and gamma_q < beta:
            if pool.queue_full:
                tx, t_r = pool.pop_queue_min(reindex=False)
                put_back(tx, t_r)
                report.demoted += 1
            pool.insert_queue(cand, take(key), reindex=False)
            report.restored_queue += 1
            moved(set(), before)
        else:
            active.remove(key)
            skipped.add(key)
            skipped_of.setdefault(cand.sender, []).append(key)
            frontier = key
    return report


@dataclass
class UpdateReport:
    invalidated: int = 0
    refeed: int = 0
    restored_pending: int = 0
    restored_queue: int = 0
    trimmed: int = 0

    def as_dict(self) -> dict:
        return {
            "invalidated": self.invalidated,
            "refee'd": self.refeed,
            "restored_pending": self.restored_pending,
            "restored_queue": self.restored_queue,
        }


def block_update(
    sp: SecondaryPool,
    pool: TxPool,
    block: Block,
    fee_ctx: FeeContext,
    run_restore: bool = True,
) -> UpdateReport:
    """Block-wise update: drop invalid txs, reprice both pools, restore, trim."""
    report = UpdateReport()
    report.invalidated = pool.remove_confirmed(block)
    senders = sorted({tx.sender for tx in block.body})
    report.invalidated += sp.drop_invalid(pool, senders)
    report.refeed = pool.refresh_fees(fee_ctx.base_fee) + sp.refresh_fees(fee_ctx.base_fee)
    if run_restore:
        r = restore(pool, sp)
        report.restored_pending = r.restored_pending
        report.restored_queue = r.restored_queue
    report.trimmed = sp.trim()
    return report


class DualPool:
    """A node's Tx-Pool and Secondary Pool sharing one short-ID map.

    With secondary_cap = 0 this is a plain Tx-Pool plus index.
    """

    def __init__(
        self,
        pending_cap: int,
        queue_cap: int,
        secondary_cap: int = 0,
        base_fee: int = 1,
        balances: Optional[dict[int, int]] = None,
    ):
        self.index = ShortIdMap()
        self.pool = TxPool(pending_cap, queue_cap, base_fee, balances)
        self.pool.index = self.index
        self.secondary = SecondaryPool(secondary_cap, self.index, base_fee)
        self.pool.on_spill = self._spill

    def _spill(self, tx: Transaction, t_r: float) -> None:
        self.secondary.accept_evicted(tx, t_r)

    def __contains__(self, tx_hash: bytes) -> bool:
        return tx_hash in self.pool or tx_hash in self.secondary

    def get(self, tx_hash: bytes) -> Optional[Transaction]:
        return self.pool.by_hash.get(tx_hash) or self.secondary.by_hash.get(tx_hash)

    def admit(self, tx: Transaction, now: float) -> AdmitOutcome:
        if tx.tx_hash in self.secondary:
            return AdmitOutcome(AdmitStatus.REJECTED_INVALID)
        out = self.pool.admit(tx, now)
        for e, t_r in zip(out.evicted, out.evicted_t_r):
            self.secondary.accept_evicted(e, t_r)
        if out.status is AdmitStatus.REJECTED_LOW_FEE:
            self.secondary.accept_evicted(tx, now)
        return out

    def lookup(self, sid: ShortId) -> list[Transaction]:
        return self.index.lookup(sid)

    def apply_block(self, block: Block, fee_ctx: FeeContext, run_restore: bool) -> UpdateReport:
        return block_update(self.secondary, self.pool, block, fee_ctx, run_restore)

    def all_txs(self) -> list[Transaction]:
        return list(self.pool.by_hash.values()) + list(self.secondary.by_hash.values())

    def check_invariants(self) -> None:
        self.pool.check_invariants()
        self.secondary.check_invariants()
        expect = ShortIdMap.rebuild(self.all_txs()).as_sets()
        assert expect == self.index.as_sets()

    def dump(self) -> list[dict]:
        rows = []
        for name, hashes, fees, src in (
            ("pending", self.pool.pending, self.pool.fee, self.pool.by_hash),
            ("queue", self.pool.queue, self.pool.fee, self.pool.by_hash),
            ("secondary", self.secondary.by_hash.keys(), self.secondary.fee, self.secondary.by_hash),
        ):
            for h in hashes:
                tx = src[h]
                rows.append({
                    "hash": h.hex(),
                    "short_id": derive_short_id(h).hex(),
                    "pool": name,
                    "fee": fees[h],
                    "nonce": tx.nonce,
                })
        rows.sort(key=lambda r: (r["pool"], r["hash"]))
        return rows

    def to_json(self) -> str:
        return json.dumps(self.dump(), sort_keys=True)

"""Primary transaction pool: Pending (nonce-continuous) and Queue (nonce-gapped).

Both sub-pools are ordered by effective fee. When a sub-pool is full a new
transaction may displace the cheapest resident, and only if it pays strictly
more. Pending eviction candidates are per-sender tails (the highest pending
nonce of each sender), so evicting never opens a nonce gap inside Pending.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from sortedcontainers import SortedList

from .core import Block, BlockHeader, Transaction, make_block

DEFAULT_PENDING_CAP = 5120
DEFAULT_QUEUE_CAP = 1024
DEFAULT_GAS_BUDGET = 200
DEFAULT_BALANCE = 10**30


def next_base_fee(parent: BlockHeader, gas_budget: int = DEFAULT_GAS_BUDGET) -> int:
    """EIP-1559 base-fee update with elasticity 1/8 around target = budget / 2."""
    base = parent.base_fee
    if parent.height == 0:
        return base
    target = max(gas_budget // 2, 1)
    used = parent.gas_used
    if used == target:
        return base
    if used > target:
        return base + max(base * (used - target) // target // 8, 1)
    return max(base - base * (target - used) // target // 8, 1)


class AdmitStatus(enum.Enum):
    TO_PENDING = "to_pending"
    TO_QUEUE = "to_queue"
    REJECTED_LOW_FEE = "rejected_low_fee"
    REJECTED_INVALID = "rejected_invalid"


@dataclass
class AdmitOutcome:
    status: AdmitStatus
    evicted: list[Transaction] = field(default_factory=list)
    evicted_t_r: list[float] = field(default_factory=list)

    @property
    def admitted(self) -> bool:
        return self.status in (AdmitStatus.TO_PENDING, AdmitStatus.TO_QUEUE)


@dataclass
class Account:
    next_nonce: int = 0
    balance: int = DEFAULT_BALANCE


class TxPool:
    def __init__(
        self,
        pending_cap: int = DEFAULT_PENDING_CAP,
        queue_cap: int = DEFAULT_QUEUE_CAP,
        base_fee: int = 1,
        balances: Optional[dict[int, int]] = None,
        default_balance: int = DEFAULT_BALANCE,
    ):
        self.pending_cap = pending_cap
        self.queue_cap = queue_cap
        self.base_fee = base_fee
        self.accounts: dict[int, Account] = {}
        self._balances = balances or {}
        self._default_balance = default_balance

        self.by_hash: dict[bytes, Transaction] = {}
        self.t_r: dict[bytes, float] = {}
        self.fee: dict[bytes, int] = {}
        self.by_sender: dict[int, dict[int, Transaction]] = {}
        self.run_len: dict[int, int] = {}
        self.pending: set[bytes] = set()
        self.queue: set[bytes] = set()

        self._pending_keys = SortedList()
        self._tail_keys = SortedList()
        self._queue_keys = SortedList()
        self._tail_of: dict[int, tuple] = {}

        # short-ID index and spill hook, wired by DualPool
        self.index = None
        self.on_spill: Optional[Callable[[Transaction, float], None]] = None

    # ----- account view -----

    def account(self, sender: int) -> Account:
        acct = self.accounts.get(sender)
        if acct is None:
            acct = Account(0, self._balances.get(sender, self._default_balance))
            self.accounts[sender] = acct
        return acct

    def is_continuous(self, tx: Transaction) -> bool:
        return tx.nonce == self.account(tx.sender).next_nonce + self.run_len.get(tx.sender, 0)

    # ----- sizes and extrema -----

    def __len__(self) -> int:
        return len(self.by_hash)

    def __contains__(self, tx_hash: bytes) -> bool:
        return tx_hash in self.by_hash

    @property
    def pending_full(self) -> bool:
        return len(self.pending) >= self.pending_cap

    @property
    def queue_full(self) -> bool:
        return len(self.queue) >= self.queue_cap

    def _key(self, h: bytes) -> tuple:
        return (self.fee[h], self.t_r[h], h)

    def pending_min(self) -> Optional[Transaction]:
        return self.by_hash[self._pending_keys[0][2]] if self._pending_keys else None

    def queue_min(self) -> Optional[Transaction]:
        return self.by_hash[self._queue_keys[0][2]] if self._queue_keys else None

    def _min_tail(self, exclude_sender: int) -> Optional[tuple]:
        for key in self._tail_keys:
            if self.by_hash[key[2]].sender != exclude_sender:
                return key
        return None

    # ----- low-level placement -----

    def _set_tail(self, sender: int) -> None:
        old = self._tail_of.pop(sender, None)
        if old is not None:
            self._tail_keys.remove(old)
        n = self.run_len.get(sender, 0)
        if n:
            tx = self.by_sender[sender][self.account(sender).next_nonce + n - 1]
            key = self._key(tx.tx_hash)
            self._tail_of[sender] = key
            self._tail_keys.add(key)

    def _register(self, tx: Transaction, t_r: float, reindex: bool = True) -> None:
        h = tx.tx_hash
        self.by_hash[h] = tx
        self.t_r[h] = t_r
        self.fee[h] = tx.effective_fee(self.base_fee)
        self.by_sender.setdefault(tx.sender, {})[tx.nonce] = tx
        if reindex and self.index is not None:
            self.index.add(tx)

    def _unregister(self, tx: Transaction, reindex: bool = True) -> None:
        h = tx.tx_hash
        del self.by_hash[h]
        del self.t_r[h]
        del self.fee[h]
        own = self.by_sender[tx.sender]
        del own[tx.nonce]
        if not own:
            del self.by_sender[tx.sender]
        if reindex and self.index is not None:
            self.index.remove(tx)

    def insert_pending(self, tx: Transaction, t_r: float, reindex: bool = True) -> None:
        """Append a continuous transaction to its sender's pending run (no cap check)."""
        if not self.is_continuous(tx):
            raise ValueError("transaction nonce is not continuous for Pending")
        self._register(tx, t_r, reindex)
        self.pending.add(tx.tx_hash)
        self._pending_keys.add(self._key(tx.tx_hash))
        self.run_len[tx.sender] = self.run_len.get(tx.sender, 0) + 1
        self._set_tail(tx.sender)

    def insert_queue(self, tx: Transaction, t_r: float, reindex: bool = True) -> None:
        self._register(tx, t_r, reindex)
        self.queue.add(tx.tx_hash)
        self._queue_keys.add(self._key(tx.tx_hash))

    def _drop_queued(self, tx: Transaction, reindex: bool = True) -> None:
        self._queue_keys.remove(self._key(tx.tx_hash))
        self.queue.discard(tx.tx_hash)
        self._unregister(tx, reindex)

    def _truncate_run(self, sender: int, keep: int) -> list[Transaction]:
        """Shrink a sender's pending run to `keep`; returns the cut txs, low nonce first."""
        n = self.run_len.get(sender, 0)
        if keep >= n:
            return []
        start = self.account(sender).next_nonce
        own = self.by_sender[sender]
        cut = [own[start + i] for i in range(keep, n)]
        for tx in cut:
            self._pending_keys.remove(self._key(tx.tx_hash))
            self.pending.discard(tx.tx_hash)
        if keep:
            self.run_len[sender] = keep
        else:
            self.run_len.pop(sender, None)
        self._set_tail(sender)
        return cut

    def remove(self, tx: Transaction) -> None:
        """Drop a resident transaction; later pending nonces of its sender are demoted."""
        h = tx.tx_hash
        if h in self.queue:
            self._drop_queued(tx)
            return
        start = self.account(tx.sender).next_nonce
        cut = self._truncate_run(tx.sender, tx.nonce - start)
        self._unregister(cut[0])
        for c in cut[1:]:
            self.queue.add(c.tx_hash)
            self._queue_keys.add(self._key(c.tx_hash))
        self._enforce_queue_cap()

    def pop_pending_min(self, reindex: bool = True) -> list[tuple[Transaction, float]]:
        """Remove the cheapest pending tx and every tx it leaves discontinuous."""
        tx = self.pending_min()
        if tx is None:
            return []
        start = self.account(tx.sender).next_nonce
        cut = self._truncate_run(tx.sender, tx.nonce - start)
        out = []
        for c in cut:
            out.append((c, self.t_r[c.tx_hash]))
            self._unregister(c, reindex)
        return out

    def pop_queue_min(self, reindex: bool = True) -> Optional[tuple[Transaction, float]]:
        tx = self.queue_min()
        if tx is None:
            return None
        t_r = self.t_r[tx.tx_hash]
        self._drop_queued(tx, reindex)
        return tx, t_r

    def _spill(self, tx: Transaction, t_r: float) -> None:
        if self.on_spill is not None:
            self.on_spill(tx, t_r)

    def _enforce_queue_cap(self) -> None:
        while len(self.queue) > self.queue_cap:
            tx, t_r = self.pop_queue_min()
            self._spill(tx, t_r)

    def _promote(self, senders: Iterable[int]) -> int:
        """Move queued txs that became continuous into Pending while there is room."""
        heap = []
        for s in senders:
            cand = self._next_queued(s)
            if cand is not None:
                heap.append((-self.fee[cand.tx_hash], self.t_r[cand.tx_hash], cand.tx_hash))
        heapq.heapify(heap)
        moved = 0
        while heap and not self.pending_full:
            _, _, h = heapq.heappop(heap)
            tx = self.by_hash[h]
            self._queue_keys.remove(self._key(h))
            self.queue.discard(h)
            self.pending.add(h)
            self._pending_keys.add(self._key(h))
            self.run_len[tx.sender] = self.run_len.get(tx.sender, 0) + 1
            self._set_tail(tx.sender)
            moved += 1
            nxt = self._next_queued(tx.sender)
            if nxt is not None:
                heapq.heappush(heap, (-self.fee[nxt.tx_hash], self.t_r[nxt.tx_hash], nxt.tx_hash))
        return moved

    def _next_queued(self, sender: int) -> Optional[Transaction]:
        own = self.by_sender.get(sender)
        if not own:
            return None
        nonce = self.account(sender).next_nonce + self.run_len.get(sender, 0)
        tx = own.get(nonce)
        if tx is not None and tx.tx_hash in self.queue:
            return tx
        return None

    # ----- public operations -----

    def admit(self, tx: Transaction, now: float) -> AdmitOutcome:
        h = tx.tx_hash
        if h in self.by_hash:
            return AdmitOutcome(AdmitStatus.REJECTED_INVALID)
        acct = self.account(tx.sender)
        if tx.nonce < acct.next_nonce or acct.balance < tx.max_fee:
            return AdmitOutcome(AdmitStatus.REJECTED_INVALID)
        own = self.by_sender.get(tx.sender)
        if own is not None and tx.nonce in own:
            return AdmitOutcome(AdmitStatus.REJECTED_INVALID)

        fee = tx.effective_fee(self.base_fee)
        evicted: list[Transaction] = []
        evicted_t_r: list[float] = []
        if self.is_continuous(tx):
            if self.pending_full:
                victim = self._min_tail(tx.sender)
                if victim is None or victim[0] >= fee:
                    return AdmitOutcome(AdmitStatus.REJECTED_LOW_FEE)
                vtx = self.by_hash[victim[2]]
                evicted_t_r.append(self.t_r[vtx.tx_hash])
                self._truncate_run(vtx.sender, self.run_len[vtx.sender] - 1)
                self._unregister(vtx)
                evicted.append(vtx)
            self.insert_pending(tx, now)
            self._promote([tx.sender])
            return AdmitOutcome(AdmitStatus.TO_PENDING, evicted, evicted_t_r)

        if self.queue_full:
            if not self._queue_keys or self._queue_keys[0][0] >= fee:
                return AdmitOutcome(AdmitStatus.REJECTED_LOW_FEE)
            vtx, vt_r = self.pop_queue_min()
            evicted.append(vtx)
            evicted_t_r.append(vt_r)
        self.insert_queue(tx, now)
        return AdmitOutcome(AdmitStatus.TO_QUEUE, evicted, evicted_t_r)

    def remove_confirmed(self, block: Block) -> int:
        """Apply a block to the account view and drop every tx it made invalid."""
        touched = set()
        for tx in block.body:
            acct = self.account(tx.sender)
            if tx.nonce >= acct.next_nonce:
                acct.next_nonce = tx.nonce + 1
                acct.balance -= tx.effective_fee(block.header.base_fee)
            touched.add(tx.sender)
        removed = 0
        for sender in sorted(touched):
            removed += self._revalidate(sender)
        self._promote(sorted(self.by_sender))
        return removed

    def _revalidate(self, sender: int) -> int:
        own = self.by_sender.get(sender)
        if not own:
            self.run_len.pop(sender, None)
            self._set_tail(sender)
            return 0
        acct = self.account(sender)
        # unwind the old run, then rebuild it from the new next nonce
        old_run = [h for h in (tx.tx_hash for tx in own.values()) if h in self.pending]
        for h in old_run:
            self._pending_keys.remove(self._key(h))
            self.pending.discard(h)
        self.run_len.pop(sender, None)
        self._set_tail(sender)
        removed = 0
        for nonce in sorted(own):
            tx = own[nonce]
            if nonce < acct.next_nonce or tx.max_fee > acct.balance:
                if tx.tx_hash in self.queue:
                    self._drop_queued(tx)
                else:
                    self._unregister(tx)
                removed += 1
        own = self.by_sender.get(sender, {})
        survivors = set(old_run)
        nonce = acct.next_nonce
        while nonce in own and own[nonce].tx_hash in survivors:
            h = own[nonce].tx_hash
            self.pending.add(h)
            self._pending_keys.add(self._key(h))
            self.run_len[sender] = self.run_len.get(sender, 0) + 1
            nonce += 1
        self._set_tail(sender)
        for tx in own.values():
            h = tx.tx_hash
            if h in survivors and h not in self.pending:
                self.queue.add(h)
                self._queue_keys.add(self._key(h))
        self._enforce_queue_cap()
        return removed

    def refresh_fees(self, base_fee: int) -> int:
        """Reprice every resident at a new base fee and re-sort; returns #changed."""
        self.base_fee = base_fee
        changed = 0
        for h, tx in self.by_hash.items():
            f = tx.effective_fee(base_fee)
            if f != self.fee[h]:
                self.fee[h] = f
                changed += 1
        if changed:
            self._pending_keys = SortedList(self._key(h) for h in self.pending)
            self._queue_keys = SortedList(self._key(h) for h in self.queue)
            self._tail_of.clear()
            self._tail_keys = SortedList()
            for s in self.run_len:
                self._set_tail(s)
        return changed

    def pending_txs(self) -> list[Transaction]:
        return [self.by_hash[h] for h in self.pending]

    def queue_txs(self) -> list[Transaction]:
        return [self.by_hash[h] for h in self.queue]

    def assemble_block(
        self,
        parent: BlockHeader,
        gas_budget: int = DEFAULT_GAS_BUDGET,
        priority: frozenset = frozenset(),
        timestamp: float = 0,
        coinbase: int = 0,
    ) -> Block:
        """Pack Pending by descending effective fee under per-sender nonce order.

        Transactions whose hashes are in `priority` go first. A sender whose
        next transaction cannot pay the block's base fee is skipped.
        """
        base_fee = next_base_fee(parent, gas_budget)
        heap = []
        for sender, n in self.run_len.items():
            start = self.account(sender).next_nonce
            heap.append(self._select_key(self.by_sender[sender][start], base_fee, priority) + (sender, 0))
        heapq.heapify(heap)
        body = []
        while heap and len(body) < gas_budget:
            *_, h, sender, i = heapq.heappop(heap)
            tx = self.by_hash[h]
            if tx.max_fee < base_fee:
                continue
            body.append(tx)
            if i + 1 < self.run_len[sender]:
                nxt = self.by_sender[sender][tx.nonce + 1]
                heapq.heappush(heap, self._select_key(nxt, base_fee, priority) + (sender, i + 1))
        return make_block(parent, body, base_fee, timestamp, coinbase)

    def _select_key(self, tx: Transaction, base_fee: int, priority: frozenset) -> tuple:
        h = tx.tx_hash
        return (0 if h in priority else 1, -tx.effective_fee(base_fee), self.t_r[h], h)

    def check_invariants(self) -> None:
        """Full-scan consistency check (used by tests and the simulator's debug mode)."""
        assert len(self.pending) <= self.pending_cap
        assert len(self.queue) <= self.queue_cap
        assert not (self.pending & self.queue)
        assert set(self.by_hash) == self.pending | self.queue
        for sender, own in self.by_sender.items():
            start = self.account(sender).next_nonce
            run = sorted(n for n, tx in own.items() if tx.tx_hash in self.pending)
            assert run == list(range(start, start + len(run))), (sender, run, start)
            assert self.run_len.get(sender, 0) == len(run)
        assert len(self._pending_keys) == len(self.pending)
        assert len(self._queue_keys) == len(self.queue)
        assert len(self._tail_keys) == len(self.run_len)

    def snapshot(self) -> dict:
        def row(h):
            tx = self.by_hash[h]
            return {"hash": h.hex(), "sender": tx.sender, "nonce": tx.nonce, "fee": self.fee[h]}

        return {
            "base_fee": self.base_fee,
            "pending": sorted((row(h) for h in self.pending), key=lambda r: r["hash"]),
            "queue": sorted((row(h) for h in self.queue), key=lambda r: r["hash"]),
        }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)

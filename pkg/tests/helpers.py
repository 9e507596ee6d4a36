"""Builders shared by several test modules."""

from __future__ import annotations

import random

from hcblab.core import Transaction
from hcblab.netsim import Edge, NodeSpec, Topology
from hcblab.protocol import ProtocolKind
from hcblab.secondary_pool import SecondaryPool, ShortIdMap, restore
from hcblab.txpool import TxPool

from oracles import Item, RestoreState, interpret_restore

BASE_FEE = 10


def tx(sender: int, nonce: int, max_fee: int = 100, tip: int = 1, tag: int = 0) -> Transaction:
    return Transaction(sender, nonce, max_fee, min(tip, max_fee), tag.to_bytes(4, "big"))


def random_triple(seed: int, max_each: int = 12):
    """Random (Pending, Queue, Secondary) contents with per-sender nonce runs, at most max_each per pool."""
    rnd = random.Random(seed)
    pending, queue, sec = [], [], []
    nxt = {}
    for s in range(1, rnd.randint(1, 5) + 1):
        nxt[s] = rnd.randint(0, 2)
        run = 0
        for n in range(nxt[s], nxt[s] + rnd.randint(0, 8)):
            tip = rnd.randint(1, 12)
            max_fee = BASE_FEE + tip + rnd.randint(-3, 3) if rnd.random() < 0.4 else BASE_FEE + 20
            t = Transaction(s, n, max(max_fee, tip), tip, bytes([seed % 256, seed // 256 % 256, rnd.randrange(256)]))
            t_r = float(rnd.randint(0, 5))
            r = rnd.random()
            if n == nxt[s] + run and r < 0.5 and len(pending) < max_each:
                pending.append((t, t_r))
                run += 1
            elif n > nxt[s] + run and r < 0.75 and len(queue) < max_each:
                queue.append((t, t_r))
            elif len(sec) < max_each:
                sec.append((t, t_r))
    pcap = max(len(pending) + rnd.choice([0, 0, 1, 2]), 1)
    qcap = max(len(queue) + rnd.choice([0, 0, 1, 2]), 1)
    return nxt, pending, queue, sec, pcap, qcap


def build_pools(nxt, pending, queue, sec, pcap, qcap, base_fee=BASE_FEE):
    idx = ShortIdMap()
    pool = TxPool(pcap, qcap, base_fee)
    pool.index = idx
    for s, n in nxt.items():
        pool.account(s).next_nonce = n
    for t, t_r in sorted(pending, key=lambda x: (x[0].sender, x[0].nonce)):
        pool.insert_pending(t, t_r)
    for t, t_r in queue:
        pool.insert_queue(t, t_r)
    sp = SecondaryPool(10**6, idx, base_fee)
    for t, t_r in sec:
        sp.insert(t, t_r)
    return pool, sp, idx


def run_package_restore(triple, base_fee=BASE_FEE):
    pool, sp, idx = build_pools(*triple, base_fee=base_fee)
    report = restore(pool, sp)
    return pool, sp, idx, report


def run_oracle_restore(triple, base_fee=BASE_FEE) -> RestoreState:
    nxt, pending, queue, sec, pcap, qcap = triple

    def item(t, t_r):
        return Item(t.tx_hash, t.sender, t.nonce, t.effective_fee(base_fee), t_r)

    st = RestoreState([item(*x) for x in pending], [item(*x) for x in queue],
                      [item(*x) for x in sec], dict(nxt), pcap, qcap)
    return interpret_restore(st)


def package_snapshot(pool, sp):
    return sorted(pool.pending), sorted(pool.queue), sorted(sp.by_hash)


def profitable_moves_left(pool, sp) -> list:
    """Secondary txs with continuous nonce paying more than the Pending minimum while Pending has room."""
    if pool.pending_full or not pool.pending:
        return []
    floor = pool.fee[pool.pending_min().tx_hash]
    return [h for h, t in sp.by_hash.items() if pool.is_continuous(t) and sp.fee[h] > floor]


def line_topology(n: int, kind=ProtocolKind.BCB, latency=10.0, bw=1e6, miners=(0,), **caps) -> Topology:
    nodes = [NodeSpec(i, kind, True, i in miners, False, **caps) for i in range(n)]
    edges = [Edge(i, i + 1, latency, bw) for i in range(n - 1)]
    return Topology(nodes, edges)


def collision_pairs() -> list[tuple[Transaction, Transaction]]:
    """Frozen pairs of distinct transactions whose short IDs coincide."""
    import json
    from pathlib import Path

    rows = json.loads((Path(__file__).parent / "data" / "collisions.json").read_text())
    return [(Transaction(r["sender_a"], 0, r["max_fee"], r["prio"]),
             Transaction(r["sender_b"], 0, r["max_fee"], r["prio"])) for r in rows]

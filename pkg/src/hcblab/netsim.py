"""Deterministic discrete-event network simulation.

One event heap holds message deliveries, node timers and mining ticks.
Transaction gossip is not simulated message by message: with first-seen
flooding over lossless links, a transaction reaches each node at the
shortest-path time from its origin, where one hop costs link latency plus
serialization plus a fixed relay delay. Those arrival times are computed up
front and each node admits its arrivals lazily, right before it handles its
next event. Selfish transactions skip gossip and appear only at selfish
nodes after a private-link delay.

Separate seeded RNG streams drive the workload, the mining clock and each
node's peer selection, so the workload is identical across protocol kinds.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import networkx as nx
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .core import GWEI, HASH_LEN, BlockHeader, EMPTY_DIGEST, Transaction, make_block
from .prediction import BayesPredictor, Predictor
from .protocol import Node, NodeConfig, ProtocolKind
from .txpool import next_base_fee


class ConfigError(ValueError):
    pass


# ----- configuration types -----

@dataclass
class NodeSpec:
    id: int
    kind: ProtocolKind = ProtocolKind.HCB
    hcb_capable: bool = True
    miner: bool = False
    selfish: bool = False
    pending_cap: int = 5120
    queue_cap: int = 1024
    secondary_cap: int = 200_000


@dataclass
class Edge:
    a: int
    b: int
    latency_ms: float
    bandwidth_Bps: float


@dataclass
class Topology:
    nodes: list[NodeSpec]
    edges: list[Edge]

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ConfigError("node ids must be 0..n-1 in order")
        seen = set()
        for e in self.edges:
            if e.a == e.b:
                raise ConfigError(f"self-loop on node {e.a}")
            if not (0 <= e.a < len(ids) and 0 <= e.b < len(ids)):
                raise ConfigError(f"edge ({e.a}, {e.b}) references an unknown node")
            key = (min(e.a, e.b), max(e.a, e.b))
            if key in seen:
                raise ConfigError(f"duplicate edge {key}")
            seen.add(key)
            if e.latency_ms < 0 or e.bandwidth_Bps <= 0:
                raise ConfigError(f"edge {key} needs latency >= 0 and bandwidth > 0")
        if len(ids) > 1 and not nx.is_connected(self.graph()):
            raise ConfigError("topology is disconnected")

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(n.id for n in self.nodes)
        g.add_edges_from((e.a, e.b) for e in self.edges)
        return g

    def neighbors(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out[e.a].append(e.b)
            out[e.b].append(e.a)
        return {k: sorted(v) for k, v in out.items()}

    def with_kind(self, kind: ProtocolKind) -> "Topology":
        nodes = [NodeSpec(**{**asdict(n), "kind": kind}) for n in self.nodes]
        return Topology(nodes, [Edge(**asdict(e)) for e in self.edges])

    def scaled_latency(self, factor: float) -> "Topology":
        edges = [Edge(e.a, e.b, e.latency_ms * factor, e.bandwidth_Bps) for e in self.edges]
        return Topology([NodeSpec(**asdict(n)) for n in self.nodes], edges)


def generate_graph(kind: str, n: int, degree: int, seed: int) -> nx.Graph:
    if kind == "ring":
        return nx.cycle_graph(n)
    if kind == "random_regular":
        if n * degree % 2 or degree >= n:
            raise ConfigError(f"no {degree}-regular graph on {n} nodes")
        for attempt in range(100):
            g = nx.random_regular_graph(degree, n, seed=seed + attempt)
            if nx.is_connected(g):
                return g
        raise ConfigError("could not draw a connected random regular graph")
    raise ConfigError(f"unknown topology generator {kind!r}")


def build_edges(
    g: nx.Graph,
    latency_ms: tuple[float, float],
    bandwidth_Bps: float,
    seed: int,
) -> list[Edge]:
    rng = np.random.default_rng(seed)
    edges = []
    for a, b in sorted((min(u, v), max(u, v)) for u, v in g.edges()):
        lat = float(rng.uniform(*latency_ms)) if latency_ms[1] > latency_ms[0] else float(latency_ms[0])
        edges.append(Edge(a, b, round(lat, 3), bandwidth_Bps))
    return edges


@dataclass
class FeeDistribution:
    """Tip ~ log-normal clipped to [tip_min, tip_max] gWei; max_fee = tip + headroom x base."""

    tip_median_gwei: float = 2.0
    tip_sigma: float = 1.0
    tip_min_gwei: float = 1.0
    tip_max_gwei: float = 500.0
    headroom_low: float = 0.8
    headroom_high: float = 3.0


@dataclass
class Workload:
    tx_rate: float = 15.0
    fee: FeeDistribution = field(default_factory=FeeDistribution)
    payload_mean_bytes: float = 100.0
    payload_step_bytes: int = 32
    selfish_fraction: float = 0.0
    accounts: int = 2000
    private_accounts: int = 200
    duration_ms: float = 600_000.0
    tx_relay_delay_ms: float = 20.0
    private_delay_ms: float = 50.0

    def validate(self) -> None:
        if not 0.0 <= self.selfish_fraction <= 1.0:
            raise ConfigError("selfish_fraction must lie in [0, 1]")
        if self.tx_rate < 0 or self.accounts < 1:
            raise ConfigError("tx_rate must be >= 0 and accounts >= 1")


@dataclass
class MinerModel:
    mean_interval_ms: float = 13000.0
    reset_ms: float = 36.0
    assemble_ms: float = 69.4
    block_cap: int = 200
    initial_base_fee_gwei: float = 10.0

    @property
    def empty_window_ms(self) -> float:
        return self.reset_ms + self.assemble_ms

    def validate(self) -> None:
        if self.mean_interval_ms <= 0 or self.block_cap < 0:
            raise ConfigError("mean_interval_ms must be positive and block_cap non-negative")
        if self.reset_ms < 0 or self.assemble_ms < 0:
            raise ConfigError("reset_ms and assemble_ms must be non-negative")


def sample_block_interval(rng: np.random.Generator, mean_ms: float = 13000.0) -> float:
    """Exponential inter-block time; strictly positive."""
    while True:
        x = float(rng.exponential(mean_ms))
        if x > 0.0:
            return x


def mining_race_empty_fraction(miner: MinerModel, n_races: int, seed: int) -> float:
    """Fraction of races a single clock wins inside the empty-block window."""
    rng = np.random.default_rng(seed)
    gaps = np.array([sample_block_interval(rng, miner.mean_interval_ms) for _ in range(n_races)])
    return float(np.mean(gaps < miner.empty_window_ms))


# ----- workload generation -----

@dataclass
class TxEvent:
    t: float
    tx: Transaction
    origin: int
    selfish: bool


def generate_workload(workload: Workload, miner: MinerModel, n_nodes: int, seed: int) -> list[TxEvent]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n = int(rng.poisson(workload.tx_rate * workload.duration_ms / 1000.0))
    times = np.sort(rng.uniform(0.0, workload.duration_ms, n))
    selfish = rng.random(n) < workload.selfish_fraction
    public_sender = rng.integers(0, workload.accounts, n)
    private_sender = workload.accounts + rng.integers(0, max(workload.private_accounts, 1), n)
    origins = rng.integers(0, n_nodes, n)
    f = workload.fee
    tips = np.clip(f.tip_median_gwei * np.exp(f.tip_sigma * rng.standard_normal(n)),
                   f.tip_min_gwei, f.tip_max_gwei)
    headroom = rng.uniform(f.headroom_low, f.headroom_high, n) * miner.initial_base_fee_gwei
    steps = rng.poisson(workload.payload_mean_bytes / max(workload.payload_step_bytes, 1), n)
    nonces: dict[int, int] = {}
    out = []
    for i in range(n):
        sender = int(private_sender[i] if selfish[i] else public_sender[i])
        nonce = nonces.get(sender, 0)
        nonces[sender] = nonce + 1
        tip = int(round(float(tips[i]) * GWEI))
        max_fee = tip + int(round(float(headroom[i]) * GWEI))
        payload = i.to_bytes(4, "big") + bytes(int(steps[i]) * workload.payload_step_bytes)
        tx = Transaction(sender, nonce, max_fee, tip, payload)
        out.append(TxEvent(float(times[i]), tx, int(origins[i]), bool(selfish[i])))
    return out


# ----- the world -----

DELIVER, TIMER, MINE = 0, 1, 2


@dataclass
class SimResult:
    events: list[dict]
    trace: list[tuple]
    snapshots: dict
    samples: Optional[dict] = None
    stats: dict = field(default_factory=dict)

    def event_log_lines(self) -> list[str]:
        return [json.dumps(e, sort_keys=True) for e in self.events]

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for row in self.trace:
            h.update(repr(row).encode())
        return h.hexdigest()


class World:
    def __init__(
        self,
        topology: Topology,
        workload: Workload,
        miner: MinerModel,
        seed: int,
        predictor: Optional[Predictor] = None,
        trace: bool = False,
        debug: bool = False,
        collect_samples: bool = False,
    ):
        topology.validate()
        workload.validate()
        miner.validate()
        self.topology = topology
        self.workload = workload
        self.miner_model = miner
        self.seed = seed
        self.tracing = trace
        self.debug = debug
        self.collect_samples = collect_samples
        self.events: list[dict] = []
        self.trace: list[tuple] = []
        self._heap: list = []
        self._seq = 0
        self.current_send_time = 0.0
        self._sample_parts: list[tuple[dict, np.ndarray]] = []

        self.links: dict[tuple[int, int], tuple[float, float]] = {}
        for e in topology.edges:
            self.links[(e.a, e.b)] = (e.latency_ms, e.bandwidth_Bps)
            self.links[(e.b, e.a)] = (e.latency_ms, e.bandwidth_Bps)

        base_fee = max(int(round(miner.initial_base_fee_gwei * GWEI)), 1)
        self.genesis = BlockHeader(0, bytes(HASH_LEN), EMPTY_DIGEST, base_fee, 0, 0)
        self.chain_height = 0
        self.mined_at: dict[int, float] = {}

        predictor = predictor or BayesPredictor()
        ss = np.random.SeedSequence([seed, 3])
        node_seeds = ss.spawn(len(topology.nodes))
        nbrs = topology.neighbors()
        self.nodes: list[Node] = []
        for ns, nseed in zip(topology.nodes, node_seeds):
            cfg = NodeConfig(ns.id, ProtocolKind(ns.kind), ns.hcb_capable, ns.miner,
                             ns.selfish, ns.pending_cap, ns.queue_cap, ns.secondary_cap)
            self.nodes.append(Node(cfg, self, nbrs[ns.id], predictor,
                                   np.random.default_rng(nseed), self.genesis, miner.block_cap))
        self.miners = [n for n in self.nodes if n.cfg.miner]
        self.mine_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

        self.txs = generate_workload(workload, miner, len(self.nodes), seed)
        self.private_hashes = frozenset(ev.tx.tx_hash for ev in self.txs if ev.selfish)
        self._compute_arrivals()

    # ----- gossip arrival times -----

    def _hop_matrix(self, size: int) -> np.ndarray:
        n = len(self.nodes)
        rows, cols, vals = [], [], []
        relay = self.workload.tx_relay_delay_ms
        for (a, b), (lat, bw) in self.links.items():
            rows.append(a)
            cols.append(b)
            # csgraph treats explicit zeros as missing edges
            vals.append(max(lat + 1000.0 * size / bw + relay, 1e-9))
        return dijkstra(csr_matrix((vals, (rows, cols)), shape=(n, n)), directed=True)

    def _compute_arrivals(self) -> None:
        n = len(self.nodes)
        dist_cache: dict[int, np.ndarray] = {}
        per_node: list[list[tuple[float, int]]] = [[] for _ in range(n)]
        self.first_seen_map: list[dict[bytes, float]] = [dict() for _ in range(n)]
        selfish_nodes = [nd.id for nd in self.nodes if nd.cfg.selfish]
        for i, ev in enumerate(self.txs):
            if ev.selfish:
                targets = [(v, ev.t + self.workload.private_delay_ms) for v in selfish_nodes]
            else:
                size = ev.tx.size_bytes
                d = dist_cache.get(size)
                if d is None:
                    d = dist_cache[size] = self._hop_matrix(size)
                row = d[ev.origin]
                targets = [(v, ev.t + float(row[v])) for v in range(n)]
            for v, t in targets:
                per_node[v].append((t, i))
                self.first_seen_map[v][ev.tx.tx_hash] = t
        self._arrivals = [sorted(lst) for lst in per_node]
        self._cursor = [0] * n

    def first_seen(self, node_id: int, tx_hash: bytes) -> Optional[float]:
        return self.first_seen_map[node_id].get(tx_hash)

    def catch_up(self, node: Node, now: float) -> None:
        arr = self._arrivals[node.id]
        i = self._cursor[node.id]
        admit = node.pools.admit
        txs = self.txs
        while i < len(arr) and arr[i][0] <= now:
            t, k = arr[i]
            admit(txs[k].tx, t)
            i += 1
        self._cursor[node.id] = i

    # ----- scheduling -----

    def _push(self, t: float, kind: int, payload) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, payload))
        self._seq += 1

    def send(self, src: int, dst: int, msg, now: float) -> None:
        lat, bw = self.links[(src, dst)]
        size = msg.wire_size()
        t = now + lat + 1000.0 * size / bw
        self.events.append({"event": "send", "t": now, "src": src, "dst": dst,
                            "msg": msg.tag, "bytes": size})
        if self.tracing:
            self.trace.append((round(now, 6), src, dst, msg.tag, size,
                               hashlib.sha256(msg.encode()).hexdigest()))
        self._push(t, DELIVER, (src, dst, msg, now))

    def set_timer(self, node: Node, at: float, key) -> None:
        self._push(at, TIMER, (node.id, key))

    def log(self, event: dict) -> None:
        self.events.append(event)

    def add_samples(self, features: dict, present: np.ndarray) -> None:
        self._sample_parts.append((features, present))

    def on_applied(self, node: Node, block, now: float) -> None:
        mined = self.mined_at.get(block.height, now)
        self.events.append({"event": "block_applied", "t": now, "node": node.id,
                            "height": block.height, "delay": now - mined})

    # ----- mining -----

    def _mine(self, now: float) -> None:
        winner = self.miners[int(self.mine_rng.integers(len(self.miners)))]
        if winner.head.height < self.chain_height:
            self.events.append({"event": "race_skipped", "t": now, "node": winner.id,
                                "height": self.chain_height + 1})
            return
        self.catch_up(winner, now)
        head = winner.head
        empty = now - winner.head_time < self.miner_model.empty_window_ms
        if empty:
            block = make_block(head, [], next_base_fee(head, self.miner_model.block_cap),
                               now, winner.id)
        else:
            block = winner.pools.pool.assemble_block(
                head, self.miner_model.block_cap, self.private_hashes, now, winner.id
            )
            if self.debug:
                pending = winner.pools.pool.pending
                assert all(tx.tx_hash in pending for tx in block.body)
        self.chain_height = block.height
        self.mined_at[block.height] = now
        self.events.append({"event": "block_mined", "t": now, "node": winner.id,
                            "height": block.height, "txs": len(block.body),
                            "forced_empty": empty, "base_fee": block.header.base_fee,
                            "hash": block.block_hash.hex()})
        winner.mine(block, now)

    def run(self, until: float) -> SimResult:
        for node in self.nodes:
            node.start(0.0)
        if self.miners and self.miner_model.mean_interval_ms > 0:
            self._push(sample_block_interval(self.mine_rng, self.miner_model.mean_interval_ms), MINE, None)
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            if kind == MINE:
                if t > until:
                    continue
                self._mine(t)
                self._push(t + sample_block_interval(self.mine_rng, self.miner_model.mean_interval_ms),
                           MINE, None)
            elif kind == DELIVER:
                src, dst, msg, sent = payload
                self.current_send_time = sent
                self.nodes[dst].handle(src, msg, t)
            else:
                node_id, key = payload
                self.nodes[node_id].on_timer(key, t)
        for node in self.nodes:
            self.catch_up(node, until)
        return SimResult(self.events, self.trace, self._snapshots(), self._samples(), self._stats())

    def _snapshots(self) -> dict:
        return {
            nd.id: {
                "height": nd.head.height,
                "pending": len(nd.pools.pool.pending),
                "queue": len(nd.pools.pool.queue),
                "secondary": len(nd.pools.secondary),
                "hashes": sorted(h.hex() for h in nd.pools.pool.by_hash),
            }
            for nd in self.nodes
        }

    def _samples(self) -> Optional[dict]:
        if not self.collect_samples:
            return None
        keys = ("fee_gwei", "age_s", "rank_ratio", "present_at_sender")
        if not self._sample_parts:
            return {k: np.zeros(0) for k in keys} | {"label_present": np.zeros(0, bool)}
        out = {k: np.concatenate([f[k] for f, _ in self._sample_parts]) for k in keys}
        out["label_present"] = np.concatenate([p for _, p in self._sample_parts])
        return out

    def _stats(self) -> dict:
        return {"txs": len(self.txs), "selfish_txs": len(self.private_hashes),
                "chain_height": self.chain_height}


def run(
    topology: Topology,
    workload: Workload,
    miner_model: MinerModel,
    until: float,
    seed: int = 0,
    predictor: Optional[Predictor] = None,
    trace: bool = False,
    debug: bool = False,
    collect_samples: bool = False,
) -> SimResult:
    world = World(topology, workload, miner_model, seed, predictor, trace, debug, collect_samples)
    return world.run(until)


def inject_tx(world: World, tx: Transaction, origin: int, selfish: bool, t: float) -> list[tuple[int, float]]:
    """Add one transaction to a world before it runs; returns (node, arrival time) pairs."""
    ev = TxEvent(t, tx, origin, selfish)
    world.txs.append(ev)
    k = len(world.txs) - 1
    out = []
    if selfish:
        out = [(nd.id, t + world.workload.private_delay_ms) for nd in world.nodes if nd.cfg.selfish]
        world.private_hashes = world.private_hashes | {tx.tx_hash}
    else:
        row = world._hop_matrix(tx.size_bytes)[origin]
        out = [(v, t + float(row[v])) for v in range(len(world.nodes))]
    for v, at in out:
        world._arrivals[v].append((at, k))
        world._arrivals[v].sort()
        world.first_seen_map[v][tx.tx_hash] = at
    return out

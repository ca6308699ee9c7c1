"""Deterministic discrete-event simulator: unit-disk radio with Bernoulli
loss, topology generation, per-node protocol stacks, traffic, adversaries,
and metric collection.

Everything is a pure function of the scenario configuration: node ids order
every iteration, all randomness flows from named streams seeded by
(base_seed + round), and simulated time is integer microseconds.  One event
loop per round, strictly single threaded; independent rounds may run in
separate processes.
"""

from __future__ import annotations

import heapq
import math
import random
import statistics
from collections import deque
from dataclasses import dataclass, field

from scipy import stats as scipy_stats

from . import attacks, wire
from .chain import (FLOW_ER, FLOW_MC, FLOW_UC, Accepted, ChainBreak,
                    ChainState, CsmPipeline, Dropped)
from .codec import PresharedKey
from .config import ScenarioConfig
from .modes import PsmPipeline, UnsecuredPipeline
from .recovery import RecoveryConfig, RecoveryManager
from .rpl import RplConfig, RplEngine
from .trust import TrustPolicy

DATA_QUEUE_CAP = 30
DATA_TTL_HOPS = 32


class TopologyError(Exception):
    pass


@dataclass
class Topology:
    positions: list          # (x, y) per entity, index == node id
    root: int
    adversary_ids: list      # [] | [adv] | [relay_a, relay_b]
    ca_target: int | None
    radio_range_m: float

    def distance(self, a: int, b: int) -> float:
        (xa, ya), (xb, yb) = self.positions[a], self.positions[b]
        return math.hypot(xa - xb, ya - yb)

    def in_range(self, a: int, b: int) -> bool:
        return a != b and self.distance(a, b) <= self.radio_range_m

    def neighbors_of(self, a: int) -> list:
        return [b for b in range(len(self.positions)) if self.in_range(a, b)]


def _connected(positions, radio_range: float) -> bool:
    n = len(positions)
    seen = {0}
    frontier = [0]
    while frontier:
        cur = frontier.pop()
        (xc, yc) = positions[cur]
        for other in range(n):
            if other in seen:
                continue
            (xo, yo) = positions[other]
            if math.hypot(xc - xo, yc - yo) <= radio_range:
                seen.add(other)
                frontier.append(other)
    return len(seen) == n


def generate_topology(cfg: ScenarioConfig, seed: int) -> Topology:
    """Rejection-sample a connected layout.  Legitimate nodes are drawn
    first (so the same seed yields the same legitimate layout for every
    attack except the wormhole's extra relay), then adversaries are placed
    under the prominence constraints: NA/CA inside the network with at
    least 3 legitimate neighbors, sitting on a rank gradient; wormhole
    endpoint A adjacent to the root and endpoint B at least two radio
    ranges away."""
    rng = random.Random(f"topo:{seed}")
    wh = cfg.attack == "WH"
    n_adv = 2 if wh else 1
    n_legit = cfg.nodes - n_adv
    rr = cfg.radio_range_m
    attempts = 0

    def draw():
        return (rng.uniform(0, cfg.area_w_m), rng.uniform(0, cfg.area_h_m))

    while True:
        if attempts > 10_000:
            raise TopologyError("topology constraints infeasible "
                                f"(gave up after {attempts} rejections)")
        legit = [draw() for _ in range(n_legit)]
        if not _connected(legit, rr):
            attempts += 1
            continue

        def count_in_range(pos, points):
            return sum(1 for p in points
                       if math.hypot(pos[0] - p[0], pos[1] - p[1]) <= rr)

        root_pos = legit[0]
        placed = None
        for _ in range(300):
            if wh:
                a = draw()
                if math.hypot(a[0] - root_pos[0], a[1] - root_pos[1]) > rr:
                    continue
                b = draw()
                if math.hypot(a[0] - b[0], a[1] - b[1]) < 2 * rr:
                    continue
                if count_in_range(b, legit) < 3:
                    continue
                placed = [a, b]
                break
            pos = draw()
            if count_in_range(pos, legit) < 3:
                continue
            d_root = math.hypot(pos[0] - root_pos[0], pos[1] - root_pos[1])
            if not rr <= d_root <= 2.5 * rr:
                continue
            placed = [pos]
            break
        if placed is None:
            attempts += 1
            continue

        positions = legit + placed
        ca_target = None
        if cfg.attack == "CA":
            adv_pos = placed[0]
            best = None
            for idx in range(1, n_legit):  # never clone the root
                d = math.hypot(adv_pos[0] - positions[idx][0],
                               adv_pos[1] - positions[idx][1])
                if best is None or d < best[0]:
                    best = (d, idx)
            ca_target = best[1]
        topo = Topology(positions, 0, list(range(n_legit, cfg.nodes)),
                        ca_target, rr)
        # unit disk is symmetric by construction; keep the assertion anyway
        for a in range(cfg.nodes):
            for b in topo.neighbors_of(a):
                assert topo.in_range(b, a)
        return topo


@dataclass
class Emission:
    data: object          # bytes for ctrl, DataPacket for data
    kind: str             # "ctrl" | "data"
    src: int
    dst: int
    transmitter: object
    size_bytes: int
    via_tunnel: bool = False


@dataclass
class DataPacket:
    origin_id: int        # physical node id (stable under address cloning)
    seq: int
    born_us: int
    hops: int = 0

    @property
    def key(self):
        return (self.origin_id, self.seq)


FATE_DELIVERED = "delivered"
FATE_LOSS = "dropped-by-loss"
FATE_ADVERSARY = "dropped-by-adversary"
FATE_STRANDED = "stranded-no-route"


class MetricsLedger:
    """Per-round counters.  Energy and overhead count legitimate nodes only
    (the adversary's radio is not the network's cost)."""

    def __init__(self, cfg: ScenarioConfig, legit_ids):
        self.cfg = cfg
        self.legit_ids = set(legit_ids)
        self.data_sent = 0
        self.data_received_at_root = 0
        self.latency_samples_us: list[int] = []
        self.ctrl_frames = 0
        self.bytes_tx: dict[int, int] = {}
        self.bytes_rx: dict[int, int] = {}
        self.fates: dict = {}
        self.generated_by: dict[int, int] = {}
        self.trust_trips: set = set()
        self.cc_tunnel_verifications = 0
        self.srreq_frames = 0
        self.recoveries_completed = 0
        self.chain_breaks = 0
        self.parent_switches = 0
        self.replays_emitted = 0
        self.tunneled_frames = 0
        self.shadow_dios = 0

    def note_tx(self, node_id: int, size: int, kind: str) -> None:
        if node_id in self.legit_ids:
            self.bytes_tx[node_id] = self.bytes_tx.get(node_id, 0) + size
            if kind == "ctrl":
                self.ctrl_frames += 1

    def note_rx(self, node_id: int, size: int) -> None:
        if node_id in self.legit_ids:
            self.bytes_rx[node_id] = self.bytes_rx.get(node_id, 0) + size

    def set_fate(self, pkt: DataPacket, fate: str) -> None:
        prior = self.fates.get(pkt.key)
        if prior == FATE_DELIVERED:
            return  # duplicates of an already delivered packet are moot
        self.fates[pkt.key] = fate

    def deliver(self, pkt: DataPacket, now_us: int) -> None:
        if self.fates.get(pkt.key) == FATE_DELIVERED:
            return  # radio-level duplicate (cloned-address fork)
        self.fates[pkt.key] = FATE_DELIVERED
        self.data_received_at_root += 1
        self.latency_samples_us.append(now_us - pkt.born_us)

    def energy_uj(self) -> float:
        tx = sum(self.bytes_tx.values())
        rx = sum(self.bytes_rx.values())
        return tx * self.cfg.e_tx_uj_per_byte + rx * self.cfg.e_rx_uj_per_byte

    @property
    def pdr(self) -> float:
        return (self.data_received_at_root / self.data_sent
                if self.data_sent else 0.0)

    @property
    def latency_mean_ms(self) -> float:
        if not self.latency_samples_us:
            return float("nan")
        return statistics.fmean(self.latency_samples_us) / 1000.0

    @property
    def energy_uj_per_delivered(self) -> float:
        if not self.data_received_at_root:
            return float("nan")
        return self.energy_uj() / self.data_received_at_root

    def fate_counts(self) -> dict:
        counts = {FATE_DELIVERED: 0, FATE_LOSS: 0, FATE_ADVERSARY: 0,
                  FATE_STRANDED: 0}
        for fate in self.fates.values():
            counts[fate] += 1
        return counts


class EventLoop:
    def __init__(self):
        self.time = 0
        self._seq = 0
        self._heap = []

    def now(self) -> int:
        return self.time

    def schedule(self, delay_us: int, fn) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (self.time + int(delay_us), self._seq, fn))

    def run_until(self, end_us: int) -> None:
        while self._heap and self._heap[0][0] <= end_us:
            when, _, fn = heapq.heappop(self._heap)
            self.time = when
            fn()
        self.time = end_us


class Medium:
    """Broadcast unit-disk radio.  Every in-range entity draws its own loss
    outcome; delivery reports whether the addressee received (the stand-in
    for link-layer ACK statistics feeding ETX estimation)."""

    def __init__(self, topo: Topology, cfg: ScenarioConfig, loop: EventLoop,
                 ledger: MetricsLedger, loss_rng: random.Random):
        self.topo = topo
        self.cfg = cfg
        self.loop = loop
        self.ledger = ledger
        self.loss_rng = loss_rng
        self.entities: list = []       # index == node id
        self.latency_us = int(cfg.latency_ms * 1000)

    def transmit(self, transmitter, data, kind: str, src: int, dst: int,
                 via_tunnel: bool = False):
        size = (len(data) if kind == "ctrl"
                else self.cfg.data_payload_bytes)
        size += self.cfg.header_overhead_bytes
        emission = Emission(data, kind, src, dst, transmitter, size,
                            via_tunnel)
        self.ledger.note_tx(transmitter.node_id, size, kind)
        delivered = None if dst == wire.MULTICAST else False
        tpos = transmitter.node_id
        for entity in self.entities:
            if entity is transmitter:
                continue
            if not self.topo.in_range(tpos, entity.node_id):
                continue
            if self.loss_rng.random() < self.cfg.loss_prob:
                continue
            self.ledger.note_rx(entity.node_id, size)
            if dst != wire.MULTICAST and entity.addr == dst:
                delivered = True
            if entity.stack_active:
                self.loop.schedule(self.latency_us,
                                   lambda e=entity: e.on_delivery(emission))
            if entity.overhear is not None:
                self.loop.schedule(self.latency_us,
                                   lambda e=entity: e.overhear(emission))
        return delivered


class Node:
    """One protocol participant: mode pipeline + routing engine + app."""

    is_wh_relay = False
    stack_active = True

    def __init__(self, node_id: int, cfg: ScenarioConfig, medium: Medium,
                 loop: EventLoop, ledger: MetricsLedger, key: PresharedKey,
                 is_root: bool, rng: random.Random,
                 adversary_cfg: attacks.AdversaryConfig | None = None):
        self.node_id = node_id
        self.addr = node_id
        self.cfg = cfg
        self.medium = medium
        self.loop = loop
        self.ledger = ledger
        self.rng = rng
        self.is_root = is_root
        self.ever_joined = is_root
        self.overhear = None
        self.adversary = None

        policy = TrustPolicy(cfg.trust_min, cfg.trust_max, cfg.trust_trig,
                             cfg.trust_step)
        self.chain: ChainState | None = None
        self.recovery: RecoveryManager | None = None
        if cfg.mode == "UM":
            self.pipeline = UnsecuredPipeline(self.addr)
        elif cfg.mode in ("PSM", "PSMrp"):
            self.pipeline = PsmPipeline(self.addr, key)
        else:
            self.chain = ChainState(self.addr, rng, policy)
            self.pipeline = CsmPipeline(
                self.chain, key,
                on_untrusted=lambda neighbor: ledger.trust_trips.add(
                    (self.node_id, neighbor)))
            self.recovery = RecoveryManager(
                self.chain, rng,
                now=loop.now, schedule=loop.schedule,
                send_er=self._send_er, send_dis=self._send_recovery_dis,
                config=RecoveryConfig(
                    timeout_us=int(cfg.recovery_timeout_s * 1_000_000),
                    max_attempts=cfg.recovery_max_attempts))

        self.engine = RplEngine(
            self.addr, is_root,
            RplConfig(replay_protect=(cfg.mode == "PSMrp")), rng,
            now=loop.now, schedule=loop.schedule, emit=self.emit_control,
            on_parent_change=self._on_parent_change,
            on_parent_ok=self._flush_queue,
            on_orphaned=None)

        self.queue: deque[DataPacket] = deque()
        self.app_seq = 0
        self.last_snapshot: bytes | None = None

        if adversary_cfg is not None:
            if adversary_cfg.kind == attacks.KIND_NA:
                self.adversary = attacks.NaBehavior(adversary_cfg, self)
            elif adversary_cfg.kind == attacks.KIND_CA:
                self.adversary = attacks.CaBehavior(adversary_cfg, self)
            self.overhear = self.adversary.on_overhear
            loop.schedule(adversary_cfg.activation_us, self._activate)

    # plumbing used by adversaries and recovery

    def now(self) -> int:
        return self.loop.now()

    def schedule(self, delay_us: int, fn) -> None:
        self.loop.schedule(delay_us, fn)

    def set_addr(self, addr: int) -> None:
        self.addr = addr
        self.engine.addr = addr
        self.pipeline.addr = addr
        if self.chain is not None:
            self.chain.addr = addr

    def raw_transmit(self, data: bytes, src: int, dst: int,
                     via_tunnel: bool = False):
        return self.medium.transmit(self, data, "ctrl", src, dst, via_tunnel)

    def _activate(self) -> None:
        self.adversary.on_activate()
        if isinstance(self.adversary, attacks.CaBehavior):
            self.ledger.shadow_dios = self.adversary.shadow_dios

    # control plane

    def emit_control(self, body, dst: int):
        data = self.pipeline.build_control(body, dst)
        delivered = self.medium.transmit(self, data, "ctrl", self.addr, dst)
        if dst != wire.MULTICAST:
            self.engine.note_unicast_feedback(dst, bool(delivered))
        return delivered

    def _send_er(self, body, er_sc: int, dst: int) -> None:
        data = self.pipeline.build_er(body, er_sc, dst)
        self.ledger.srreq_frames += isinstance(body, wire.SrReq)
        self.medium.transmit(self, data, "ctrl", self.addr, dst)

    def _send_recovery_dis(self, dst: int) -> None:
        self.emit_control(wire.Dis(), dst)

    def on_delivery(self, emission: Emission) -> None:
        if emission.kind == "data":
            if emission.dst == self.addr:
                self._on_data(emission.data)
            return
        if emission.dst not in (wire.MULTICAST, self.addr):
            return
        if emission.src == self.addr:
            return  # own address on the air (clone or replayed self-frame)
        if not wire.verify_checksum(emission.data):
            return
        result = self.pipeline.receive(emission.data, emission.src,
                                       emission.dst)
        if isinstance(result, Accepted):
            self._dispatch_accepted(result, emission)
        elif isinstance(result, ChainBreak):
            self.ledger.chain_breaks += 1
            self.recovery.on_chain_break(result.flow, emission.src)
        elif isinstance(result, Dropped) and result.reason == "auth-failure" \
                and self.chain is not None \
                and emission.src in self.chain.table:
            flow = FLOW_MC if emission.dst == wire.MULTICAST else FLOW_UC
            self.ledger.chain_breaks += 1
            self.recovery.on_chain_break(flow, emission.src)

    def _dispatch_accepted(self, result: Accepted, emission: Emission) -> None:
        body, src = result.body, emission.src
        if self.adversary is not None:
            self.adversary.on_accepted(body, src, emission)
        if result.flow == FLOW_ER:
            if isinstance(body, wire.SrReq):
                self.recovery.on_srreq(body, src)
            elif isinstance(body, wire.SrRes):
                self.recovery.on_srres(body, src)
            return
        cc_watch = (self.cfg.mode == "PSMrp" and isinstance(body, wire.Cc)
                    and body.is_response and emission.via_tunnel)
        before = None
        if cc_watch:
            info = self.engine.cache.get(src)
            before = info.cc_state if info else None
        was_parentless = self.engine.parent is None and not self.is_root
        self.engine.handle_body(body, src, emission.dst)
        if cc_watch:
            info = self.engine.cache.get(src)
            if info and info.cc_state == "verified" and before != "verified":
                self.ledger.cc_tunnel_verifications += 1
        if was_parentless and self.engine.parent is not None:
            self.ever_joined = True
            self._flush_queue()

    def _on_parent_change(self, old, new) -> None:
        self.ledger.parent_switches += 1
        self.ever_joined = True
        self._flush_queue()

    # data plane

    def start_app(self) -> None:
        if self.is_root or self.is_wh_relay:
            return
        offset = self.rng.randrange(self.cfg.data_period_s * 1_000_000)
        self.loop.schedule(offset, self._app_tick)

    def _app_tick(self) -> None:
        pkt = DataPacket(self.node_id, self.app_seq, self.loop.now())
        self.app_seq += 1
        self.ledger.generated_by[self.node_id] = self.app_seq
        self._route_data(pkt)
        self.loop.schedule(self.cfg.data_period_s * 1_000_000, self._app_tick)

    def _route_data(self, pkt: DataPacket) -> None:
        if self.adversary is not None and \
                isinstance(self.adversary, attacks.CaBehavior) and \
                self.adversary.active and pkt.origin_id != self.node_id:
            self.ledger.set_fate(pkt, FATE_ADVERSARY)
            return
        parent = self.engine.parent
        if parent is None or self.engine.probing:
            self._enqueue(pkt)
            return
        self._tx_data(pkt, parent)

    def _enqueue(self, pkt: DataPacket) -> None:
        if len(self.queue) >= DATA_QUEUE_CAP:
            self.ledger.set_fate(pkt, FATE_STRANDED)
            return
        self.queue.append(pkt)

    def _tx_data(self, pkt: DataPacket, parent: int) -> None:
        delivered = self.medium.transmit(self, pkt, "data", self.addr, parent)
        if not delivered:
            self.ledger.set_fate(pkt, FATE_LOSS)
        self.engine.note_unicast_feedback(parent, bool(delivered))

    def _flush_queue(self) -> None:
        while self.queue and self.engine.parent is not None \
                and not self.engine.probing:
            self._tx_data(self.queue.popleft(), self.engine.parent)

    def _on_data(self, pkt: DataPacket) -> None:
        if self.is_root:
            self.ledger.deliver(pkt, self.loop.now())
            return
        pkt.hops += 1
        if pkt.hops > DATA_TTL_HOPS:
            self.ledger.set_fate(pkt, FATE_STRANDED)
            return
        self._route_data(pkt)

    # housekeeping

    def start(self) -> None:
        self.engine.start()
        self.start_app()
        if self.chain is not None and self.cfg.snapshot_period_s > 0:
            self.loop.schedule(self.cfg.snapshot_period_s * 1_000_000,
                               self._snapshot_tick)

    def _snapshot_tick(self) -> None:
        self.last_snapshot = self.chain.persist()
        self.loop.schedule(self.cfg.snapshot_period_s * 1_000_000,
                           self._snapshot_tick)

    def finalize(self) -> None:
        counted = self.ever_joined
        for pkt in self.queue:
            if counted:
                self.ledger.set_fate(pkt, FATE_STRANDED)
            else:
                self.ledger.fates.pop(pkt.key, None)
        self.queue.clear()
        if not counted and not self.is_root:
            # a node that never associated sent nothing toward the root
            for key in [k for k in self.ledger.fates
                        if k[0] == self.node_id]:
                del self.ledger.fates[key]
            self.ledger.generated_by[self.node_id] = 0


class RelayEntity:
    """Radio-only wormhole endpoint: hears everything, owns no stack."""

    is_wh_relay = True
    stack_active = False

    def __init__(self, node_id: int, medium: Medium, loop: EventLoop):
        self.node_id = node_id
        self.addr = node_id
        self.medium = medium
        self.loop = loop
        self.behavior: attacks.WhRelay | None = None
        self.overhear = None

    def now(self) -> int:
        return self.loop.now()

    def schedule(self, delay_us: int, fn) -> None:
        self.loop.schedule(delay_us, fn)

    def raw_transmit(self, data: bytes, src: int, dst: int,
                     via_tunnel: bool = False):
        return self.medium.transmit(self, data, "ctrl", src, dst, via_tunnel)

    def on_delivery(self, emission):  # pragma: no cover - stack inactive
        pass


NETWORK_KEY_SEED = "preinstalled-network-key"
WRONG_KEY_SEED = "external-adversary-key"


def run_round(cfg: ScenarioConfig, round_index: int) -> MetricsLedger:
    seed = cfg.base_seed + round_index
    topo = generate_topology(cfg, seed)
    loop = EventLoop()
    loss_rng = random.Random(f"loss:{seed}")
    legit_ids = [i for i in range(cfg.nodes) if i not in topo.adversary_ids]
    ledger = MetricsLedger(cfg, legit_ids)
    medium = Medium(topo, cfg, loop, ledger, loss_rng)

    net_key = PresharedKey.from_seed(NETWORK_KEY_SEED)
    wrong_key = PresharedKey.from_seed(WRONG_KEY_SEED)

    entities = []
    relays = []
    for node_id in range(cfg.nodes):
        node_rng = random.Random(f"node:{seed}:{node_id}")
        if node_id in topo.adversary_ids and cfg.attack == "WH":
            relay = RelayEntity(node_id, medium, loop)
            relay.behavior = attacks.WhRelay(
                attacks.AdversaryConfig(
                    attacks.KIND_WH, cfg.knowledge,
                    activation_us=int(cfg.activation_s * 1_000_000)),
                relay)
            relay.overhear = relay.behavior.on_overhear
            loop.schedule(int(cfg.activation_s * 1_000_000),
                          relay.behavior.on_activate)
            relays.append(relay)
            entities.append(relay)
            continue
        adversary_cfg = None
        key = net_key
        if node_id in topo.adversary_ids and cfg.attack in ("NA", "CA"):
            adversary_cfg = attacks.AdversaryConfig(
                cfg.attack, cfg.knowledge,
                activation_us=int(cfg.activation_s * 1_000_000),
                ca_target=topo.ca_target)
            if cfg.knowledge == attacks.EXTERNAL and cfg.mode != "UM":
                key = wrong_key
        node = Node(node_id, cfg, medium, loop, ledger, key,
                    is_root=(node_id == topo.root), rng=node_rng,
                    adversary_cfg=adversary_cfg)
        entities.append(node)
    if len(relays) == 2:
        relays[0].behavior.peer = relays[1].behavior
        relays[1].behavior.peer = relays[0].behavior

    medium.entities = entities
    for entity in entities:
        if isinstance(entity, Node):
            entity.start()

    loop.run_until(cfg.duration_us)

    total_generated = 0
    for entity in entities:
        if isinstance(entity, Node):
            entity.finalize()
            ledger.replays_emitted += getattr(entity.adversary, "replays", 0)
            ledger.shadow_dios = max(
                ledger.shadow_dios,
                getattr(entity.adversary, "shadow_dios", 0))
            if entity.recovery is not None:
                ledger.recoveries_completed += \
                    entity.recovery.recoveries_completed
    for relay in relays:
        ledger.tunneled_frames += relay.behavior.tunneled
    total_generated = sum(ledger.generated_by.values())
    ledger.data_sent = total_generated
    counts = ledger.fate_counts()
    assert sum(counts.values()) == ledger.data_sent, \
        f"conservation broken: {counts} vs sent {ledger.data_sent}"
    return ledger


def summarize(values) -> tuple[float, float]:
    """Mean and 95% Student-t confidence half-width over round values."""
    vals = [v for v in values]
    n = len(vals)
    if n == 0:
        return float("nan"), float("nan")
    mean = statistics.fmean(vals)
    if n == 1:
        return mean, 0.0
    spread = statistics.pstdev(vals)
    if spread == 0.0:
        return mean, 0.0
    t = scipy_stats.t.ppf(0.975, n - 1)
    return mean, t * spread / math.sqrt(n)

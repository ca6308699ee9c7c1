"""Minimal standard-shaped RPL engine shared by every secure mode.

One engine instance per node owns the routing view: rank, preferred parent,
neighbor cache with ETX estimates, trickle timer, downward routes (root) and
the optional consistency-check gate used by the replay-protected mode.  The
engine is mode-agnostic: frames reach it only after the mode's pipeline
decoded them, and it emits abstract bodies that the node's pipeline seals.

Parent failure handling is neighbor-unreachability-detection flavored:
unicast delivery feedback (the stand-in for link-layer ACK statistics) feeds
the ETX estimator, and a streak of failures to the preferred parent triggers
unicast DIS probes; three consecutive failures mark the parent unreachable
for a hold-down period and force re-selection.  Only solicited probe
feedback clears suspicion - overheard frames do not confirm reachability.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import wire

MIN_HOP_RANK_INCREASE = 128
INFINITE_RANK = 0xFFFF
ROOT_RANK = MIN_HOP_RANK_INCREASE


def compute_rank(parent_rank: int, etx: float) -> int:
    """MRHOF-style rank: parent rank plus the ETX-scaled hop increment,
    never less than one full hop, saturating at the infinite rank."""
    increment = max(MIN_HOP_RANK_INCREASE, round(etx * MIN_HOP_RANK_INCREASE))
    return min(parent_rank + increment, INFINITE_RANK)


@dataclass
class NeighborInfo:
    rank: int
    etx: float = 1.0
    last_heard: int = 0
    cc_state: str = "none"  # none | challenged | verified
    cc_nonce: int = 0
    cc_time: int = 0
    unreachable_until: int = 0


@dataclass
class TrickleState:
    interval_us: int = 0
    counter: int = 0
    t_fire_us: int = 0
    interval_end_us: int = 0


@dataclass
class RplConfig:
    imin_us: int = 4_000_000
    doublings: int = 8
    redundancy_k: int = 10
    dao_period_us: int = 60_000_000
    replay_protect: bool = False
    etx_alpha: float = 0.9
    etx_fail_sample: float = 8.0
    etx_max: float = 16.0
    nud_fail_threshold: int = 3
    probe_gap_us: int = 2_000_000
    first_probe_delay_us: int = 10_000
    holddown_us: int = 60_000_000
    orphan_dis_period_us: int = 15_000_000
    quarantine_expiry_us: int = 10_000_000
    response_jitter_us: int = 20_000

    @property
    def imax_us(self) -> int:
        return self.imin_us << self.doublings


class RplEngine:
    """Routing state machine for one node.

    Collaborators are injected: ``now()`` (sim time, us), ``schedule(delay,
    fn)``, and ``emit(body, dst)`` which seals and transmits a control body
    through the node's mode pipeline.  Optional hooks: ``on_parent_change``,
    ``on_parent_ok`` (suspicion cleared), ``on_orphaned``.
    """

    def __init__(self, addr: int, is_root: bool, cfg: RplConfig,
                 rng: random.Random, *, now, schedule, emit,
                 on_parent_change=None, on_parent_ok=None, on_orphaned=None):
        self.addr = addr
        self.is_root = is_root
        self.cfg = cfg
        self.rng = rng
        self.now = now
        self.schedule = schedule
        self.emit = emit
        self.on_parent_change = on_parent_change
        self.on_parent_ok = on_parent_ok
        self.on_orphaned = on_orphaned

        self.dodag_id = addr if is_root else None
        self.version = 1
        self.rank = ROOT_RANK if is_root else INFINITE_RANK
        self.parent: int | None = None
        self.cache: dict[int, NeighborInfo] = {}
        self.routes: dict[int, int] = {}
        self.trickle = TrickleState()
        self._trickle_gen = 0
        self.dao_seq = 0
        self.dao_pending = False
        self._dao_forwarded: dict[int, int] = {}
        self.parent_fail_streak = 0
        self.probing = False
        self._probe_gen = 0
        self._quarantine: dict[int, tuple[wire.Dio, int]] = {}
        self.dio_rank_override = None  # adversary hook
        self.cc_nonce_mismatches = 0
        self.parent_switches = 0

    # lifecycle

    def start(self) -> None:
        if self.is_root:
            self._trickle_reset()
        else:
            self.schedule(self.rng.randrange(1_000_000, 5_000_000),
                          self._orphan_tick)
        self.schedule(self.cfg.dao_period_us
                      + self.rng.randrange(self.cfg.dao_period_us),
                      self._dao_tick)

    def _orphan_tick(self) -> None:
        if self.parent is None and not self.is_root:
            self.emit(wire.Dis(), wire.MULTICAST)
            self.schedule(self.cfg.orphan_dis_period_us, self._orphan_tick)

    # rank / parent selection

    def _advertised_rank(self) -> int:
        if self.dio_rank_override is not None:
            override = self.dio_rank_override()
            if override is not None:
                return override
        return self.rank

    def _resulting_rank(self, info: NeighborInfo) -> int:
        return compute_rank(info.rank, info.etx)

    def _candidates(self):
        now = self.now()
        for addr, info in self.cache.items():
            if info.rank >= INFINITE_RANK:
                continue
            if now < info.unreachable_until:
                continue
            if self.cfg.replay_protect and info.cc_state != "verified":
                continue
            yield addr, info

    def _select_parent(self) -> None:
        if self.is_root:
            return
        best = None
        best_key = None
        for addr, info in self._candidates():
            key = (self._resulting_rank(info), addr)
            if best_key is None or key < best_key:
                best, best_key = addr, key
        if best is None:
            if self.parent is not None:
                self._set_parent(None)
            return
        if self.parent is None:
            self._set_parent(best)
            return
        current = self.cache.get(self.parent)
        if current is None or self.now() < current.unreachable_until:
            self._set_parent(best)
            return
        current_key = (self._resulting_rank(current), self.parent)
        if best != self.parent and best_key < current_key:
            self._set_parent(best)
        else:
            self.rank = self._resulting_rank(current)

    def _set_parent(self, parent: int | None) -> None:
        old = self.parent
        self.parent = parent
        self.parent_fail_streak = 0
        self.probing = False
        self._probe_gen += 1
        if parent is None:
            self.rank = INFINITE_RANK
            if old is not None:
                if self.on_orphaned is not None:
                    self.on_orphaned()
                self.schedule(self.rng.randrange(100_000), self._orphan_tick)
            return
        self.rank = self._resulting_rank(self.cache[parent])
        if parent != old:
            self.parent_switches += 1
            self._trickle_reset()
            self.schedule(self.rng.randrange(500_000, 2_000_000),
                          self._emit_dao_once)
            if self.on_parent_change is not None:
                self.on_parent_change(old, parent)

    # message handling (bodies already decoded by the mode pipeline)

    def handle_dio(self, dio: wire.Dio, src: int) -> None:
        if dio.rank >= INFINITE_RANK or src == self.addr or self.is_root:
            return
        if dio.version < self.version:
            return  # stale version
        info = self.cache.get(src)
        if info is None:
            info = NeighborInfo(rank=dio.rank, last_heard=self.now())
            self.cache[src] = info
        if self.cfg.replay_protect and info.cc_state != "verified":
            self._quarantine[src] = (dio, self.now())
            if info.cc_state == "none" or (
                    info.cc_state == "challenged"
                    and self.now() - info.cc_time > 3_000_000):
                self._cc_challenge(src, info)
            return
        self._process_dio(dio, src, info)

    def _process_dio(self, dio: wire.Dio, src: int, info: NeighborInfo) -> None:
        info.rank = dio.rank
        info.last_heard = self.now()
        if info.unreachable_until and self.now() >= info.unreachable_until:
            # hold-down over and the neighbor is audible again: the old link
            # statistics aged out with the silence
            info.unreachable_until = 0
            info.etx = 1.0
        # freshness heals the link estimate toward 1
        info.etx = max(1.0, self.cfg.etx_alpha * info.etx
                       + (1 - self.cfg.etx_alpha) * 1.0)
        if self.dodag_id is None:
            self.dodag_id = dio.dodag_id
        self.trickle.counter += 1
        self._select_parent()

    def handle_dis(self, dis: wire.Dis, src: int, dst: int) -> None:
        if dst == wire.MULTICAST:
            self._trickle_reset()
        if self.parent is None and not self.is_root:
            return  # not joined: nothing to advertise
        delay = self.rng.randrange(1, self.cfg.response_jitter_us)
        self.schedule(delay, lambda: self._emit_dio(dst=src))

    def handle_dao(self, dao: wire.Dao, src: int) -> None:
        if self.is_root:
            self.routes[dao.target] = src
            self.emit(wire.DaoAck(dao.seq, 0), src)
            return
        if self._dao_forwarded.get(dao.target, -1) >= dao.seq:
            return
        self._dao_forwarded[dao.target] = dao.seq
        self.emit(wire.DaoAck(dao.seq, 0), src)
        if self.parent is not None:
            self.emit(wire.Dao(dao.target, dao.seq), self.parent)

    def handle_daoack(self, ack: wire.DaoAck, src: int) -> None:
        if ack.seq == self.dao_seq:
            self.dao_pending = False

    def handle_cc(self, cc: wire.Cc, src: int) -> None:
        if not self.cfg.replay_protect:
            return
        if not cc.is_response:
            self.emit(wire.Cc(cc.nonce, True), src)
            return
        self.cc_verify(cc, src)

    def cc_verify(self, cc: wire.Cc, src: int) -> bool:
        info = self.cache.get(src)
        if info is None or info.cc_state != "challenged":
            return False
        if cc.nonce != info.cc_nonce:
            self.cc_nonce_mismatches += 1
            self._quarantine.pop(src, None)
            return False
        info.cc_state = "verified"
        pending = self._quarantine.pop(src, None)
        if pending is not None:
            self._process_dio(pending[0], src, info)
        return True

    def _cc_challenge(self, src: int, info: NeighborInfo) -> None:
        nonce = self.rng.getrandbits(32) | 1
        info.cc_state = "challenged"
        info.cc_nonce = nonce
        info.cc_time = self.now()
        self.emit(wire.Cc(nonce, False), src)
        gen = (src, nonce)
        self.schedule(self.cfg.quarantine_expiry_us,
                      lambda: self._expire_quarantine(gen))

    def _expire_quarantine(self, gen) -> None:
        src, nonce = gen
        info = self.cache.get(src)
        if info is not None and info.cc_state == "challenged" \
                and info.cc_nonce == nonce:
            self._quarantine.pop(src, None)

    # delivery feedback (unicast only): ETX + parent reachability

    def note_unicast_feedback(self, dst: int, delivered: bool) -> None:
        info = self.cache.get(dst)
        if info is not None:
            sample = 1.0 if delivered else self.cfg.etx_fail_sample
            info.etx = min(self.cfg.etx_max,
                           max(1.0, self.cfg.etx_alpha * info.etx
                               + (1 - self.cfg.etx_alpha) * sample))
        if dst != self.parent:
            return
        if delivered:
            self.parent_fail_streak = 0
            if self.probing:
                self.probing = False
                self._probe_gen += 1
                if self.on_parent_ok is not None:
                    self.on_parent_ok()
            return
        self.parent_fail_streak += 1
        if self.parent_fail_streak >= self.cfg.nud_fail_threshold:
            self._parent_unreachable()
        elif not self.probing:
            self.probing = True
            self._probe_gen += 1
            self._schedule_probe(self.cfg.first_probe_delay_us)
        else:
            self._schedule_probe(self.cfg.probe_gap_us)

    def _schedule_probe(self, delay: int) -> None:
        gen = self._probe_gen
        self.schedule(delay, lambda: self._probe_fire(gen))

    def _probe_fire(self, gen: int) -> None:
        if gen != self._probe_gen or not self.probing or self.parent is None:
            return
        self.emit(wire.Dis(), self.parent)

    def _parent_unreachable(self) -> None:
        info = self.cache.get(self.parent)
        if info is not None:
            info.unreachable_until = self.now() + self.cfg.holddown_us
        self._set_parent(None)
        self._select_parent()

    # trickle

    def _trickle_reset(self) -> None:
        self.trickle.interval_us = self.cfg.imin_us
        self._trickle_begin()

    def _trickle_begin(self) -> None:
        t = self.trickle
        self._trickle_gen += 1
        gen = self._trickle_gen
        t.counter = 0
        half = t.interval_us // 2
        fire_in = half + self.rng.randrange(half)
        t.t_fire_us = self.now() + fire_in
        t.interval_end_us = self.now() + t.interval_us
        self.schedule(fire_in, lambda: self._trickle_fire(gen))
        self.schedule(t.interval_us, lambda: self._trickle_end(gen))

    def _trickle_fire(self, gen: int) -> None:
        if gen != self._trickle_gen:
            return
        if self.trickle.counter < self.cfg.redundancy_k and \
                (self.is_root or self.parent is not None):
            self._emit_dio(wire.MULTICAST)

    def _trickle_end(self, gen: int) -> None:
        if gen != self._trickle_gen:
            return
        self.trickle.interval_us = min(self.trickle.interval_us * 2,
                                       self.cfg.imax_us)
        self._trickle_begin()

    def _emit_dio(self, dst: int) -> None:
        if self.dodag_id is None:
            return
        self.emit(wire.Dio(self.dodag_id, self.version,
                           self._advertised_rank()), dst)

    # dao

    def _dao_tick(self) -> None:
        self._emit_dao_once()
        self.schedule(self.cfg.dao_period_us, self._dao_tick)

    def _emit_dao_once(self) -> None:
        if self.is_root or self.parent is None:
            return
        self.dao_seq = (self.dao_seq + 1) & 0xFF
        self.dao_pending = True
        self.emit(wire.Dao(self.addr, self.dao_seq), self.parent)

    # dispatch from the node layer

    def handle_body(self, body: wire.ControlBody, src: int, dst: int) -> None:
        if isinstance(body, wire.Dio):
            self.handle_dio(body, src)
        elif isinstance(body, wire.Dis):
            self.handle_dis(body, src, dst)
        elif isinstance(body, wire.Dao):
            self.handle_dao(body, src)
        elif isinstance(body, wire.DaoAck):
            self.handle_daoack(body, src)
        elif isinstance(body, wire.Cc):
            self.handle_cc(body, src)

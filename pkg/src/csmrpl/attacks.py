"""Adversary behaviors: neighbor (DIO replay) attack, identity clone with
selective forwarding, and the out-of-band wormhole relay pair.

Every adversary starts as a fully legitimate node and activates its attack
behavior at a configured time (wormhole relays are the exception: they are
passive listeners that never originate frames and never join).  Internal
adversaries hold the network's preinstalled key; external adversaries hold a
syntactically valid but wrong key, so every frame they seal fails
authentication at the victims.

Identification capability follows knowledge: an internal adversary
identifies advertisement frames through its own protocol stack (it decodes
whatever its keys and chain state allow), while an external adversary can
only sniff the plaintext ICMP type/code bytes, which match the plain
advertisement code - in any secured mode the on-air code differs and the
attack starves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import wire

KIND_NA = "NA"
KIND_CA = "CA"
KIND_WH = "WH"

INTERNAL = "internal"
EXTERNAL = "external"


@dataclass
class AdversaryConfig:
    kind: str
    knowledge: str = INTERNAL
    activation_us: int = 120_000_000
    ca_target: int | None = None   # resolved against the topology
    wh_peer: int | None = None     # the other relay's node id
    replay_dedup_us: int = 2_000_000
    shadow_dedup_us: int = 500_000
    shadow_beacon_us: int = 15_000_000
    tunnel_delay_us: int = 1_000
    counter_jump: int = 10_000


class NaBehavior:
    """Replays every advertisement it identifies, once, as a multicast,
    byte-identical and carrying the original sender address."""

    def __init__(self, cfg: AdversaryConfig, node):
        self.cfg = cfg
        self.node = node
        self.active = False
        self._seen: dict[int, int] = {}
        self.replays = 0
        self.identified = 0

    def on_activate(self) -> None:
        self.active = True

    def _replay(self, data: bytes, src: int) -> None:
        now = self.node.now()
        key = hash(data)
        last = self._seen.get(key)
        if last is not None and now - last < self.cfg.replay_dedup_us:
            return
        self._seen[key] = last if last is not None else now
        if len(self._seen) > 4096:
            self._seen = {k: t for k, t in self._seen.items()
                          if now - t < self.cfg.replay_dedup_us}
        self.identified += 1
        self.replays += 1
        self.node.schedule(1_000, lambda: self.node.raw_transmit(
            data, src=src, dst=wire.MULTICAST))

    def on_accepted(self, body, src: int, emission) -> None:
        """Internal identification: whatever the adversary's own stack
        decodes to an advertisement is replayed without modification."""
        if not self.active or self.cfg.knowledge != INTERNAL:
            return
        if isinstance(body, wire.Dio):
            self._replay(emission.data, emission.src)

    def on_overhear(self, emission) -> None:
        """External identification: plaintext type/code sniffing only."""
        if not self.active or self.cfg.knowledge != EXTERNAL:
            return
        if emission.kind != "ctrl":
            return
        data = emission.data
        if len(data) >= 4 and data[0] == wire.RPL_ICMP_TYPE \
                and data[1] == wire.CODE_DIO:
            self._replay(data, emission.src)


class CaBehavior:
    """Clones the target's identity (address at activation), mirrors its
    advertised rank, shadows its transmissions with its own advertisements,
    and silently drops every data packet routed through it."""

    def __init__(self, cfg: AdversaryConfig, node):
        self.cfg = cfg
        self.node = node
        self.active = False
        self.victim_addr = cfg.ca_target
        self.mirrored_rank: int | None = None
        self.victim_counter_max = 0
        self._last_shadow = -(1 << 62)
        self.shadow_dios = 0

    def on_activate(self) -> None:
        self.active = True
        engine = self.node.engine
        info = engine.cache.get(self.victim_addr)
        if info is not None:
            self.mirrored_rank = info.rank
        elif self.mirrored_rank is None:
            self.mirrored_rank = 256  # never decoded the victim: guess
        self.node.set_addr(self.victim_addr)
        engine.dio_rank_override = lambda: self.mirrored_rank
        pipeline = self.node.pipeline
        if hasattr(pipeline, "tx_counter"):
            pipeline.tx_counter = max(pipeline.tx_counter,
                                      self.victim_counter_max
                                      + self.cfg.counter_jump)
        self._beacon()

    def drops_forwarded_data(self) -> bool:
        return self.active

    def on_accepted(self, body, src: int, emission) -> None:
        # pre-activation rank tracking through the legitimate stack
        if isinstance(body, wire.Dio) and src == self.victim_addr:
            self.mirrored_rank = body.rank

    def on_overhear(self, emission) -> None:
        if emission.kind != "ctrl":
            return
        data = emission.data
        if emission.src == self.victim_addr and len(data) >= 8 \
                and data[1] in (wire.CODE_SEC_DIS, wire.CODE_SEC_DIO,
                                wire.CODE_SEC_DAO, wire.CODE_SEC_DAO_ACK,
                                wire.CODE_CC):
            # the security-section counter is an unencrypted header field
            counter = int.from_bytes(data[4:8], "big")
            self.victim_counter_max = max(self.victim_counter_max, counter)
            if self.active:
                pipeline = self.node.pipeline
                if hasattr(pipeline, "tx_counter"):
                    pipeline.tx_counter = max(
                        pipeline.tx_counter,
                        self.victim_counter_max + self.cfg.counter_jump)
        if self.active and emission.src == self.victim_addr \
                and emission.transmitter is not self.node:
            self._shadow()

    def _shadow(self) -> None:
        now = self.node.now()
        if now - self._last_shadow < self.cfg.shadow_dedup_us:
            return
        self._last_shadow = now
        self._emit_mirrored_dio()

    def _beacon(self) -> None:
        if not self.active:
            return
        self._emit_mirrored_dio()
        self.node.schedule(self.cfg.shadow_beacon_us, self._beacon)

    def _emit_mirrored_dio(self) -> None:
        engine = self.node.engine
        dodag = engine.dodag_id if engine.dodag_id is not None else 0
        self.shadow_dios += 1
        self.node.emit_control(
            wire.Dio(dodag, engine.version, self.mirrored_rank or 256),
            wire.MULTICAST)


class WhRelay:
    """One endpoint of the out-of-band tunnel: promiscuous, never joins,
    never originates; after activation it re-emits every control frame it
    hears at its peer's location, verbatim."""

    def __init__(self, cfg: AdversaryConfig, entity):
        self.cfg = cfg
        self.entity = entity   # radio-level participant (position + now)
        self.peer: "WhRelay | None" = None
        self.active = False
        self._seen: dict[int, int] = {}
        self.tunneled = 0

    def on_activate(self) -> None:
        self.active = True

    def on_overhear(self, emission) -> None:
        if not self.active or self.peer is None:
            return
        if emission.kind != "ctrl":
            return
        if getattr(emission.transmitter, "is_wh_relay", False):
            return  # never re-tunnel a tunnel emission
        now = self.entity.now()
        key = hash(emission.data)
        last = self._seen.get(key)
        if last is not None and now - last < self.cfg.replay_dedup_us:
            return
        self._seen[key] = now
        if len(self._seen) > 8192:
            self._seen = {k: t for k, t in self._seen.items()
                          if now - t < self.cfg.replay_dedup_us}
        self.tunneled += 1
        peer_entity = self.peer.entity
        data, src, dst = emission.data, emission.src, emission.dst
        self.entity.schedule(
            self.cfg.tunnel_delay_us,
            lambda: peer_entity.raw_transmit(data, src=src, dst=dst,
                                             via_tunnel=True))

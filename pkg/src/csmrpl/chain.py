"""Per-node secret-chaining state and the chained-mode send/receive pipeline.

Every node keeps one SC table entry per neighbor (the RX values used to
decode that neighbor's unicast and multicast flows, the TX value for its own
next unicast frame toward the neighbor, the ER value used to reach the
neighbor in recovery, and the neighbor's TrustVal) plus two node-level
values: the SC for its own next multicast transmission and the value it
expects incoming emergency-flow frames to be encoded with.

Sending rotates TX-side values at transmission time (control traffic is
unacknowledged, so both ends rotate on the same frame; loss is repaired by
the recovery exchange).  Receiving decodes the code byte with the stored RX
value for the frame's flow: a valid decoded code leads to payload decode,
AEAD open and RX rotation from the carried options; an invalid one is a
chain break handed to recovery; encoded frames from neighbors without a
table entry are dropped without processing - that drop is the wormhole /
neighbor-replay mitigation.
"""

from __future__ import annotations

import random
import struct
import zlib
from dataclasses import dataclass, field

from . import codec, trust, wire
from .codec import AuthFailure, MalformedEnvelope, PresharedKey

FLOW_UC = "UC"
FLOW_MC = "MC"
FLOW_ER = "ER"

SNAPSHOT_MAGIC = b"SCS1"
SNAPSHOT_VERSION = 1


class CorruptSnapshot(Exception):
    """Snapshot failed validation; caller falls back to an empty table."""


@dataclass
class ScTableEntry:
    neighbor: int
    sc_uc_rx: int = 0
    sc_mc_rx: int = 0
    sc_uc_tx: int = 0
    sc_er_tx: int = 0
    trust_val: int = trust.DEFAULT_POLICY.trust_max
    heard_once: bool = False


@dataclass(frozen=True)
class Accepted:
    code: int
    body: wire.ControlBody
    options: wire.ScOptions
    flow: str


@dataclass(frozen=True)
class ChainBreak:
    flow: str


@dataclass(frozen=True)
class Dropped:
    reason: str


ReceiveResult = Accepted | ChainBreak | Dropped


class ChainState:
    """SC table plus node-level chaining values and frame counters."""

    def __init__(self, addr: int, rng: random.Random,
                 policy: trust.TrustPolicy = trust.DEFAULT_POLICY):
        self.addr = addr
        self.rng = rng
        self.policy = policy
        self.table: dict[int, ScTableEntry] = {}
        self.sc_mc_tx = 0
        self.sc_er_rx = 0
        self.sc_er_rx_prev = 0
        self.tx_counter = 0
        self.last_rx_counter: dict[int, int] = {}

    def ensure_entry(self, neighbor: int) -> ScTableEntry:
        entry = self.table.get(neighbor)
        if entry is None:
            entry = ScTableEntry(neighbor,
                                 trust_val=self.policy.trust_max)
            self.table[neighbor] = entry
        return entry

    def ensure_er_rx(self) -> int:
        if self.sc_er_rx == 0:
            self.sc_er_rx = codec.generate_sc(self.rng)
        return self.sc_er_rx

    def rotate_er_rx(self) -> int:
        """ER values rotate only as part of a recovery answer.  The previous
        value stays accepted for decoding (one-deep grace) because other
        neighbors learn the new one only from the next regular frame."""
        self.sc_er_rx_prev = self.sc_er_rx
        self.sc_er_rx = codec.generate_sc(self.rng)
        return self.sc_er_rx

    def next_counter(self) -> int:
        self.tx_counter += 1
        return self.tx_counter

    # snapshot persistence (see docs/snapshot.md)

    def persist(self) -> bytes:
        out = bytearray()
        out += SNAPSHOT_MAGIC
        out += struct.pack(">BHIIII", SNAPSHOT_VERSION, self.addr,
                           self.sc_mc_tx, self.sc_er_rx, self.sc_er_rx_prev,
                           self.tx_counter)
        out += struct.pack(">H", len(self.table))
        for neighbor in sorted(self.table):
            e = self.table[neighbor]
            out += struct.pack(">HIIIIhB", e.neighbor, e.sc_uc_rx, e.sc_mc_rx,
                               e.sc_uc_tx, e.sc_er_tx, e.trust_val,
                               1 if e.heard_once else 0)
        out += struct.pack(">H", len(self.last_rx_counter))
        for addr in sorted(self.last_rx_counter):
            out += struct.pack(">HI", addr, self.last_rx_counter[addr])
        out += struct.pack(">I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def restore(cls, snapshot: bytes, rng: random.Random,
                policy: trust.TrustPolicy = trust.DEFAULT_POLICY) -> "ChainState":
        if len(snapshot) < 4 + 15 + 2 + 2 + 4:
            raise CorruptSnapshot("truncated")
        body, crc = snapshot[:-4], snapshot[-4:]
        if struct.unpack(">I", crc)[0] != zlib.crc32(body):
            raise CorruptSnapshot("bad crc")
        if body[:4] != SNAPSHOT_MAGIC:
            raise CorruptSnapshot("bad magic")
        pos = 4
        version, addr, sc_mc_tx, sc_er_rx, tx_counter = \
            struct.unpack_from(">BHIII", body, pos)
        if version != SNAPSHOT_VERSION:
            raise CorruptSnapshot(f"unsupported version {version}")
        pos += 15
        state = cls(addr, rng, policy)
        state.sc_mc_tx = sc_mc_tx
        state.sc_er_rx = sc_er_rx
        state.tx_counter = tx_counter
        (n_entries,) = struct.unpack_from(">H", body, pos)
        pos += 2
        try:
            for _ in range(n_entries):
                vals = struct.unpack_from(">HIIIIhB", body, pos)
                pos += 21
                state.table[vals[0]] = ScTableEntry(
                    vals[0], vals[1], vals[2], vals[3], vals[4],
                    vals[5], vals[6] != 0)
            (n_rx,) = struct.unpack_from(">H", body, pos)
            pos += 2
            for _ in range(n_rx):
                a, c = struct.unpack_from(">HI", body, pos)
                pos += 6
                state.last_rx_counter[a] = c
        except struct.error as exc:
            raise CorruptSnapshot(str(exc)) from exc
        if pos != len(body):
            raise CorruptSnapshot("trailing bytes")
        return state


class CsmPipeline:
    """Builds and receives chained-mode frames for one node.

    ``on_untrusted(neighbor)`` fires when a decode outcome pushes a
    neighbor's TrustVal below the trigger (instrumentation hook).
    """

    def __init__(self, state: ChainState, key: PresharedKey,
                 on_untrusted=None):
        self.state = state
        self.key = key
        self.on_untrusted = on_untrusted
        self.chain_breaks = 0
        self.dropped_unknown = 0
        self.auth_failures = 0
        self.accepted = 0

    # sending

    def build_control(self, body: wire.ControlBody, dst: int) -> bytes:
        """Steps: prepare per the preinstalled-key procedures, generate the
        fresh SC, attach options per flow, encode code + payload with the
        current TX value, rotate."""
        st = self.state
        st.ensure_er_rx()
        code = wire.code_for(body, secure=True)
        if dst == wire.MULTICAST:
            cur = st.sc_mc_tx
            nxt = codec.generate_sc(st.rng)
            opts = wire.ScOptions(sc_mc_next=nxt, sc_er=st.sc_er_rx)
            st.sc_mc_tx = nxt
        else:
            entry = st.ensure_entry(dst)
            cur = entry.sc_uc_tx
            nxt = codec.generate_sc(st.rng)
            opts = wire.ScOptions(sc_uc_next=nxt, sc_mc_next=st.sc_mc_tx,
                                  sc_er=st.sc_er_rx)
            entry.sc_uc_tx = nxt
        plain = wire.encode_body(body) + wire.encode_options(opts)
        envelope = codec.seal_envelope(plain, self.key, st.next_counter(),
                                       st.addr)
        payload = codec.encode_payload(envelope, cur)
        frame = wire.WireFrame(codec.encode_code(code, cur), payload,
                               st.addr, dst)
        return wire.serialize(frame)

    def build_er(self, body: wire.SrReq | wire.SrRes, er_sc: int,
                 dst: int) -> bytes:
        """SRR frames keep their designated code verbatim and carry no
        options; no SC is generated for them."""
        st = self.state
        code = wire.code_for(body, secure=True)
        plain = wire.encode_body(body)
        envelope = codec.seal_envelope(plain, self.key, st.next_counter(),
                                       st.addr)
        payload = codec.encode_payload(envelope, er_sc)
        return wire.serialize(wire.WireFrame(code, payload, st.addr, dst))

    # receiving

    def _record(self, entry: ScTableEntry, success: bool) -> None:
        was_trusted = trust.is_trusted(entry, self.state.policy)
        trust.record_decode(entry, success, self.state.policy)
        if was_trusted and not trust.is_trusted(entry, self.state.policy) \
                and self.on_untrusted is not None:
            self.on_untrusted(entry.neighbor)

    def receive(self, data: bytes, src: int, dst: int) -> ReceiveResult:
        st = self.state
        header = wire.parse_header(data)
        payload = data[wire.HEADER_LEN:]
        entry = st.table.get(src)
        if entry is not None and not trust.is_trusted(entry, st.policy):
            return Dropped("untrusted")

        if header.code in (wire.CODE_SRREQ, wire.CODE_SRRES):
            return self._receive_er(header.code, payload, src)

        flow = FLOW_MC if dst == wire.MULTICAST else FLOW_UC
        sc = 0
        if entry is not None:
            sc = entry.sc_mc_rx if flow == FLOW_MC else entry.sc_uc_rx
        decoded = codec.encode_code(header.code, sc)
        if decoded not in wire.CHAINED_CODES:
            if entry is None:
                self.dropped_unknown += 1
                return Dropped("unknown-neighbor")
            self.chain_breaks += 1
            self._record(entry, False)
            return ChainBreak(flow)

        plain_payload = codec.encode_payload(payload, sc)
        try:
            counter, plain = codec.open_envelope(plain_payload, self.key, src)
        except MalformedEnvelope:
            if entry is not None:
                self._record(entry, False)
            return Dropped("malformed")
        except AuthFailure:
            self.auth_failures += 1
            if entry is not None:
                self._record(entry, False)
            return Dropped("auth-failure")
        if counter <= st.last_rx_counter.get(src, 0):
            if entry is not None:
                self._record(entry, False)
            return Dropped("counter-replay")
        try:
            body, opts = wire.parse_body(decoded, plain)
        except wire.MalformedBody:
            if entry is not None:
                self._record(entry, False)
            return Dropped("malformed")

        st.last_rx_counter[src] = counter
        entry = st.ensure_entry(src)
        self._record(entry, True)
        if flow == FLOW_UC and opts.sc_uc_next is not None:
            entry.sc_uc_rx = opts.sc_uc_next
        if opts.sc_mc_next is not None:
            entry.sc_mc_rx = opts.sc_mc_next
        if opts.sc_er is not None:
            entry.sc_er_tx = opts.sc_er
        self.accepted += 1
        return Accepted(decoded, body, opts, flow)

    def _receive_er(self, code: int, payload: bytes, src: int) -> ReceiveResult:
        """ER frames decode under the node's own expected ER value (0 means
        the flow has never been announced and decodes as bootstrap, like the
        other flows).  Failures are silently ignored (a stale ER, an
        adversary probe, or a multicast recovery answer addressed to someone
        else) and never touch trust."""
        st = self.state
        er_candidates = [st.sc_er_rx]
        if st.sc_er_rx_prev != st.sc_er_rx:
            er_candidates.append(st.sc_er_rx_prev)
        counter = plain = None
        for er in er_candidates:
            plain_payload = codec.encode_payload(payload, er)
            try:
                counter, plain = codec.open_envelope(plain_payload, self.key,
                                                     src)
                break
            except (MalformedEnvelope, AuthFailure):
                continue
        if plain is None:
            return Dropped("er-undecodable")
        if counter <= st.last_rx_counter.get(src, 0):
            return Dropped("counter-replay")
        try:
            body, opts = wire.parse_body(code, plain)
        except wire.MalformedBody:
            return Dropped("er-undecodable")
        st.last_rx_counter[src] = counter
        return Accepted(code, body, opts, FLOW_ER)

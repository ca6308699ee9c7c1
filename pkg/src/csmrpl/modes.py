"""Frame pipelines for the unsecured and preinstalled-key modes.

All pipelines share one interface (``build_control`` / ``receive``) so the
routing engine above them is mode-agnostic; only the encode/decode path
differs.  The chained-mode pipeline lives in :mod:`csmrpl.chain`.
"""

from __future__ import annotations

from . import codec, wire
from .chain import FLOW_MC, FLOW_UC, Accepted, Dropped, ReceiveResult
from .codec import AuthFailure, MalformedEnvelope, PresharedKey

PLAIN_CODES = frozenset({wire.CODE_DIS, wire.CODE_DIO, wire.CODE_DAO,
                         wire.CODE_DAO_ACK})
SECURE_CODES = frozenset({wire.CODE_SEC_DIS, wire.CODE_SEC_DIO,
                          wire.CODE_SEC_DAO, wire.CODE_SEC_DAO_ACK,
                          wire.CODE_CC})


def _flow(dst: int) -> str:
    return FLOW_MC if dst == wire.MULTICAST else FLOW_UC


class UnsecuredPipeline:
    """No security features: plain codes, plaintext bodies."""

    def __init__(self, addr: int):
        self.addr = addr

    def build_control(self, body: wire.ControlBody, dst: int) -> bytes:
        code = wire.code_for(body, secure=False)
        payload = wire.encode_body(body)
        return wire.serialize(wire.WireFrame(code, payload, self.addr, dst))

    def receive(self, data: bytes, src: int, dst: int) -> ReceiveResult:
        header = wire.parse_header(data)
        if header.code not in PLAIN_CODES:
            return Dropped("not-a-plain-code")
        try:
            body, opts = wire.parse_body(header.code, data[wire.HEADER_LEN:])
        except wire.MalformedBody:
            return Dropped("malformed")
        return Accepted(header.code, body, opts, _flow(dst))


class PsmPipeline:
    """Preinstalled-key mode: secure codes, sealed bodies, monotone counter
    with duplicate rejection.  The optional replay-protection consistency
    check is enforced at the routing layer (DIO quarantine), not here."""

    def __init__(self, addr: int, key: PresharedKey):
        self.addr = addr
        self.key = key
        self.tx_counter = 0
        self.last_rx_counter: dict[int, int] = {}
        self.auth_failures = 0

    def build_control(self, body: wire.ControlBody, dst: int) -> bytes:
        code = wire.code_for(body, secure=True)
        self.tx_counter += 1
        payload = codec.seal_envelope(wire.encode_body(body), self.key,
                                      self.tx_counter, self.addr)
        return wire.serialize(wire.WireFrame(code, payload, self.addr, dst))

    def receive(self, data: bytes, src: int, dst: int) -> ReceiveResult:
        header = wire.parse_header(data)
        if header.code not in SECURE_CODES:
            return Dropped("not-a-secure-code")
        try:
            counter, plain = codec.open_envelope(data[wire.HEADER_LEN:],
                                                 self.key, src)
        except MalformedEnvelope:
            return Dropped("malformed")
        except AuthFailure:
            self.auth_failures += 1
            return Dropped("auth-failure")
        if counter <= self.last_rx_counter.get(src, 0):
            return Dropped("counter-replay")
        try:
            body, opts = wire.parse_body(header.code, plain)
        except wire.MalformedBody:
            return Dropped("malformed")
        self.last_rx_counter[src] = counter
        return Accepted(header.code, body, opts, _flow(dst))

"""Byte-exact model of RPL control frames for every secure mode.

A frame on the air is the ICMP image::

    offset 0   msg_type (1 byte, always 155)
    offset 1   code     (1 byte; opaque on the wire in chained mode)
    offset 2   checksum (2 bytes BE, ones' complement over the whole image)
    offset 4   payload  (mode dependent, see docs/wire.md)

Unsecured payloads are ``body || options``.  Secured payloads are a security
section (counter, key id, 32-bit tag) followed by the ciphertext of
``body || options``.  The chained mode additionally XOR-encodes everything
after the ICMP header and sequentially encodes the code byte; both happen in
:mod:`csmrpl.codec` - this module only fixes the layout.

The checksum is computed last, over the final (possibly encoded) image, so a
receiver can verify frame integrity before attempting any decode.

Source and destination addresses are 16-bit simulator node ids carried as
radio-level delivery metadata, not serialized into the ICMP image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

RPL_ICMP_TYPE = 155
MULTICAST = 0xFFFF

# ICMP code points.  Base codes per the RPL standard; secure variants set the
# high bit; CC exists only in secure form.  SRReq/SRRes sit next to CC in the
# secure block.
CODE_DIS = 0x00
CODE_DIO = 0x01
CODE_DAO = 0x02
CODE_DAO_ACK = 0x03
CODE_SEC_DIS = 0x80
CODE_SEC_DIO = 0x81
CODE_SEC_DAO = 0x82
CODE_SEC_DAO_ACK = 0x83
CODE_CC = 0x8A
CODE_SRREQ = 0x8B
CODE_SRRES = 0x8C

VALID_CODES = frozenset({
    CODE_DIS, CODE_DIO, CODE_DAO, CODE_DAO_ACK,
    CODE_SEC_DIS, CODE_SEC_DIO, CODE_SEC_DAO, CODE_SEC_DAO_ACK,
    CODE_CC, CODE_SRREQ, CODE_SRRES,
})

# Codes that may appear inside a chained (non-ER) flow after decoding.  SRR
# frames travel with their code verbatim, so a decoded code claiming to be an
# SRR frame is bogus by construction.
CHAINED_CODES = frozenset(VALID_CODES - {CODE_SRREQ, CODE_SRRES})

HEADER_LEN = 4
SECURITY_SECTION_LEN = 9  # counter(4) key_id(1) tag(4)

# Option TLV type points (vendor range).
OPT_SC_UC_NEXT = 0x20
OPT_SC_MC_NEXT = 0x21
OPT_SC_ER = 0x22


class WireError(Exception):
    """Base class for frame parsing failures."""


class TooShort(WireError):
    pass


class NotRpl(WireError):
    pass


class MalformedBody(WireError):
    pass


@dataclass(frozen=True)
class IcmpHeader:
    msg_type: int
    code: int
    checksum: int = 0


@dataclass(frozen=True)
class Dis:
    pass


@dataclass(frozen=True)
class Dio:
    dodag_id: int
    version: int
    rank: int


@dataclass(frozen=True)
class Dao:
    target: int
    seq: int


@dataclass(frozen=True)
class DaoAck:
    seq: int
    status: int


@dataclass(frozen=True)
class Cc:
    nonce: int
    is_response: bool


@dataclass(frozen=True)
class SrReq:
    coeff: tuple  # 3x3 tuple of tuples, residues mod the recovery prime


@dataclass(frozen=True)
class SrRes:
    target_addr: int
    results: tuple  # 3 residues
    new_sc_er: int


ControlBody = Dis | Dio | Dao | DaoAck | Cc | SrReq | SrRes


@dataclass(frozen=True)
class ScOptions:
    """Chaining options carried after the body.  None means absent."""

    sc_uc_next: int | None = None
    sc_mc_next: int | None = None
    sc_er: int | None = None

    def __bool__(self) -> bool:
        return (self.sc_uc_next is not None or self.sc_mc_next is not None
                or self.sc_er is not None)


NO_OPTIONS = ScOptions()


@dataclass(frozen=True)
class WireFrame:
    """One control frame: ICMP image fields plus radio metadata."""

    code: int
    payload: bytes
    src: int
    dst: int


# Body codec.  Fixed-size bodies keyed by the base code (low 7 bits minus the
# secure flag); CC/SRR exist only with their full code.
_BODY_CODE = {
    Dis: (CODE_DIS, CODE_SEC_DIS),
    Dio: (CODE_DIO, CODE_SEC_DIO),
    Dao: (CODE_DAO, CODE_SEC_DAO),
    DaoAck: (CODE_DAO_ACK, CODE_SEC_DAO_ACK),
    Cc: (CODE_CC, CODE_CC),
    SrReq: (CODE_SRREQ, CODE_SRREQ),
    SrRes: (CODE_SRRES, CODE_SRRES),
}

_BODY_LEN = {
    CODE_DIS: 0, CODE_SEC_DIS: 0,
    CODE_DIO: 5, CODE_SEC_DIO: 5,
    CODE_DAO: 3, CODE_SEC_DAO: 3,
    CODE_DAO_ACK: 2, CODE_SEC_DAO_ACK: 2,
    CODE_CC: 5,
    CODE_SRREQ: 72,
    CODE_SRRES: 30,
}


def code_for(body: ControlBody, secure: bool) -> int:
    """Map a body to its ICMP code for the given security setting."""
    plain, sec = _BODY_CODE[type(body)]
    return sec if secure else plain


def encode_body(body: ControlBody) -> bytes:
    if isinstance(body, Dis):
        return b""
    if isinstance(body, Dio):
        return struct.pack(">HBH", body.dodag_id, body.version, body.rank)
    if isinstance(body, Dao):
        return struct.pack(">HB", body.target, body.seq)
    if isinstance(body, DaoAck):
        return struct.pack(">BB", body.seq, body.status)
    if isinstance(body, Cc):
        return struct.pack(">IB", body.nonce, 1 if body.is_response else 0)
    if isinstance(body, SrReq):
        flat = [v for row in body.coeff for v in row]
        return struct.pack(">9Q", *flat)
    if isinstance(body, SrRes):
        return struct.pack(">H3QI", body.target_addr, *body.results,
                           body.new_sc_er)
    raise TypeError(f"unknown body {body!r}")


def encode_options(opts: ScOptions) -> bytes:
    out = bytearray()
    for opt_type, value in ((OPT_SC_UC_NEXT, opts.sc_uc_next),
                            (OPT_SC_MC_NEXT, opts.sc_mc_next),
                            (OPT_SC_ER, opts.sc_er)):
        if value is not None:
            out += struct.pack(">BBI", opt_type, 4, value)
    return bytes(out)


def _decode_body(code: int, data: bytes) -> ControlBody:
    base = code & 0x7F if code in (CODE_SEC_DIS, CODE_SEC_DIO, CODE_SEC_DAO,
                                   CODE_SEC_DAO_ACK) else code
    try:
        if base == CODE_DIS:
            return Dis()
        if base == CODE_DIO:
            dodag_id, version, rank = struct.unpack(">HBH", data)
            return Dio(dodag_id, version, rank)
        if base == CODE_DAO:
            target, seq = struct.unpack(">HB", data)
            return Dao(target, seq)
        if base == CODE_DAO_ACK:
            seq, status = struct.unpack(">BB", data)
            return DaoAck(seq, status)
        if base == CODE_CC:
            nonce, resp = struct.unpack(">IB", data)
            return Cc(nonce, resp != 0)
        if base == CODE_SRREQ:
            flat = struct.unpack(">9Q", data)
            return SrReq((flat[0:3], flat[3:6], flat[6:9]))
        if base == CODE_SRRES:
            vals = struct.unpack(">H3QI", data)
            return SrRes(vals[0], vals[1:4], vals[4])
    except struct.error as exc:
        raise MalformedBody(str(exc)) from exc
    raise MalformedBody(f"no body variant for code {code:#04x}")


def parse_body(code: int, data: bytes) -> tuple[ControlBody, ScOptions]:
    """Decode a plaintext body + trailing option TLVs for a known code.

    Unknown option types are skipped (standard RPL option behavior); a
    truncated option header or value raises :class:`MalformedBody`.
    """
    if code not in VALID_CODES:
        raise MalformedBody(f"invalid code {code:#04x}")
    body_len = _BODY_LEN[code]
    if len(data) < body_len:
        raise MalformedBody(f"body truncated: {len(data)} < {body_len}")
    body = _decode_body(code, data[:body_len])

    sc_uc_next = sc_mc_next = sc_er = None
    pos = body_len
    while pos < len(data):
        if pos + 2 > len(data):
            raise MalformedBody("truncated option header")
        opt_type, opt_len = data[pos], data[pos + 1]
        pos += 2
        if pos + opt_len > len(data):
            raise MalformedBody("truncated option value")
        value = data[pos:pos + opt_len]
        pos += opt_len
        if opt_type in (OPT_SC_UC_NEXT, OPT_SC_MC_NEXT, OPT_SC_ER):
            if opt_len != 4:
                raise MalformedBody(f"bad SC option length {opt_len}")
            sc = struct.unpack(">I", value)[0]
            if opt_type == OPT_SC_UC_NEXT:
                sc_uc_next = sc
            elif opt_type == OPT_SC_MC_NEXT:
                sc_mc_next = sc
            else:
                sc_er = sc
        # other option types: skipped, not fatal
    return body, ScOptions(sc_uc_next, sc_mc_next, sc_er)


def internet_checksum(data: bytes) -> int:
    """RFC 1071 ones' complement sum over 16-bit big-endian words."""
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for (word,) in struct.iter_unpack(">H", data):
        total += word
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def serialize(frame: WireFrame) -> bytes:
    """Emit the ICMP image with the checksum computed over the final bytes."""
    image = bytearray(struct.pack(">BBH", RPL_ICMP_TYPE, frame.code, 0))
    image += frame.payload
    ck = internet_checksum(bytes(image))
    struct.pack_into(">H", image, 2, ck)
    return bytes(image)


def parse_header(data: bytes) -> IcmpHeader:
    """Parse the 4-byte ICMP header.  The code byte is NOT validated here:
    in chained mode it is encoded and only meaningful after decoding."""
    if len(data) < HEADER_LEN:
        raise TooShort(f"{len(data)} bytes < {HEADER_LEN}")
    msg_type, code, checksum = struct.unpack_from(">BBH", data)
    if msg_type != RPL_ICMP_TYPE:
        raise NotRpl(f"ICMP type {msg_type} is not RPL")
    return IcmpHeader(msg_type, code, checksum)


def verify_checksum(data: bytes) -> bool:
    if len(data) < HEADER_LEN:
        return False
    zeroed = data[:2] + b"\x00\x00" + data[4:]
    stored = struct.unpack_from(">H", data, 2)[0]
    return internet_checksum(zeroed) == stored


def parse_frame(data: bytes, src: int, dst: int) -> WireFrame:
    """Reconstruct a frame from its ICMP image plus delivery metadata."""
    header = parse_header(data)
    return WireFrame(header.code, data[HEADER_LEN:], src, dst)

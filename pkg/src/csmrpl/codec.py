"""Confidentiality/integrity envelope and the network-coding primitives.

Two layers live here:

* the preinstalled-key AEAD used by the secured modes (seal/open with a
  32-bit tag over ciphertext + frame type + sender + counter), and
* the chaining codec: XOR payload encoding with a 4-byte secret chaining
  value, sequential encoding of the ICMP code byte, and SC generation with
  rejection of values whose byte-fold would map any valid code onto another
  valid code.

The AEAD construction is deliberately abstract per the design contract: any
standard authenticated cipher with a 128-bit key and a >=32-bit tag works and
none of the measured results depend on the cipher identity.  Realized as
AES-128-CTR + HMAC-SHA256/32 (encrypt-then-MAC), both keys derived from the
preshared key, nonce derived from (sender, counter).
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .wire import RPL_ICMP_TYPE, VALID_CODES

KEY_LEN = 16
TAG_LEN = 4
SC_BYTES = 4


class AuthFailure(Exception):
    """AEAD rejected the frame: wrong key, tampering, or a wrong SC decode
    upstream."""


@dataclass(frozen=True)
class PresharedKey:
    """128-bit network key.  Internal adversaries hold the same key as the
    legitimate nodes; external adversaries hold a different one."""

    key: bytes

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise ValueError(f"key must be {KEY_LEN} bytes")

    @classmethod
    def from_seed(cls, seed: str) -> "PresharedKey":
        return cls(hashlib.sha256(seed.encode()).digest()[:KEY_LEN])


def _derive(key: PresharedKey, label: bytes, n: int) -> bytes:
    return hmac.new(key.key, label, hashlib.sha256).digest()[:n]


def _nonce(sender: int, counter: int) -> bytes:
    return struct.pack(">HI", sender & 0xFFFF, counter & 0xFFFFFFFF) + b"\x00" * 10


def _keystream_xor(data: bytes, key: PresharedKey, sender: int, counter: int) -> bytes:
    enc_key = _derive(key, b"csm-enc", KEY_LEN)
    cipher = Cipher(algorithms.AES(enc_key), modes.CTR(_nonce(sender, counter)))
    return cipher.encryptor().update(data)


def _tag(cipher_text: bytes, key: PresharedKey, sender: int, counter: int,
         key_id: int) -> int:
    mac_key = _derive(key, b"csm-mac", 32)
    aad = struct.pack(">BHIB", RPL_ICMP_TYPE, sender & 0xFFFF,
                      counter & 0xFFFFFFFF, key_id & 0xFF)
    digest = hmac.new(mac_key, aad + cipher_text, hashlib.sha256).digest()
    return struct.unpack(">I", digest[:TAG_LEN])[0]


def aead_seal(plain: bytes, key: PresharedKey, counter: int, sender: int,
              key_id: int = 0) -> tuple[bytes, int]:
    """Encrypt and authenticate.  Ciphertext has the plaintext's length; the
    tag binds ciphertext, ICMP type, sender and counter."""
    cipher_text = _keystream_xor(plain, key, sender, counter)
    return cipher_text, _tag(cipher_text, key, sender, counter, key_id)


def aead_open(cipher_text: bytes, tag: int, key: PresharedKey, counter: int,
              sender: int, key_id: int = 0) -> bytes:
    expected = _tag(cipher_text, key, sender, counter, key_id)
    if not hmac.compare_digest(struct.pack(">I", expected), struct.pack(">I", tag)):
        raise AuthFailure("tag mismatch")
    return _keystream_xor(cipher_text, key, sender, counter)


class MalformedEnvelope(Exception):
    """Payload too short to hold a security section."""


def seal_envelope(plain: bytes, key: PresharedKey, counter: int, sender: int,
                  key_id: int = 0) -> bytes:
    """Security section (counter, key id, tag) followed by the ciphertext."""
    cipher_text, tag = aead_seal(plain, key, counter, sender, key_id)
    return struct.pack(">IBI", counter & 0xFFFFFFFF, key_id & 0xFF, tag) + cipher_text


def open_envelope(payload: bytes, key: PresharedKey,
                  sender: int) -> tuple[int, bytes]:
    """Inverse of :func:`seal_envelope`; returns (counter, plaintext).

    Raises :class:`MalformedEnvelope` on a short payload and
    :class:`AuthFailure` when the tag does not verify.
    """
    if len(payload) < 9:
        raise MalformedEnvelope(f"{len(payload)} bytes < 9")
    counter, key_id, tag = struct.unpack_from(">IBI", payload)
    plain = aead_open(payload[9:], tag, key, counter, sender, key_id)
    return counter, plain


def sc_bytes(sc: int) -> bytes:
    return struct.pack(">I", sc & 0xFFFFFFFF)


def fold(sc: int) -> int:
    """XOR of the four big-endian bytes of an SC value."""
    b = sc_bytes(sc)
    return b[0] ^ b[1] ^ b[2] ^ b[3]


def encode_payload(data: bytes, sc: int) -> bytes:
    """XOR the byte stream with the 4-byte SC repeated cyclically.  SC 0 is
    the flow-bootstrap value and leaves the data unchanged.  Involution."""
    if sc == 0 or not data:
        return bytes(data)
    reps = -(-len(data) // SC_BYTES)
    stream = (sc_bytes(sc) * reps)[:len(data)]
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream, "big")) \
        .to_bytes(len(data), "big")


def encode_code(code: int, sc: int) -> int:
    """Sequentially encode the one-byte code with each SC byte in turn;
    XOR composition makes that the code XOR the byte-fold.  Self-inverse."""
    return (code ^ fold(sc)) & 0xFF


def sc_is_safe(sc: int) -> bool:
    """True when encoding any valid code with this SC cannot produce another
    valid code (so a stale or replayed frame can never masquerade)."""
    if sc == 0:
        return False
    f = fold(sc)
    if f == 0:
        return False
    return all((c ^ f) not in VALID_CODES for c in VALID_CODES)


def generate_sc(rng: random.Random) -> int:
    """Draw a fresh nonzero SC satisfying the fold rule, by rejection."""
    while True:
        sc = rng.randrange(1, 1 << 32)
        if sc_is_safe(sc):
            return sc

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmrpl import codec, wire
from csmrpl.codec import PresharedKey

KEY = PresharedKey.from_seed("network")
OTHER_KEY = PresharedKey.from_seed("attacker")


def brute_force_fold_ok(sc: int) -> bool:
    """Independent oracle: encode every valid code byte-by-byte with the SC
    and check none of the results is itself a valid code."""
    b = codec.sc_bytes(sc)
    bad = False
    for c in wire.VALID_CODES:
        out = c
        for byte in b:
            out ^= byte
        if out in wire.VALID_CODES:
            bad = True
    return not bad and sc != 0


class TestAead:
    def test_seal_open_round_trip(self):
        plain = b"the quick brown fox"
        cipher, tag = codec.aead_seal(plain, KEY, counter=1, sender=5)
        assert len(cipher) == len(plain)
        assert codec.aead_open(cipher, tag, KEY, counter=1, sender=5) == plain

    def test_wrong_key_rejected(self):
        cipher, tag = codec.aead_seal(b"abc", KEY, counter=2, sender=5)
        with pytest.raises(codec.AuthFailure):
            codec.aead_open(cipher, tag, OTHER_KEY, counter=2, sender=5)

    def test_bit_flip_detected_1000_positions(self):
        rng = random.Random(1234)
        plain = bytes(rng.randrange(256) for _ in range(40))
        cipher, tag = codec.aead_seal(plain, KEY, counter=3, sender=9)
        for _ in range(1000):
            pos = rng.randrange(len(cipher) * 8)
            mutated = bytearray(cipher)
            mutated[pos // 8] ^= 1 << (pos % 8)
            with pytest.raises(codec.AuthFailure):
                codec.aead_open(bytes(mutated), tag, KEY, counter=3, sender=9)

    def test_tag_binds_sender_and_counter(self):
        cipher, tag = codec.aead_seal(b"abc", KEY, counter=7, sender=1)
        with pytest.raises(codec.AuthFailure):
            codec.aead_open(cipher, tag, KEY, counter=8, sender=1)
        with pytest.raises(codec.AuthFailure):
            codec.aead_open(cipher, tag, KEY, counter=7, sender=2)

    def test_envelope_round_trip(self):
        payload = codec.seal_envelope(b"hello", KEY, counter=4, sender=2)
        counter, plain = codec.open_envelope(payload, KEY, sender=2)
        assert counter == 4
        assert plain == b"hello"

    def test_envelope_too_short(self):
        with pytest.raises(codec.MalformedEnvelope):
            codec.open_envelope(b"\x00" * 5, KEY, sender=2)


class TestEncodePayload:
    def test_zero_sc_is_identity(self):
        data = bytes(range(17))
        assert codec.encode_payload(data, 0) == data

    def test_hand_xor_example(self):
        # byte-wise XOR with FF FF FF FF, derived by hand
        data = bytes([0x01, 0x02, 0x03, 0x04, 0x05])
        assert codec.encode_payload(data, 0xFFFFFFFF) == \
            bytes([0xFE, 0xFD, 0xFC, 0xFB, 0xFA])

    def test_cyclic_big_endian_keystream(self):
        # 0x11223344 repeated: positions beyond 4 reuse the first bytes
        data = bytes(6)
        assert codec.encode_payload(data, 0x11223344) == \
            bytes([0x11, 0x22, 0x33, 0x44, 0x11, 0x22])

    def test_involution_random(self):
        rng = random.Random(5)
        for _ in range(500):
            data = bytes(rng.randrange(256)
                         for _ in range(rng.randrange(0, 64)))
            sc = rng.randrange(1 << 32)
            assert codec.encode_payload(codec.encode_payload(data, sc),
                                        sc) == data


class TestEncodeCode:
    def test_bootstrap_identity(self):
        assert codec.encode_code(0x01, 0x00000000) == 0x01

    def test_sequential_xor_by_hand(self):
        # 0x01 ^ 0x00 ^ 0x00 ^ 0xA0 ^ 0x20 = 0x81 (collides with sec-DIO,
        # which is exactly why the generator rejects this SC)
        assert codec.encode_code(0x01, 0x0000A020) == 0x81

    def test_self_inverse_of_previous(self):
        assert codec.encode_code(0x81, 0x0000A020) == 0x01

    def test_self_inverse_exhaustive(self):
        rng = random.Random(6)
        for _ in range(2000):
            code = rng.randrange(256)
            sc = rng.randrange(1 << 32)
            assert codec.encode_code(codec.encode_code(code, sc), sc) == code


class TestGenerateSc:
    def test_fold_zero_rejected(self):
        # fold(0x00001010) == 0: maps every code to itself
        assert codec.fold(0x00001010) == 0
        assert not codec.sc_is_safe(0x00001010)

    def test_collision_rejected(self):
        # fold 0x80 maps 0x01 -> 0x81, a valid code (brute-force oracle)
        assert not brute_force_fold_ok(0x0000A020)
        assert not codec.sc_is_safe(0x0000A020)

    def test_safe_value_accepted(self):
        assert brute_force_fold_ok(0x40000000)
        assert codec.sc_is_safe(0x40000000)

    def test_sc_is_safe_matches_brute_force(self):
        rng = random.Random(7)
        for _ in range(20_000):
            sc = rng.randrange(1 << 32)
            assert codec.sc_is_safe(sc) == brute_force_fold_ok(sc)

    def test_generator_soundness_100k(self):
        rng = random.Random(0xABCDEF)
        for _ in range(100_000):
            sc = codec.generate_sc(rng)
            assert sc != 0
            f = codec.fold(sc)
            assert f != 0
            for c in wire.VALID_CODES:
                assert (c ^ f) not in wire.VALID_CODES


class TestModeEquivalence:
    def test_csm_with_zero_sc_matches_psm_envelope(self):
        """With the chain value pinned to 0 and no options, the chained
        mode's encrypted region is byte-identical to the plain
        preinstalled-key envelope for the same body."""
        body = wire.Dio(0, 1, 384)
        plain = wire.encode_body(body)
        psm_payload = codec.seal_envelope(plain, KEY, counter=11, sender=4)
        csm_payload = codec.encode_payload(
            codec.seal_envelope(plain, KEY, counter=11, sender=4), 0)
        assert psm_payload == csm_payload


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=80), st.integers(0, (1 << 32) - 1))
def test_payload_involution_property(data, sc):
    assert codec.encode_payload(codec.encode_payload(data, sc), sc) == data


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 255), st.integers(0, (1 << 32) - 1))
def test_code_involution_property(code, sc):
    assert codec.encode_code(codec.encode_code(code, sc), sc) == code

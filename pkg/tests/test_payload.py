import uuid

import numpy as np
import pytest

from deskmark.payload import (
    DecodeResult,
    EccConfig,
    bit_accuracy,
    bits_to_hex,
    encode_uuid,
    decode_uuid,
    hex_to_bits,
    random_watermark,
)

CFG = EccConfig()

# Expected codeword for 0x0123...cdef, frozen from the independent reference
# encoder below (pure-int polynomial route, no shared code with the library).
KNOWN_UUID = uuid.UUID("01234567-89ab-cdef-0123-456789abcdef")
KNOWN_CODEWORD_HEX = "0123456789abcdef0123456789abcdefbcb314b42de4c11e3d494315e3bba4a0"


# --- independent reference implementation (oracle) -------------------------

_PRIM = 0x11D


def _gf_mul(a, b):
    r = 0
    while b:
        if b & 1:
            r ^= a
        a <<= 1
        if a & 0x100:
            a ^= _PRIM
        b >>= 1
    return r


def _poly_mul_gf2(a, b):
    r, i = 0, 0
    while b:
        if b & 1:
            r ^= a << i
        b >>= 1
        i += 1
    return r


def _poly_mod_gf2(v, g):
    dg = g.bit_length() - 1
    while v and v.bit_length() - 1 >= dg:
        v ^= g << (v.bit_length() - 1 - dg)
    return v


def _reference_generator(t=18):
    exp, x = [], 1
    for _ in range(255):
        exp.append(x)
        x = _gf_mul(x, 2)
    seen, g = set(), 1
    for i in range(1, 2 * t + 1):
        cls, j = [], i % 255
        while j not in cls:
            cls.append(j)
            j = (2 * j) % 255
        coeffs = [1]
        for j in cls:
            root = exp[j]
            nxt = [0] * (len(coeffs) + 1)
            for d, c in enumerate(coeffs):
                nxt[d + 1] ^= c
                nxt[d] ^= _gf_mul(c, root)
            coeffs = nxt
        mp = 0
        for d, c in enumerate(coeffs):
            assert c in (0, 1), "minimal polynomial left the base field"
            if c:
                mp |= 1 << d
        if mp not in seen:
            seen.add(mp)
            g = _poly_mul_gf2(g, mp)
    return g


_REF_G = _reference_generator()


def reference_encode(uuid_int):
    shifted = uuid_int << 124
    cw = shifted ^ _poly_mod_gf2(shifted, _REF_G)
    bits = [(cw >> (251 - i)) & 1 for i in range(252)] + [0, 0, 0, 0]
    return np.array(bits, dtype=np.uint8)


def reference_is_codeword(bits):
    v = 0
    for b in bits[:252]:
        v = (v << 1) | int(b)
    return _poly_mod_gf2(v, _REF_G) == 0 and not bits[252:].any()


# --- encode -----------------------------------------------------------------

def test_zero_uuid_gives_zero_parity():
    bits = encode_uuid(uuid.UUID(int=0), CFG)
    assert bits.sum() == 0


def test_known_uuid_matches_frozen_reference():
    bits = encode_uuid(KNOWN_UUID, CFG)
    assert bits_to_hex(bits) == KNOWN_CODEWORD_HEX
    assert np.array_equal(bits, reference_encode(KNOWN_UUID.int))


def test_encode_outputs_are_reference_codewords():
    rng = np.random.default_rng(0)
    for _ in range(25):
        u = uuid.UUID(int=int.from_bytes(rng.bytes(16), "big"))
        bits = encode_uuid(u, CFG)
        assert bits.shape == (256,)
        assert reference_is_codeword(bits)


def test_linearity():
    # BCH is linear: XOR of codewords is the codeword of the XORed payloads
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = uuid.UUID(int=int.from_bytes(rng.bytes(16), "big"))
        b = uuid.UUID(int=int.from_bytes(rng.bytes(16), "big"))
        xored = encode_uuid(a, CFG) ^ encode_uuid(b, CFG)
        assert reference_is_codeword(xored)
        result = decode_uuid(xored, CFG)
        assert result is not None
        assert result.payload == uuid.UUID(int=a.int ^ b.int)
        assert result.corrected == 0


# --- decode -----------------------------------------------------------------

def test_roundtrip_clean():
    rng = np.random.default_rng(2)
    for _ in range(20):
        u = uuid.UUID(int=int.from_bytes(rng.bytes(16), "big"))
        result = decode_uuid(encode_uuid(u, CFG), CFG)
        assert result == DecodeResult(u, 0)


def test_roundtrip_with_up_to_t_flips():
    rng = np.random.default_rng(3)
    for _ in range(100):
        u = uuid.UUID(int=int.from_bytes(rng.bytes(16), "big"))
        bits = encode_uuid(u, CFG)
        nflips = int(rng.integers(1, CFG.t + 1))
        pos = rng.choice(CFG.total_bits, size=nflips, replace=False)
        bits[pos] ^= 1
        result = decode_uuid(bits, CFG)
        assert result is not None
        assert result.payload == u
        assert result.corrected == nflips


def test_exactly_t_flips_recover():
    rng = np.random.default_rng(4)
    for _ in range(30):
        u = uuid.UUID(int=int.from_bytes(rng.bytes(16), "big"))
        bits = encode_uuid(u, CFG)
        pos = rng.choice(CFG.total_bits, size=CFG.t, replace=False)
        bits[pos] ^= 1
        result = decode_uuid(bits, CFG)
        assert result is not None and result.payload == u and result.corrected == CFG.t


def test_heavy_corruption_fails_or_is_flagged():
    # beyond t the guarantee is gone, but a wrong UUID must never be
    # reported with zero corrections
    rng = np.random.default_rng(5)
    outcomes = {"fail": 0, "flagged": 0}
    for _ in range(60):
        u = uuid.UUID(int=int.from_bytes(rng.bytes(16), "big"))
        bits = encode_uuid(u, CFG)
        pos = rng.choice(CFG.total_bits, size=CFG.t + 8, replace=False)
        bits[pos] ^= 1
        result = decode_uuid(bits, CFG)
        if result is None:
            outcomes["fail"] += 1
        else:
            assert result.corrected > 0
            outcomes["flagged"] += 1
    assert outcomes["fail"] > 50  # vast majority unrecoverable


def test_pad_bit_flips_count_as_corrections():
    u = uuid.UUID(int=42)
    bits = encode_uuid(u, CFG)
    bits[-1] ^= 1
    bits[-3] ^= 1
    result = decode_uuid(bits, CFG)
    assert result is not None
    assert result.payload == u
    assert result.corrected == 2


def test_decode_rejects_wrong_length():
    with pytest.raises(ValueError):
        decode_uuid(np.zeros(255, dtype=np.uint8), CFG)


def test_ecc_config_invariants():
    assert CFG.data_bits + CFG.parity_bits + CFG.pad_bits == CFG.total_bits
    assert CFG.t >= 1
    with pytest.raises(ValueError):
        EccConfig(total_bits=200, data_bits=128)  # parity does not fit


# --- random_watermark -------------------------------------------------------

def test_random_watermark_deterministic():
    assert np.array_equal(random_watermark(4, seed=9), random_watermark(4, seed=9))


def test_random_watermark_length_and_values():
    bits = random_watermark(100, seed=1)
    assert bits.shape == (100,)
    assert set(np.unique(bits)) <= {0, 1}
    with pytest.raises(ValueError):
        random_watermark(0, seed=1)


def test_random_watermark_uniform_marginal():
    means = [random_watermark(100, seed=s).mean() for s in range(10_000)]
    assert 0.45 <= float(np.mean(means)) <= 0.55


# --- bit_accuracy -----------------------------------------------------------

def test_bit_accuracy_basics():
    a = random_watermark(64, seed=0)
    assert bit_accuracy(a, a) == 1.0
    assert bit_accuracy(a, 1 - a) == 0.0
    half = a.copy()
    half[:32] ^= 1
    assert bit_accuracy(a, half) == 0.5


def test_bit_accuracy_symmetry_and_hamming():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = rng.integers(0, 2, 50, dtype=np.uint8)
        b = rng.integers(0, 2, 50, dtype=np.uint8)
        assert bit_accuracy(a, b) == bit_accuracy(b, a)
        assert bit_accuracy(a, b) == pytest.approx(1.0 - np.count_nonzero(a != b) / 50)


def test_bit_accuracy_length_mismatch():
    with pytest.raises(ValueError):
        bit_accuracy(np.zeros(4, dtype=np.uint8), np.zeros(5, dtype=np.uint8))


# --- hex serialization -------------------------------------------------------

def test_hex_roundtrip():
    rng = np.random.default_rng(7)
    for length in (16, 100, 256):
        bits = rng.integers(0, 2, length, dtype=np.uint8)
        assert np.array_equal(hex_to_bits(bits_to_hex(bits), length), bits)

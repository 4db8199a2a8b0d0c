"""Watermark payload framing: UUIDs wrapped in a shortened BCH code.

A 128-bit UUID is framed into a 256-bit watermark as

    [128 data bits | 124 parity bits | 4 zero pad bits]

using a binary BCH(255, 131) code over GF(2^8) (primitive polynomial
x^8+x^4+x^3+x^2+1, t = 18 correctable errors), shortened by fixing the
3 highest-order message coefficients to zero. Bit order is MSB-first
everywhere: data bit 0 is the most significant bit of the UUID, and the
codeword is laid out data-then-parity-then-pad. This layout is part of
the on-disk format for stored watermarks and must not change.

Watermark bit vectors are numpy uint8 arrays with values in {0, 1}.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

GF_PRIM_POLY = 0x11D  # x^8 + x^4 + x^3 + x^2 + 1
GF_ORDER = 255


class DecodeFailure(Exception):
    """Raised when a received word is not within t errors of any codeword."""


@dataclass(frozen=True)
class EccConfig:
    """Shortened-BCH framing parameters for UUID payloads."""

    total_bits: int = 256
    data_bits: int = 128
    n: int = 255
    k: int = 131
    t: int = 18
    prim_poly: int = GF_PRIM_POLY
    pad_bits: int = field(init=False, default=0)

    def __post_init__(self):
        parity = self.n - self.k
        pad = self.total_bits - self.data_bits - parity
        if pad < 0:
            raise ValueError("data + parity bits exceed total_bits")
        if self.data_bits > self.k:
            raise ValueError("data_bits must fit in the code's message length")
        if self.t < 1:
            raise ValueError("t must be >= 1")
        object.__setattr__(self, "pad_bits", pad)

    @property
    def parity_bits(self) -> int:
        return self.n - self.k

    @property
    def shortened_by(self) -> int:
        return self.k - self.data_bits


class _GaloisField:
    """GF(2^8) arithmetic via exp/log tables."""

    def __init__(self, prim_poly: int):
        self.exp = np.zeros(2 * GF_ORDER, dtype=np.int32)
        self.log = np.zeros(GF_ORDER + 1, dtype=np.int32)
        x = 1
        for i in range(GF_ORDER):
            self.exp[i] = x
            self.log[x] = i
            x <<= 1
            if x & 0x100:
                x ^= prim_poly
        # duplicate so exp[i + j] never needs an explicit mod for i, j < 255
        self.exp[GF_ORDER:] = self.exp[:GF_ORDER]

    def mul(self, a: int, b: int) -> int:
        if a == 0 or b == 0:
            return 0
        return int(self.exp[self.log[a] + self.log[b]])

    def div(self, a: int, b: int) -> int:
        if b == 0:
            raise ZeroDivisionError("division by zero in GF(2^8)")
        if a == 0:
            return 0
        return int(self.exp[(self.log[a] - self.log[b]) % GF_ORDER])

    def pow_alpha(self, e: int) -> int:
        return int(self.exp[e % GF_ORDER])


def _poly_mul_gf2(a: int, b: int) -> int:
    # carry-less product of GF(2)[x] polynomials packed into ints
    r = 0
    shift = 0
    while b:
        if b & 1:
            r ^= a << shift
        b >>= 1
        shift += 1
    return r


class _BchCodec:
    """Systematic binary BCH encoder/decoder for one (n, k, t) instance."""

    def __init__(self, cfg: EccConfig):
        self.cfg = cfg
        self.gf = _GaloisField(cfg.prim_poly)
        self.generator = self._build_generator(cfg.t)
        parity = self.generator.bit_length() - 1
        if parity != cfg.parity_bits:
            raise ValueError(
                f"generator degree {parity} does not match n-k={cfg.parity_bits}; "
                f"(n, k, t) = ({cfg.n}, {cfg.k}, {cfg.t}) is not a valid BCH code"
            )

    def _build_generator(self, t: int) -> int:
        # g(x) = lcm of minimal polynomials of alpha^1 .. alpha^2t
        seen = set()
        g = 1
        for i in range(1, 2 * t + 1):
            mp = self._minimal_poly(i)
            if mp not in seen:
                seen.add(mp)
                g = _poly_mul_gf2(g, mp)
        return g

    def _minimal_poly(self, i: int) -> int:
        # conjugacy class {i, 2i, 4i, ...} mod 255, then prod (x - alpha^j)
        cls = []
        j = i % GF_ORDER
        while j not in cls:
            cls.append(j)
            j = (2 * j) % GF_ORDER
        coeffs = [1]  # ascending degree, elements of GF(2^8)
        for j in cls:
            root = self.gf.pow_alpha(j)
            nxt = [0] * (len(coeffs) + 1)
            for d, c in enumerate(coeffs):
                nxt[d + 1] ^= c
                nxt[d] ^= self.gf.mul(c, root)
            coeffs = nxt
        out = 0
        for d, c in enumerate(coeffs):
            if c:
                out |= 1 << d
        return out

    def encode(self, data_int: int) -> int:
        """Systematic encode: returns the (k + parity - shortened) bit codeword int.

        Bit i of the result is the coefficient of x^i; the data occupies the
        high `data_bits` positions, parity the low `parity_bits`.
        """
        cfg = self.cfg
        shifted = data_int << cfg.parity_bits
        return shifted ^ self._poly_mod(shifted)

    def _poly_mod(self, v: int) -> int:
        g = self.generator
        deg_g = g.bit_length() - 1
        while v and v.bit_length() - 1 >= deg_g:
            v ^= g << (v.bit_length() - 1 - deg_g)
        return v

    def syndromes(self, codeword_bits: np.ndarray) -> np.ndarray:
        """S_j = r(alpha^j) for j = 1..2t; codeword_bits[i] is coeff of x^i."""
        degrees = np.nonzero(codeword_bits)[0].astype(np.int64)
        syn = np.zeros(2 * self.cfg.t, dtype=np.int32)
        if degrees.size == 0:
            return syn
        for j in range(1, 2 * self.cfg.t + 1):
            terms = self.gf.exp[(j * degrees) % GF_ORDER]
            syn[j - 1] = np.bitwise_xor.reduce(terms)
        return syn

    def berlekamp_massey(self, syn: np.ndarray) -> list[int]:
        """Error locator polynomial coefficients [1, L1, L2, ...] (ascending)."""
        gf = self.gf
        C = [1] + [0] * (2 * self.cfg.t)
        B = [1] + [0] * (2 * self.cfg.t)
        L, m, b = 0, 1, 1
        for n in range(2 * self.cfg.t):
            d = int(syn[n])
            for i in range(1, L + 1):
                d ^= gf.mul(C[i], int(syn[n - i]))
            if d == 0:
                m += 1
            elif 2 * L <= n:
                T = C[:]
                coef = gf.div(d, b)
                for i in range(len(B) - m):
                    C[i + m] ^= gf.mul(coef, B[i])
                L = n + 1 - L
                B = T
                b = d
                m = 1
            else:
                coef = gf.div(d, b)
                for i in range(len(B) - m):
                    C[i + m] ^= gf.mul(coef, B[i])
                m += 1
        return C[: L + 1]

    def chien_search(self, locator: list[int]) -> np.ndarray:
        """Error degrees: all i in [0, n) with Lambda(alpha^-i) = 0."""
        gf = self.gf
        positions = np.arange(GF_ORDER, dtype=np.int64)
        acc = np.full(GF_ORDER, locator[0], dtype=np.int32)
        for j in range(1, len(locator)):
            lj = locator[j]
            if lj == 0:
                continue
            expo = (gf.log[lj] - j * positions) % GF_ORDER
            acc ^= gf.exp[expo].astype(np.int32)
        return np.nonzero(acc == 0)[0]

    def correct(self, codeword_bits: np.ndarray) -> int:
        """Corrects codeword_bits in place; returns the number of flipped bits.

        Raises DecodeFailure if more than t errors are detected or the
        locator roots are inconsistent (including errors located in the
        shortened, never-transmitted message prefix).
        """
        syn = self.syndromes(codeword_bits)
        if not syn.any():
            return 0
        locator = self.berlekamp_massey(syn)
        n_errors = len(locator) - 1
        if n_errors > self.cfg.t:
            raise DecodeFailure("error count exceeds correction capability")
        roots = self.chien_search(locator)
        if len(roots) != n_errors:
            raise DecodeFailure("error locator does not factor over the field")
        transmitted = self.cfg.data_bits + self.cfg.parity_bits
        if (roots >= transmitted).any():
            raise DecodeFailure("error located in shortened message prefix")
        codeword_bits[roots] ^= 1
        if self.syndromes(codeword_bits).any():
            raise DecodeFailure("correction did not land on a codeword")
        return n_errors


@lru_cache(maxsize=4)
def _codec_for(cfg: EccConfig) -> _BchCodec:
    return _BchCodec(cfg)


@dataclass(frozen=True)
class DecodeResult:
    payload: uuid.UUID
    corrected: int


def _validate_bits(bits: np.ndarray, expect_len: int | None = None) -> np.ndarray:
    bits = np.asarray(bits)
    if bits.ndim != 1:
        raise ValueError(f"watermark bits must be 1-D, got shape {bits.shape}")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("watermark bits must be 0 or 1")
    if expect_len is not None and bits.size != expect_len:
        raise ValueError(f"expected {expect_len} bits, got {bits.size}")
    return bits.astype(np.uint8)


def encode_uuid(payload: uuid.UUID, cfg: EccConfig | None = None) -> np.ndarray:
    """Frames a 128-bit UUID into a total_bits watermark (MSB-first layout)."""
    cfg = cfg or EccConfig()
    codec = _codec_for(cfg)
    codeword = codec.encode(payload.int)
    transmitted = cfg.data_bits + cfg.parity_bits
    bits = np.zeros(cfg.total_bits, dtype=np.uint8)
    for i in range(transmitted):
        # vector position i holds polynomial degree (transmitted - 1 - i)
        bits[i] = (codeword >> (transmitted - 1 - i)) & 1
    return bits


def decode_uuid(bits: np.ndarray, cfg: EccConfig | None = None) -> DecodeResult | None:
    """Recovers the UUID from a (possibly corrupted) watermark.

    Returns DecodeResult(payload, corrected) when at most t bit errors are
    present relative to some valid codeword, or None when the corruption is
    unrecoverable. Non-zero pad bits are fixed zeros flipped by the channel
    and count toward `corrected`.
    """
    cfg = cfg or EccConfig()
    bits = _validate_bits(bits, cfg.total_bits)
    codec = _codec_for(cfg)

    transmitted = cfg.data_bits + cfg.parity_bits
    pad_errors = int(bits[transmitted:].sum())
    # coeff-of-x^i order for the decoder (reverse of the wire layout)
    cw = bits[:transmitted][::-1].copy()
    try:
        corrected = codec.correct(cw)
    except DecodeFailure:
        return None
    data_int = 0
    for i in range(cfg.data_bits):
        if cw[transmitted - 1 - i]:
            data_int |= 1 << (cfg.data_bits - 1 - i)
    return DecodeResult(uuid.UUID(int=data_int), corrected + pad_errors)


def random_watermark(length: int, seed: int) -> np.ndarray:
    """Uniform random bit string; deterministic for a fixed seed."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=length, dtype=np.uint8)


def bit_accuracy(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of positions where a equals b (0.5 = chance)."""
    a = _validate_bits(a)
    b = _validate_bits(b)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return float((a == b).mean())


def bits_to_hex(bits: np.ndarray) -> str:
    """Big-endian bit packing; trailing zeros pad partial final nibbles."""
    bits = _validate_bits(bits)
    padded = np.concatenate([bits, np.zeros((-bits.size) % 4, dtype=np.uint8)])
    value = 0
    for b in padded:
        value = (value << 1) | int(b)
    return f"{value:0{padded.size // 4}x}"

def hex_to_bits(text: str, length: int) -> np.ndarray:
    value = int(text, 16)
    nbits = len(text) * 4
    if nbits < length:
        raise ValueError(f"hex string holds {nbits} bits, need {length}")
    bits = np.array([(value >> (nbits - 1 - i)) & 1 for i in range(length)], dtype=np.uint8)
    return bits

"""Lossless arithmetic coding of integer symbols under per-symbol models.

The coder is a 32-bit integer range coder with carry propagation (byte-wise
renormalization, LZMA-style shift-low). All coding arithmetic is integer,
so streams are bit-identical across platforms. Symbols outside a model's
support window are coded as an escape symbol followed by the raw value in
32 fixed bits.
"""

from __future__ import annotations

import struct

import numpy as np

from . import counters

PROB_SCALE_BITS = 16
PROB_SCALE = 1 << PROB_SCALE_BITS  # total frequency per model

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF

STREAM_LATENT = 0
STREAM_HYPER = 1

_MAGIC = b"JCIF"
_VERSION = 1
_HEADER = struct.Struct("<4sBB4IhhQ")


class FormatError(ValueError):
    """Corrupted or foreign bitstream."""


class SymbolModel:
    """Integer frequencies over the window [lo, hi], optionally plus an escape slot.

    Frequencies are >= 1 each and sum exactly to PROB_SCALE, so cumulative
    frequencies are strictly increasing. freqs/cum may be views into batched
    arrays; they are never mutated.
    """

    __slots__ = ("lo", "hi", "freqs", "cum", "has_escape")

    def __init__(self, lo, hi, freqs, has_escape, cum=None):
        self.lo = int(lo)
        self.hi = int(hi)
        self.freqs = freqs
        self.has_escape = has_escape
        if cum is None:
            cum = np.concatenate(([0], np.cumsum(freqs, dtype=np.uint64)))
        self.cum = cum

    @property
    def n_symbols(self):
        return self.hi - self.lo + 1

    def bits_for(self, symbol):
        """Code length in bits of one symbol under the quantized model."""
        if self.lo <= symbol <= self.hi:
            return -np.log2(self.freqs[symbol - self.lo] / PROB_SCALE)
        if not self.has_escape:
            raise ValueError(f"symbol {symbol} outside window [{self.lo}, {self.hi}]")
        return -np.log2(self.freqs[-1] / PROB_SCALE) + 32.0


def quantize_probabilities(probs, escape_mass=None):
    """Turn float probabilities into integer frequencies summing to PROB_SCALE.

    probs: (n_models, n_symbols) or (n_symbols,). When escape_mass is given
    (same leading shape, the tail mass outside the window) an extra escape
    slot is appended. Every slot gets at least one count; the deficit or
    surplus after flooring is absorbed by the largest slot, which stays
    positive because the largest count always dominates the adjustment.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if escape_mass is not None:
        esc = np.maximum(np.atleast_1d(np.asarray(escape_mass, dtype=np.float64)), 0.0)
        p = np.concatenate([p, esc[:, None]], axis=1)
    p = np.maximum(p, 0.0)
    f = np.maximum(1, np.floor(p * PROB_SCALE).astype(np.int64))
    diff = PROB_SCALE - f.sum(axis=1)
    top = np.argmax(f, axis=1)
    rows = np.arange(f.shape[0])
    f[rows, top] += diff
    if np.any(f <= 0):
        raise ValueError("frequency quantization underflow; window too large for scale")
    return f


def quantize_model(probs, lo, hi, escape_mass=None):
    """Build a SymbolModel from interval probabilities over [lo, hi]."""
    n = hi - lo + 1
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (n,):
        raise ValueError(f"expected {n} probabilities for window [{lo}, {hi}], got {probs.shape}")
    freqs = quantize_probabilities(probs, None if escape_mass is None else [escape_mass])[0]
    return SymbolModel(lo, hi, freqs, has_escape=escape_mass is not None)


def models_from_prob_matrix(probs, lo, hi, escape_mass):
    """Batched quantize_model: one SymbolModel per row, escape slot included."""
    freqs = quantize_probabilities(probs, escape_mass)
    cums = np.zeros((freqs.shape[0], freqs.shape[1] + 1), dtype=np.uint64)
    np.cumsum(freqs, axis=1, out=cums[:, 1:])
    return [SymbolModel(lo, hi, freqs[i], has_escape=True, cum=cums[i]) for i in range(freqs.shape[0])]


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def encode(self, cum_lo, freq, total):
        r = self.range // total
        self.low += r * int(cum_lo)
        self.range = r * int(freq)
        while self.range < _TOP:
            self._shift_low()
            self.range = (self.range << 8) & _MASK32

    def _shift_low(self):
        # Emit the oldest byte once a carry can no longer reach it.
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def finish(self):
        # Any value in [low, low+range) finalizes the stream; pick the one
        # with the most trailing zero bytes and strip them (the decoder pads
        # zeros past end-of-payload). Cap at 2^33 so the carry stays a single bit.
        for k in (32, 24, 16, 8):
            cand = ((self.low + (1 << k) - 1) >> k) << k
            if self.low <= cand < self.low + self.range and cand < (1 << 33):
                self.low = cand
                break
        for _ in range(5):
            self._shift_low()
        out = bytes(self.out)
        return out.rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):  # first byte is the encoder's initial zero cache
            self.code = ((self.code << 8) | self._byte()) & _MASK32

    def _byte(self):
        # Truncated payloads read as zeros: garbage out, never a crash.
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        return 0

    def decode_target(self, total):
        self._r = self.range // total
        return min(self.code // self._r, total - 1)

    def consume(self, cum_lo, freq, total):
        self.code -= self._r * int(cum_lo)
        self.range = self._r * int(freq)
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range = (self.range << 8) & _MASK32


def _encode_raw_u32(enc, value):
    for shift in (24, 16, 8, 0):
        b = (value >> shift) & 0xFF
        enc.encode(b, 1, 256)


def _decode_raw_u32(dec):
    value = 0
    for _ in range(4):
        b = dec.decode_target(256)
        dec.consume(b, 1, 256)
        value = (value << 8) | b
    return value


def arith_encode(symbols, models):
    """Encode integer symbols, one model each, into a payload byte string."""
    enc = RangeEncoder()
    for s, m in zip(symbols, models):
        s = int(s)
        if m.lo <= s <= m.hi:
            idx = s - m.lo
            enc.encode(m.cum[idx], m.freqs[idx], PROB_SCALE)
        else:
            if not m.has_escape:
                raise ValueError(f"symbol {s} outside window [{m.lo}, {m.hi}] and no escape slot")
            idx = len(m.freqs) - 1
            enc.encode(m.cum[idx], m.freqs[idx], PROB_SCALE)
            _encode_raw_u32(enc, s & _MASK32)
    return enc.finish()


def arith_decode(payload, models):
    """Decode exactly len(models) symbols; models must match the encoder's bit-exactly.

    A model mismatch is undetectable by construction (the coder carries no
    redundancy); callers must derive models from decoded side information.
    """
    counters.ARITH_DECODE_CALLS += 1
    dec = RangeDecoder(payload)
    out = []
    for m in models:
        t = dec.decode_target(PROB_SCALE)
        idx = int(np.searchsorted(m.cum, t, side="right")) - 1
        dec.consume(m.cum[idx], m.freqs[idx], PROB_SCALE)
        if m.has_escape and idx == len(m.freqs) - 1:
            raw = _decode_raw_u32(dec)
            if raw >= 1 << 31:
                raw -= 1 << 32
            out.append(raw)
        else:
            out.append(m.lo + idx)
    return out


def model_bits(symbols, models):
    """Ideal total code length under the quantized models (escape = slot + 32)."""
    return float(sum(m.bits_for(int(s)) for s, m in zip(symbols, models)))


def pack_bitstream(kind, shape, lo, hi, payload):
    """Self-delimiting stream: header carries shape metadata and payload length."""
    shape = tuple(int(v) for v in shape)
    if len(shape) != 4:
        raise ValueError(f"shape metadata must have 4 entries, got {shape}")
    header = _HEADER.pack(_MAGIC, _VERSION, kind, *shape, lo, hi, 8 * len(payload))
    return header + payload


def unpack_bitstream(buf, offset=0):
    """Parse one bitstream at `offset`; returns (kind, shape, lo, hi, payload, next_offset)."""
    end = offset + _HEADER.size
    if end > len(buf):
        raise FormatError("bitstream header truncated")
    magic, version, kind, s0, s1, s2, s3, lo, hi, bits = _HEADER.unpack_from(buf, offset)
    if magic != _MAGIC:
        raise FormatError(f"bad bitstream magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported bitstream version {version}")
    nbytes = (bits + 7) // 8
    payload = bytes(buf[end:end + nbytes])
    if len(payload) < nbytes:
        raise FormatError("bitstream payload truncated")
    return kind, (s0, s1, s2, s3), lo, hi, payload, end + nbytes

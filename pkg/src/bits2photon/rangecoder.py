"""Byte-oriented 32-bit range coder.

Frequencies come from quantized CDF tables with total 2^16 (see
entropy.build_cdf_table). Carries propagate directly into the emitted byte
buffer; flush costs 4 bytes, so total overhead stays within 32 bits plus
renormalization slack.
"""

from __future__ import annotations

import numpy as np

from .errors import DecodeError

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF

CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.out = bytearray()

    def _carry(self):
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def encode(self, cum_low: int, cum_high: int):
        """Encode a symbol occupying [cum_low, cum_high) out of CDF_TOTAL."""
        r = self.range >> CDF_BITS
        self.low += r * cum_low
        if self.low > _MASK32:
            self._carry()
            self.low &= _MASK32
        self.range = r * (cum_high - cum_low)
        while self.range < _TOP:
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & _MASK32
            self.range = (self.range << 8) & _MASK32

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & _MASK32
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        return 0

    def decode_target(self) -> int:
        """Current cumulative-frequency target in [0, CDF_TOTAL)."""
        self._r = self.range >> CDF_BITS
        return min(self.code // self._r, CDF_TOTAL - 1)

    def consume(self, cum_low: int, cum_high: int):
        self.code -= self._r * cum_low
        self.range = self._r * (cum_high - cum_low)
        if self.code < 0:
            raise DecodeError("range decoder desynchronized (corrupt payload)")
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range = (self.range << 8) & _MASK32


def encode_symbols(symbols: np.ndarray, cdfs: np.ndarray) -> bytes:
    """Encode symbols[i] under per-symbol CDF row cdfs[i].

    cdfs has shape (n, num_symbols + 1): monotone, cdfs[:,0] == 0 and
    cdfs[:,-1] == CDF_TOTAL. Symbols index into the rows.
    """
    enc = RangeEncoder()
    rows = np.arange(len(symbols))
    lows = cdfs[rows, symbols].tolist()
    highs = cdfs[rows, symbols + 1].tolist()
    encode = enc.encode
    for lo, hi in zip(lows, highs):
        encode(lo, hi)
    return enc.finish()


def decode_symbols(data: bytes, cdfs: np.ndarray) -> np.ndarray:
    """Inverse of encode_symbols; cdfs must match the encoder bit-exactly."""
    dec = RangeDecoder(data)
    out = np.empty(len(cdfs), dtype=np.int64)
    target_fn, consume = dec.decode_target, dec.consume
    searchsorted = np.searchsorted
    for i in range(len(cdfs)):
        cdf = cdfs[i]
        s = int(searchsorted(cdf, target_fn(), side="right")) - 1
        consume(int(cdf[s]), int(cdf[s + 1]))
        out[i] = s
    return out

"""Carry-less range coder with a 64-bit state and byte-wise renormalisation.

Frequencies are integers summing to ``1 << FREQ_BITS``; every coded symbol
must have a non-zero frequency.
"""

from __future__ import annotations

from bisect import bisect_right

FREQ_BITS = 16
TOTAL_FREQ = 1 << FREQ_BITS
_MASK = (1 << 64) - 1
_TOP = 1 << 56
_BOT = 1 << 48


class RangeDecodeError(ValueError):
    pass


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int) -> None:
        r = self.range >> FREQ_BITS
        low = self.low + cum * r
        rng = freq * r
        out = self.out
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = (-low) & (_BOT - 1)
            out.append(low >> 56)
            low = (low << 8) & _MASK
            rng <<= 8
        self.low, self.range = low, rng

    def finish(self) -> bytes:
        low = self.low
        for _ in range(8):
            self.out.append(low >> 56)
            low = (low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 8
        self.low = 0
        self.range = _MASK
        self.code = int.from_bytes(data[:8].ljust(8, b"\0"), "big")
        self._r = 0

    def target(self) -> int:
        self._r = self.range >> FREQ_BITS
        value = (self.code - self.low) // self._r
        if not 0 <= value < TOTAL_FREQ:
            raise RangeDecodeError("range decoder state left the coding interval")
        return value

    def advance(self, cum: int, freq: int) -> None:
        r = self._r
        low = self.low + cum * r
        rng = freq * r
        code, pos, data = self.code, self.pos, self.data
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = (-low) & (_BOT - 1)
            byte = data[pos] if pos < len(data) else 0
            pos += 1
            code = ((code << 8) | byte) & _MASK
            low = (low << 8) & _MASK
            rng <<= 8
        self.low, self.range, self.code, self.pos = low, rng, code, pos


class FrequencyTable:
    """Cumulative frequency table over the symbol range ``[lo, lo + len(freqs))``."""

    __slots__ = ("lo", "freqs", "cum")

    def __init__(self, lo: int, freqs):
        freqs = [int(f) for f in freqs]
        if sum(freqs) != TOTAL_FREQ:
            raise ValueError(f"frequencies sum to {sum(freqs)}, expected {TOTAL_FREQ}")
        if min(freqs) < 1:
            raise ValueError("every in-support symbol needs a frequency >= 1")
        self.lo = int(lo)
        self.freqs = freqs
        cum = [0]
        for f in freqs:
            cum.append(cum[-1] + f)
        self.cum = cum

    @property
    def hi(self) -> int:
        return self.lo + len(self.freqs) - 1


def encode_symbols(symbols, tables, table_index=None) -> bytes:
    """Range-code ``symbols``; symbol ``n`` uses ``tables[table_index[n]]``.

    With ``table_index`` omitted a single table (``tables`` itself or its
    only element) codes every symbol.
    """
    if isinstance(tables, FrequencyTable):
        tables = [tables]
    enc = RangeEncoder()
    if table_index is None:
        t = tables[0]
        lo, cum, freqs = t.lo, t.cum, t.freqs
        for s in symbols:
            i = int(s) - lo
            if not 0 <= i < len(freqs):
                raise ValueError(f"symbol {s} outside table support [{lo}, {t.hi}]")
            enc.encode(cum[i], freqs[i])
    else:
        for s, ti in zip(symbols, table_index):
            t = tables[ti]
            i = int(s) - t.lo
            if not 0 <= i < len(t.freqs):
                raise ValueError(f"symbol {s} outside table support [{t.lo}, {t.hi}]")
            enc.encode(t.cum[i], t.freqs[i])
    return enc.finish()


def decode_symbols(data: bytes, tables, count: int, table_index=None) -> list[int]:
    if isinstance(tables, FrequencyTable):
        tables = [tables]
    dec = RangeDecoder(data)
    out = []
    for n in range(count):
        t = tables[0] if table_index is None else tables[table_index[n]]
        v = dec.target()
        i = bisect_right(t.cum, v) - 1
        dec.advance(t.cum[i], t.freqs[i])
        out.append(t.lo + i)
    return out

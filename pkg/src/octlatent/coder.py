"""Exact integer range coder.

The coder keeps a 64-bit ``low``/``range`` window and renormalizes byte-wise
whenever ``range`` drops below 2**56, so each symbol costs at most 2**-40
bits more than its ideal code length. Carries are propagated directly into
the already-emitted bytes. The decoder pads the stream with zero bytes.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CorruptStreamError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 64
_BOT = 1 << 56
_MASK = _TOP - 1


@dataclass(frozen=True)
class CdfTable:
    """Cumulative frequencies; ``cdf[0] = 0``, ``cdf[-1] = 65536``, strictly increasing."""

    cdf: tuple[int, ...]

    def __post_init__(self):
        c = self.cdf
        if c[0] != 0 or c[-1] != TOTAL:
            raise ValueError("cdf must start at 0 and end at 65536")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("every symbol needs a frequency >= 1")

    def __len__(self) -> int:
        return len(self.cdf) - 1

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(np.asarray(self.cdf))

    def bits(self, symbol: int) -> float:
        return -np.log2((self.cdf[symbol + 1] - self.cdf[symbol]) / TOTAL)


def quantize_pmf_rows(p: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of 65536 over each row; returns (N, K+1) cumulative ints.

    Every symbol first receives one unit; the remaining ``65536 - K`` units are
    split proportionally, leftovers going to the largest fractional parts
    (ties to the smaller symbol index).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    n, k = p.shape
    if k > TOTAL:
        raise ValueError("alphabet larger than 65536")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    p = p / p.sum(axis=1, keepdims=True)
    spare = TOTAL - k
    ideal = p * spare
    base = np.floor(ideal)
    rem = ideal - base
    base = base.astype(np.int64)
    left = spare - base.sum(axis=1)
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[np.arange(n)[:, None], order] = np.arange(k)[None, :]
    freq = 1 + base + (rank < left[:, None])
    cdf = np.zeros((n, k + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def quantize_pmf(p) -> CdfTable:
    return CdfTable(tuple(int(v) for v in quantize_pmf_rows(np.asarray(p)[None])[0]))


def tables_from_rows(cdf_rows: np.ndarray) -> list[CdfTable]:
    return [CdfTable(tuple(r)) for r in cdf_rows.tolist()]


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _TOP
        self.out = bytearray()

    def _carry(self) -> None:
        out = self.out
        i = len(out) - 1
        while out[i] == 0xFF:
            out[i] = 0
            i -= 1
        out[i] += 1

    def encode(self, cum: int, freq: int, total: int = TOTAL) -> None:
        if freq <= 0:
            raise ValueError("cannot encode a zero-frequency symbol")
        r = self.range // total
        low = self.low + r * cum
        rng = r * freq
        if low >= _TOP:
            self._carry()
            low -= _TOP
        while rng < _BOT:
            self.out.append(low >> 56)
            low = (low << 8) & _MASK
            rng <<= 8
        self.low = low
        self.range = rng

    def finish(self) -> bytes:
        """Emit the shortest byte run whose every continuation stays inside the final interval."""
        low, high = self.low, self.low + self.range
        for n in range(9):
            unit = 1 << (64 - 8 * n)
            v = -(-low // unit) * unit
            if v + unit <= high:
                break
        if v >= _TOP:
            self._carry()
            v -= _TOP
        for i in range(n):
            self.out.append((v >> (56 - 8 * i)) & 0xFF)
        self.low, self.range = 0, _TOP
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.limit = len(self.data) + 8
        self.pos = 0
        self.range = _TOP
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._next()
        self._r = 0

    def _next(self) -> int:
        pos = self.pos
        if pos >= self.limit:
            raise CorruptStreamError("segment exhausted before all symbols were decoded")
        self.pos = pos + 1
        return self.data[pos] if pos < len(self.data) else 0

    def target(self, total: int = TOTAL) -> int:
        self._r = r = self.range // total
        v = self.code // r
        return v if v < total else total - 1

    def consume(self, cum: int, freq: int) -> None:
        r = self._r
        self.code -= r * cum
        self.range = r * freq
        while self.range < _BOT:
            self.code = (self.code << 8) | self._next()
            self.range <<= 8
        if self.code >= self.range:
            raise CorruptStreamError("decoder state left the coding interval")


def range_encode(symbols: Sequence[int], tables: Sequence[CdfTable]) -> bytes:
    if len(symbols) != len(tables):
        raise ValueError("one table per symbol is required")
    enc = RangeEncoder()
    for s, t in zip(symbols, tables):
        c = t.cdf
        s = int(s)
        if not 0 <= s < len(c) - 1:
            raise ValueError(f"symbol {s} outside the table alphabet")
        enc.encode(c[s], c[s + 1] - c[s])
    return enc.finish()


def range_decode(data: bytes, tables: Sequence[CdfTable], count: int | None = None) -> list[int]:
    count = len(tables) if count is None else count
    if count > len(tables):
        raise ValueError("not enough tables for the requested symbol count")
    dec = RangeDecoder(data)
    out = []
    for t in tables[:count]:
        c = t.cdf
        v = dec.target()
        s = bisect.bisect_right(c, v) - 1
        dec.consume(c[s], c[s + 1] - c[s])
        out.append(s)
    return out


def cross_entropy_bits(symbols: Sequence[int], tables: Sequence[CdfTable]) -> float:
    total = 0.0
    for s, t in zip(symbols, tables):
        total += t.bits(int(s))
    return total


# adaptive order-0 -----------------------------------------------------------


class _Fenwick:
    def __init__(self, n: int, init: int = 1):
        self.n = n
        self.tree = [0] * (n + 1)
        self.counts = [0] * n
        for i in range(n):
            self.add(i, init)

    def add(self, i: int, delta: int) -> None:
        self.counts[i] += delta
        j = i + 1
        while j <= self.n:
            self.tree[j] += delta
            j += j & -j

    def prefix(self, i: int) -> int:
        """Sum of counts[0:i]."""
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return s

    def find(self, target: int) -> int:
        """Largest i with prefix(i) <= target."""
        pos = 0
        step = 1 << self.n.bit_length()
        while step:
            nxt = pos + step
            if nxt <= self.n and self.tree[nxt] <= target:
                pos = nxt
                target -= self.tree[nxt]
            step >>= 1
        return pos


class AdaptiveOrder0:
    """Laplace-initialized (count 1 per symbol) frequency model with a fixed increment.

    Counts are halved (keeping each >= 1) once the total would exceed 2**16;
    both directions follow the identical schedule.
    """

    def __init__(self, alphabet: int = 256, increment: int = 16):
        self.alphabet = alphabet
        self.increment = increment
        self.fen = _Fenwick(alphabet)
        self.total = alphabet

    def interval(self, symbol: int) -> tuple[int, int]:
        return self.fen.prefix(symbol), self.fen.counts[symbol]

    def update(self, symbol: int) -> None:
        self.fen.add(symbol, self.increment)
        self.total += self.increment
        if self.total > TOTAL:
            halved = [max(1, c >> 1) for c in self.fen.counts]
            self.fen = _Fenwick(self.alphabet, 0)
            for i, c in enumerate(halved):
                self.fen.add(i, c)
            self.total = sum(halved)


def adaptive_encode(symbols: Sequence[int], alphabet: int = 256, increment: int = 16) -> bytes:
    if len(symbols) == 0:
        return b""
    model = AdaptiveOrder0(alphabet, increment)
    enc = RangeEncoder()
    for s in symbols:
        s = int(s)
        if not 0 <= s < alphabet:
            raise ValueError(f"symbol {s} outside alphabet")
        cum, freq = model.interval(s)
        enc.encode(cum, freq, model.total)
        model.update(s)
    return enc.finish()


class AdaptiveDecoder:
    """Incremental adaptive order-0 decoder (symbol counts may be discovered on the fly)."""

    def __init__(self, data: bytes, alphabet: int = 256, increment: int = 16):
        self.model = AdaptiveOrder0(alphabet, increment)
        self.dec = RangeDecoder(data)

    def decode(self) -> int:
        m = self.model
        v = self.dec.target(m.total)
        s = m.fen.find(v)
        cum, freq = m.interval(s)
        self.dec.consume(cum, freq)
        m.update(s)
        return s


def adaptive_decode(data: bytes, count: int, alphabet: int = 256, increment: int = 16) -> list[int]:
    if count == 0:
        return []
    d = AdaptiveDecoder(data, alphabet, increment)
    return [d.decode() for _ in range(count)]


def adaptive_code_length(symbols: Sequence[int], alphabet: int = 256, increment: int = 16) -> float:
    """Ideal code length (bits) of the adaptive model, without coder overhead."""
    model = AdaptiveOrder0(alphabet, increment)
    bits = 0.0
    for s in symbols:
        _, freq = model.interval(int(s))
        bits -= np.log2(freq / model.total)
        model.update(int(s))
    return bits


# table-matrix coding ---------------------------------------------------------


def check_rows(cdf_rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(cdf_rows, dtype=np.int64)
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise ValueError("cdf rows must be a 2-D array with at least one symbol")
    if np.any(rows[:, 0] != 0) or np.any(rows[:, -1] != TOTAL):
        raise ValueError("every cdf row must start at 0 and end at 65536")
    if np.any(np.diff(rows, axis=1) < 1):
        raise ValueError("every symbol needs a frequency >= 1")
    return rows


def encode_with_rows(symbols, cdf_rows: np.ndarray, row_of=None) -> bytes:
    """Range-code ``symbols[i]`` with table ``cdf_rows[row_of[i]]`` (``row_of`` defaults to i)."""
    rows = check_rows(cdf_rows)
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    idx = np.arange(len(sym)) if row_of is None else np.asarray(row_of, dtype=np.int64)
    if len(idx) != len(sym):
        raise ValueError("one table row per symbol is required")
    if len(sym) and (sym.min() < 0 or sym.max() >= rows.shape[1] - 1):
        raise ValueError("symbol outside the table alphabet")
    lo = rows[idx, sym].tolist()
    hi = rows[idx, sym + 1].tolist()
    enc = RangeEncoder()
    for a, b in zip(lo, hi):
        enc.encode(a, b - a)
    return enc.finish()


def decode_with_rows(data: bytes, cdf_rows: np.ndarray, count: int, row_of=None) -> np.ndarray:
    rows = check_rows(cdf_rows)
    idx = np.arange(count) if row_of is None else np.asarray(row_of, dtype=np.int64)
    if len(idx) < count:
        raise ValueError("not enough table rows for the requested symbol count")
    table = rows.tolist()
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i, r in enumerate(idx[:count].tolist()):
        c = table[r]
        v = dec.target()
        s = bisect.bisect_right(c, v) - 1
        dec.consume(c[s], c[s + 1] - c[s])
        out[i] = s
    return out


def rows_cross_entropy(symbols, cdf_rows: np.ndarray, row_of=None) -> float:
    """Ideal bits of ``symbols`` under the quantized tables."""
    rows = np.asarray(cdf_rows, dtype=np.int64)
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    idx = np.arange(len(sym)) if row_of is None else np.asarray(row_of, dtype=np.int64)
    freq = rows[idx, sym + 1] - rows[idx, sym]
    return float(-np.log2(freq / TOTAL).sum())

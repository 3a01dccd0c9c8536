"""Gaussian CDF tables and byte-wise rANS coding.

Every coded symbol carries its own table, built from its own (mu, sigma,
step) over an alphabet [vmin, vmax] plus one escape entry. Table masses are
round(2^16 * interval mass), floored at 1, then moved one unit at a time to
or from the entry with the most extreme remainder (2^16 * p - freq, ties to
the lower index) until they total 2^16 exactly.

``build_cdf`` does that literally and densely. The coder uses a numba kernel
that computes the same table touching only the entries within 6 sigma of
mu: everything farther out rounds to zero mass, so it is pinned at 1 and
never takes part in the redistribution.

rANS: 32-bit state, L = 2^23, 16-bit precision, byte renormalization
(after ryg_rans). Symbols are encoded in reverse and decoded forward, so a
decoder can interleave decoding with predicting the next distributions.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from numba import njit

from .entropy import interval_mass, std_mass, upper_tail
from .errors import DecodeError, FormatError

PRECISION = 16
TOTAL = 1 << PRECISION
RANS_L = 1 << 23
WINDOW_SIGMAS = 6.0
FEATURE_ALPHABET = (-255, 255)
MAX_ALPHABET = TOTAL // 2


def quantize(values, step=1.0):
    """Round-half-away-from-zero of values / step, as int64."""
    v = np.asarray(values, dtype=np.float64) / np.asarray(step, dtype=np.float64)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def dequantize(symbols, step=1.0):
    return np.asarray(symbols, dtype=np.float64) * np.asarray(step, dtype=np.float64)


# --- dense reference tables ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class CdfTable:
    vmin: int
    vmax: int
    freqs: np.ndarray  # (vmax - vmin + 2,), last entry is the escape symbol
    precision: int = PRECISION

    @property
    def cum(self):
        return np.concatenate([[0], np.cumsum(self.freqs)])

    @property
    def escape_index(self):
        return self.vmax - self.vmin + 1

    def index_of(self, value):
        return value - self.vmin if self.vmin <= value <= self.vmax else self.escape_index


def raw_masses(mu, sigma, step, vmin, vmax):
    """Unrenormalized probabilities of [vmin..vmax, escape] under N(mu, sigma)."""
    v = np.arange(vmin, vmax + 1, dtype=np.float64)
    p = interval_mass(mu, sigma, (v - 0.5) * step, (v + 0.5) * step)
    p_esc = (interval_mass(mu, sigma, -np.inf, (vmin - 0.5) * step)
             + interval_mass(mu, sigma, (vmax + 0.5) * step, np.inf))
    return np.append(p, p_esc)


def build_cdf(mu, sigma, step, vmin, vmax) -> CdfTable:
    if not sigma > 0 or not step > 0:
        raise ValueError("sigma and step must be positive")
    if not 0 <= vmax - vmin < MAX_ALPHABET:
        raise ValueError(f"alphabet [{vmin}, {vmax}] is empty or too large")
    x = raw_masses(mu, sigma, step, vmin, vmax) * TOTAL
    f = np.maximum(np.floor(x + 0.5), 1).astype(np.int64)
    total = int(f.sum())
    while total > TOTAL:
        key = np.where(f > 1, x - f, np.inf)
        f[int(np.argmin(key))] -= 1
        total -= 1
    while total < TOTAL:
        f[int(np.argmax(x - f))] += 1
        total += 1
    return CdfTable(int(vmin), int(vmax), f)


# --- sparse kernel ------------------------------------------------------------

@njit(cache=True)
def _pick(keys, n, count, largest, out, buf):
    """Indices of the ``count`` smallest (or largest) finite keys, ties to the lower
    index: the same set a stable sort would put first. Each chosen entry moves by
    exactly one unit, so only the set matters and a selection threshold suffices."""
    if count <= 4:
        for r in range(count):
            best = -1
            for j in range(n):
                k = keys[j]
                if k == np.inf or k == -np.inf:
                    continue
                if best < 0 or (k > keys[best] if largest else k < keys[best]):
                    best = j
            out[r] = best
            keys[best] = -np.inf if largest else np.inf
        return
    m = 0
    for j in range(n):
        k = keys[j]
        if k != np.inf and k != -np.inf:
            buf[m] = -k if largest else k
            m += 1
    thr = np.partition(buf[:m], count - 1)[count - 1]
    r = 0
    for j in range(n):
        k = keys[j]
        if k != np.inf and k != -np.inf and (-k if largest else k) < thr:
            out[r] = j
            r += 1
    for j in range(n):
        if r == count:
            break
        k = keys[j]
        if k != np.inf and k != -np.inf and (-k if largest else k) == thr:
            out[r] = j
            r += 1


@njit(cache=True)
def _sparse_table(mu, sigma, q, vmin, vmax, wf, wx, scratch):
    """Fill wf[0:W+1] with final freqs of the window entries plus the escape
    (stored at wf[W]). Returns (window start index, W).

    Entries outside the +-6 sigma window keep frequency 1 and are never touched by
    renormalization, so the result equals the dense greedy table (see build_cdf).
    """
    L = vmax - vmin + 1
    c = mu / q
    half = WINDOW_SIGMAS * sigma / q + 1.0
    a = c - half
    b = c + half
    lo = vmin if a <= vmin else (vmax + 1 if a > vmax else int(np.floor(a)))
    hi = vmax if b >= vmax else (vmin - 1 if b < vmin else int(np.ceil(b)))
    if lo > hi:
        W = 0
        wlo = L
    else:
        W = hi - lo + 1
        wlo = lo - vmin
    zs = scratch[0]
    g = scratch[1]
    keys = scratch[2]
    # one tail evaluation per cell boundary; same arithmetic as std_mass
    for j in range(W + 1):
        z = ((lo + j - 0.5) * q - mu) / sigma
        zs[j] = z
        g[j] = upper_tail(abs(z))
    total = L - W
    for j in range(W):
        if zs[j] >= 0.0:
            p = g[j] - g[j + 1]
        elif zs[j + 1] <= 0.0:
            p = g[j + 1] - g[j]
        else:
            p = 1.0 - g[j + 1] - g[j]
        x = p * TOTAL
        r = np.floor(x + 0.5)
        fr = int(r) if r > 1.0 else 1
        wx[j] = x
        wf[j] = fr
        total += fr
    p_esc = (std_mass(-np.inf, ((vmin - 0.5) * q - mu) / sigma)
             + std_mass(((vmax + 0.5) * q - mu) / sigma, np.inf))
    x = p_esc * TOTAL
    r = np.floor(x + 0.5)
    fr = int(r) if r > 1.0 else 1
    wx[W] = x
    wf[W] = fr
    total += fr

    d = TOTAL - total
    n = W + 1
    sel = scratch[3]
    if d < 0:
        need = -d
        # full rounds: each round takes one unit from every entry still above 1
        above, fmax = 0, 1
        for j in range(n):
            if wf[j] > 1:
                above += 1
                fmax = max(fmax, wf[j])
        lo_j, hi_j = 0, (0 if need < above else fmax - 1)
        while lo_j < hi_j:
            mid = (lo_j + hi_j + 1) // 2
            s = 0
            for j in range(n):
                s += min(mid, wf[j] - 1)
            if s <= need:
                lo_j = mid
            else:
                hi_j = mid - 1
        J = lo_j
        removed = 0
        for j in range(n):
            removed += min(J, wf[j] - 1)
        rest = need - removed
        if rest > 0:
            for j in range(n):
                keys[j] = wx[j] - wf[j] if wf[j] - 1 > J else np.inf
            _pick(keys, n, rest, False, sel, scratch[4])
            for j in range(rest):
                wf[int(sel[j])] -= 1
        for j in range(n):
            wf[j] -= min(J, wf[j] - 1)
    elif d > 0:
        for j in range(n):
            keys[j] = wx[j] - wf[j]
        full, rest = divmod(d, n)
        if full:
            for j in range(n):
                wf[j] += full
        if rest:
            _pick(keys, n, rest, True, sel, scratch[4])
            for j in range(rest):
                wf[int(sel[j])] += 1
    return wlo, W


@njit(cache=True)
def _start_freq(idx, L, wlo, W, wf):
    """(cumulative start, freq) of entry idx in the sparse table."""
    if idx == L:
        return TOTAL - wf[W], wf[W]
    if idx < wlo:
        return idx, 1
    if idx < wlo + W:
        s = wlo
        for j in range(idx - wlo):
            s += wf[j]
        return s, wf[idx - wlo]
    s = wlo
    for j in range(W):
        s += wf[j]
    return s + (idx - wlo - W), 1


@njit(cache=True)
def _lookup(slot, L, wlo, W, wf):
    """(entry index, start, freq) for a decoder slot in [0, 2^16)."""
    if slot < wlo:
        return slot, slot, 1
    s = wlo
    for j in range(W):
        if slot < s + wf[j]:
            return wlo + j, s, wf[j]
        s += wf[j]
    esc_start = TOTAL - wf[W]
    if slot >= esc_start:
        return L, esc_start, wf[W]
    idx = wlo + W + (slot - s)
    return idx, slot, 1


@njit(cache=True)
def _table_codes(symbols, mu, sigma, step, vmin, vmax, starts, freqs):
    wf = np.empty(MAX_ALPHABET + 1, np.int64)
    wx = np.empty(MAX_ALPHABET + 1)
    scratch = np.empty((5, MAX_ALPHABET + 2))
    for i in range(symbols.size):
        L = vmax[i] - vmin[i] + 1
        wlo, W = _sparse_table(mu[i], sigma[i], step[i], vmin[i], vmax[i], wf, wx, scratch)
        v = symbols[i]
        idx = v - vmin[i] if vmin[i] <= v <= vmax[i] else L
        s, f = _start_freq(idx, L, wlo, W, wf)
        starts[i] = s
        freqs[i] = f


@njit(cache=True)
def _rans_encode(starts, freqs):
    n = starts.size
    out = np.empty(2 * n + 4, np.uint8)
    k = 0
    x = RANS_L
    for i in range(n - 1, -1, -1):
        f = freqs[i]
        x_max = ((RANS_L >> PRECISION) << 8) * f
        while x >= x_max:
            out[k] = x & 0xFF
            k += 1
            x >>= 8
        x = ((x // f) << PRECISION) + (x % f) + starts[i]
    out[k] = (x >> 24) & 0xFF
    out[k + 1] = (x >> 16) & 0xFF
    out[k + 2] = (x >> 8) & 0xFF
    out[k + 3] = x & 0xFF
    k += 4
    return out[:k][::-1].copy()


@njit(cache=True)
def _rans_decode(payload, pos, x, mu, sigma, step, vmin, vmax, out):
    """Decode out.size entry indices; returns (pos, state, ok)."""
    wf = np.empty(MAX_ALPHABET + 1, np.int64)
    wx = np.empty(MAX_ALPHABET + 1)
    scratch = np.empty((5, MAX_ALPHABET + 2))
    n_bytes = payload.size
    for i in range(out.size):
        L = vmax[i] - vmin[i] + 1
        wlo, W = _sparse_table(mu[i], sigma[i], step[i], vmin[i], vmax[i], wf, wx, scratch)
        slot = x & (TOTAL - 1)
        idx, s, f = _lookup(slot, L, wlo, W, wf)
        out[i] = idx
        x = f * (x >> PRECISION) + slot - s
        while x < RANS_L:
            if pos >= n_bytes:
                return pos, x, False
            x = (x << 8) | payload[pos]
            pos += 1
    return pos, x, True


# --- public coder -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianTables:
    """One CDF table per symbol, described by its distribution parameters."""

    mu: np.ndarray
    sigma: np.ndarray
    step: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray

    @classmethod
    def of(cls, mu, sigma, step=1.0, vmin=FEATURE_ALPHABET[0], vmax=FEATURE_ALPHABET[1]):
        mu = np.ascontiguousarray(mu, dtype=np.float64).ravel()
        n = mu.size

        def full(a, dtype):
            a = np.asarray(a, dtype=dtype)
            return np.ascontiguousarray(np.broadcast_to(a.ravel() if a.ndim else a, (n,)))

        t = cls(mu, full(sigma, np.float64), full(step, np.float64), full(vmin, np.int64),
                full(vmax, np.int64))
        if n and (np.any(~(t.sigma > 0)) or np.any(~(t.step > 0))):
            raise ValueError("sigma and step must be positive")
        width = t.vmax - t.vmin
        if n and (np.any(width < 0) or np.any(width >= MAX_ALPHABET)):
            raise ValueError("alphabet bounds out of range")
        return t

    def __len__(self):
        return self.mu.size

    def table(self, i) -> CdfTable:
        return build_cdf(self.mu[i], self.sigma[i], self.step[i], int(self.vmin[i]), int(self.vmax[i]))

    def __getitem__(self, sl):
        return GaussianTables(self.mu[sl], self.sigma[sl], self.step[sl], self.vmin[sl], self.vmax[sl])


def symbol_checksum(symbols):
    return zlib.crc32(np.asarray(symbols, dtype="<i4").tobytes())


@dataclass(frozen=True, eq=False)
class CodedPlane:
    payload: bytes
    count: int
    escapes: np.ndarray  # int32 raw values of escaped symbols, in order
    checksum: int  # CRC-32 of the symbol stream as int32 LE

    def to_bytes(self) -> bytes:
        esc = np.asarray(self.escapes, dtype="<i4")
        return b"".join([struct.pack("<II", self.count, len(self.payload)), self.payload,
                         struct.pack("<I", len(esc)), esc.tobytes(),
                         struct.pack("<I", self.checksum)])

    @classmethod
    def from_bytes(cls, data) -> "CodedPlane":
        data = memoryview(data)
        try:
            count, n_payload = struct.unpack_from("<II", data, 0)
            payload = bytes(data[8:8 + n_payload])
            if len(payload) != n_payload:
                raise FormatError("truncated coded payload")
            off = 8 + n_payload
            (n_esc,) = struct.unpack_from("<I", data, off)
            off += 4
            esc = np.frombuffer(data[off:off + 4 * n_esc], dtype="<i4").astype(np.int32)
            if esc.size != n_esc:
                raise FormatError("truncated escape payload")
            off += 4 * n_esc
            (checksum,) = struct.unpack_from("<I", data, off)
            off += 4
        except struct.error as exc:
            raise FormatError(f"truncated coded plane: {exc}") from exc
        if off != len(data):
            raise FormatError(f"{len(data) - off} trailing bytes after coded plane")
        return cls(payload, count, esc, checksum)

    def __eq__(self, other):
        return (isinstance(other, CodedPlane) and self.payload == other.payload
                and self.count == other.count and self.checksum == other.checksum
                and np.array_equal(self.escapes, other.escapes))


def rans_encode(symbols, tables: GaussianTables) -> CodedPlane:
    sym = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    if sym.size != len(tables):
        raise ValueError(f"{sym.size} symbols but {len(tables)} tables")
    if np.any(np.abs(sym) > np.iinfo(np.int32).max):
        raise ValueError("symbols must fit in int32")
    if sym.size == 0:
        return CodedPlane(b"", 0, np.zeros(0, np.int32), symbol_checksum(sym))
    starts = np.empty(sym.size, np.int64)
    freqs = np.empty(sym.size, np.int64)
    _table_codes(sym, tables.mu, tables.sigma, tables.step, tables.vmin, tables.vmax, starts, freqs)
    payload = _rans_encode(starts, freqs).tobytes()
    escaped = (sym < tables.vmin) | (sym > tables.vmax)
    return CodedPlane(payload, int(sym.size), sym[escaped].astype(np.int32), symbol_checksum(sym))


class RansDecoder:
    """Forward decoder that can be fed tables chunk by chunk.

    Call ``decode`` with the tables of the next symbols as they become known,
    then ``finish`` to run the end-of-stream and checksum checks.
    """

    def __init__(self, plane: CodedPlane):
        self.plane = plane
        self.payload = np.frombuffer(plane.payload, dtype=np.uint8)
        self.decoded = 0
        self.n_escapes = 0
        self.crc = 0
        if plane.count == 0:
            if len(plane.payload):
                raise DecodeError("payload present for an empty plane")
            self.pos, self.state = 0, RANS_L
        else:
            if self.payload.size < 4:
                raise DecodeError("coded payload shorter than the rANS state")
            p = self.payload
            self.state = int(p[0]) | int(p[1]) << 8 | int(p[2]) << 16 | int(p[3]) << 24
            self.pos = 4

    def decode(self, tables: GaussianTables):
        n = len(tables)
        if self.decoded + n > self.plane.count:
            raise DecodeError(f"asked for {self.decoded + n} symbols, plane holds {self.plane.count}")
        idx = np.empty(n, np.int64)
        if n:
            pos, state, ok = _rans_decode(self.payload, self.pos, self.state, tables.mu, tables.sigma,
                                          tables.step, tables.vmin, tables.vmax, idx)
            if not ok:
                raise DecodeError("rANS payload exhausted before the last symbol")
            self.pos, self.state = int(pos), int(state)
        self.decoded += n
        out = tables.vmin + idx
        esc = idx == tables.vmax - tables.vmin + 1
        n_esc = int(esc.sum())
        if n_esc:
            if self.n_escapes + n_esc > len(self.plane.escapes):
                raise DecodeError("escape payload exhausted")
            out[esc] = self.plane.escapes[self.n_escapes:self.n_escapes + n_esc]
            self.n_escapes += n_esc
        return out

    def absorb(self, symbols):
        """Fold final (context) symbol values into the running checksum."""
        self.crc = zlib.crc32(np.asarray(symbols, dtype="<i4").tobytes(), self.crc)

    def finish(self):
        if self.decoded != self.plane.count:
            raise DecodeError(f"decoded {self.decoded} of {self.plane.count} symbols")
        if self.state != RANS_L or self.pos != self.payload.size:
            raise DecodeError("rANS end state mismatch (corrupted payload or context desync)")
        if self.n_escapes != len(self.plane.escapes):
            raise DecodeError("unused escape values")
        if self.crc != self.plane.checksum:
            raise DecodeError("symbol checksum mismatch")


def rans_decode(plane: CodedPlane, tables: GaussianTables):
    dec = RansDecoder(plane)
    out = dec.decode(tables)
    dec.absorb(out)
    dec.finish()
    return out

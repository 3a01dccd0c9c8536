"""GIFS bitstream, GIFU model files, encode/decode pipelines and PLY export.

GIFS layout (all little-endian)::

    header   magic "GIFS", u16 version, config, gf_dims, k, G, seed, alphabets,
             position range, m_de prior, attribute bounds, section table, u32 CRC
    sections WEIGHTS, POSITIONS, MASKS_MDE, VTI_ATTR, VTI_FEAT, VGF (in this order)

Every coded section is a single rANS plane (see ``rans.CodedPlane``) holding
the section's symbols in decode order. The full byte layout is in README.md.
"""
from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .entropy import (SymbolPlane, context_stack, entropy_bits, fragment_bounds,
                      predict_attr_params, predict_fragment, predict_stream_frame)
from .errors import DecodeError, FormatError
from .model import GaussianFrame, GopConfig, GopModel, MDE_LEVELS, mde_from_level, mde_level, validate
from .nn import _Reader
from .rans import (FEATURE_ALPHABET, CodedPlane, GaussianTables, RansDecoder, quantize,
                   rans_encode)
from .reorg import (EMPTY, LayoutMaps, assemble_vti, build_layout, check_grid, layout_from_grid,
                    pack_vgf)

GIFS_MAGIC = b"GIFS"
GIFS_VERSION = 1
GIFU_MAGIC = b"GIFU"
GIFU_VERSION = 1

SECTIONS = ("WEIGHTS", "POSITIONS", "MASKS_MDE", "VTI_ATTR", "VTI_FEAT", "VGF")
CODED_SECTIONS = ("MASKS_MDE", "VTI_ATTR", "VTI_FEAT", "VGF")
CATEGORIES = {
    "time_independent_feature": ("VTI_FEAT",),
    "attributes": ("POSITIONS", "MASKS_MDE", "VTI_ATTR"),
    "time_dependent_feature": ("VGF",),
    "neural_networks": ("WEIGHTS",),
}
POS_LEVELS = 65535
ATTR_BOUND = 255


# --- quantization -------------------------------------------------------------

def coded_attr_columns(K):
    """Indices into the attribute-model output for the channels carried by VTI_ATTR:
    log S1, log S2, offsets, m_knn, m_dy (x and m_de travel elsewhere)."""
    return np.array(list(range(3, 9 + 3 * K)) + [10 + 3 * K, 11 + 3 * K])


def _attr_values(model: GopModel):
    """(n, 8 + 3K) attribute channels in the coded domain."""
    n = model.config.n_anchors
    return np.concatenate([
        np.log(model.attr_scale.astype(np.float64)), np.log(model.offset_scale.astype(np.float64)),
        model.offsets.reshape(n, -1).astype(np.float64),
        model.m_knn[:, None].astype(np.float64), model.m_dy[:, None].astype(np.float64)], axis=1)


def _mask_ceiling(step):
    return np.floor(1.0 / step)


def _attr_symbols(values, step, K):
    s = quantize(values, step)
    m = slice(6 + 3 * K, 8 + 3 * K)
    s[:, m] = np.clip(s[:, m], 0, _mask_ceiling(step[:, m]).astype(np.int64))
    return s


def _attr_dequantize(symbols, step, K):
    """Coded-domain symbols back to float32 (S1, S2, offsets, m_knn, m_dy)."""
    n = symbols.shape[0]
    v = symbols * step
    return {
        "attr_scale": np.exp(v[:, 0:3]).astype(np.float32),
        "offset_scale": np.exp(v[:, 3:6]).astype(np.float32),
        "offsets": v[:, 6:6 + 3 * K].astype(np.float32).reshape(n, K, 3),
        "m_knn": np.minimum(v[:, 6 + 3 * K].astype(np.float32), np.float32(1)),
        "m_dy": np.minimum(v[:, 7 + 3 * K].astype(np.float32), np.float32(1)),
    }


def _position_range(x):
    return x.min(axis=0).astype(np.float32), x.max(axis=0).astype(np.float32)


def _position_codes(x, lo, hi):
    lo, hi = lo.astype(np.float64), hi.astype(np.float64)
    span = hi - lo
    t = (x.astype(np.float64) - lo) / np.where(span > 0, span, 1.0)
    return np.clip(np.floor(t * POS_LEVELS + 0.5), 0, POS_LEVELS).astype(np.int64)


def _position_values(codes, lo, hi):
    lo, hi = lo.astype(np.float64), hi.astype(np.float64)
    return (lo + (hi - lo) * (codes / POS_LEVELS)).astype(np.float32)


@dataclass
class _Quantized:
    model: GopModel
    pos_codes: np.ndarray
    pos_lo: np.ndarray
    pos_hi: np.ndarray
    levels: np.ndarray
    attr_symbols: np.ndarray  # (n, 8 + 3K)
    attr_mu: np.ndarray
    attr_sigma: np.ndarray
    attr_step: np.ndarray


def _quantize(model: GopModel) -> _Quantized:
    cfg = model.config
    K = cfg.K
    f_bar = quantize(model.f).astype(np.float32)
    levels = mde_level(model.m_de)
    present = levels > 0
    streams = quantize(model.streams).astype(np.float32) * present[:, None, None]

    mu, sigma, step = (a[:, coded_attr_columns(K)] for a in predict_attr_params(f_bar, model.weights))
    symbols = _attr_symbols(_attr_values(model), step, K)
    attrs = _attr_dequantize(symbols, step, K)

    lo, hi = _position_range(model.x)
    codes = _position_codes(model.x, lo, hi)
    q = model.replace(x=_position_values(codes, lo, hi), m_de=mde_from_level(levels), f=f_bar,
                      streams=streams, present=present, quantized=True, **attrs)
    return _Quantized(q, codes, lo, hi, levels, symbols, mu, sigma, step)


def quantize_model(model: GopModel) -> GopModel:
    """The model exactly as the decoder will reconstruct it."""
    return _quantize(model).model


# --- header -------------------------------------------------------------------

_FIXED = struct.Struct("<4sH IHHHHH II II BB Q hh 3f 3f ff I")
_ENTRY = struct.Struct("<BIII")


@dataclass(frozen=True, eq=False)
class BitstreamHeader:
    config: GopConfig
    gf_dims: tuple
    seed: int
    pos_lo: np.ndarray
    pos_hi: np.ndarray
    mde_mu: float
    mde_sigma: float
    attr_bounds: np.ndarray  # (8 + 3K, 2) int
    n_empty: int
    k: int = nn.CONTEXT_K
    G: int = nn.FRAGMENT_WIDTH
    feature_bounds: tuple = FEATURE_ALPHABET
    version: int = GIFS_VERSION

    def size(self, n_sections=len(SECTIONS)):
        return _FIXED.size + 4 * len(self.attr_bounds) + 1 + _ENTRY.size * n_sections + 4

    def pack(self, table):
        c = self.config
        out = [_FIXED.pack(GIFS_MAGIC, self.version, c.n_anchors, c.K, c.C, c.P, c.N, c.knn_k,
                           c.grid_h, c.grid_w, *self.gf_dims, self.k, self.G, self.seed,
                           *self.feature_bounds, *self.pos_lo, *self.pos_hi,
                           self.mde_mu, self.mde_sigma, self.n_empty),
               np.asarray(self.attr_bounds, "<i2").tobytes(), struct.pack("<B", len(table))]
        out += [_ENTRY.pack(*entry) for entry in table]
        body = b"".join(out)
        return body + struct.pack("<I", zlib.crc32(body))


def _read_header(data):
    r = _Reader(data, "bitstream header")
    if bytes(data[:4]) != GIFS_MAGIC:
        raise FormatError("not a GIFS bitstream (bad magic)")
    (magic, version, n, K, C, P, N, knn_k, gh, gw, gfh, gfw, k, G, seed, fmin, fmax,
     *rest) = r.unpack(_FIXED.format)
    if version != GIFS_VERSION:
        raise FormatError(f"unsupported GIFS version {version}")
    lo, hi = np.array(rest[0:3], np.float32), np.array(rest[3:6], np.float32)
    mde_mu, mde_sigma, n_empty = rest[6:]
    try:
        cfg = GopConfig(n, K, C, P, N, knn_k, gh, gw)
    except ValueError as exc:
        raise FormatError(f"bad config in header: {exc}") from exc
    bounds = r.array("<i2", 2 * (8 + 3 * K)).astype(np.int64).reshape(-1, 2)
    (n_sec,) = r.unpack("<B")
    table = [r.unpack(_ENTRY.format) for _ in range(n_sec)]
    end = r.pos
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(bytes(data[:end])):
        raise FormatError("header checksum mismatch")
    hdr = BitstreamHeader(cfg, (gfh, gfw), seed, lo, hi, mde_mu, mde_sigma, bounds, n_empty,
                          k, G, (fmin, fmax), version)
    if k != nn.CONTEXT_K or G != nn.FRAGMENT_WIDTH or (fmin, fmax) != FEATURE_ALPHABET:
        raise FormatError(f"unsupported coding parameters k={k}, G={G}, alphabet {(fmin, fmax)}")
    if np.any(bounds[:, 0] > bounds[:, 1]) or np.any(np.abs(bounds) > ATTR_BOUND):
        raise FormatError("bad attribute bounds")
    if not (mde_sigma > 0 and np.isfinite(mde_mu)):
        raise FormatError("bad m_de prior")
    return hdr, table, r.pos


@dataclass(eq=False)
class Bitstream:
    header: BitstreamHeader
    sections: dict  # name -> bytes, in SECTIONS order
    estimates: dict = field(default_factory=dict)  # name -> estimated bits (coded sections)

    def table(self):
        off = self.header.size(len(self.sections))
        out = []
        for name in SECTIONS:
            data = self.sections[name]
            out.append((SECTIONS.index(name) + 1, off, len(data), zlib.crc32(data)))
            off += len(data)
        return out

    def to_bytes(self) -> bytes:
        return self.header.pack(self.table()) + b"".join(self.sections[s] for s in SECTIONS)

    __bytes__ = to_bytes

    @property
    def header_size(self):
        return self.header.size(len(self.sections))

    @classmethod
    def from_bytes(cls, data) -> "Bitstream":
        data = memoryview(bytes(data))
        hdr, table, pos = _read_header(data)
        if [t[0] for t in table] != list(range(1, len(SECTIONS) + 1)):
            raise FormatError("section table does not list the expected sections in order")
        sections = {}
        for sid, off, length, crc in table:
            if off != pos or off + length > len(data):
                raise FormatError(f"section {SECTIONS[sid - 1]} offset/length inconsistent")
            chunk = bytes(data[off:off + length])
            if zlib.crc32(chunk) != crc:
                raise FormatError(f"section {SECTIONS[sid - 1]} checksum mismatch")
            sections[SECTIONS[sid - 1]] = chunk
            pos = off + length
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes after last section")
        return cls(hdr, sections)


# --- section coders -----------------------------------------------------------

class _SectionWriter:
    """Collects (symbol, mu, sigma, step, bounds) for one section, codes them as one plane."""

    def __init__(self):
        self.parts = []
        self.bits = 0.0

    def add(self, symbols, mu, sigma, step=1.0, vmin=FEATURE_ALPHABET[0], vmax=FEATURE_ALPHABET[1]):
        symbols = np.asarray(symbols, np.int64).ravel()
        arrays = [np.broadcast_to(np.ravel(a) if np.ndim(a) else a, symbols.shape)
                  for a in (mu, sigma, step, vmin, vmax)]
        self.parts.append([symbols] + arrays)
        self.bits += entropy_bits(SymbolPlane(symbols, arrays[0], arrays[1], arrays[2]))

    def finish(self):
        if not self.parts:
            return rans_encode(np.zeros(0, np.int64), GaussianTables.of([], [])).to_bytes()
        sym, mu, sigma, step, vmin, vmax = (np.concatenate(p) for p in zip(*self.parts))
        return rans_encode(sym, GaussianTables.of(mu, sigma, step, vmin, vmax)).to_bytes()


class _SectionReader:
    def __init__(self, name, data, tamper, clock):
        self.name = name
        try:
            self.dec = RansDecoder(CodedPlane.from_bytes(data))
        except FormatError as exc:
            raise DecodeError(f"{name}: {exc}") from exc
        self.tamper = tamper
        self.clock = clock
        self.index = 0
        self.bits = 0.0

    def read(self, mu, sigma, step=1.0, vmin=FEATURE_ALPHABET[0], vmax=FEATURE_ALPHABET[1]):
        mu = np.asarray(mu, np.float64).ravel()
        t0 = time.perf_counter()
        tables = GaussianTables.of(mu, sigma, step, vmin, vmax)
        try:
            out = self.dec.decode(tables)
        except DecodeError as exc:
            raise DecodeError(f"{self.name}: {exc}") from exc
        self.clock["entropy"] += time.perf_counter() - t0
        if self.tamper is not None:
            changed = self.tamper(self.name, self.index, out.copy())
            if changed is not None:
                out = np.asarray(changed, np.int64).reshape(out.shape)
        self.index += 1
        self.dec.absorb(out)
        if self.clock.get("estimate") is not None:
            self.bits += entropy_bits(SymbolPlane(out, tables.mu, tables.sigma, tables.step))
        return out

    def close(self):
        try:
            self.dec.finish()
        except DecodeError as exc:
            raise DecodeError(f"{self.name}: {exc}") from exc


# Plane schedules shared by encoder and decoder. Each yields the context-dependent
# (mu, sigma) for the next plane given what has been decoded so far.

def _fragment_prediction(history, weights, shape, G):
    return predict_fragment(context_stack(history, (G,) + shape), weights)


def _frame_prediction(history, weights, shape, P):
    return predict_stream_frame(context_stack(history, (P,) + shape), weights)


def _mde_tables(hdr, n):
    return np.full(n, float(np.float32(hdr.mde_mu))), float(np.float32(hdr.mde_sigma))


# --- encode -------------------------------------------------------------------

def encode_gop(model: GopModel, seed: int = 0) -> Bitstream:
    report = validate(model)
    if not report.ok:
        raise ValueError(f"model failed validation:\n{report}")
    cfg = model.config
    K, C, P, N = cfg.K, cfg.C, cfg.P, cfg.N
    G, k = nn.FRAGMENT_WIDTH, nn.CONTEXT_K
    qz = _quantize(model)
    qm = qz.model
    layout = build_layout(qm, seed)
    grid = layout.ti_grid
    occ = grid.ravel() >= 0
    scan = layout.scan_order()
    sections, estimates = {}, {}

    sections["WEIGHTS"] = nn.save_weights(qm.weights)

    idx_dtype = "<u2" if cfg.n_anchors < 0xFFFF else "<u4"
    gmap = np.where(grid < 0, np.iinfo(idx_dtype).max, grid).astype(idx_dtype)
    sections["POSITIONS"] = gmap.tobytes() + qz.pos_codes.astype("<u2").tobytes()

    lv = qz.levels[scan].astype(np.float64)
    mde_mu = np.float32(lv.mean())
    mde_sigma = np.float32(max(lv.std(), 0.5))
    w = _SectionWriter()
    w.add(qz.levels[scan], float(mde_mu), float(mde_sigma), 1.0, 0, MDE_LEVELS)
    sections["MASKS_MDE"], estimates["MASKS_MDE"] = w.finish(), w.bits

    # feature fragments: V_TI feature planes, auto-regressive over fragments
    planes = assemble_vti(qm, layout)[12 + 3 * K:].astype(np.float64)
    H, W = grid.shape
    w = _SectionWriter()
    history = []
    for s, e in fragment_bounds(C, G):
        frag = np.zeros((G, H, W))
        frag[:e - s] = planes[s:e]
        mu, sigma = _fragment_prediction(history, qm.weights, (H, W), G)
        w.add(frag.reshape(G, -1)[:e - s, occ], mu.reshape(G, -1)[:e - s, occ],
              sigma.reshape(G, -1)[:e - s, occ])
        history.append(frag)
    feat_bytes, feat_bits = w.finish(), w.bits

    # attributes, channel-major in scan order
    bounds = np.stack([qz.attr_symbols.min(axis=0), qz.attr_symbols.max(axis=0)], axis=1)
    bounds = np.clip(bounds, -ATTR_BOUND, ATTR_BOUND)
    w = _SectionWriter()
    for c in range(qz.attr_symbols.shape[1]):
        w.add(qz.attr_symbols[scan, c], qz.attr_mu[scan, c], qz.attr_sigma[scan, c],
              qz.attr_step[scan, c], bounds[c, 0], bounds[c, 1])
    sections["VTI_ATTR"], estimates["VTI_ATTR"] = w.finish(), w.bits
    sections["VTI_FEAT"], estimates["VTI_FEAT"] = feat_bytes, feat_bits

    # V_GF frames
    frames = pack_vgf(qm, layout).astype(np.float64)
    h, wd = layout.gf_dims
    L = len(layout.gf_order)
    w = _SectionWriter()
    history = []
    if L:
        for t in range(N):
            mu, sigma = _frame_prediction(history, qm.weights, (h, wd), P)
            w.add(frames[t].reshape(P, -1)[:, :L], mu.reshape(P, -1)[:, :L],
                  sigma.reshape(P, -1)[:, :L])
            history.append(frames[t])
    sections["VGF"], estimates["VGF"] = w.finish(), w.bits

    hdr = BitstreamHeader(cfg, layout.gf_dims, int(seed), qz.pos_lo, qz.pos_hi, float(mde_mu),
                          float(mde_sigma), bounds, layout.n_empty)
    return Bitstream(hdr, sections, estimates)


# --- decode -------------------------------------------------------------------

def decode_gop(data, *, tamper=None, report: dict | None = None) -> GopModel:
    """Reconstruct the quantized model from GIFS bytes.

    ``tamper(section, plane_index, symbols)`` may return replacement symbols
    for a decoded plane before it is used as context (fault injection).
    ``report``, when given, receives timings and per-section estimated bits.
    """
    t_start = time.perf_counter()
    bs = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
    hdr = bs.header
    cfg = hdr.config
    n, K, C, P, N = cfg.n_anchors, cfg.K, cfg.C, cfg.P, cfg.N
    G = hdr.G
    clock = {"entropy": 0.0, "estimate": None if report is None else True}
    sec = bs.sections

    try:
        weights = nn.load_weights(sec["WEIGHTS"])
    except FormatError as exc:
        raise FormatError(f"WEIGHTS: {exc}") from exc
    want = nn.expected_io_dims(C, P, K)
    for name, _ in nn.NETWORKS:
        if weights.io_dims(name) != want[name]:
            raise FormatError(f"WEIGHTS: network {name} does not match the header config")

    # POSITIONS
    idx_dtype = np.dtype("<u2" if n < 0xFFFF else "<u4")
    cells = cfg.grid_h * cfg.grid_w
    r = _Reader(sec["POSITIONS"], "POSITIONS")
    gmap = r.array(idx_dtype, cells).astype(np.int64)
    codes = r.array("<u2", 3 * n).astype(np.int64).reshape(n, 3)
    if r.remaining:
        raise FormatError(f"POSITIONS: {r.remaining} trailing bytes")
    gmap[gmap == np.iinfo(idx_dtype).max] = EMPTY
    grid = gmap.reshape(cfg.grid_h, cfg.grid_w)
    try:
        check_grid(grid, n)
    except ValueError as exc:
        raise FormatError(f"POSITIONS: {exc}") from exc
    if int((grid < 0).sum()) != hdr.n_empty:
        raise FormatError("POSITIONS: empty-cell count disagrees with header")
    x = _position_values(codes, hdr.pos_lo, hdr.pos_hi)
    occ = grid.ravel() >= 0
    scan = grid.ravel()[occ]

    # MASKS_MDE
    rd = _SectionReader("MASKS_MDE", sec["MASKS_MDE"], tamper, clock)
    mu, sigma = _mde_tables(hdr, n)
    levels = np.zeros(n, np.int64)
    levels[scan] = rd.read(mu, sigma, 1.0, 0, MDE_LEVELS)
    rd.close()
    if np.any((levels < 0) | (levels > MDE_LEVELS)):
        raise DecodeError("MASKS_MDE: level out of range")
    bits = {"MASKS_MDE": rd.bits}
    present = levels > 0
    layout = layout_from_grid(grid, present)
    if tuple(layout.gf_dims) != tuple(hdr.gf_dims):
        raise DecodeError("stream count disagrees with header gf_dims")

    # VTI_FEAT
    H, W = grid.shape
    rd = _SectionReader("VTI_FEAT", sec["VTI_FEAT"], tamper, clock)
    history = []
    planes = np.zeros((C, H * W))
    t_pred = 0.0
    for s, e in fragment_bounds(C, G):
        t0 = time.perf_counter()
        mu, sigma = _fragment_prediction(history, weights, (H, W), G)
        t_pred += time.perf_counter() - t0
        vals = rd.read(mu.reshape(G, -1)[:e - s, occ], sigma.reshape(G, -1)[:e - s, occ])
        frag = np.zeros((G, H * W))
        frag[:e - s, occ] = vals.reshape(e - s, -1)
        planes[s:e] = frag[:e - s]
        history.append(frag.reshape(G, H, W))
    rd.close()
    bits["VTI_FEAT"] = rd.bits
    f = np.zeros((n, C), np.float32)
    f[scan] = planes[:, occ].T

    # VTI_ATTR
    t0 = time.perf_counter()
    mu, sigma, step = (a[:, coded_attr_columns(K)] for a in predict_attr_params(f, weights))
    t_pred += time.perf_counter() - t0
    rd = _SectionReader("VTI_ATTR", sec["VTI_ATTR"], tamper, clock)
    symbols = np.zeros((n, 8 + 3 * K), np.int64)
    for c in range(symbols.shape[1]):
        lo, hi = hdr.attr_bounds[c]
        symbols[scan, c] = rd.read(mu[scan, c], sigma[scan, c], step[scan, c], lo, hi)
    rd.close()
    bits["VTI_ATTR"] = rd.bits
    mk = slice(6 + 3 * K, 8 + 3 * K)
    if np.any(symbols[:, mk] < 0) or np.any(symbols[:, mk] > _mask_ceiling(step[:, mk])):
        raise DecodeError("VTI_ATTR: mask symbol out of range")
    attrs = _attr_dequantize(symbols, step, K)

    # VGF
    h, w = layout.gf_dims
    L = len(layout.gf_order)
    rd = _SectionReader("VGF", sec["VGF"], tamper, clock)
    streams = np.zeros((n, N, P), np.float32)
    if L:
        history = []
        for t in range(N):
            t0 = time.perf_counter()
            mu, sigma = _frame_prediction(history, weights, (h, w), P)
            t_pred += time.perf_counter() - t0
            vals = rd.read(mu.reshape(P, -1)[:, :L], sigma.reshape(P, -1)[:, :L])
            frame = np.zeros((P, h * w))
            frame[:, :L] = vals.reshape(P, L)
            streams[layout.gf_order, t] = frame[:, :L].T
            history.append(frame.reshape(P, h, w))
    rd.close()
    bits["VGF"] = rd.bits

    model = GopModel(cfg, x, attrs["attr_scale"], attrs["offset_scale"], attrs["offsets"],
                     mde_from_level(levels), attrs["m_knn"], attrs["m_dy"], f, streams, present,
                     weights, quantized=True)
    if report is not None:
        report["prediction_s"] = t_pred
        report["entropy_decode_s"] = clock["entropy"]
        report["total_s"] = time.perf_counter() - t_start
        report["estimated_bits"] = bits
    return model


# --- size accounting ----------------------------------------------------------

@dataclass(frozen=True)
class SizeBreakdown:
    total: int
    header: int
    sections: dict  # name -> bytes
    categories: dict  # category -> bytes

    def as_flat_dict(self):
        out = {"total_bytes": self.total, "header_bytes": self.header}
        out.update({f"section_{k}": v for k, v in self.sections.items()})
        out.update({f"category_{k}": v for k, v in self.categories.items()})
        return out


def size_breakdown(bitstream) -> SizeBreakdown:
    bs = bitstream if isinstance(bitstream, Bitstream) else Bitstream.from_bytes(bitstream)
    sections = {name: len(bs.sections[name]) for name in SECTIONS}
    cats = {cat: sum(sections[s] for s in names) for cat, names in CATEGORIES.items()}
    return SizeBreakdown(bs.header_size + sum(sections.values()), bs.header_size, sections, cats)


# --- GIFU model files ---------------------------------------------------------

_GIFU_ARRAYS = (("XPOS", "x"), ("SATT", "attr_scale"), ("SOFF", "offset_scale"),
                ("OFFS", "offsets"), ("MDE_", "m_de"), ("MKNN", "m_knn"), ("MDY_", "m_dy"),
                ("FEAT", "f"), ("STRM", "streams"))
_CONF = struct.Struct("<IHHHHHIIB")


def _chunk(tag, payload):
    return tag.encode("ascii") + struct.pack("<I", len(payload)) + payload


def write_model(model: GopModel) -> bytes:
    c = model.config
    chunks = [_chunk("CONF", _CONF.pack(c.n_anchors, c.K, c.C, c.P, c.N, c.knn_k, c.grid_h,
                                         c.grid_w, int(model.quantized)))]
    for tag, name in _GIFU_ARRAYS:
        chunks.append(_chunk(tag, getattr(model, name).astype("<f4").tobytes()))
    chunks.append(_chunk("PRES", model.present.astype(np.uint8).tobytes()))
    chunks.append(_chunk("WGTS", nn.save_weights(model.weights)))
    body = GIFU_MAGIC + struct.pack("<H", GIFU_VERSION) + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def read_model(data) -> GopModel:
    data = memoryview(bytes(data))
    if bytes(data[:4]) != GIFU_MAGIC:
        raise FormatError("not a GIFU model file (bad magic)")
    if len(data) < 10:
        raise FormatError("truncated GIFU file")
    (crc,) = struct.unpack("<I", data[-4:])
    if crc != zlib.crc32(data[:-4]):
        raise FormatError("GIFU checksum mismatch")
    r = _Reader(data[:-4], "GIFU file")
    r.take(4)
    (version,) = r.unpack("<H")
    if version != GIFU_VERSION:
        raise FormatError(f"unsupported GIFU version {version}")
    chunks = {}
    while r.remaining:
        tag = bytes(r.take(4)).decode("ascii", errors="replace")
        (length,) = r.unpack("<I")
        if tag in chunks:
            raise FormatError(f"duplicate chunk {tag}")
        chunks[tag] = bytes(r.take(length))
    missing = [t for t in ["CONF", "PRES", "WGTS"] + [t for t, _ in _GIFU_ARRAYS] if t not in chunks]
    if missing:
        raise FormatError(f"missing chunks {missing}")
    if len(chunks["CONF"]) != _CONF.size:
        raise FormatError("bad CONF chunk")
    n, K, C, P, N, knn_k, gh, gw, quantized = _CONF.unpack(chunks["CONF"])
    try:
        cfg = GopConfig(n, K, C, P, N, knn_k, gh, gw)
    except ValueError as exc:
        raise FormatError(f"bad config: {exc}") from exc
    shapes = {"x": (n, 3), "attr_scale": (n, 3), "offset_scale": (n, 3), "offsets": (n, K, 3),
              "m_de": (n,), "m_knn": (n,), "m_dy": (n,), "f": (n, C), "streams": (n, N, P)}
    arrays = {}
    for tag, name in _GIFU_ARRAYS:
        raw = chunks[tag]
        if len(raw) != 4 * int(np.prod(shapes[name])):
            raise FormatError(f"chunk {tag} has {len(raw)} bytes, expected {4 * int(np.prod(shapes[name]))}")
        arrays[name] = np.frombuffer(raw, "<f4").astype(np.float32).reshape(shapes[name])
    if len(chunks["PRES"]) != n:
        raise FormatError("bad PRES chunk")
    present = np.frombuffer(chunks["PRES"], np.uint8)
    if np.any(present > 1):
        raise FormatError("PRES values must be 0 or 1")
    weights = nn.load_weights(chunks["WGTS"])
    return GopModel(cfg, present=present.astype(bool), weights=weights, quantized=bool(quantized),
                    **arrays)


# --- PLY ----------------------------------------------------------------------

PLY_FLOAT_PROPS = ("x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                   "rot_0", "rot_1", "rot_2", "rot_3")
PLY_COLOR_PROPS = ("red", "green", "blue")
_PLY_DTYPE = np.dtype([(p, "<f4") for p in PLY_FLOAT_PROPS] + [(p, "u1") for p in PLY_COLOR_PROPS])


def export_ply(frame: GaussianFrame) -> bytes:
    M = len(frame)
    rec = np.empty(M, dtype=_PLY_DTYPE)
    cols = np.concatenate([frame.positions, frame.opacity[:, None], frame.scaling, frame.rotation],
                          axis=1)
    for j, p in enumerate(PLY_FLOAT_PROPS):
        rec[p] = cols[:, j]
    rgb = np.floor(np.clip(frame.color, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    for j, p in enumerate(PLY_COLOR_PROPS):
        rec[p] = rgb[:, j]
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {M}"]
    lines += [f"property float {p}" for p in PLY_FLOAT_PROPS]
    lines += [f"property uchar {p}" for p in PLY_COLOR_PROPS]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii") + rec.tobytes()


def parse_ply(data) -> np.ndarray:
    """Structured array from a PLY written by export_ply (only that layout is accepted)."""
    data = bytes(data)
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError("only binary little-endian PLY is supported")
    counts = [int(l.split()[2]) for l in header if l.startswith("element vertex")]
    props = [l.split()[2] for l in header if l.startswith("property")]
    if len(counts) != 1 or tuple(props) != _PLY_DTYPE.names:
        raise FormatError("unexpected PLY layout")
    body = data[end + len(b"end_header\n"):]
    if len(body) != counts[0] * _PLY_DTYPE.itemsize:
        raise FormatError("PLY body size does not match vertex count")
    return np.frombuffer(body, dtype=_PLY_DTYPE)

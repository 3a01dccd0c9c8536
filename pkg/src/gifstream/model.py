"""GOP domain model: config, anchors, feature streams, decoded frames.

Anchor data is held struct-of-arrays (one float32 array per field, first
axis = anchor index). ``GopModel.anchor(i)`` / ``GopModel.stream(i)`` give
per-anchor views when a single record is more convenient.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError
from .nn import WeightsBundle


def near_square(n):
    """(h, w) with w = ceil(sqrt(n)), h = ceil(n / w); (0, 0) for n = 0."""
    if n <= 0:
        return 0, 0
    w = math.isqrt(n - 1) + 1
    return -(-n // w), w


@dataclass(frozen=True)
class GopConfig:
    n_anchors: int
    K: int = 5
    C: int = 24
    P: int = 4
    N: int = 65
    knn_k: int = 4
    grid_h: int = 0  # 0 -> near-square grid for n_anchors
    grid_w: int = 0

    def __post_init__(self):
        for name in ("n_anchors", "K", "C", "P", "N", "knn_k", "grid_h", "grid_w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.grid_h == 0 and self.grid_w == 0 and self.n_anchors >= 1:
            h, w = near_square(self.n_anchors)
            object.__setattr__(self, "grid_h", h)
            object.__setattr__(self, "grid_w", w)
        for name in ("n_anchors", "K", "C", "P", "N", "knn_k", "grid_h", "grid_w"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.grid_h * self.grid_w < self.n_anchors:
            raise ConfigError(f"grid {self.grid_h}x{self.grid_w} cannot hold {self.n_anchors} anchors")

    @property
    def n_attr_channels(self):
        """Non-feature V_TI channels: x, S1, S2, offsets, masks."""
        return 12 + 3 * self.K

    @property
    def n_vti_channels(self):
        return 12 + 3 * self.K + self.C


MDE_LEVELS = 15


def mde_level(m_de):
    """m_de quantized to 4-bit levels 0..15 (step 1/15); level 0 prunes the stream."""
    return np.floor(np.asarray(m_de, np.float64) * MDE_LEVELS + 0.5).astype(np.int64)


def mde_from_level(level):
    return (np.asarray(level, np.float64) / MDE_LEVELS).astype(np.float32)


# V_TI attribute channel blocks, in plane order.
def attr_slices(K):
    return {
        "x": slice(0, 3),
        "attr_scale": slice(3, 6),
        "offset_scale": slice(6, 9),
        "offsets": slice(9, 9 + 3 * K),
        "m_de": slice(9 + 3 * K, 10 + 3 * K),
        "m_knn": slice(10 + 3 * K, 11 + 3 * K),
        "m_dy": slice(11 + 3 * K, 12 + 3 * K),
    }


@dataclass(frozen=True)
class Anchor:
    x: np.ndarray
    attr_scale: np.ndarray  # S1
    offset_scale: np.ndarray  # S2
    offsets: np.ndarray  # (K, 3)
    m_de: float
    m_knn: float
    m_dy: float
    f: np.ndarray


@dataclass(frozen=True)
class FeatureStream:
    frames: np.ndarray  # (N, P)
    present: bool


def _ro(a, dtype=np.float32):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


_ARRAY_FIELDS = ("x", "attr_scale", "offset_scale", "offsets", "m_de", "m_knn", "m_dy", "f",
                 "streams", "present")


@dataclass(frozen=True, eq=False)
class GopModel:
    """One GOP. Shapes: x/attr_scale/offset_scale (n,3), offsets (n,K,3),
    masks (n,), f (n,C), streams (n,N,P), present (n,) bool."""

    config: GopConfig
    x: np.ndarray
    attr_scale: np.ndarray
    offset_scale: np.ndarray
    offsets: np.ndarray
    m_de: np.ndarray
    m_knn: np.ndarray
    m_dy: np.ndarray
    f: np.ndarray
    streams: np.ndarray
    present: np.ndarray
    weights: WeightsBundle = field(default_factory=WeightsBundle)
    quantized: bool = False

    def __post_init__(self):
        cfg = self.config
        n, K, C, P, N = cfg.n_anchors, cfg.K, cfg.C, cfg.P, cfg.N
        shapes = {
            "x": (n, 3), "attr_scale": (n, 3), "offset_scale": (n, 3), "offsets": (n, K, 3),
            "m_de": (n,), "m_knn": (n,), "m_dy": (n,), "f": (n, C), "streams": (n, N, P),
            "present": (n,),
        }
        for name, shape in shapes.items():
            a = _ro(getattr(self, name), bool if name == "present" else np.float32)
            if a.shape != shape:
                raise ConfigError(f"{name} has shape {a.shape}, expected {shape}")
            object.__setattr__(self, name, a)

    def anchor(self, i) -> Anchor:
        return Anchor(self.x[i], self.attr_scale[i], self.offset_scale[i], self.offsets[i],
                      float(self.m_de[i]), float(self.m_knn[i]), float(self.m_dy[i]), self.f[i])

    def stream(self, i) -> FeatureStream:
        return FeatureStream(self.streams[i], bool(self.present[i]))

    @property
    def anchors(self):
        return [self.anchor(i) for i in range(self.config.n_anchors)]

    def replace(self, **changes) -> "GopModel":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, GopModel):
            return NotImplemented
        return (self.config == other.config and self.quantized == other.quantized
                and all(getattr(self, k).tobytes() == getattr(other, k).tobytes() for k in _ARRAY_FIELDS)
                and self.weights == other.weights)

    def diff(self, other):
        """Names of fields that differ from ``other`` (bitwise)."""
        out = [k for k in ("config", "quantized") if getattr(self, k) != getattr(other, k)]
        out += [k for k in _ARRAY_FIELDS
                if getattr(self, k).shape != getattr(other, k).shape
                or getattr(self, k).tobytes() != getattr(other, k).tobytes()]
        if self.weights != other.weights:
            out.append("weights")
        return out


@dataclass(frozen=True, eq=False)
class GaussianFrame:
    """Decoded primitives at one timestamp; primitive j belongs to anchor j // K."""

    positions: np.ndarray  # (M, 3)
    opacity: np.ndarray  # (M,)
    scaling: np.ndarray  # (M, 3)
    rotation: np.ndarray  # (M, 4), (w, x, y, z)
    color: np.ndarray  # (M, 3)
    t: float

    def __len__(self):
        return self.positions.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GaussianFrame):
            return NotImplemented
        return self.t == other.t and all(
            getattr(self, k).tobytes() == getattr(other, k).tobytes()
            for k in ("positions", "opacity", "scaling", "rotation", "color"))

    def check(self):
        """List of violated frame invariants (empty when valid)."""
        problems = []
        norms = np.linalg.norm(self.rotation, axis=1)
        if np.any(np.abs(norms - 1) > 1e-6):
            problems.append("rotation not unit length")
        if np.any(~(self.scaling > 0)):
            problems.append("non-positive scaling")
        if np.any((self.color < 0) | (self.color > 1)):
            problems.append("color outside [0, 1]")
        if not np.isfinite(self.positions).all():
            problems.append("non-finite positions")
        return problems


# --- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    anchor: int | None
    field: str
    message: str

    def __str__(self):
        where = "model" if self.anchor is None else f"anchor {self.anchor}"
        return f"{where}: {self.field}: {self.message}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def add(self, anchor, field_, message):
        self.violations.append(Violation(anchor, field_, message))

    def __str__(self):
        return "\n".join(map(str, self.violations)) or "ok"


def validate(model: GopModel) -> ValidationReport:
    report = ValidationReport()
    cfg = model.config

    def per_anchor(bad, field_, message):
        for i in np.flatnonzero(bad):
            report.add(int(i), field_, message)

    for name in ("x", "attr_scale", "offset_scale", "offsets", "f"):
        a = getattr(model, name)
        per_anchor(~np.isfinite(a).reshape(cfg.n_anchors, -1).all(axis=1), name, "non-finite value")
    for name in ("attr_scale", "offset_scale"):
        per_anchor(~(getattr(model, name) > 0).all(axis=1), name, "scale factors must be positive")
    for name in ("m_de", "m_knn", "m_dy"):
        m = getattr(model, name)
        per_anchor(~((m >= 0) & (m <= 1)), name, f"outside [0, 1]")

    s = model.streams
    per_anchor(~np.isfinite(s).reshape(cfg.n_anchors, -1).all(axis=1), "streams", "non-finite value")
    nonzero = (s != 0).reshape(cfg.n_anchors, -1).any(axis=1)
    per_anchor(~model.present & nonzero, "streams", "pruned stream (present=false) holds nonzero values")
    per_anchor(model.present != (model.m_de > 0), "present",
               "stream presence must match m_de > 0")

    if model.quantized:
        per_anchor((model.f != np.round(model.f)).any(axis=1), "f", "quantized feature is not integral")
        per_anchor((s != np.round(s)).reshape(cfg.n_anchors, -1).any(axis=1), "streams",
                   "quantized stream is not integral")

    want = nn.expected_io_dims(cfg.C, cfg.P, cfg.K)
    for name, _ in nn.NETWORKS:
        got = model.weights.io_dims(name)
        if got is None:
            report.add(None, f"weights.{name}", "network is empty")
        elif got != want[name]:
            report.add(None, f"weights.{name}", f"io dims {got}, expected {want[name]}")
    return report


# --- synthetic GOPs -----------------------------------------------------------

def _jittered_lattice(rng, n, spacing=1.0, jitter=0.25):
    side = max(1, math.ceil(round(n ** (1 / 3), 9)))
    while side ** 3 < n:
        side += 1
    idx = np.arange(side ** 3)
    pts = np.stack([idx % side, (idx // side) % side, idx // (side * side)], axis=1)[:n]
    pts = pts * spacing + rng.uniform(-jitter, jitter, (n, 3))
    return pts[rng.permutation(n)]


def generate_synthetic(seed: int, config: GopConfig, sparsity: float = 0.3) -> GopModel:
    """Deterministic synthetic GOP.

    Exactly round(sparsity * n_anchors) anchors carry a stream (m_de in [0.5, 1],
    smooth random walk over time); the others are static with m_de = m_dy = 0.
    Entropy-model output biases are calibrated to the generated statistics so
    the learned distributions are plausible for the data.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError(f"sparsity {sparsity} outside [0, 1]")
    cfg = config
    n, K, C, P, N = cfg.n_anchors, cfg.K, cfg.C, cfg.P, cfg.N
    rng = np.random.default_rng(seed)

    x = _jittered_lattice(rng, n)
    attr_scale = np.exp(rng.uniform(np.log(0.02), np.log(0.2), (n, 3)))
    offset_scale = np.exp(rng.uniform(np.log(0.1), np.log(0.5), (n, 3)))
    offsets = rng.normal(0.0, 1.0, (n, K, 3))
    f = rng.normal(0.0, 2.0, (n, C))
    m_knn = rng.uniform(0.0, 1.0, n)

    n_present = int(math.floor(sparsity * n + 0.5))
    present = np.zeros(n, dtype=bool)
    present[rng.permutation(n)[:n_present]] = True
    m_de = np.where(present, rng.uniform(0.5, 1.0, n), 0.0)
    m_dy = np.where(present, rng.uniform(0.3, 1.0, n), 0.0)
    start = rng.normal(0.0, 1.5, (n, 1, P))
    steps = rng.normal(0.0, 0.25, (n, N, P))
    steps[:, 0] = 0.0
    streams = np.where(present[:, None, None], start + np.cumsum(steps, axis=1), 0.0)

    weights = nn.init_bundle(rng, C, P, K)
    weights = _calibrate_entropy_biases(weights, cfg, attr_scale, offset_scale, offsets,
                                        m_knn, m_dy, f, streams[present])
    return GopModel(cfg, x, attr_scale, offset_scale, offsets, m_de, m_knn, m_dy, f,
                    streams, present, weights, quantized=False)


# adaptive attribute step as a fraction of each channel's spread
ATTR_STEP_FRACTION = 0.25


def _calibrate_entropy_biases(weights, cfg, attr_scale, offset_scale, offsets, m_knn, m_dy, f,
                              live_streams):
    K = cfg.K
    sl = attr_slices(K)
    A = cfg.n_attr_channels
    std = np.ones(A)
    # coded domain: log for scale factors, raw otherwise
    cols = {
        "attr_scale": np.log(attr_scale), "offset_scale": np.log(offset_scale),
        "offsets": offsets.reshape(len(offsets), -1), "m_knn": m_knn[:, None], "m_dy": m_dy[:, None],
    }
    target = np.zeros((len(f), A))
    for name, vals in cols.items():
        target[:, sl[name]] = vals
        std[sl[name]] = np.maximum(vals.std(axis=0), 0.05)
    # centre the predictions on what the random hidden layers actually emit for
    # the quantized features, and size sigma from the residual of that mean
    last = weights.ent_attr[-1]
    hidden = nn.mlp_forward(weights.ent_attr[:-1], np.round(f).astype(np.float32))
    z = hidden @ last.weight.astype(np.float64).T
    z_mu, z_sigma, z_step = z[:, :A], z[:, A:2 * A], z[:, 2 * A:]
    mean = (target - z_mu).mean(axis=0)
    resid = np.sqrt(((target - z_mu - mean) ** 2).mean(axis=0))
    sigma = np.maximum(resid, 0.05)
    bias = np.concatenate([mean, nn.softplus_inv(sigma - nn.SIGMA_FLOOR) - z_sigma.mean(axis=0),
                           nn.softplus_inv(ATTR_STEP_FRACTION * std - nn.STEP_FLOOR)
                           - z_step.mean(axis=0)])
    ent_attr = weights.ent_attr[:-1] + (nn.DenseLayer(last.weight, bias, last.activation),)

    def conv_bias(layers, sigma, width):
        last = layers[-1]
        b = np.concatenate([np.zeros(width), np.full(width, nn.softplus_inv(sigma - nn.SIGMA_FLOOR))])
        return layers[:-1] + (nn.ConvLayer(last.kernel, b, last.activation),)

    f_sigma = max(float(np.round(f).std()), 0.5) if f.size else 1.0
    s_sigma = max(float(np.round(live_streams).std()), 0.5) if live_streams.size else 1.0
    return dataclasses.replace(
        weights,
        ent_attr=ent_attr,
        ent_fragment=conv_bias(weights.ent_fragment, f_sigma, nn.FRAGMENT_WIDTH),
        ent_stream=conv_bias(weights.ent_stream, s_sigma, cfg.P),
    )

"""Forward-only dense/conv inference and the GIFW weights format.

All forwards run in float64 on float32-stored parameters, so a given
input always produces bit-identical output on one platform.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionError, FormatError

ACTIVATIONS = ("none", "relu", "sigmoid", "tanh", "softplus")

HIDDEN = 64
CONV_HIDDEN = 32
TIME_ENC_WIDTH = 6
CONTEXT_K = 2
FRAGMENT_WIDTH = 8
SIGMA_FLOOR = 1e-4
STEP_FLOOR = 1e-3

WEIGHTS_MAGIC = b"GIFW"
WEIGHTS_VERSION = 1


def activate(x, name):
    if name == "none":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sigmoid":
        return expit(x)
    if name == "tanh":
        return np.tanh(x)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    raise ValueError(f"unknown activation {name!r}")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _frozen(a, dtype=np.float32):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "none"

    def __post_init__(self):
        w = _frozen(self.weight)
        b = _frozen(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionError(f"dense weight {w.shape} / bias {b.shape} mismatch")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("non-finite dense parameters")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def __eq__(self, other):
        return (isinstance(other, DenseLayer) and self.activation == other.activation
                and _same(self.weight, other.weight) and _same(self.bias, other.bias))


@dataclass(frozen=True, eq=False)
class ConvLayer:
    kernel: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        k = _frozen(self.kernel)
        b = _frozen(self.bias)
        if k.ndim != 4 or k.shape[2:] != (3, 3) or b.shape != (k.shape[0],):
            raise DimensionError(f"conv kernel {k.shape} / bias {b.shape} mismatch")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(k).all() and np.isfinite(b).all()):
            raise ValueError("non-finite conv parameters")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    @property
    def in_ch(self):
        return self.kernel.shape[1]

    @property
    def out_ch(self):
        return self.kernel.shape[0]

    def __eq__(self, other):
        return (isinstance(other, ConvLayer) and self.activation == other.activation
                and _same(self.kernel, other.kernel) and _same(self.bias, other.bias))


def _same(a, b):
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def dense_forward(layer: DenseLayer, x):
    """Affine map plus activation. Accepts a vector or a (batch, in_dim) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"dense input width {x.shape[-1]} != {layer.in_dim}")
    y = x @ layer.weight.astype(np.float64).T + layer.bias.astype(np.float64)
    return activate(y, layer.activation)


def mlp_forward(layers, x):
    x = np.asarray(x, dtype=np.float64)
    for layer in layers:
        x = dense_forward(layer, x)
    return x


def conv_forward(layer: ConvLayer, grid):
    """Zero-padded 3x3 correlation over a (C_in, h, w) grid; output keeps h, w."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or g.shape[0] != layer.in_ch:
        raise DimensionError(f"conv input {g.shape} does not have {layer.in_ch} channels")
    c, h, w = g.shape
    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = g
    # (3, 3, C_in, h, w) stack of shifted windows
    windows = np.stack([np.stack([padded[:, dy:dy + h, dx:dx + w] for dx in range(3)])
                        for dy in range(3)])
    k = layer.kernel.astype(np.float64)
    out = np.einsum("oiyx,yxihw->ohw", k, windows, optimize=True)
    out += layer.bias.astype(np.float64)[:, None, None]
    return activate(out, layer.activation)


def convnet_forward(layers, grid):
    g = np.asarray(grid, dtype=np.float64)
    for layer in layers:
        g = conv_forward(layer, g)
    return g


# name -> layer kind; order is the on-disk order
NETWORKS = (
    ("att_head", "dense"),
    ("mot_head", "dense"),
    ("ent_stream", "conv"),
    ("ent_fragment", "conv"),
    ("ent_attr", "dense"),
)


@dataclass(frozen=True, eq=False)
class WeightsBundle:
    att_head: tuple = field(default_factory=tuple)
    mot_head: tuple = field(default_factory=tuple)
    ent_stream: tuple = field(default_factory=tuple)
    ent_fragment: tuple = field(default_factory=tuple)
    ent_attr: tuple = field(default_factory=tuple)

    def __post_init__(self):
        for name, kind in NETWORKS:
            layers = tuple(getattr(self, name))
            want = DenseLayer if kind == "dense" else ConvLayer
            for layer in layers:
                if not isinstance(layer, want):
                    raise TypeError(f"{name} expects {want.__name__} layers")
            _check_chain(name, layers)
            object.__setattr__(self, name, layers)

    def __eq__(self, other):
        if not isinstance(other, WeightsBundle):
            return NotImplemented
        return all(getattr(self, n) == getattr(other, n) for n, _ in NETWORKS)

    def io_dims(self, name):
        """(input width, output width) of a network, or None when empty."""
        layers = getattr(self, name)
        if not layers:
            return None
        if isinstance(layers[0], DenseLayer):
            return layers[0].in_dim, layers[-1].out_dim
        return layers[0].in_ch, layers[-1].out_ch

    def n_params(self):
        total = 0
        for name, _ in NETWORKS:
            for layer in getattr(self, name):
                w = layer.weight if isinstance(layer, DenseLayer) else layer.kernel
                total += w.size + layer.bias.size
        return total


def _check_chain(name, layers):
    for a, b in zip(layers, layers[1:]):
        out = a.out_dim if isinstance(a, DenseLayer) else a.out_ch
        inp = b.in_dim if isinstance(b, DenseLayer) else b.in_ch
        if out != inp:
            raise DimensionError(f"{name}: layer output {out} does not feed input {inp}")


def expected_io_dims(C, P, K, G=FRAGMENT_WIDTH, k=CONTEXT_K):
    n_attr = 12 + 3 * K
    return {
        "att_head": (C + P, K * 11),
        "mot_head": (C + P + TIME_ENC_WIDTH, 7),
        "ent_stream": (k * P, 2 * P),
        "ent_fragment": (k * G, 2 * G),
        "ent_attr": (C, 3 * n_attr),
    }


def init_bundle(rng: np.random.Generator, C, P, K, scale=0.5):
    """Random bundle with the default head shapes; weights ~ N(0, scale^2/fan_in)."""
    dims = expected_io_dims(C, P, K)

    def dense(i, o, act):
        return DenseLayer(rng.normal(0, scale / np.sqrt(i), (o, i)), rng.normal(0, 0.05, o), act)

    def conv(i, o, act):
        return ConvLayer(rng.normal(0, scale / np.sqrt(9 * i), (o, i, 3, 3)), rng.normal(0, 0.05, o), act)

    nets = {}
    for name, kind in NETWORKS:
        i, o = dims[name]
        if kind == "dense":
            nets[name] = (dense(i, HIDDEN, "relu"), dense(HIDDEN, o, "none"))
        else:
            nets[name] = (conv(i, CONV_HIDDEN, "relu"), conv(CONV_HIDDEN, o, "none"))
    return WeightsBundle(**nets)


def zero_bundle(C, P, K):
    """Bundle of the default shapes with every parameter zero."""
    dims = expected_io_dims(C, P, K)
    nets = {}
    for name, kind in NETWORKS:
        i, o = dims[name]
        if kind == "dense":
            nets[name] = (DenseLayer(np.zeros((HIDDEN, i)), np.zeros(HIDDEN), "relu"),
                          DenseLayer(np.zeros((o, HIDDEN)), np.zeros(o), "none"))
        else:
            nets[name] = (ConvLayer(np.zeros((CONV_HIDDEN, i, 3, 3)), np.zeros(CONV_HIDDEN), "relu"),
                          ConvLayer(np.zeros((o, CONV_HIDDEN, 3, 3)), np.zeros(o), "none"))
    return WeightsBundle(**nets)


# --- GIFW serialization -------------------------------------------------------

def save_weights(bundle: WeightsBundle) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<HH", WEIGHTS_VERSION, len(NETWORKS))]
    for name, kind in NETWORKS:
        layers = getattr(bundle, name)
        raw = name.encode("ascii")
        out.append(struct.pack("<B", len(raw)) + raw)
        out.append(struct.pack("<BH", 0 if kind == "dense" else 1, len(layers)))
        for layer in layers:
            act = ACTIVATIONS.index(layer.activation)
            if kind == "dense":
                out.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, act))
                out.append(layer.weight.astype("<f4").tobytes())
            else:
                out.append(struct.pack("<IIB", layer.in_ch, layer.out_ch, act))
                out.append(layer.kernel.astype("<f4").tobytes())
            out.append(layer.bias.astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data, what="payload"):
        self.data = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n):
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    @property
    def remaining(self):
        return len(self.data) - self.pos


def load_weights(data) -> WeightsBundle:
    r = _Reader(data, "weights")
    if bytes(r.take(4)) != WEIGHTS_MAGIC:
        raise FormatError("bad weights magic")
    version, count = r.unpack("<HH")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    if count != len(NETWORKS):
        raise FormatError(f"expected {len(NETWORKS)} networks, found {count}")
    nets = {}
    for name, kind in NETWORKS:
        (nlen,) = r.unpack("<B")
        got = bytes(r.take(nlen)).decode("ascii", errors="replace")
        if got != name:
            raise FormatError(f"expected network {name!r}, found {got!r}")
        kind_code, n_layers = r.unpack("<BH")
        if kind_code != (0 if kind == "dense" else 1):
            raise FormatError(f"network {name} has wrong layer kind")
        layers = []
        for _ in range(n_layers):
            i, o, act = r.unpack("<IIB")
            if act >= len(ACTIVATIONS):
                raise FormatError(f"bad activation code {act}")
            cls, shape = (DenseLayer, (o, i)) if kind == "dense" else (ConvLayer, (o, i, 3, 3))
            w = r.array("<f4", int(np.prod(shape))).reshape(shape)
            b = r.array("<f4", o)
            try:
                layers.append(cls(w, b, ACTIVATIONS[act]))
            except ValueError as exc:
                raise FormatError(f"{name}: {exc}") from exc
        nets[name] = tuple(layers)
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes after weights")
    try:
        return WeightsBundle(**nets)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc

"""Conditional Gaussian entropy models and the closed-form rate estimate.

The Gaussian CDF is evaluated with one fixed rational erfc approximation
(Numerical Recipes ``erfcc``, fractional error < 1.2e-7). The rANS tables are
built from the same numba kernel, so the encoder, the decoder and the rate
estimate all see identical probabilities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, vectorize

from .errors import DimensionError
from .nn import (CONTEXT_K, FRAGMENT_WIDTH, SIGMA_FLOOR, STEP_FLOOR, WeightsBundle,
                 convnet_forward, mlp_forward, softplus)

MASS_FLOOR = 2.0 ** -32


@njit(cache=True)
def erfc_approx(x):
    z = abs(x)
    t = 1.0 / (1.0 + 0.5 * z)
    r = t * math.exp(-z * z - 1.26551223 + t * (1.00002368 + t * (0.37409196 + t * (
        0.09678418 + t * (-0.18628806 + t * (0.27886807 + t * (-1.13520398 + t * (
            1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
    return r if x >= 0.0 else 2.0 - r


@njit(cache=True)
def upper_tail(z):
    """P(Z > z) for a standard normal Z."""
    return 0.5 * erfc_approx(z * 0.7071067811865476)


@njit(cache=True)
def std_mass(a, b):
    """P(a < Z < b) for a standard normal Z; evaluated on the tail nearer zero mass loss."""
    if a >= 0.0:
        return upper_tail(a) - upper_tail(b)
    if b <= 0.0:
        return upper_tail(-b) - upper_tail(-a)
    return 1.0 - upper_tail(b) - upper_tail(-a)


@vectorize(["float64(float64, float64, float64, float64)"], cache=True)
def _interval_mass(mu, sigma, lo, hi):
    return std_mass((lo - mu) / sigma, (hi - mu) / sigma)


def interval_mass(mu, sigma, lo, hi):
    """Phi_{mu,sigma}(hi) - Phi_{mu,sigma}(lo); infinite bounds are allowed."""
    return _interval_mass(np.asarray(mu, np.float64), np.asarray(sigma, np.float64),
                          np.asarray(lo, np.float64), np.asarray(hi, np.float64))


@dataclass(frozen=True, eq=False)
class SymbolPlane:
    """Quantized symbols with their per-symbol Gaussian (mu, sigma) and step.

    mu and sigma live in value units: symbol v stands for v * step.
    """

    symbols: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    step: np.ndarray | float = 1.0

    def __post_init__(self):
        s = np.asarray(self.symbols, dtype=np.int64)
        mu, sigma, step = np.broadcast_arrays(np.asarray(self.mu, np.float64),
                                              np.asarray(self.sigma, np.float64),
                                              np.asarray(self.step, np.float64))
        if mu.shape != s.shape:
            mu, sigma, step = (np.broadcast_to(a, s.shape) for a in (mu, sigma, step))
        if np.any(~(sigma > 0)):
            raise ValueError("sigma must be positive")
        if np.any(~(step > 0)):
            raise ValueError("step must be positive")
        for name, val in (("symbols", s), ("mu", mu), ("sigma", sigma), ("step", step)):
            object.__setattr__(self, name, val)

    def __len__(self):
        return self.symbols.size

    def ravel(self):
        return SymbolPlane(self.symbols.ravel(), self.mu.ravel(), self.sigma.ravel(),
                           self.step.ravel())


def symbol_masses(plane: SymbolPlane):
    v = plane.symbols.astype(np.float64)
    q = plane.step
    return interval_mass(plane.mu, plane.sigma, (v - 0.5) * q, (v + 0.5) * q)


def entropy_bits(plane: SymbolPlane) -> float:
    """-sum log2 of each symbol's interval mass, masses floored at 2^-32."""
    if len(plane) == 0:
        return 0.0
    mass = np.maximum(symbol_masses(plane), MASS_FLOOR)
    return float(-np.log2(mass).sum())


# --- distribution prediction --------------------------------------------------

def _split_mu_sigma(raw, width):
    mu = raw[:width]
    sigma = softplus(raw[width:2 * width]) + SIGMA_FLOOR
    return mu, sigma


def predict_stream_frame(prev_frames, weights: WeightsBundle):
    """(mu, sigma), each (P, h, w), for the next V_GF frame.

    ``prev_frames`` is (k, P, h, w), oldest first; absent history is zeros.
    """
    prev = np.asarray(prev_frames, dtype=np.float64)
    if prev.ndim != 4:
        raise DimensionError(f"expected (k, P, h, w) context, got {prev.shape}")
    k, P, h, w = prev.shape
    raw = convnet_forward(weights.ent_stream, prev.reshape(k * P, h, w))
    if raw.shape[0] != 2 * P:
        raise DimensionError(f"stream model emits {raw.shape[0]} channels, expected {2 * P}")
    return _split_mu_sigma(raw, P)


def predict_fragment(prev_fragments, weights: WeightsBundle):
    """(mu, sigma), each (G, H, W), for the next feature fragment."""
    prev = np.asarray(prev_fragments, dtype=np.float64)
    if prev.ndim != 4:
        raise DimensionError(f"expected (k, G, H, W) context, got {prev.shape}")
    k, G, h, w = prev.shape
    raw = convnet_forward(weights.ent_fragment, prev.reshape(k * G, h, w))
    if raw.shape[0] != 2 * G:
        raise DimensionError(f"fragment model emits {raw.shape[0]} channels, expected {2 * G}")
    return _split_mu_sigma(raw, G)


def predict_attr_params(f_quantized, weights: WeightsBundle):
    """Per-channel (mu, sigma, Q) for the 12 + 3K attribute channels.

    Accepts a C-vector or an (n, C) batch.
    """
    raw = mlp_forward(weights.ent_attr, f_quantized)
    width = raw.shape[-1]
    if width % 3:
        raise DimensionError(f"attribute model emits {width} values, not a multiple of 3")
    a = width // 3
    mu = raw[..., :a]
    sigma = softplus(raw[..., a:2 * a]) + SIGMA_FLOOR
    step = softplus(raw[..., 2 * a:]) + STEP_FLOOR
    return mu, sigma, step


def fragment_bounds(C, G=FRAGMENT_WIDTH):
    """[(start, stop)] channel ranges; the last fragment may be narrower."""
    return [(s, min(s + G, C)) for s in range(0, C, G)]


def fragment_planes(f_planes, G=FRAGMENT_WIDTH):
    """Split (C, H, W) feature planes into (G, H, W) fragments, zero-padding the last."""
    C = f_planes.shape[0]
    out = []
    for s, e in fragment_bounds(C, G):
        frag = np.zeros((G,) + f_planes.shape[1:], dtype=np.float64)
        frag[:e - s] = f_planes[s:e]
        out.append(frag)
    return out


def context_stack(history, shape, k=CONTEXT_K):
    """(k, *shape) conditioning input: the last k decoded planes, oldest first,
    zero-padded in front when fewer than k are available."""
    ctx = np.zeros((k,) + tuple(shape))
    recent = list(history[-k:]) if k else []
    for j, plane in enumerate(recent):
        ctx[k - len(recent) + j] = plane
    return ctx

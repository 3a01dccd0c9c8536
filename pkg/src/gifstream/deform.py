"""Per-timestamp expansion of anchors into Gaussian primitives.

Masking, KNN feature smoothing, attribute and motion heads, and the final
rigid placement of each anchor's K offsets. Every function accepts either a
single anchor or a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .errors import DimensionError
from .model import FeatureStream, GaussianFrame, GopModel
from .nn import TIME_ENC_WIDTH, mlp_forward

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class AnchorMotion:
    R: np.ndarray  # (..., 3, 3)
    T: np.ndarray  # (..., 3)


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray  # (n, k) int64

    def __len__(self):
        return self.indices.shape[0]


def apply_de_mask(stream: FeatureStream, m_de: float) -> FeatureStream:
    if m_de == 0 or not stream.present:
        return FeatureStream(np.zeros_like(stream.frames), False)
    return FeatureStream((stream.frames * np.float32(m_de)).astype(stream.frames.dtype), True)


def masked_stream_frame(model: GopModel, t_index):
    """f_hat_t for every anchor at one frame, (n, P) float64."""
    f_t = model.streams[:, t_index].astype(np.float64)
    m = np.where(model.present, model.m_de.astype(np.float64), 0.0)
    return f_t * m[:, None]


def build_knn(positions, knn_k) -> NeighborIndex:
    """k nearest other anchors by Euclidean distance, ties to the lower index."""
    pts = np.asarray(positions, dtype=np.float64)
    n = pts.shape[0]
    if n < 2:
        raise ValueError("build_knn needs at least two anchors")
    k = min(knn_k, n - 1)
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=k + 1)
    radius = dist[:, -1]
    out = np.empty((n, k), dtype=np.int64)
    # ball query at the k-th distance catches every tie candidate; exact order
    # is then settled on recomputed squared distances and index.
    balls = tree.query_ball_point(pts, radius * (1 + 1e-9) + 1e-12)
    for i, cand in enumerate(balls):
        cand = np.asarray(cand, dtype=np.int64)
        cand = cand[cand != i]
        d2 = ((pts[cand] - pts[i]) ** 2).sum(axis=1)
        order = np.lexsort((cand, d2))
        out[i] = cand[order[:k]]
    return NeighborIndex(out)


def empty_neighbors(n):
    return NeighborIndex(np.zeros((n, 0), dtype=np.int64))


def aggregate(features, nbrs: NeighborIndex, m_knn):
    """out_i = (1 - m_i) * mean(features of neighbours of i) + m_i * features_i."""
    feats = np.asarray(features, dtype=np.float64)
    m = np.asarray(m_knn, dtype=np.float64)[:, None]
    if nbrs.indices.shape[1] == 0:
        return feats.copy()
    neighbor_mean = feats[nbrs.indices].mean(axis=1)
    return (1.0 - m) * neighbor_mean + m * feats


def time_encoding(t):
    """Six-wide sinusoidal encoding: (sin, cos) of pi * 2^j * t for j = 0, 1, 2."""
    t = np.asarray(t, dtype=np.float64)
    parts = []
    for j in range(3):
        a = np.pi * (2 ** j) * t
        parts += [np.sin(a), np.cos(a)]
    enc = np.stack(parts, axis=-1)
    assert enc.shape[-1] == TIME_ENC_WIDTH
    return enc


def normalize_quat(q):
    """Unit quaternions; rows with norm <= 1e-8 fall back to (1, 0, 0, 0)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    small = norm <= 1e-8
    safe = np.where(small, 1.0, norm)
    return np.where(small, IDENTITY_QUAT, q / safe)


def quat_to_matrix(q):
    """Hamilton (w, x, y, z) quaternion to rotation matrix, after normalization."""
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def predict_attributes(f, f_hat_t, attr_scale, weights, K):
    """Attribute head. Returns (opacity (...,K), scaling (...,K,3), rotation (...,K,4),
    color (...,K,3))."""
    inp = np.concatenate([np.asarray(f, np.float64), np.asarray(f_hat_t, np.float64)], axis=-1)
    out = mlp_forward(weights.att_head, inp)
    if out.shape[-1] != 11 * K:
        raise DimensionError(f"attribute head emits {out.shape[-1]} values, expected {11 * K}")
    out = out.reshape(out.shape[:-1] + (K, 11))
    opacity = expit(out[..., 0])
    scaling = expit(out[..., 1:4]) * np.asarray(attr_scale, np.float64)[..., None, :]
    rotation = normalize_quat(out[..., 4:8])
    color = expit(out[..., 8:11])
    return opacity, scaling, rotation, color


def predict_motion(f_tilde, f_tilde_t, t, m_dy, weights) -> AnchorMotion:
    f_tilde = np.asarray(f_tilde, np.float64)
    enc = np.broadcast_to(time_encoding(t), f_tilde.shape[:-1] + (TIME_ENC_WIDTH,))
    inp = np.concatenate([f_tilde, np.asarray(f_tilde_t, np.float64), enc], axis=-1)
    out = mlp_forward(weights.mot_head, inp)
    if out.shape[-1] != 7:
        raise DimensionError(f"motion head emits {out.shape[-1]} values, expected 7")
    m = np.asarray(m_dy, np.float64)[..., None]
    q = IDENTITY_QUAT + m * out[..., :4]
    return AnchorMotion(quat_to_matrix(q), m * out[..., 4:7])


def gaussian_positions(x, offset_scale, offsets, motion: AnchorMotion):
    """p^i = R (S2 * o^i) + x + T for every offset; offsets shaped (..., K, 3)."""
    local = np.asarray(offset_scale, np.float64)[..., None, :] * np.asarray(offsets, np.float64)
    rotated = np.einsum("...ij,...kj->...ki", motion.R, local)
    return rotated + np.asarray(x, np.float64)[..., None, :] + motion.T[..., None, :]


def normalized_time(t_index, N):
    return 0.0 if N == 1 else t_index / (N - 1)


def neighbors_for(model: GopModel) -> NeighborIndex:
    n = model.config.n_anchors
    if n < 2:
        return empty_neighbors(n)
    return build_knn(model.x, model.config.knn_k)


def decode_frame(model: GopModel, t_index, nbrs: NeighborIndex | None = None) -> GaussianFrame:
    cfg = model.config
    if not 0 <= t_index < cfg.N:
        raise IndexError(f"time index {t_index} outside [0, {cfg.N})")
    if nbrs is None:
        nbrs = neighbors_for(model)
    t = normalized_time(t_index, cfg.N)
    f = model.f.astype(np.float64)
    f_hat_t = masked_stream_frame(model, t_index)

    opacity, scaling, rotation, color = predict_attributes(f, f_hat_t, model.attr_scale,
                                                           model.weights, cfg.K)
    f_tilde = aggregate(f, nbrs, model.m_knn)
    f_tilde_t = aggregate(f_hat_t, nbrs, model.m_knn)
    motion = predict_motion(f_tilde, f_tilde_t, t, model.m_dy, model.weights)
    pos = gaussian_positions(model.x, model.offset_scale, model.offsets, motion)

    M = cfg.n_anchors * cfg.K
    return GaussianFrame(
        positions=pos.reshape(M, 3), opacity=opacity.reshape(M), scaling=scaling.reshape(M, 3),
        rotation=rotation.reshape(M, 4), color=color.reshape(M, 3), t=t)

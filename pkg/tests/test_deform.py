import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gifstream import nn
from gifstream.deform import (AnchorMotion, NeighborIndex, aggregate, apply_de_mask, build_knn,
                              decode_frame, gaussian_positions, neighbors_for, predict_attributes,
                              predict_motion, quat_to_matrix, time_encoding)
from gifstream.model import FeatureStream, GopConfig, generate_synthetic


def brute_knn(pts, k):
    n = len(pts)
    out = []
    for i in range(n):
        cand = sorted((float(((pts[i] - pts[j]) ** 2).sum()), j) for j in range(n) if j != i)
        out.append([j for _, j in cand[:k]])
    return np.array(out)


def rodrigues(axis, angle):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx


def test_de_mask_zero_prunes():
    s = FeatureStream(np.ones((3, 2), np.float32), True)
    out = apply_de_mask(s, 0.0)
    assert not out.present and np.all(out.frames == 0)


def test_de_mask_identity_and_half():
    s = FeatureStream(np.array([[2.0, -4.0]], np.float32), True)
    assert np.array_equal(apply_de_mask(s, 1.0).frames, s.frames)
    assert apply_de_mask(s, 0.5).frames.tolist() == [[1.0, -2.0]]


def test_knn_collinear():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    assert build_knn(pts, 1).indices[:, 0].tolist() == [1, 0, 1]


def test_knn_matches_brute_force(rng):
    pts = rng.normal(size=(50, 3))
    assert np.array_equal(build_knn(pts, 4).indices, brute_knn(pts, 4))


def test_knn_duplicates_tie_break():
    pts = np.zeros((6, 3))
    pts[5] = 1.0
    idx = build_knn(pts, 3).indices
    assert idx[0].tolist() == [1, 2, 3]
    assert idx[3].tolist() == [0, 1, 2]
    assert np.array_equal(idx, build_knn(pts, 3).indices)


def test_knn_needs_two():
    with pytest.raises(ValueError):
        build_knn(np.zeros((1, 3)), 4)


def test_knn_fewer_anchors_than_k():
    idx = build_knn(np.eye(3), 4).indices
    assert idx.shape == (3, 2)
    assert all(i not in row for i, row in enumerate(idx))


@given(st.integers(2, 60), st.integers(1, 6), st.integers(0, 2**31), st.booleans())
def test_knn_property(n, k, seed, lattice):
    r = np.random.default_rng(seed)
    pts = r.integers(0, 3, (n, 3)).astype(float) if lattice else r.normal(size=(n, 3))
    got = build_knn(pts, k).indices
    assert np.array_equal(got, brute_knn(pts, min(k, n - 1)))


def test_aggregate_endpoints():
    feats = np.array([[2.0], [4.0], [4.0]])
    nbrs = NeighborIndex(np.array([[1, 2], [0, 2], [0, 1]]))
    assert np.array_equal(aggregate(feats, nbrs, np.ones(3)), feats)
    out = aggregate(feats, nbrs, np.zeros(3))
    assert out[0, 0] == 4.0
    assert aggregate(feats, nbrs, np.full(3, 0.5))[0, 0] == 3.0


def test_aggregate_independent_of_self_at_zero(rng):
    feats = rng.normal(size=(5, 3))
    nbrs = build_knn(rng.normal(size=(5, 3)), 2)
    other = feats.copy()
    other[0] += 10
    a, b = aggregate(feats, nbrs, np.zeros(5)), aggregate(other, nbrs, np.zeros(5))
    assert np.array_equal(a[0], b[0])


def test_attributes_zero_weights():
    K = 3
    w = nn.zero_bundle(4, 2, K)
    s1 = np.array([0.2, 0.4, 0.8])
    op, sc, rot, col = predict_attributes(np.ones(4), np.ones(2), s1, w, K)
    assert np.all(op == 0.5) and np.all(col == 0.5)
    assert np.all(rot == [1, 0, 0, 0])
    assert np.allclose(sc, 0.5 * s1)


def test_attributes_pruned_equals_zero_input(rng):
    m = generate_synthetic(0, GopConfig(4, K=2, C=6, P=3, N=2))
    a = predict_attributes(m.f[0], np.zeros(3), m.attr_scale[0], m.weights, 2)
    b = predict_attributes(m.f[0], np.zeros(3, np.float32) * 1, m.attr_scale[0], m.weights, 2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def straight_line_attributes(f, fh, s1, w, K):
    x = np.concatenate([f, fh]).astype(float)
    for layer in w.att_head:
        x = layer.weight.astype(float) @ x + layer.bias.astype(float)
        if layer.activation == "relu":
            x = np.maximum(x, 0)
    out = []
    for k in range(K):
        r = x[11 * k:11 * k + 11]
        sig = 1 / (1 + np.exp(-r))
        q = r[4:8] / np.linalg.norm(r[4:8])
        out.append((sig[0], sig[1:4] * s1, q, sig[8:11]))
    return out


def test_attributes_straight_line_oracle():
    m = generate_synthetic(2, GopConfig(2, K=3, C=6, P=2, N=3), sparsity=1.0)
    fh = m.streams[:, 1] * m.m_de[:, None]
    op, sc, rot, col = predict_attributes(m.f, fh, m.attr_scale, m.weights, 3)
    for i in range(2):
        for k, (o, s, q, c) in enumerate(straight_line_attributes(m.f[i], fh[i], m.attr_scale[i],
                                                                 m.weights, 3)):
            assert abs(op[i, k] - o) < 1e-9
            assert np.allclose(sc[i, k], s, atol=1e-9)
            assert np.allclose(rot[i, k], q, atol=1e-9)
            assert np.allclose(col[i, k], c, atol=1e-9)


def test_motion_static_anchor(rng):
    w = nn.init_bundle(rng, 4, 2, 1)
    mo = predict_motion(rng.normal(size=4), rng.normal(size=2), 0.3, 0.0, w)
    assert np.array_equal(mo.R, np.eye(3)) and np.array_equal(mo.T, np.zeros(3))


def test_motion_zero_rotation_output():
    w = nn.zero_bundle(4, 2, 1)
    last = w.mot_head[-1]
    bias = np.array([0, 0, 0, 0, 0.5, -1.0, 2.0])
    w = nn.WeightsBundle(w.att_head, w.mot_head[:-1] + (nn.DenseLayer(last.weight, bias),),
                         w.ent_stream, w.ent_fragment, w.ent_attr)
    mo = predict_motion(np.ones(4), np.ones(2), 0.5, 1.0, w)
    assert np.array_equal(mo.R, np.eye(3))
    assert np.allclose(mo.T, [0.5, -1.0, 2.0])


@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_motion_rotation_orthonormal(seed, t, m_dy):
    r = np.random.default_rng(seed)
    w = nn.init_bundle(r, 4, 2, 1, scale=2.0)
    mo = predict_motion(r.normal(size=4), r.normal(size=2), t, m_dy, w)
    assert np.max(np.abs(mo.R.T @ mo.R - np.eye(3))) < 1e-5
    assert abs(np.linalg.det(mo.R) - 1) < 1e-5


def test_quat_examples():
    assert np.allclose(quat_to_matrix([1, 0, 0, 0]), np.eye(3))
    assert np.allclose(quat_to_matrix([0, 0, 0, 1]), np.diag([-1, -1, 1]))
    assert np.array_equal(quat_to_matrix([0, 0, 0, 0]), np.eye(3))
    assert np.allclose(quat_to_matrix([2, 0, 0, 0]), np.eye(3))


@given(st.integers(0, 2**31))
def test_quat_axis_angle_oracle(seed):
    r = np.random.default_rng(seed)
    axis = r.normal(size=3)
    angle = r.uniform(-math.pi, math.pi)
    u = axis / np.linalg.norm(axis)
    q = np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * u])
    assert np.max(np.abs(quat_to_matrix(q) - rodrigues(axis, angle))) < 1e-6


def test_time_encoding():
    e = time_encoding(0.25)
    want = [math.sin(math.pi / 4), math.cos(math.pi / 4), math.sin(math.pi / 2),
            math.cos(math.pi / 2), math.sin(math.pi), math.cos(math.pi)]
    assert np.allclose(e, want) and e.shape == (nn.TIME_ENC_WIDTH,)


def motion(R, T):
    return AnchorMotion(np.asarray(R, float), np.asarray(T, float))


def test_positions_examples():
    p = gaussian_positions([1, 0, 0], [2, 2, 2], [[0.5, 0, 0]], motion(np.eye(3), np.zeros(3)))
    assert p.tolist() == [[2, 0, 0]]
    p = gaussian_positions([0, 0, 0], [1, 1, 1], [[1, 0, 0]], motion(np.diag([-1, -1, 1]), [0, 0, 1]))
    assert p.tolist() == [[-1, 0, 1]]
    p = gaussian_positions([1, 2, 3], [5, 5, 5], np.zeros((4, 3)), motion(np.eye(3), [1, 1, 1]))
    assert np.all(p == [2, 3, 4])


def test_frame_index_range():
    m = generate_synthetic(0, GopConfig(5, K=1, C=4, P=1, N=3))
    with pytest.raises(IndexError):
        decode_frame(m, 3)
    with pytest.raises(IndexError):
        decode_frame(m, -1)


def test_frame_valid_and_counts():
    m = generate_synthetic(0, GopConfig(20, K=3, C=8, P=2, N=5))
    fr = decode_frame(m, 2)
    assert len(fr) == 60 and fr.check() == [] and fr.t == 0.5


def test_static_model_identical_positions():
    m = generate_synthetic(3, GopConfig(30, K=2, C=8, P=2, N=6), sparsity=0.0)
    frames = [decode_frame(m, t) for t in range(6)]
    assert all(np.array_equal(frames[0].positions, f.positions) for f in frames)


def test_pruning_equivalence():
    cfg = GopConfig(30, K=2, C=8, P=2, N=6)
    m = generate_synthetic(3, cfg, sparsity=0.5)
    pruned = m.replace(m_de=np.zeros(30), present=np.zeros(30, bool), streams=np.zeros_like(m.streams))
    # same anchors, streams stored explicitly as zeros but not marked pruned
    explicit = m.replace(streams=np.zeros_like(m.streams))
    for t in (0, 3, 5):
        assert decode_frame(pruned, t) == decode_frame(explicit, t)


def test_single_frame_gop():
    m = generate_synthetic(0, GopConfig(6, K=1, C=4, P=1, N=1), sparsity=0.5)
    assert decode_frame(m, 0).t == 0.0


def test_single_anchor():
    m = generate_synthetic(0, GopConfig(1, K=2, C=4, P=1, N=2), sparsity=1.0)
    assert neighbors_for(m).indices.shape == (1, 0)
    assert decode_frame(m, 1).check() == []


def test_full_pipeline_oracle():
    """decode_frame vs per-anchor loops over the same formulas."""
    cfg = GopConfig(12, K=2, C=6, P=3, N=5)
    m = generate_synthetic(1, cfg, sparsity=0.5)
    t_index = 0
    t = 0.0
    fr = decode_frame(m, t_index)
    n, K = cfg.n_anchors, cfg.K
    x = m.x.astype(float)
    nbr = brute_knn(x, cfg.knn_k)
    fh = np.array([m.streams[i, t_index] * m.m_de[i] if m.present[i] else np.zeros(3)
                   for i in range(n)], float)
    f = m.f.astype(float)

    def agg(v, i):
        mean = sum(v[j] for j in nbr[i]) / len(nbr[i])
        return (1 - m.m_knn[i]) * mean + m.m_knn[i] * v[i]

    enc = np.array([g(math.pi * 2 ** j * t) for j in range(3) for g in (math.sin, math.cos)])
    for i in range(n):
        h = np.concatenate([agg(f, i), agg(fh, i), enc])
        for layer in m.weights.mot_head:
            h = layer.weight.astype(float) @ h + layer.bias.astype(float)
            if layer.activation == "relu":
                h = np.maximum(h, 0)
        q = np.array([1.0, 0, 0, 0]) + m.m_dy[i] * h[:4]
        q /= np.linalg.norm(q)
        w_, a, b, c = q
        R = np.array([[1 - 2 * (b * b + c * c), 2 * (a * b - w_ * c), 2 * (a * c + w_ * b)],
                      [2 * (a * b + w_ * c), 1 - 2 * (a * a + c * c), 2 * (b * c - w_ * a)],
                      [2 * (a * c - w_ * b), 2 * (b * c + w_ * a), 1 - 2 * (a * a + b * b)]])
        T = m.m_dy[i] * h[4:7]
        for k in range(K):
            p = R @ (m.offset_scale[i] * m.offsets[i, k]) + x[i] + T
            assert np.max(np.abs(fr.positions[i * K + k] - p)) < 1e-5
        attrs = straight_line_attributes(f[i], fh[i], m.attr_scale[i], m.weights, K)
        for k, (o, s, q_, col) in enumerate(attrs):
            assert abs(fr.opacity[i * K + k] - o) < 1e-5
            assert np.allclose(fr.scaling[i * K + k], s, atol=1e-5)
            assert np.allclose(fr.color[i * K + k], col, atol=1e-5)

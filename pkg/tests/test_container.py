import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gifstream import nn
from gifstream.container import (CATEGORIES, CODED_SECTIONS, GIFS_MAGIC, GIFU_MAGIC, SECTIONS,
                                 Bitstream, decode_gop, encode_gop, export_ply, parse_ply,
                                 quantize_model, read_model, size_breakdown, write_model)
from gifstream.deform import decode_frame
from gifstream.errors import DecodeError, FormatError
from gifstream.model import GaussianFrame, GopConfig, generate_synthetic, validate
from gifstream.rans import CodedPlane


def synth(n=40, N=4, K=2, C=12, P=4, sparsity=0.5, seed=0):
    return generate_synthetic(seed, GopConfig(n, K=K, C=C, P=P, N=N), sparsity)


def prune(model, idx):
    m_de = model.m_de.copy()
    m_de[idx] = 0
    present = model.present.copy()
    present[idx] = False
    streams = model.streams.copy()
    streams[idx] = 0
    return model.replace(m_de=m_de, present=present, streams=streams)


@pytest.mark.parametrize("n,N,K,C,P,sparsity", [
    (1, 1, 1, 24, 4, 1.0), (1, 8, 5, 24, 8, 0.0), (2, 3, 1, 9, 4, 0.5), (10, 8, 5, 48, 8, 0.0),
    (10, 8, 1, 24, 4, 1.0), (37, 5, 3, 17, 5, 0.3), (200, 8, 5, 24, 4, 0.3),
])
def test_roundtrip_bit_identical(n, N, K, C, P, sparsity):
    model = synth(n, N, K, C, P, sparsity, seed=n + N)
    bs = encode_gop(model)
    decoded = decode_gop(bs.to_bytes())
    q = quantize_model(model)
    assert decoded.diff(q) == []
    assert decoded == q
    assert validate(decoded).ok


def test_reencode_is_idempotent():
    model = synth(120, 6, 5, 24, 4, 0.4, seed=3)
    data = encode_gop(model, seed=7).to_bytes()
    decoded = decode_gop(data)
    assert encode_gop(decoded, seed=7).to_bytes() == data
    assert quantize_model(decoded) == decoded


def test_encode_is_deterministic():
    model = synth(60, seed=11)
    assert encode_gop(model).to_bytes() == encode_gop(model).to_bytes()
    # the sort seed changes the layout, never the reconstruction
    assert decode_gop(encode_gop(model, seed=1).to_bytes()) == decode_gop(encode_gop(model, seed=2).to_bytes())


def test_quantized_model_survives_gifu():
    q = quantize_model(synth(50, seed=5))
    back = read_model(write_model(q))
    assert back == q
    assert encode_gop(back).to_bytes() == encode_gop(q).to_bytes()


def test_gifu_roundtrip_and_errors():
    model = synth(30, seed=2)
    data = write_model(model)
    assert data[:4] == GIFU_MAGIC
    assert read_model(data) == model
    bad_version = bytearray(data[:-4])
    bad_version[4:6] = struct.pack("<H", 99)
    bad_version += struct.pack("<I", zlib.crc32(bytes(bad_version)))
    with pytest.raises(FormatError, match="version"):
        read_model(bytes(bad_version))
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x10
    with pytest.raises(FormatError):
        read_model(bytes(flipped))
    with pytest.raises(FormatError):
        read_model(data[:20])


def test_any_flipped_byte_is_rejected(rng):
    data = encode_gop(synth(30, seed=4)).to_bytes()
    for pos in rng.choice(len(data), 60, replace=False):
        bad = bytearray(data)
        bad[int(pos)] ^= 1 << int(rng.integers(0, 8))
        with pytest.raises(FormatError):
            decode_gop(bytes(bad))


def test_truncated_and_padded_streams_rejected():
    data = encode_gop(synth(20, seed=6)).to_bytes()
    for cut in (0, 3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            decode_gop(data[:cut])
    with pytest.raises(FormatError):
        decode_gop(data + b"\x00")
    with pytest.raises(FormatError):
        decode_gop(b"XXXX" + data[4:])


def test_invalid_model_refused():
    model = synth(10, seed=1)
    m_dy = model.m_dy.copy()
    m_dy[0] = 1.5
    with pytest.raises(ValueError):
        encode_gop(model.replace(m_dy=m_dy))


def test_header_parses_independently():
    model = synth(25, N=3, K=2, C=12, P=4, seed=9)
    bs = encode_gop(model, seed=5)
    data = bs.to_bytes()
    fixed = struct.Struct("<4sH IHHHHH II II BB Q hh 3f 3f ff I")
    vals = fixed.unpack_from(data, 0)
    magic, version, n, K, C, P, N = vals[:7]
    assert (magic, version, n, K, C, P, N) == (GIFS_MAGIC, 1, 25, 2, 12, 4, 3)
    assert vals[12:15] == (2, 8, 5)  # k, G, seed
    assert vals[15:17] == (-255, 255)
    off = fixed.size + 4 * (8 + 3 * K)
    (n_sec,) = struct.unpack_from("<B", data, off)
    assert n_sec == len(SECTIONS)
    off += 1
    entries = [struct.unpack_from("<BIII", data, off + 13 * i) for i in range(n_sec)]
    end = off + 13 * n_sec
    (crc,) = struct.unpack_from("<I", data, end)
    assert crc == zlib.crc32(data[:end])
    assert entries[0][1] == end + 4
    for (sid, o, length, c), name in zip(entries, SECTIONS):
        assert data[o:o + length] == bs.sections[name]
        assert zlib.crc32(data[o:o + length]) == c
    assert entries[-1][1] + entries[-1][2] == len(data)


def test_size_breakdown_accounts_for_every_byte():
    bs = encode_gop(synth(80, seed=8))
    data = bs.to_bytes()
    sb = size_breakdown(data)
    assert sb.total == len(data)
    assert sum(sb.sections.values()) == len(data) - sb.header
    assert sum(sb.categories.values()) == sum(sb.sections.values())
    assert sorted(s for names in CATEGORIES.values() for s in names) == sorted(SECTIONS)
    assert sb.sections["WEIGHTS"] == len(nn.save_weights(quantize_model(synth(80, seed=8)).weights))
    flat = sb.as_flat_dict()
    assert flat["total_bytes"] == len(data)


def test_all_pruned_vgf_is_empty():
    model = synth(60, N=8, sparsity=0.0, seed=12)
    bs = encode_gop(model)
    plane = CodedPlane.from_bytes(bs.sections["VGF"])
    assert plane.count == 0 and plane.payload == b""
    assert len(bs.sections["VGF"]) == 16
    assert bs.estimates["VGF"] == 0.0


def test_pruning_shrinks_vgf():
    model = synth(200, N=8, sparsity=1.0, seed=13)
    full = encode_gop(model)
    pruned = encode_gop(prune(model, np.arange(0, 200, 2)))
    assert len(pruned.sections["VGF"]) < 0.6 * len(full.sections["VGF"])
    assert CodedPlane.from_bytes(pruned.sections["VGF"]).count == 100 * 8 * 4


def test_estimates_track_coded_size():
    bs = encode_gop(synth(300, N=8, K=5, C=24, P=4, sparsity=0.3, seed=14))
    for name in CODED_SECTIONS:
        est = bs.estimates[name] / 8
        assert abs(len(bs.sections[name]) - est) <= 0.02 * est + 128, name


def test_decode_report_fields():
    data = encode_gop(synth(30, seed=15)).to_bytes()
    report = {}
    decode_gop(data, report=report)
    assert set(report) >= {"prediction_s", "entropy_decode_s", "total_s", "estimated_bits"}
    assert report["total_s"] >= report["entropy_decode_s"] >= 0
    assert set(report["estimated_bits"]) == set(CODED_SECTIONS)


def test_tamper_hook_identity_is_harmless():
    model = synth(30, seed=16)
    data = encode_gop(model).to_bytes()
    seen = []

    def hook(section, index, symbols):
        seen.append(section)
        return None

    assert decode_gop(data, tamper=hook) == quantize_model(model)
    assert set(seen) == set(CODED_SECTIONS)


def test_tampered_context_detected():
    data = encode_gop(synth(30, seed=17)).to_bytes()

    def hook(section, index, symbols):
        if section == "VTI_FEAT" and index == 0:
            symbols[0] += 1
            return symbols

    with pytest.raises(DecodeError):
        decode_gop(data, tamper=hook)


def test_decoded_frame_matches_encoder_side():
    model = synth(40, N=5, K=3, seed=18)
    q = quantize_model(model)
    decoded = decode_gop(encode_gop(model).to_bytes())
    for t in (0, 4):
        assert decode_frame(decoded, t) == decode_frame(q, t)


def test_ply_export_and_parse():
    model = synth(5, N=3, K=1, seed=19)
    frame = decode_frame(model, 0)
    assert len(frame) == 5
    data = export_ply(frame)
    assert b"element vertex 5\n" in data
    rec = parse_ply(data)
    assert rec.shape == (5,)
    np.testing.assert_array_equal(rec["x"], frame.positions[:, 0].astype(np.float32))
    np.testing.assert_array_equal(rec["rot_0"], frame.rotation[:, 0].astype(np.float32))
    np.testing.assert_array_equal(rec["opacity"], frame.opacity.astype(np.float32))


def test_ply_color_rounding():
    M = 3
    frame = GaussianFrame(np.zeros((M, 3)), np.ones(M), np.ones((M, 3)),
                          np.tile([1.0, 0, 0, 0], (M, 1)),
                          np.array([[1.0, 1.0, 1.0], [0.0, 0.5, 0.2], [1.0, 0.001, 0.998]]), 0.0)
    rec = parse_ply(export_ply(frame))
    assert tuple(rec[0][["red", "green", "blue"]]) == (255, 255, 255)
    assert tuple(rec[1][["red", "green", "blue"]]) == (0, 128, 51)
    assert tuple(rec[2][["red", "green", "blue"]]) == (255, 0, 254)


def test_parse_ply_rejects_other_layouts():
    with pytest.raises(FormatError):
        parse_ply(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    frame = decode_frame(synth(3, N=2, K=1, seed=20), 1)
    with pytest.raises(FormatError):
        parse_ply(export_ply(frame)[:-1])


@settings(max_examples=15)
@given(n=st.integers(1, 30), N=st.integers(1, 4), K=st.integers(1, 3), C=st.integers(1, 20),
       P=st.integers(1, 5), sparsity=st.sampled_from([0.0, 0.3, 1.0]), seed=st.integers(0, 99))
def test_roundtrip_property(n, N, K, C, P, sparsity, seed):
    model = synth(n, N, K, C, P, sparsity, seed)
    bs = encode_gop(model, seed=seed)
    assert decode_gop(bs.to_bytes()) == quantize_model(model)
    assert Bitstream.from_bytes(bs.to_bytes()).to_bytes() == bs.to_bytes()

import json
import os
import subprocess
import sys

import pytest

from gifstream.cli import main
from gifstream.container import parse_ply, read_model


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def gifu(tmp_path, capsys):
    path = tmp_path / "m.gifu"
    code, out, _ = run(capsys, "synth", "--seed", 3, "--anchors", 50, "--frames", 4,
                       "--channels", 12, "--primitives", 2, "--out", path, "--json")
    assert code == 0
    assert json.loads(out)["streams"] == 15
    return path


def test_full_pipeline(tmp_path, capsys, gifu):
    gifs = tmp_path / "m.gifs"
    code, out, _ = run(capsys, "encode", "--in", gifu, "--out", gifs, "--json")
    assert code == 0
    rep = json.loads(out)
    assert rep["total_bytes"] == gifs.stat().st_size
    assert 0.9 < rep["estimate_ratio"] < 1.1

    back = tmp_path / "d.gifu"
    code, out, _ = run(capsys, "decode", "--in", gifs, "--out", back, "--json")
    assert code == 0
    assert set(json.loads(out)) >= {"prediction_s", "entropy_decode_s", "total_s"}
    assert read_model(back.read_bytes()).quantized

    ply = tmp_path / "f.ply"
    for src in (gifs, back, gifu):
        code, out, _ = run(capsys, "expand", "--in", src, "--time-index", 3, "--out", ply, "--json")
        assert code == 0
        assert json.loads(out)["vertices"] == 100
        assert parse_ply(ply.read_bytes()).shape == (100,)

    code, out, _ = run(capsys, "stats", "--in", gifs, "--json")
    assert code == 0
    stats = json.loads(out)
    assert stats["total_bytes"] == gifs.stat().st_size
    assert stats["bits_per_anchor_per_frame"] == pytest.approx(8 * stats["total_bytes"] / 200)
    assert all(not isinstance(v, (dict, list)) for v in stats.values())


def test_human_output(tmp_path, capsys, gifu):
    gifs = tmp_path / "m.gifs"
    code, out, _ = run(capsys, "encode", "--in", gifu, "--out", gifs)
    assert code == 0
    assert "VGF" in out and "neural_networks" in out
    code, out, _ = run(capsys, "stats", "--in", gifs)
    assert "bits per anchor per frame" in out


def test_usage_errors(tmp_path, capsys, gifu):
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "encode", "--in", gifu)[0] == 1
    assert run(capsys, "expand", "--in", gifu, "--time-index", 4, "--out", tmp_path / "x.ply")[0] == 1
    assert run(capsys, "expand", "--in", gifu, "--time-index", -1, "--out", tmp_path / "x.ply")[0] == 1
    assert run(capsys, "synth", "--sparsity", 2, "--out", tmp_path / "y")[0] == 1
    assert run(capsys, "synth", "--out", tmp_path / "nodir" / "y")[0] == 1
    assert not (tmp_path / "x.ply").exists()


def test_data_errors(tmp_path, capsys, gifu):
    code, _, err = run(capsys, "decode", "--in", tmp_path / "missing", "--out", tmp_path / "o")
    assert code == 2 and "cannot read" in err
    junk = tmp_path / "junk"
    junk.write_bytes(b"GIFS" + b"\x00" * 40)
    assert run(capsys, "decode", "--in", junk, "--out", tmp_path / "o")[0] == 2
    assert run(capsys, "stats", "--in", gifu)[0] == 2  # a model file is not a bitstream
    assert run(capsys, "expand", "--in", junk, "--time-index", 0, "--out", tmp_path / "p")[0] == 2
    assert not (tmp_path / "o").exists()


def test_subprocess_exit_codes_and_thread_cap(tmp_path):
    env = dict(os.environ, GIFSTREAM_THREADS="1")
    code = ("import os, sys\n"
            "from gifstream.cli import main\n"
            "import numba\n"
            "rc = main(sys.argv[1:])\n"
            "assert os.environ['OMP_NUM_THREADS'] == '1'\n"
            "assert numba.get_num_threads() == 1\n"
            "sys.exit(rc)\n")
    out = tmp_path / "s.gifu"
    ok = subprocess.run([sys.executable, "-c", code, "synth", "--anchors", "5", "--frames", "2",
                         "--out", str(out)], env=env, capture_output=True, text=True)
    assert ok.returncode == 0, ok.stderr
    assert out.exists()
    bad = subprocess.run([sys.executable, "-m", "gifstream.cli", "stats", "--in",
                          str(tmp_path / "none")], env=env, capture_output=True, text=True)
    assert bad.returncode == 2
    usage = subprocess.run([sys.executable, "-m", "gifstream.cli"], env=env, capture_output=True,
                           text=True)
    assert usage.returncode == 1


def test_static_model_frames_identical(tmp_path, capsys):
    src = tmp_path / "s.gifu"
    assert run(capsys, "synth", "--anchors", 12, "--frames", 5, "--sparsity", 0, "--out", src)[0] == 0
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    assert run(capsys, "expand", "--in", src, "--time-index", 0, "--out", a)[0] == 0
    assert run(capsys, "expand", "--in", src, "--time-index", 4, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()

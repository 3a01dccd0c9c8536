"""gifstream command line: synth, encode, decode, expand, stats.

Exit codes: 0 success, 1 usage error, 2 data or format error.
GIFSTREAM_THREADS caps worker threads (0 or unset = library default); it must
take effect before numpy loads, so it is applied at import time.
"""
from __future__ import annotations

import os


def _thread_cap():
    raw = os.environ.get("GIFSTREAM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        return 0
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ[var] = str(n)
    return max(n, 0)


THREADS = _thread_cap()

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import tempfile  # noqa: E402
from pathlib import Path  # noqa: E402


from .container import (CODED_SECTIONS, GIFS_MAGIC, GIFU_MAGIC, Bitstream, decode_gop,  # noqa: E402
                        encode_gop, export_ply, read_model, size_breakdown, write_model)
from .deform import decode_frame  # noqa: E402
from .errors import GifstreamError  # noqa: E402
from .model import GopConfig, generate_synthetic  # noqa: E402
from .rans import CodedPlane  # noqa: E402


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_atomic(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc


class DataError(Exception):
    pass


def _check_out_dir(path):
    parent = Path(path).parent
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")


def _emit(args, report: dict, lines):
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        for line in lines:
            print(line)


# --- commands -----------------------------------------------------------------

def cmd_synth(args):
    if args.anchors < 1 or args.frames < 1 or args.channels < 1 or args.stream_channels < 1 \
            or args.primitives < 1:
        raise UsageError("--anchors, --frames, --channels, --stream-channels, --primitives must be >= 1")
    if not 0.0 <= args.sparsity <= 1.0:
        raise UsageError("--sparsity must be in [0, 1]")
    _check_out_dir(args.out)
    cfg = GopConfig(args.anchors, K=args.primitives, C=args.channels, P=args.stream_channels,
                    N=args.frames)
    model = generate_synthetic(args.seed, cfg, args.sparsity)
    _write_atomic(args.out, write_model(model))
    n_streams = int(model.present.sum())
    report = {"anchors": cfg.n_anchors, "streams": n_streams, "K": cfg.K, "C": cfg.C,
              "P": cfg.P, "N": cfg.N, "primitives": cfg.n_anchors * cfg.K, "out": str(args.out)}
    _emit(args, report, [f"wrote {args.out}: {cfg.n_anchors} anchors, {n_streams} streams "
                         f"({n_streams / cfg.n_anchors:.1%}), K={cfg.K} C={cfg.C} P={cfg.P} N={cfg.N}"])


def _breakdown_lines(sb, n_anchors, N):
    lines = [f"{'section':<12}{'bytes':>12}"]
    lines += [f"{name:<12}{size:>12}" for name, size in sb.sections.items()]
    lines.append(f"{'header':<12}{sb.header:>12}")
    lines.append(f"{'total':<12}{sb.total:>12}")
    lines.append("")
    lines.append(f"{'category':<26}{'MB':>10}")
    lines += [f"{cat:<26}{size / 1e6:>10.4f}" for cat, size in sb.categories.items()]
    lines.append(f"bits per anchor per frame: {8 * sb.total / (n_anchors * N):.3f}")
    return lines


def cmd_encode(args):
    model = read_model(_read(args.inp))
    _check_out_dir(args.out)
    bs = encode_gop(model, seed=args.seed)
    data = bs.to_bytes()
    _write_atomic(args.out, data)
    sb = size_breakdown(bs)
    report = sb.as_flat_dict()
    lines = _breakdown_lines(sb, model.config.n_anchors, model.config.N)
    lines.append("")
    lines.append(f"{'coded section':<12}{'estimate B':>14}{'payload B':>12}{'ratio':>8}")
    est_total = pay_total = 0.0
    for name in CODED_SECTIONS:
        est = bs.estimates[name] / 8
        payload = len(CodedPlane.from_bytes(bs.sections[name]).payload)
        est_total += est
        pay_total += payload
        ratio = est / payload if payload else 1.0
        report[f"estimate_{name}"] = est
        report[f"payload_{name}"] = payload
        lines.append(f"{name:<12}{est:>14.1f}{payload:>12}{ratio:>8.4f}")
    report["estimate_bytes"] = est_total
    report["payload_bytes"] = pay_total
    report["estimate_ratio"] = est_total / pay_total if pay_total else 1.0
    lines.append(f"{'all coded':<12}{est_total:>14.1f}{int(pay_total):>12}{report['estimate_ratio']:>8.4f}")
    _emit(args, report, lines)


def cmd_decode(args):
    data = _read(args.inp)
    _check_out_dir(args.out)
    timing = {}
    model = decode_gop(data, report=timing)
    _write_atomic(args.out, write_model(model))
    report = {"anchors": model.config.n_anchors, "streams": int(model.present.sum()),
              "prediction_s": timing["prediction_s"], "entropy_decode_s": timing["entropy_decode_s"],
              "total_s": timing["total_s"]}
    _emit(args, report, [f"wrote {args.out}",
                         f"distribution prediction: {timing['prediction_s']:.3f} s",
                         f"entropy decoding:        {timing['entropy_decode_s']:.3f} s",
                         f"total decode:            {timing['total_s']:.3f} s"])


def _load_any(data):
    if data[:4] == GIFS_MAGIC:
        return decode_gop(data)
    if data[:4] == GIFU_MAGIC:
        return read_model(data)
    raise DataError("input is neither a GIFS bitstream nor a GIFU model")


def cmd_expand(args):
    data = _read(args.inp)
    model = _load_any(data)
    N = model.config.N
    if not 0 <= args.time_index < N:
        raise UsageError(f"--time-index {args.time_index} outside [0, {N - 1}]")
    _check_out_dir(args.out)
    frame = decode_frame(model, args.time_index)
    _write_atomic(args.out, export_ply(frame))
    report = {"vertices": len(frame), "time_index": args.time_index, "t": frame.t}
    _emit(args, report, [f"wrote {args.out}: {len(frame)} primitives at frame {args.time_index} "
                         f"(t = {frame.t:.4f})"])


def cmd_stats(args):
    data = _read(args.inp)
    bs = Bitstream.from_bytes(data)
    cfg = bs.header.config
    sb = size_breakdown(bs)
    report = sb.as_flat_dict()
    report["bits_per_anchor_per_frame"] = 8 * sb.total / (cfg.n_anchors * cfg.N)
    report.update({"anchors": cfg.n_anchors, "frames": cfg.N})
    _emit(args, report, _breakdown_lines(sb, cfg.n_anchors, cfg.N))


def build_parser():
    p = _Parser(prog="gifstream", description="Compact 4D Gaussian GOP codec tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic GIFU model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--anchors", type=int, default=1000)
    s.add_argument("--frames", type=int, default=65)
    s.add_argument("--channels", type=int, default=24, help="feature channels C")
    s.add_argument("--stream-channels", type=int, default=4, help="stream channels P")
    s.add_argument("--primitives", type=int, default=5, help="primitives per anchor K")
    s.add_argument("--sparsity", type=float, default=0.3, help="fraction of anchors with a stream")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("encode", help="GIFU model -> GIFS bitstream")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="GIFS bitstream -> quantized GIFU model")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    x = sub.add_parser("expand", help="decode one frame to PLY")
    x.add_argument("--in", dest="inp", required=True)
    x.add_argument("--time-index", type=int, required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_expand)

    st = sub.add_parser("stats", help="size breakdown of a GIFS bitstream")
    st.add_argument("--in", dest="inp", required=True)
    st.set_defaults(func=cmd_stats)

    for sp in (s, e, d, x, st):
        sp.add_argument("--json", action="store_true", help="print a flat JSON object")
    return p


def main(argv=None):
    if THREADS:
        import numba
        numba.set_num_threads(min(THREADS, numba.config.NUMBA_NUM_THREADS))
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"gifstream: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, GifstreamError, ValueError) as exc:
        print(f"gifstream: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

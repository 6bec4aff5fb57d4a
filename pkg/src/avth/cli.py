"""Command-line entry point: ``avth {encode,decode,metrics,bdrate,sweep}``.

Exit codes: 0 success, 1 user error (bad input, bad config), 2 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import basecodec, container, evaluate, media
from .audio import AudioError
from .config import Config, ConfigError, load_config
from .expgolomb import BitstreamError
from .motion import MotionError
from .nets import ShapeError

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, media.MediaError, container.ContainerError, basecodec.CodecError, BitstreamError,
               AudioError, evaluate.EvalError, MotionError, ShapeError, FileNotFoundError, IsADirectoryError,
               PermissionError)


class UserError(Exception):
    pass


def _add_config_args(p: argparse.ArgumentParser, codec: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="seed for all toy networks")
    if codec:
        p.add_argument("--gop", type=int, dest="gop_size", help="GOP size N (default 30)")
        p.add_argument("--key-qp", type=int, dest="keyframe_qp", help="keyframe QP (default 30)")
        p.add_argument("--aux-qp", type=int, dest="aux_qp", help="auxiliary-frame QP (default 40)")
        p.add_argument("--factor", type=int, dest="downsample_factor", help="auxiliary downsample factor (default 4)")


def _config(args) -> Config:
    keys = ("seed", "gop_size", "keyframe_qp", "aux_qp", "downsample_factor")
    return load_config(args.config, {k: getattr(args, k, None) for k in keys})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avth", description="Audio-visual talking-head codec")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode a Y4M video and WAV audio into an .avth stream")
    p.add_argument("video")
    p.add_argument("audio", nargs="?")
    p.add_argument("output")
    _add_config_args(p)

    p = sub.add_parser("decode", help="decode an .avth stream to Y4M")
    p.add_argument("stream")
    p.add_argument("output")
    p.add_argument("--dump-tr", metavar="Y4M", help="also write the Stage I (TR) frames of all targets")
    p.add_argument("--lipsync-weights", metavar="PT", help="Stage II weights saved with torch.save")
    _add_config_args(p, codec=False)

    p = sub.add_parser("metrics", help="PSNR/SSIM of a decoded Y4M against a reference")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--csv", help="write per-frame rows here")

    p = sub.add_parser("bdrate", help="BD-rate between two curve CSVs (setting,bitrate_kbps,metric)")
    p.add_argument("anchor")
    p.add_argument("test")
    p.add_argument("--lower-is-better", action="store_true", help="metric is a distance (e.g. LPIPS, FID)")

    p = sub.add_parser("sweep", help="encode+decode per GOP size or keyframe QP and write RD rows")
    p.add_argument("video")
    p.add_argument("audio", nargs="?")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--gops", help="comma-separated GOP sizes, e.g. 15,30,45,60")
    group.add_argument("--qps", help="comma-separated keyframe QPs")
    p.add_argument("--out", required=True, help="CSV path")
    _add_config_args(p)
    return parser


def _int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UserError(f"{flag}: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UserError(f"{flag}: empty list")
    return values


def _read_audio(path) -> media.AudioClip:
    if path is None or not Path(path).is_file():
        raise UserError(f"audio required: {'no WAV file given' if path is None else f'{path} not found'}")
    return media.read_wav(path)


def cmd_encode(args) -> int:
    from .pipeline import encode_stream

    cfg = _config(args)
    seq = media.read_y4m(args.video)
    clip = _read_audio(args.audio)
    data = encode_stream(seq, clip, cfg)
    Path(args.output).write_bytes(data)
    stream = container.demux(data)
    r = container.bitrate_report(stream)
    print(f"{args.output}: {len(seq)} frames, {stream.meta.gop_count} GOPs of {cfg.gop_size}, {r.total_bytes} bytes")
    print(f"video {r.kbps_video:.2f} kbps, total {r.kbps_total:.2f} kbps (audio {r.kbps_audio:.2f} kbps), seed {cfg.seed}")
    return EXIT_OK


def _seeded(seq: media.FrameSequence, seed: int) -> media.FrameSequence:
    params = tuple(p for p in seq.y4m_params if not p.startswith("XAVTH_SEED=")) + (f"XAVTH_SEED={seed}",)
    return media.FrameSequence(seq.frames, seq.fps, params)


def cmd_decode(args) -> int:
    from .pipeline import DecoderNets, decode_stream, load_lipsync_weights

    cfg = _config(args)
    data = Path(args.stream).read_bytes()
    meta = container.demux(data).meta
    nets = DecoderNets.build(cfg, meta.width, meta.height)
    if args.lipsync_weights:
        load_lipsync_weights(nets, args.lipsync_weights)
    res = decode_stream(data, cfg, nets)
    media.write_y4m(args.output, _seeded(res.frames, cfg.seed))
    print(f"{args.output}: {len(res.frames)} frames ({len(res.keyframes)} keyframes)")
    if args.dump_tr:
        if not res.tr_frames:
            raise UserError("--dump-tr: stream has no target frames")
        media.write_y4m(args.dump_tr, _seeded(media.FrameSequence(res.tr_frames, meta.fps), cfg.seed))
        print(f"{args.dump_tr}: {len(res.tr_frames)} TR frames")
    return EXIT_OK


def cmd_metrics(args) -> int:
    ref, test = media.read_y4m(args.reference), media.read_y4m(args.test)
    if len(ref) != len(test):
        raise UserError(f"frame counts differ: {len(ref)} vs {len(test)}")
    rows = [(i, evaluate.capped(evaluate.psnr(a, b)), evaluate.ssim(a, b)) for i, (a, b) in enumerate(zip(ref, test))]
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("frame,psnr,ssim\n")
            fh.writelines(f"{i},{p:.6f},{s:.6f}\n" for i, p, s in rows)
    psnr = sum(r[1] for r in rows) / len(rows)
    ssim = sum(r[2] for r in rows) / len(rows)
    print(f"PSNR {psnr:.4f} dB  SSIM {ssim:.6f}  ({len(rows)} frames)")
    return EXIT_OK


def _single_curve(path) -> list:
    curves = evaluate.read_curve_csv(path)
    if len(curves) != 1:
        raise UserError(f"{path}: expected one curve, found {sorted(curves)}")
    return next(iter(curves.values()))


def cmd_bdrate(args) -> int:
    value = evaluate.bd_rate(_single_curve(args.anchor), _single_curve(args.test), args.lower_is_better)
    print(f"BD-rate: {value:.1f}%")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    seq = media.read_y4m(args.video)
    clip = _read_audio(args.audio)
    if args.qps:
        rows = evaluate.rd_sweep(seq, clip, cfg, qps=_int_list(args.qps, "--qps"))
    else:
        rows = evaluate.rd_sweep(seq, clip, cfg, gops=_int_list(args.gops or "15,30,45,60", "--gops"))
    Path(args.out).write_text(evaluate.format_sweep_csv(rows, cfg.seed), encoding="utf-8")
    for r in rows:
        print(f"{r.setting}: video {r.kbps_video:.2f} kbps, total {r.kbps_total:.2f} kbps, "
              f"PSNR {r.psnr:.3f} dB, SSIM {r.ssim:.4f}, sync {r.sync_confidence:.4f}")
    return EXIT_OK


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "metrics": cmd_metrics, "bdrate": cmd_bdrate,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are user errors here
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UserError, *USER_ERRORS) as exc:
        print(f"avth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("avth").debug("internal error", exc_info=True)
        print(f"avth {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

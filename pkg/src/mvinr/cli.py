"""Command line front end: ``mvinr encode | decode | eval | rdplot``.

Exit codes: 0 success, 2 usage, 3 missing file, 4 malformed bitstream,
5 manifest mismatch, 6 bad configuration, 7 BD-rate not computable.
The ``MVINR_DEVICE`` environment variable selects the compute device.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch

from .bitstream import BitstreamError, read_bitstream, write_bitstream
from .config import CodecConfig, ConfigError
from .data_io import (DecodeError, MultiViewVideo, RawSequenceSpec, SequenceManifest,
                      SequenceSpecError, load_depth16, load_sequence, load_yuv420,
                      video_to_raw, write_atomic, yuv_to_rgb)
from .metrics import BDRateError, RDCurve, bd_rate, depth_psnr, rgbd_psnr, yuv_psnr
from .training import encode_video

log = logging.getLogger("mvinr")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_BITSTREAM = 4
EXIT_MISMATCH = 5
EXIT_CONFIG = 6
EXIT_BDRATE = 7

DEVICE_ENV = "MVINR_DEVICE"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def resolve_device() -> torch.device:
    """Device named by ``MVINR_DEVICE`` (default cpu); only cpu is supported."""
    name = os.environ.get(DEVICE_ENV, "cpu").strip() or "cpu"
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise CliError(f"{DEVICE_ENV}={name!r}: {exc}", EXIT_CONFIG) from None
    if device.type != "cpu":
        raise CliError(f"{DEVICE_ENV}={name!r}: only the cpu device is supported", EXIT_CONFIG)
    return device


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}", EXIT_MISSING)
    return path


def _load_manifest(path) -> SequenceManifest:
    manifest = SequenceManifest.load(_require(Path(path), "manifest"))
    for v in manifest.views:
        _require(v.texture, "texture file")
        _require(v.depth, "depth file")
    return manifest


def _load_config(path, seed, lmbdas) -> CodecConfig:
    cfg = CodecConfig.load(_require(Path(path), "config")) if path else CodecConfig()
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if lmbdas:
        overrides["lmbdas"] = tuple(lmbdas)
        if cfg.train.width_multipliers and len(cfg.train.width_multipliers) != len(lmbdas):
            overrides["width_multipliers"] = ()
    if overrides:
        cfg.train = cfg.train.replace(**overrides)
    return cfg


def _stream_name(lmbda: float) -> str:
    return f"lambda_{lmbda:g}.mvin"


# --------------------------------------------------------------------------
# encode
# --------------------------------------------------------------------------

def cmd_encode(args) -> int:
    manifest = _load_manifest(args.manifest)
    cfg = _load_config(args.config, args.seed, args.lmbda)
    video = load_sequence(manifest)
    spec = manifest.spec
    model_config = cfg.model_config(spec.view_count, spec.frame_count, spec.height, spec.width)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    side_info = {"name": manifest.name, "bit_depth": spec.bit_depth,
                 "depth_bit_depth": spec.depth_bit_depth}
    for point in encode_video(video, model_config, cfg.train, side_info=side_info):
        name = _stream_name(point.lmbda)
        write_bitstream(out / name, point.encoded)
        write_atomic(out / (name + ".report.jsonl"), point.report.to_jsonl().encode())
        print(f"{name}: {len(point.encoded.data)} bytes, {point.report.psnr:.2f} dB RGBD PSNR")
    return EXIT_OK


# --------------------------------------------------------------------------
# decode
# --------------------------------------------------------------------------

def _view_paths(out: Path, k: int) -> tuple[Path, Path]:
    return out / f"view{k}_texture.yuv", out / f"view{k}_depth.raw"


def cmd_decode(args) -> int:
    path = _require(Path(args.bitstream), "bitstream")
    decoded = read_bitstream(path)
    rec = decoded.model.reconstruct().numpy()
    bit_depth = int(decoded.side_info.get("bit_depth", 8))
    depth_bits = int(decoded.side_info.get("depth_bit_depth", 16))
    video = MultiViewVideo(rec, decoded.depth_range)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, (texture, depth) in enumerate(video_to_raw(video, bit_depth, depth_bits)):
        tex_path, depth_path = _view_paths(out, k)
        write_atomic(tex_path, texture)
        write_atomic(depth_path, depth)
    info = {"bitstream": str(path.resolve()), "bits": 8 * path.stat().st_size,
            "lmbda": decoded.side_info.get("lmbda"), "views": video.view_count,
            "bit_depth": bit_depth, "depth_bit_depth": depth_bits,
            "depth_range": list(decoded.depth_range)}
    write_atomic(out / "decode.json", (json.dumps(info, indent=2) + "\n").encode())
    print(f"decoded {video.view_count} views x {video.frame_count} frames into {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def _finite(x: float):
    return x if math.isfinite(x) else None


def evaluate_reconstruction(manifest: SequenceManifest, recon_dir: Path, bits: int) -> list[dict]:
    """Metric records per view plus one overall record."""
    spec = manifest.spec
    info_path = recon_dir / "decode.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    n_views = info.get("views", spec.view_count)
    if n_views != spec.view_count:
        raise CliError(f"reconstruction has {n_views} views, manifest has {spec.view_count}",
                       EXIT_MISMATCH)
    if info.get("bit_depth", spec.bit_depth) != spec.bit_depth:
        raise CliError(f"reconstruction is {info['bit_depth']}-bit, manifest is "
                       f"{spec.bit_depth}-bit", EXIT_MISMATCH)
    ref_video = load_sequence(manifest)
    records, rgbd_ref, rgbd_rec = [], [], []
    pixels = spec.view_count * spec.frame_count * spec.height * spec.width
    for k, view in enumerate(manifest.views):
        tex_path, depth_path = _view_paths(recon_dir, k)
        _require(tex_path, "reconstructed texture")
        _require(depth_path, "reconstructed depth")
        rec_spec = RawSequenceSpec(spec.width, spec.height, spec.frame_count,
                                   bit_depth=spec.bit_depth)
        try:
            ref_tex = load_yuv420(view.texture, spec, skip=spec.start_frame)
            rec_tex = load_yuv420(tex_path, rec_spec)
            ref_depth = load_depth16(view.depth, spec, skip=spec.start_frame)
            rec_depth = load_depth16(depth_path, rec_spec)
        except DecodeError as exc:
            raise CliError(f"view {k}: {exc}", EXIT_MISMATCH) from None
        if tex_path.stat().st_size != spec.frame_count * rec_spec.frame_bytes:
            raise CliError(f"view {k}: reconstruction length does not match the manifest",
                           EXIT_MISMATCH)
        yuv = yuv_psnr(ref_tex, rec_tex)
        dp = depth_psnr(ref_depth, rec_depth, spec.depth_bit_depth)
        rec_rgbd = _raw_to_rgbd(rec_tex, rec_depth, ref_video.depth_range)
        rgbd_ref.append(ref_video.samples[k])
        rgbd_rec.append(rec_rgbd)
        records.append({"view": k, **{f"psnr_{p}": _finite(v) for p, v in yuv.items()},
                        "psnr_depth": _finite(dp),
                        "psnr_rgbd": _finite(rgbd_psnr(ref_video.samples[k], rec_rgbd))})
    overall = {"view": "all", "bits": bits, "bpp": bits / pixels}
    for key in ("psnr_y", "psnr_u", "psnr_v", "psnr_yuv", "psnr_depth"):
        vals = [r[key] for r in records]
        overall[key] = None if None in vals else float(np.mean(vals))
    overall["psnr_rgbd"] = _finite(rgbd_psnr(np.stack(rgbd_ref), np.stack(rgbd_rec)))
    records.append(overall)
    return records


def _raw_to_rgbd(frames, depth, depth_range) -> np.ndarray:
    lo, hi = depth_range
    rgb = np.stack([yuv_to_rgb(f) for f in frames])
    d = (depth.astype(np.float64) - lo) / (hi - lo) if hi > lo else np.zeros(depth.shape)
    return np.concatenate([rgb, d[..., None]], axis=-1).astype(np.float32)


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.manifest)
    recon = _require(Path(args.recon_dir), "reconstruction directory")
    info_path = recon / "decode.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    stream = args.bitstream or info.get("bitstream")
    if stream is None:
        raise CliError("no bitstream given and no decode.json in the reconstruction directory",
                       EXIT_MISSING)
    bits = 8 * _require(Path(stream), "bitstream").stat().st_size
    records = evaluate_reconstruction(manifest, recon, bits)
    label = args.label or manifest.name
    lines = [json.dumps({"label": label, "lmbda": info.get("lmbda"),
                         "bitstream": str(stream), **r}) for r in records]
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "a") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# rdplot
# --------------------------------------------------------------------------

def load_curves(paths, quality_key: str = "psnr_yuv") -> dict[str, RDCurve]:
    points = defaultdict(list)
    for path in paths:
        for line in _require(Path(path), "metrics file").read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("view") != "all" or rec.get(quality_key) is None:
                continue
            points[rec["label"]].append((rec["bpp"], rec[quality_key]))
    curves = {}
    for label, pts in points.items():
        pts = sorted(set(pts))
        curves[label] = RDCurve.from_arrays([p[0] for p in pts], [p[1] for p in pts], label)
    return curves


def bd_table(curves: dict[str, RDCurve], anchor: str | None = None) -> list[dict]:
    if not curves:
        raise CliError("no overall metric records found", EXIT_BDRATE)
    labels = list(curves)
    anchor = anchor or labels[0]
    if anchor not in curves:
        raise CliError(f"anchor {anchor!r} not among {labels}", EXIT_USAGE)
    rows = []
    for label in labels:
        if label == anchor:
            continue
        try:
            value = bd_rate(curves[anchor], curves[label])
        except BDRateError as exc:
            raise CliError(str(exc), EXIT_BDRATE) from None
        rows.append({"anchor": anchor, "test": label, "bd_rate_percent": value})
    return rows


def cmd_rdplot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = load_curves(args.metrics, args.quality)
    rows = bd_table(curves, args.anchor)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        ax.plot(curve.rates, curve.qualities, marker="o", label=label)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel(f"{args.quality} (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "rd_curve.png", dpi=120)
    plt.close(fig)
    table = ["anchor\ttest\tbd_rate_percent"]
    table += [f"{r['anchor']}\t{r['test']}\t{r['bd_rate_percent']:.2f}" for r in rows]
    write_atomic(out / "bd_rate.tsv", ("\n".join(table) + "\n").encode())
    print("\n".join(table))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvinr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="train and write one bitstream per lambda")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--lmbda", type=float, nargs="+", help="rate-distortion trade-offs")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct raw YUV and depth files")
    p.add_argument("bitstream")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="compare a reconstruction against the source")
    p.add_argument("--manifest", required=True)
    p.add_argument("--recon-dir", required=True)
    p.add_argument("--bitstream")
    p.add_argument("--label")
    p.add_argument("--output", help="append JSON lines to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rdplot", help="plot RD curves and tabulate BD-rate")
    p.add_argument("metrics", nargs="+", help="JSON-lines files written by eval")
    p.add_argument("--anchor")
    p.add_argument("--quality", default="psnr_yuv")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_rdplot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolve_device()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except BitstreamError as exc:
        print(f"error: malformed bitstream: {exc}", file=sys.stderr)
        return EXIT_BITSTREAM
    except (SequenceSpecError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ConfigError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

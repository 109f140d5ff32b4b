"""Command-line surface: encode, decode, eval, bench, genscene.

Exit codes:
    0  success
    2  usage error (argparse)
    3  file not found / unreadable input
    4  corrupt stream
    5  header or dimension mismatch
    6  missing or unknown weights
    7  other codec error

Outputs are deterministic given inputs, flags, and seed; timings are printed
to stderr so stdout stays reproducible.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import codec, geometry, metrics, predictor, scenes
from .errors import (
    CorruptStream,
    DimensionMismatch,
    HeaderMismatch,
    MissingPreviousFrame,
    RimcodecError,
    UnknownWeights,
    WeightShapeMismatch,
)

_PREDICTORS = {
    "previous-valid": predictor.PredictorKind.PREVIOUS_VALID,
    "linear": predictor.PredictorKind.LINEAR,
    "anchor-intra": predictor.PredictorKind.ANCHOR_INTRA,
    "anchor-temporal": predictor.PredictorKind.ANCHOR_TEMPORAL,
}


def _parse_block(text: str) -> codec.BlockLayout:
    if text == "whole":
        return codec.BlockLayout.whole_image()
    try:
        h, w = text.lower().split("x")
        return codec.BlockLayout(int(h), int(w))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"block must look like 16x50, got {text!r}") from e


def _load_inputs(path: Path):
    """A .rimg file or a directory of them (sorted) -> list of RangeImage."""
    if path.is_dir():
        files = sorted(path.glob("*.rimg"))
        if not files:
            raise FileNotFoundError(f"no .rimg files in {path}")
        return [geometry.read_range_image(f) for f in files]
    return [geometry.read_range_image(path)]


def _load_bundle_arg(args):
    if args.weights is None:
        return None
    return predictor.read_bundle(args.weights)


def cmd_encode(args) -> int:
    frames = _load_inputs(Path(args.input))
    calib, tracks = geometry.read_sidecar(args.calib)
    if len(tracks) < len(frames):
        raise HeaderMismatch(f"{len(frames)} frames but only {len(tracks)} pose tracks")
    kind = _PREDICTORS[args.predictor]
    bundle = _load_bundle_arg(args)
    if kind.needs_weights and bundle is None:
        raise UnknownWeights("--weights is required for anchor predictors")
    qspec = geometry.QuantizationSpec(args.precision)
    t0 = time.perf_counter()
    if args.temporal or kind == predictor.PredictorKind.ANCHOR_TEMPORAL:
        coded = codec.encode_sequence(
            frames, calib, tracks[: len(frames)], qspec, kind,
            args.block, bundle, workers=args.workers,
        )
    else:
        coded = [
            codec.encode_frame(f, calib, tr, qspec, kind, args.block, None, bundle, args.workers)
            for f, tr in zip(frames, tracks)
        ]
    codec.write_frames(args.output, coded)
    dt = time.perf_counter() - t0
    for n, cf in enumerate(coded):
        print(f"frame {n}: bpp {codec.bpp(cf):.4f}")
    print(f"wrote {args.output} ({len(coded)} frame(s))")
    print(f"encode time: {dt:.3f}s", file=sys.stderr)
    return 0


def cmd_decode(args) -> int:
    coded = codec.read_frames(args.input)
    calib, tracks = geometry.read_sidecar(args.calib)
    if len(tracks) < len(coded):
        raise HeaderMismatch(f"{len(coded)} frames but only {len(tracks)} pose tracks")
    registry = {}
    if args.weights_dir:
        for f in sorted(Path(args.weights_dir).glob("*.rwgt")):
            b = predictor.read_bundle(f)
            registry[predictor.bundle_digest(b)] = b
    t0 = time.perf_counter()
    images = codec.decode_sequence(coded, calib, tracks[: len(coded)], registry, args.workers)
    dt = time.perf_counter() - t0
    out = Path(args.output)
    if len(images) == 1 and not out.is_dir():
        geometry.write_range_image(out, images[0])
        print(f"wrote {out}")
    else:
        out.mkdir(parents=True, exist_ok=True)
        for n, img in enumerate(images):
            geometry.write_range_image(out / f"frame_{n:03d}.rimg", img)
        print(f"wrote {len(images)} frame(s) to {out}")
    print(f"decode time: {dt:.3f}s", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    orig = geometry.read_range_image(args.original)
    recon = geometry.read_range_image(args.reconstructed)
    _, tracks = geometry.read_sidecar(args.poses)
    calib, _ = geometry.read_sidecar(args.calib)
    track = tracks[args.frame]
    p = geometry.image_to_point_cloud(orig, calib, track)
    q = geometry.image_to_point_cloud(recon, calib, track)
    report = metrics.MetricReport(
        cd_sym=metrics.chamfer_sym(p, q),
        psnr_db=metrics.psnr(p, q),
    )
    if recon.precision > 0:
        report.accuracy_at[recon.precision] = metrics.prediction_accuracy(
            recon, geometry.quantize(orig, geometry.QuantizationSpec(recon.precision)), recon.precision
        )
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return 0


def cmd_genscene(args) -> int:
    spec = scenes.SceneSpec(
        kind=args.kind,
        seed=args.seed,
        height=args.height,
        width=args.width,
        roughness=args.roughness,
    )
    calib, frames, tracks = scenes.generate(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for n, img in enumerate(frames):
        geometry.write_range_image(out / f"frame_{n:03d}.rimg", img)
    geometry.write_sidecar(out / "sidecar.json", calib, tracks)
    print(f"wrote {len(frames)} frame(s) and sidecar.json to {out}")
    return 0


def cmd_bench(args) -> int:
    if args.corpus:
        frames = _load_inputs(Path(args.corpus))
        calib, tracks = geometry.read_sidecar(Path(args.corpus) / "sidecar.json")
    else:
        spec = scenes.SceneSpec(
            kind=args.scene, seed=args.seed, height=args.height, width=args.width,
            roughness=args.roughness,
        )
        calib, frames, tracks = scenes.generate(spec)
    bundle = _load_bundle_arg(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    precisions = sorted(float(p) for p in args.precisions.split(","))
    kinds = [k.strip() for k in args.predictors.split(",")]
    rows = []
    for prec in precisions:
        qspec = geometry.QuantizationSpec(prec)
        for kname in kinds:
            kind = _PREDICTORS[kname]
            if kind.needs_weights and bundle is None:
                raise UnknownWeights(f"--weights is required for predictor {kname}")
            coded = codec.encode_sequence(
                frames, calib, tracks, qspec, kind, args.block, bundle, workers=args.workers
            )
            total_bits = sum(len(cf.to_bytes()) * 8 for cf in coded)
            total_pts = sum(f.valid_count for f in frames)
            hist = {}
            for img, track in zip(frames, tracks):
                _, residuals = codec.frame_residuals(
                    img, calib, track, qspec, kind, args.block, bundle, None, args.workers
                )
                deltas = np.concatenate(residuals) if residuals else np.zeros(0, dtype=np.int64)
                values, counts = np.unique(deltas, return_counts=True)
                for v, c in zip(values, counts):
                    hist[int(v)] = hist.get(int(v), 0) + int(c)
            accuracy = hist.get(0, 0) / max(total_pts, 1)
            pclouds = [
                geometry.image_to_point_cloud(img, calib, track)
                for img, track in zip(frames, tracks)
            ]
            decoded = codec.decode_sequence(
                coded, calib, tracks,
                {predictor.bundle_digest(bundle): bundle} if bundle else None, args.workers
            )
            qclouds = [
                geometry.image_to_point_cloud(img, calib, track)
                for img, track in zip(decoded, tracks)
            ]
            cd = max(metrics.chamfer_sym(p, q) for p, q in zip(pclouds, qclouds))
            ps = min(metrics.psnr(p, q) for p, q in zip(pclouds, qclouds))
            rows.append((prec, kname, total_bits / total_pts, cd, ps, accuracy))
            hist_path = out / f"hist_{kname}_{prec:g}.tsv"
            with open(hist_path, "w") as f:
                f.write("delta\tcount\n")
                for v in sorted(hist):
                    f.write(f"{v}\t{hist[v]}\n")
    table = out / "rd_table.tsv"
    with open(table, "w") as f:
        f.write("precision\tpredictor\tbpp\tcd_sym\tpsnr_db\taccuracy\n")
        for prec, kname, b, cd, ps, acc in rows:
            f.write(f"{prec:g}\t{kname}\t{b:.6f}\t{cd:.6g}\t{ps:.6g}\t{acc:.6f}\n")
    print(table.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rimcodec",
        description="Lossless-after-quantization compression for lidar range images.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="compress range image(s) to a container file")
    enc.add_argument("input", help=".rimg file or directory of frames")
    enc.add_argument("calib", help="calibration/pose sidecar (JSON)")
    enc.add_argument("-o", "--output", required=True)
    enc.add_argument("--precision", type=float, default=0.1)
    enc.add_argument("--predictor", choices=sorted(_PREDICTORS), default="linear")
    enc.add_argument("--weights", help="RWGT weight bundle for anchor predictors")
    enc.add_argument("--block", type=_parse_block, default=codec.BlockLayout())
    enc.add_argument("--temporal", action="store_true",
                     help="treat the input as a time-ordered sequence")
    enc.add_argument("--workers", type=int, default=1)
    enc.set_defaults(func=cmd_encode)

    dec = sub.add_parser("decode", help="reconstruct range image(s) from a container file")
    dec.add_argument("input")
    dec.add_argument("calib")
    dec.add_argument("--weights-dir", help="directory of RWGT bundles, looked up by digest")
    dec.add_argument("-o", "--output", required=True)
    dec.add_argument("--workers", type=int, default=1)
    dec.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="distortion metrics between two range images")
    ev.add_argument("original")
    ev.add_argument("reconstructed")
    ev.add_argument("poses", help="sidecar holding the pose tracks")
    ev.add_argument("calib", help="sidecar holding the calibration")
    ev.add_argument("--frame", type=int, default=0, help="pose track index to use")
    ev.add_argument("-o", "--output", help="write the JSON report here too")
    ev.set_defaults(func=cmd_eval)

    gen = sub.add_parser("genscene", help="generate a synthetic test scene")
    gen.add_argument("--kind", choices=scenes.SCENE_KINDS, default="planes")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--width", type=int, default=2650)
    gen.add_argument("--roughness", type=float, default=0.02)
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=cmd_genscene)

    bench = sub.add_parser("bench", help="rate-distortion table over a precision/predictor grid")
    src = bench.add_mutually_exclusive_group()
    src.add_argument("--scene", choices=scenes.SCENE_KINDS, default="boxes-on-ground")
    src.add_argument("--corpus", help="directory of .rimg frames with sidecar.json")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--height", type=int, default=32)
    bench.add_argument("--width", type=int, default=256)
    bench.add_argument("--roughness", type=float, default=0.02)
    bench.add_argument("--precisions", default="0.02,0.1,0.2")
    bench.add_argument("--predictors", default="previous-valid,linear")
    bench.add_argument("--weights")
    bench.add_argument("--block", type=_parse_block, default=codec.BlockLayout())
    bench.add_argument("--workers", type=int, default=1)
    bench.add_argument("-o", "--output", required=True)
    bench.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except CorruptStream as e:
        print(f"error: corrupt stream: {e}", file=sys.stderr)
        return 4
    except (HeaderMismatch, DimensionMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except (UnknownWeights, WeightShapeMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return 6
    except (RimcodecError, ValueError, MissingPreviousFrame) as e:
        print(f"error: {e}", file=sys.stderr)
        return 7


if __name__ == "__main__":
    sys.exit(main())

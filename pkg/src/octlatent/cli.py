"""Command line interface.

Exit codes: 0 success, 2 invalid input/configuration, 3 corrupt or mismatched stream.
"""

from __future__ import annotations

import argparse
import csv
import glob
import logging
import os
import sys

import numpy as np

from . import metrics
from .errors import CorruptStreamError, ValidationError
from .model import ModelConfig
from .pcio import load_points, save_ply
from .pipeline import (
    CompressedFrame,
    bit_breakdown,
    compress,
    decompress,
    latent_share,
    load_model,
    save_model,
)
from .tensor.params import CheckpointError
from .train import TrainConfig, train

EXIT_OK, EXIT_INVALID, EXIT_CORRUPT = 0, 2, 3

_MODEL_KEYS = {"k", "D", "E", "hidden", "irn_count", "markov_order", "soft_ops", "clamp"}


def _value(text: str):
    t = text.strip().strip('"').strip("'")
    if t.lower() in ("true", "on", "yes"):
        return True
    if t.lower() in ("false", "off", "no"):
        return False
    if t.lower() in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    if "," in t:
        return [_value(p) for p in t.strip("()[]").split(",")]
    return t


def parse_config(path) -> tuple[ModelConfig, TrainConfig]:
    """``key = value`` lines, optional ``[model]`` / ``[train]`` sections, ``#`` comments."""
    model, trainer = {}, {}
    section = None
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in ("model", "train"):
                    raise ValidationError(f"{path}:{n}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{n}: expected 'key = value'")
            key, val = (p.strip() for p in line.split("=", 1))
            v = _value(val)
            if section == "model" or (section is None and key in _MODEL_KEYS):
                model[key] = v
            elif section == "train" or section is None:
                trainer[key] = v
            if section is None and key == "seed":
                model[key] = v
    try:
        return ModelConfig.desk(**model), TrainConfig.from_dict(trainer)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def _read_frame(path) -> CompressedFrame:
    with open(path, "rb") as fh:
        return CompressedFrame.from_bytes(fh.read())


def cmd_encode(a) -> None:
    model = load_model(a.model)
    cloud = load_points(a.input, a.format)
    frame = compress(cloud, model, a.depth)
    blob = frame.to_bytes()
    with open(a.output, "wb") as fh:
        fh.write(blob)
    print(f"{len(cloud)} points -> {len(blob)} bytes ({8 * len(blob) / max(len(cloud), 1):.4f} bpip)")


def cmd_decode(a) -> None:
    model = load_model(a.model)
    cloud = decompress(_read_frame(a.frame), model)
    save_ply(a.output, cloud.points)
    print(f"decoded {len(cloud)} points")


def _corpus_files(folder) -> list[str]:
    files = sorted(glob.glob(os.path.join(folder, "*.bin")) + glob.glob(os.path.join(folder, "*.ply")))
    if not files:
        raise ValidationError(f"no .bin or .ply files in {folder}")
    return files


def cmd_train(a) -> None:
    mcfg, tcfg = parse_config(a.config)
    clouds = [load_points(p) for p in _corpus_files(a.corpus)]
    model, state = train(clouds, mcfg, tcfg,
                         callback=lambda e: print(f"epoch {e['epoch']}: loss {e['loss']:.4f} "
                                                  f"bpop {e['bpop']:.4f} alpha {e['alpha']}"))
    save_model(a.out, model)
    print(f"saved {a.out} after {state.step} steps")


def _distortions(ref, rec, peak: float) -> tuple[float, float, float]:
    d1 = metrics.d1_psnr(ref, rec, peak)
    try:
        d2 = metrics.d2_psnr(ref, rec, peak)
    except ValidationError:
        d2 = float("nan")
    return d1, d2, metrics.chamfer(ref, rec)


def cmd_eval(a) -> None:
    rows = []
    with open(a.pairs, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 3:
                raise ValidationError(f"{a.pairs}:{n}: expected 'original reconstructed frame'")
            ref, rec = load_points(parts[0]), load_points(parts[1])
            size = os.path.getsize(parts[2])
            d1, d2, cd = _distortions(ref, rec, a.peak)
            rows.append([parts[2], metrics.bpip(size, len(ref)), d1, d2, cd])
    _write_csv(a.csv, ["frame", "bpip", "d1_db", "d2_db", "chamfer"], rows)


def cmd_rd_curve(a) -> None:
    rows = []
    with open(a.models, encoding="utf-8") as fh:
        entries = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    for parts in entries:
        if len(parts) != 2:
            raise ValidationError("models list lines must be 'checkpoint depth'")
        model, depth = load_model(parts[0]), int(parts[1])
        acc = []
        for path in a.inputs:
            cloud = load_points(path)
            blob = compress(cloud, model, depth).to_bytes()
            rec = decompress(CompressedFrame.from_bytes(blob), model)
            acc.append([metrics.bpip(blob, len(cloud)), *_distortions(cloud, rec, a.peak)])
        mean = np.mean(np.array(acc), axis=0)
        rows.append([parts[0], depth, *mean.tolist()])
    _write_csv(a.csv, ["model", "depth", "bpip", "d1_db", "d2_db", "chamfer"], rows)


def cmd_breakdown(a) -> None:
    frame = _read_frame(a.frame)
    rep = bit_breakdown(frame)
    total = rep.total
    print(f"header      {rep.header:10.0f} bits")
    print(f"top layers  {rep.top:10.0f} bits")
    for j, bits in enumerate(rep.residual):
        name = "root latent" if j == 0 else f"residual {j}"
        print(f"{name:<11} {bits:10.0f} bits")
    for j, bits in enumerate(rep.occupancy, 1):
        print(f"occupancy {j} {bits:10.0f} bits")
    print(f"total       {total:10.0f} bits, latent share {latent_share(rep):.2f}%")


def _write_csv(path, header, rows) -> None:
    def fmt(v):
        if isinstance(v, float):
            return "inf" if v == float("inf") else repr(v)
        return v

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    print(f"wrote {len(rows)} rows to {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octlatent", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("encode", help="compress a point cloud")
    s.add_argument("--input", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--depth", type=int, required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--format", choices=["kitti-bin", "ply-ascii"])
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="decompress a frame to PLY")
    s.add_argument("--frame", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("train", help="train a model on a folder of clouds")
    s.add_argument("--corpus", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-frame bpip, D1, D2 and chamfer")
    s.add_argument("--pairs", required=True, help="lines of 'original reconstructed frame'")
    s.add_argument("--csv", required=True)
    s.add_argument("--peak", type=float, default=1.0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rd-curve", help="rate-distortion points for several models")
    s.add_argument("--models", required=True, help="lines of 'checkpoint depth'")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--csv", required=True)
    s.add_argument("--peak", type=float, default=1.0)
    s.set_defaults(func=cmd_rd_curve)

    s = sub.add_parser("breakdown", help="per-segment bit usage of a frame")
    s.add_argument("--frame", required=True)
    s.set_defaults(func=cmd_breakdown)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except CorruptStreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (ValidationError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``mffaseg <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags, bad inputs), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import (DatasetManifest, ImageFormatError, VideoEntry, ensure_dir, load_dataset, read_pgm_mask,
                     read_ppm, save_manifest, write_pgm_mask, write_ppm)
from .metrics import EvalReport, evaluate_video
from .mffa import MFFAState
from .model import model_flops, predict_mask, to_input
from .synth import NoInstrument, synthesize_sequence
from .toydata import ToyConfig, gen_toy_dataset
from .train import Checkpoint, NonFiniteGradient, TrainConfig, train

log = logging.getLogger("mffaseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def cmd_gen_toydata(a) -> int:
    cfg = ToyConfig.from_json(json.dumps(_read_json(a.config))) if a.config else ToyConfig()
    manifest = gen_toy_dataset(cfg, a.seed, a.out)
    print(f"wrote {len(manifest.videos)} videos to {a.out}")
    return 0


def cmd_synth(a) -> int:
    frame = read_ppm(a.input)
    mask = read_pgm_mask(a.mask)
    if mask.shape != frame.shape[:2]:
        raise UsageError("frame and mask extents differ")
    seq = synthesize_sequence(frame, mask, a.n, np.random.default_rng(a.seed))
    out = ensure_dir(a.out)
    frames, masks = [], []
    for i in range(a.n):
        write_ppm(out / f"{i:05d}.ppm", seq.frames[i])
        write_pgm_mask(out / f"{i:05d}.pgm", seq.masks[i])
        frames.append(f"{i:05d}.ppm")
        masks.append(f"{i:05d}.pgm")
    entry = VideoEntry("synthetic", frames, list(range(a.n)), 0, masks)
    save_manifest(out, DatasetManifest(frame.shape[:2], [entry], 1))
    return 0


def cmd_train(a) -> int:
    cfg = TrainConfig.from_dict(_read_json(a.config))
    _, videos = load_dataset(a.data, cfg.train_folds)
    train(cfg, videos, out_dir=a.out)
    return 0


def cmd_eval(a) -> int:
    ck = Checkpoint.load(a.ckpt)
    _, videos = load_dataset(a.data, ck.config.eval_folds)
    report = EvalReport()
    for v in videos:
        report = report.merge(evaluate_video(ck.model, v, ck.config.sampling_stride, a.overlays))
    if videos:
        report.flops = model_flops(ck.model.cfg, videos[0].frames.shape[1:3])
    Path(a.report).write_text(report.to_json(timings=not a.no_timings), encoding="utf-8")
    print(f"mDSC {report.mdsc:.4f}  mIoU {report.miou:.4f}  frames {len(report.frames)}")
    return 0


def cmd_infer(a) -> int:
    ck = Checkpoint.load(a.ckpt)
    paths = sorted(Path(a.frames).glob("*.ppm"))
    if not paths:
        raise UsageError(f"no .ppm frames in {a.frames}")
    out = ensure_dir(a.out)
    state = None
    with T.no_grad():
        for p in paths:
            s, h = ck.model.step(T.Tensor(to_input(read_ppm(p), ck.model.dtype)), state)
            pred = predict_mask(s)
            state = MFFAState(h, pred)
            write_pgm_mask(out / f"{p.stem}.pgm", pred)
    return 0


def cmd_gradcheck(a) -> int:
    from .gradcheck import main
    return 0 if main(full=a.full) else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mffaseg", description="Temporal instrument segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-toydata", help="render the procedural toy dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_toydata)

    s = sub.add_parser("synth", help="synthesize a labeled sequence from one frame")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train with the configured curriculum")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the held-out folds")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--overlays")
    e.add_argument("--no-timings", action="store_true", help="omit wall-clock fields from the report")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment a directory of frames in name order")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--frames", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every registered op")
    c.add_argument("--full", action="store_true", help="also check the whole model composite")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "synth" and a.n < 1:
            raise UsageError("--n must be positive")
        return a.func(a)
    except (UsageError, ImageFormatError, NoInstrument, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteGradient, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

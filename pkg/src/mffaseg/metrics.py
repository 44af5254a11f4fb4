"""Region-overlap metrics, per-video evaluation with feature propagation, and timing."""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import Video, ensure_dir, write_ppm
from .mffa import MFFAState
from .model import predict_mask, to_input


def _bits(mask: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(mask, dtype=bool).ravel())


def _count(bits: np.ndarray) -> int:
    return int(np.bitwise_count(bits).sum())


def _check(x, y):
    if np.shape(x) != np.shape(y):
        raise ValueError(f"mask extents differ: {np.shape(x)} vs {np.shape(y)}")


def dsc(x: np.ndarray, y: np.ndarray) -> float:
    """``2|X & Y| / (|X| + |Y|)``; two empty masks score 1."""
    _check(x, y)
    bx, by = _bits(x), _bits(y)
    nx, ny = _count(bx), _count(by)
    if nx + ny == 0:
        return 1.0
    return 2 * _count(bx & by) / (nx + ny)


def iou(x: np.ndarray, y: np.ndarray) -> float:
    """``|X & Y| / |X | Y|``; two empty masks score 1."""
    _check(x, y)
    bx, by = _bits(x), _bits(y)
    union = _count(bx | by)
    if union == 0:
        return 1.0
    return _count(bx & by) / union


@dataclass
class FrameScore:
    video: str
    index: int
    dsc: float
    iou: float
    seconds: float


@dataclass
class EvalReport:
    frames: list[FrameScore] = field(default_factory=list)
    skipped_labels: int = 0
    flops: dict = field(default_factory=dict)

    @staticmethod
    def _stats(values) -> tuple[float, float]:
        if not values:
            return float("nan"), float("nan")
        return float(np.mean(values)), float(np.std(values))

    @property
    def mdsc(self) -> float:
        return self._stats([f.dsc for f in self.frames])[0]

    @property
    def miou(self) -> float:
        return self._stats([f.iou for f in self.frames])[0]

    def per_video(self) -> dict[str, dict[str, float]]:
        out = {}
        for vid in dict.fromkeys(f.video for f in self.frames):
            rows = [f for f in self.frames if f.video == vid]
            md, sd = self._stats([f.dsc for f in rows])
            mi, si = self._stats([f.iou for f in rows])
            out[vid] = {"mdsc": md, "sdsc": sd, "miou": mi, "siou": si, "frames": len(rows)}
        return out

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.frames + other.frames, self.skipped_labels + other.skipped_labels,
                          self.flops or other.flops)

    def to_dict(self) -> dict:
        md, sd = self._stats([f.dsc for f in self.frames])
        mi, si = self._stats([f.iou for f in self.frames])
        return {
            "overall": {"mdsc": md, "sdsc": sd, "miou": mi, "siou": si, "frames": len(self.frames)},
            "per_video": self.per_video(),
            "skipped_labels": self.skipped_labels,
            "median_seconds_per_frame": statistics.median([f.seconds for f in self.frames]) if self.frames else None,
            "flops": self.flops,
            "frames": [asdict(f) for f in self.frames],
        }

    def to_json(self, timings: bool = True) -> str:
        d = self.to_dict()
        if not timings:
            # wall-clock entries are the only run-to-run nondeterminism
            d.pop("median_seconds_per_frame")
            for f in d["frames"]:
                f.pop("seconds")
        return json.dumps(d, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        frames = [FrameScore(f["video"], f["index"], f["dsc"], f["iou"], f.get("seconds", 0.0)) for f in d["frames"]]
        return cls(frames, d.get("skipped_labels", 0), d.get("flops", {}))


def evaluate_video(model, video: Video, stride: int = 3, overlay_dir=None) -> EvalReport:
    """Propagate state over every ``stride``-th frame of the whole video, scoring labeled frames."""
    visited = range(0, len(video.frames), stride)
    visited_set = set(visited)
    labeled = set(video.labeled_indices)
    report = EvalReport(skipped_labels=len(labeled - visited_set))
    if overlay_dir is not None:
        ensure_dir(overlay_dir)
    state = None
    with T.no_grad():
        for t in visited:
            x = T.Tensor(to_input(video.frames[t], model.dtype))
            start = time.perf_counter()
            s, h = model.step(x, state)
            pred = predict_mask(s)
            elapsed = time.perf_counter() - start
            state = MFFAState(h, pred)
            if t in labeled and video.truth is not None:
                truth = video.truth[t]
                report.frames.append(FrameScore(video.id, t, dsc(pred, truth), iou(pred, truth), elapsed))
                if overlay_dir is not None:
                    write_overlay(Path(overlay_dir) / f"{video.id}_{t:05d}.ppm", video.frames[t], pred, truth)
    return report


def time_inference(model, frame: np.ndarray, repeats: int = 20, warmup: int = 3) -> float:
    """Median wall-clock seconds of one recurrent step (encode + MFFA + decode), state reused."""
    x = T.Tensor(to_input(frame, model.dtype))
    state = None
    times = []
    with T.no_grad():
        for k in range(warmup + repeats):
            start = time.perf_counter()
            s, h = model.step(x, state)
            state = MFFAState(h, predict_mask(s))
            if k >= warmup:
                times.append(time.perf_counter() - start)
    return statistics.median(times)


def _contour(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, bool)
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def write_overlay(path, frame: np.ndarray, pred: np.ndarray, truth: np.ndarray) -> None:
    """Predicted region tinted green, true contour drawn in red."""
    img = frame.astype(np.float64)
    green = np.array([40.0, 220.0, 60.0])
    p = np.asarray(pred, bool)
    img[p] = 0.5 * img[p] + 0.5 * green
    img[_contour(truth)] = (255, 0, 0)
    write_ppm(path, np.clip(np.rint(img), 0, 255).astype(np.uint8))

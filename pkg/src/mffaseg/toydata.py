"""Procedural "toy surgery" videos: a shaded capsule instrument over moving tissue texture.

Challenge frames mimic hard endoscopic conditions: contrast collapse
(instrument blends into the tissue), specular streaks and blood-red blotches.
Dense truth is written for every frame; the manifest marks only every
``label_stride``-th frame as labeled.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import (DatasetManifest, VideoEntry, Video, ensure_dir, save_manifest, write_pgm_mask,
                     write_ppm)


@dataclass(frozen=True)
class ToyConfig:
    videos: int = 8
    frames: int = 300
    frame_size: int = 64
    label_stride: int = 3
    folds: int = 3
    contrast_collapse_rate: float = 0.25
    specular_rate: float = 0.1
    red_tint_rate: float = 0.1
    collapse_strength: float = 0.15   # remaining fraction of the instrument/tissue contrast
    instrument_fraction: tuple[float, float] = (0.02, 0.20)

    @classmethod
    def from_json(cls, text: str) -> "ToyConfig":
        d = json.loads(text)
        if "instrument_fraction" in d:
            d["instrument_fraction"] = tuple(d["instrument_fraction"])
        return cls(**d)


def _smooth_noise(rng, h, w, scale) -> np.ndarray:
    """Bilinearly upsampled coarse noise, roughly in [-1, 1]."""
    gh, gw = h // scale + 2, w // scale + 2
    g = rng.uniform(-1, 1, (gh, gw))
    ys = np.arange(h) / scale
    xs = np.arange(w) / scale
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    return ((1 - fy) * ((1 - fx) * g[y0][:, x0] + fx * g[y0][:, x0 + 1])
            + fy * ((1 - fx) * g[y0 + 1][:, x0] + fx * g[y0 + 1][:, x0 + 1]))


def _tissue(rng, size: int) -> np.ndarray:
    n = (0.55 * _smooth_noise(rng, size, size, 24) + 0.3 * _smooth_noise(rng, size, size, 8)
         + 0.15 * _smooth_noise(rng, size, size, 3))
    base = np.array([rng.uniform(150, 190), rng.uniform(75, 105), rng.uniform(70, 95)])
    veins = np.clip(1 - np.abs(_smooth_noise(rng, size, size, 12)) * 8, 0, 1)[..., None]
    tex = base + n[..., None] * np.array([35, 25, 20]) - veins * np.array([10, 35, 25])
    return tex


def _segment_distance(py, px, ay, ax, by, bx):
    vy, vx = by - ay, bx - ax
    t = np.clip(((py - ay) * vy + (px - ax) * vx) / (vy * vy + vx * vx), 0, 1)
    cy, cx = ay + t * vy, ax + t * vx
    return np.hypot(py - cy, px - cx), t


def _episodes(rng, n_frames: int, rate: float, lo: int, hi: int, start: int = 6) -> np.ndarray:
    """Boolean mask of frames covered by random runs totalling at least ``rate`` of the video."""
    hit = np.zeros(n_frames, bool)
    if rate <= 0:
        return hit
    target = int(np.ceil(rate * (n_frames - start)))
    guard = 0
    while hit.sum() < target and guard < 10000:
        guard += 1
        length = int(rng.integers(lo, hi + 1))
        s = int(rng.integers(start, max(start + 1, n_frames - length)))
        # leave a visible frame on both sides of every run
        if hit[max(s - 2, 0):s + length + 2].any():
            continue
        hit[s:s + length] = True
    return hit


@dataclass
class RenderedFrame:
    image: np.ndarray
    mask: np.ndarray
    collapsed: bool


def intensity_gap(img: np.ndarray, mask: np.ndarray) -> float:
    """Mean gray level of instrument pixels minus that of background pixels."""
    m = np.asarray(mask).astype(bool)
    gray = np.asarray(img, dtype=np.float64).mean(axis=-1)
    if m.all() or not m.any():
        return 0.0
    return float(gray[m].mean() - gray[~m].mean())


def _render_video(rng, cfg: ToyConfig):
    size = cfg.frame_size
    big = size * 2
    tissue = _tissue(rng, big)
    n = cfg.frames
    t = np.arange(n)

    def wave(amp, periods):
        out = np.zeros(n)
        for p in periods:
            out += amp * np.sin(2 * np.pi * t / p + rng.uniform(0, 2 * np.pi))
        return out / len(periods)

    # camera drift over the oversized tissue texture
    cam_y = (big - size) / 2 + wave(size * 0.3, [rng.uniform(150, 400), rng.uniform(80, 200)])
    cam_x = (big - size) / 2 + wave(size * 0.3, [rng.uniform(150, 400), rng.uniform(80, 200)])
    # instrument centre, orientation, length
    cy = size / 2 + wave(size * 0.42, [rng.uniform(70, 160), rng.uniform(40, 90)])
    cx = size / 2 + wave(size * 0.42, [rng.uniform(70, 160), rng.uniform(40, 90)])
    angle = rng.uniform(0, np.pi) + wave(0.9, [rng.uniform(90, 200)])
    length = size * rng.uniform(0.38, 0.48) + wave(size * 0.05, [rng.uniform(60, 120)])
    radius = size * rng.uniform(0.06, 0.075)
    gray = rng.uniform(175, 215)

    collapse = _episodes(rng, n, cfg.contrast_collapse_rate, 3, 9)
    specular = rng.random(n) < cfg.specular_rate
    red = _episodes(rng, n, cfg.red_tint_rate, 3, 9) if cfg.red_tint_rate > 0 else np.zeros(n, bool)

    py, px = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
    lo_frac, hi_frac = cfg.instrument_fraction
    frames = []
    for i in range(n):
        y0, x0 = int(round(cam_y[i])), int(round(cam_x[i]))
        bg = tissue[y0:y0 + size, x0:x0 + size]
        half = length[i] / 2
        dy, dx = np.sin(angle[i]) * half, np.cos(angle[i]) * half
        r = radius
        for _ in range(20):
            dist, along = _segment_distance(py, px, cy[i] - dy, cx[i] - dx, cy[i] + dy, cx[i] + dx)
            mask = dist <= r
            frac = mask.mean()
            if lo_frac <= frac <= hi_frac:
                break
            r *= 1.15 if frac < lo_frac else 0.87
        else:
            raise RuntimeError("could not place the instrument within the configured area bounds")
        # cylindrical shading across the shaft plus a slow gradient along it
        shade = np.sqrt(np.clip(1 - (dist / r) ** 2, 0, 1))
        inst_val = gray * (0.62 + 0.38 * shade) + 12 * (along - 0.5)
        inst = np.stack([inst_val, inst_val * 0.98, inst_val * 1.03], axis=-1)
        effects = []
        if red[i]:
            blot = np.clip(_smooth_noise(rng, size, size, 10) * 1.6, 0, 1)[..., None]
            effects.append(lambda im, b=blot: im * (1 - 0.55 * b) + b * 0.55 * np.array([150, 20, 25]))
        if specular[i]:
            glare = np.zeros((size, size))
            for _ in range(int(rng.integers(1, 4))):
                ay, ax = rng.uniform(0, size, 2)
                th = rng.uniform(0, np.pi)
                ln = rng.uniform(6, 16)
                d, _ = _segment_distance(py, px, ay, ax, ay + np.sin(th) * ln, ax + np.cos(th) * ln)
                glare += np.clip(1.2 - d, 0, 1) * 90
            effects.append(lambda im, g=glare: im + g[..., None])
        noise = rng.normal(0, 3, (size, size, 3))

        def finish(im):
            for fx in effects:
                im = fx(im)
            return np.clip(np.rint(im + noise), 0, 255).astype(np.uint8)

        normal = finish(np.where(mask[..., None], inst, bg))
        if collapse[i]:
            # keep the tissue texture under the instrument but move its mean to the surrounding
            # tissue, then blend back only a small fraction of the instrument contrast
            under = bg - bg[mask].mean(axis=0) + bg[~mask].mean(axis=0)
            strength = cfg.collapse_strength
            gap_normal = intensity_gap(normal, mask)
            while True:
                img = finish(np.where(mask[..., None], under + strength * (inst - under), bg))
                if abs(intensity_gap(img, mask)) <= 0.25 * abs(gap_normal) or strength < 1e-3:
                    break
                strength *= 0.7
        else:
            img = normal
        frames.append(RenderedFrame(img, mask.astype(np.uint8), bool(collapse[i])))
    return frames


def generate_videos(cfg: ToyConfig, seed: int) -> tuple[list[Video], list[np.ndarray]]:
    """In-memory dataset: videos plus each video's per-frame contrast-collapse flags."""
    root_rng = np.random.default_rng(seed)
    children = root_rng.spawn(cfg.videos)
    videos, flags = [], []
    fold_sizes = np.array_split(np.arange(cfg.videos), cfg.folds)
    fold_of = {int(v): k for k, chunk in enumerate(fold_sizes) for v in chunk}
    for k, rng in enumerate(children):
        rendered = _render_video(rng, cfg)
        frames = np.stack([r.image for r in rendered])
        truth = np.stack([r.mask for r in rendered])
        labeled = list(range(0, cfg.frames, cfg.label_stride))
        videos.append(Video(f"video{k:02d}", frames, truth, labeled, fold_of[k]))
        flags.append(np.array([r.collapsed for r in rendered]))
    return videos, flags


def write_dataset(out_dir, videos: list[Video], cfg: ToyConfig, flags=None) -> DatasetManifest:
    root = ensure_dir(out_dir)
    entries = []
    for k, v in enumerate(videos):
        fdir = ensure_dir(root / v.id / "frames")
        mdir = ensure_dir(root / v.id / "masks")
        frames, masks = [], []
        for t in range(len(v.frames)):
            write_ppm(fdir / f"{t:05d}.ppm", v.frames[t])
            write_pgm_mask(mdir / f"{t:05d}.pgm", v.truth[t])
            frames.append(f"{v.id}/frames/{t:05d}.ppm")
            masks.append(f"{v.id}/masks/{t:05d}.pgm")
        entries.append(VideoEntry(v.id, frames, list(v.labeled_indices), v.fold, masks))
    manifest = DatasetManifest((cfg.frame_size, cfg.frame_size), entries, cfg.label_stride)
    save_manifest(root, manifest)
    meta = {"config": asdict(cfg)}
    if flags is not None:
        meta["contrast_collapse"] = {v.id: np.nonzero(f)[0].tolist() for v, f in zip(videos, flags)}
    Path(root, "toy_meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return manifest


def gen_toy_dataset(cfg: ToyConfig, seed: int, out_dir) -> DatasetManifest:
    videos, flags = generate_videos(cfg, seed)
    return write_dataset(out_dir, videos, cfg, flags)

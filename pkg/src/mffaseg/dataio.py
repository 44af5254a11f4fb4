"""Frame/mask files, dataset manifests, real-sequence extraction and sequence augmentation."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_VERSION = 1


class ImageFormatError(ValueError):
    """Malformed PPM/PGM data or an image/mask mismatch."""


# ------------------------------------------------------------------ PPM / PGM

def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise ImageFormatError(f"expected {magic.decode()} header, got {buf[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated or non-numeric header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval")
    w, h, maxval = fields
    if w < 1 or h < 1 or maxval != 255:
        raise ImageFormatError(f"unsupported header: {w}x{h} maxval {maxval}")
    return w, h, maxval, pos + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, _m, off = _read_header(buf, b"P6")
    if len(buf) - off < w * h * 3:
        raise ImageFormatError(f"{path}: pixel data truncated")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError("PPM images must be H x W x 3 uint8")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def read_pgm_mask(path) -> np.ndarray:
    """Binary mask from a P5 file holding only 0 (background) and 255 (instrument)."""
    buf = Path(path).read_bytes()
    w, h, _m, off = _read_header(buf, b"P5")
    if len(buf) - off < w * h:
        raise ImageFormatError(f"{path}: pixel data truncated")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off).reshape(h, w)
    if not np.isin(raw, (0, 255)).all():
        raise ImageFormatError(f"{path}: mask values must be 0 or 255")
    return (raw == 255).astype(np.uint8)


def write_pgm_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise ImageFormatError("masks must be 2-D binary arrays")
    h, w = m.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + (m.astype(np.uint8) * 255).tobytes())


@dataclass
class LabeledFrame:
    image: np.ndarray
    mask: np.ndarray | None = None
    index: int = 0

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ImageFormatError(f"mask extents {self.mask.shape} differ from image {self.image.shape[:2]}")


def load_frame(image_path, mask_path=None, index: int = 0) -> LabeledFrame:
    img = read_ppm(image_path)
    mask = read_pgm_mask(mask_path) if mask_path is not None else None
    return LabeledFrame(img, mask, index)


def save_frame(frame: LabeledFrame, image_path, mask_path=None) -> None:
    write_ppm(image_path, frame.image)
    if mask_path is not None and frame.mask is not None:
        write_pgm_mask(mask_path, frame.mask)


# ------------------------------------------------------------------ sequences

@dataclass
class FrameSequence:
    """Ordered frames with optional per-frame masks.

    ``real_index`` is the position of the real labeled frame (for synthetic
    sequences the untouched source; for real ones the last frame).
    """

    frames: np.ndarray
    masks: list
    indices: list[int]
    real_index: int
    video: str = ""

    def __len__(self):
        return len(self.frames)

    @property
    def labeled_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.masks) if m is not None]


# ------------------------------------------------------------------ manifest

@dataclass
class VideoEntry:
    id: str
    frames: list[str]
    labeled_indices: list[int]
    fold: int = 0
    masks: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    frame_size: tuple[int, int]
    videos: list[VideoEntry]
    label_stride: int = 3
    version: int = MANIFEST_VERSION

    def validate(self, root: Path | None = None) -> None:
        for v in self.videos:
            idx = v.labeled_indices
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"video {v.id}: labeled indices not strictly increasing")
            if idx and (idx[0] < 0 or idx[-1] >= len(v.frames)):
                raise ValueError(f"video {v.id}: labeled index out of range")
            if v.masks and len(v.masks) != len(v.frames):
                raise ValueError(f"video {v.id}: mask list length differs from frame list")
            if root is not None:
                for i in idx:
                    for rel in (v.frames[i], v.masks[i] if v.masks else None):
                        if rel is not None and not (root / rel).is_file():
                            raise FileNotFoundError(f"video {v.id}: missing {rel}")

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "frame_size": list(self.frame_size),
            "label_stride": self.label_stride,
            "videos": [{"id": v.id, "frames": v.frames, "masks": v.masks,
                        "labeled_indices": v.labeled_indices, "fold": v.fold} for v in self.videos],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')}")
        videos = [VideoEntry(v["id"], list(v["frames"]), list(v["labeled_indices"]), int(v.get("fold", 0)),
                             list(v.get("masks", []))) for v in d["videos"]]
        return cls(tuple(d["frame_size"]), videos, int(d.get("label_stride", 3)), d["version"])


def save_manifest(root, manifest: DatasetManifest) -> None:
    Path(root, "manifest.json").write_text(manifest.to_json(), encoding="utf-8")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    m = DatasetManifest.from_json((root / "manifest.json").read_text(encoding="utf-8"))
    m.validate(root)
    return m


@dataclass
class Video:
    """A video held in memory: all frames, dense truth (if on disk) and the sparse label set."""

    id: str
    frames: np.ndarray
    truth: np.ndarray | None
    labeled_indices: list[int]
    fold: int = 0

    def label(self, t: int) -> np.ndarray | None:
        return self.truth[t] if self.truth is not None and t in self._labeled else None

    @property
    def _labeled(self) -> set[int]:
        return set(self.labeled_indices)


def load_dataset(root, folds: Sequence[int] | None = None) -> tuple[DatasetManifest, list[Video]]:
    root = Path(root)
    manifest = load_manifest(root)
    videos = []
    for v in manifest.videos:
        if folds is not None and v.fold not in folds:
            continue
        frames = np.stack([read_ppm(root / f) for f in v.frames])
        truth = np.stack([read_pgm_mask(root / m) for m in v.masks]) if v.masks else None
        if truth is not None and truth.shape[1:] != frames.shape[1:3]:
            raise ImageFormatError(f"video {v.id}: mask extents differ from frames")
        videos.append(Video(v.id, frames, truth, list(v.labeled_indices), v.fold))
    return manifest, videos


def extract_real_sequences(videos: Sequence[Video], n: int, sampling_stride: int = 3):
    """One length-``n`` sequence ending at each labeled frame, stepping back ``sampling_stride`` frames.

    Returns ``(sequences, report)``; ``report`` counts emitted and skipped sequences.
    """
    if n < 1 or sampling_stride < 1:
        raise ValueError("n and sampling_stride must be positive")
    out, skipped = [], []
    for v in videos:
        for t in v.labeled_indices:
            idx = [t - sampling_stride * (n - 1 - k) for k in range(n)]
            if idx[0] < 0:
                skipped.append((v.id, t))
                continue
            masks = [None] * (n - 1) + [v.truth[t] if v.truth is not None else None]
            out.append(FrameSequence(v.frames[idx], masks, idx, n - 1, v.id))
    return out, {"emitted": len(out), "skipped": len(skipped), "skipped_at": skipped}


# ------------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class Photometric:
    hue: float = 0.0          # degrees
    brightness: float = 0.0   # relative
    saturation: float = 0.0   # relative
    contrast: float = 0.0     # relative

    @property
    def is_identity(self) -> bool:
        return self.hue == self.brightness == self.saturation == self.contrast == 0.0


@dataclass(frozen=True)
class AugmentParams:
    """One geometric transform for the whole sequence; one photometric jitter per frame."""

    hflip: bool = False
    vflip: bool = False
    rotation: float = 0.0
    scale: float = 1.0
    crop: tuple[float, float, float, float] | None = None  # (y0, x0, h, w) in pixels
    photometric: tuple[Photometric, ...] = ()

    @property
    def warp_is_identity(self) -> bool:
        return self.rotation == 0.0 and self.scale == 1.0 and self.crop is None


@dataclass(frozen=True)
class AugmentRanges:
    flip_prob: float = 0.5
    rotation: float = 15.0
    scale: tuple[float, float] = (0.9, 1.1)
    crop_fraction: tuple[float, float] = (0.85, 1.0)
    hue: float = 5.0
    brightness: float = 0.1
    saturation: float = 0.1
    contrast: float = 0.1


def sample_augment(rng: np.random.Generator, n_frames: int, frame_size: tuple[int, int],
                   ranges: AugmentRanges = AugmentRanges()) -> AugmentParams:
    h, w = frame_size
    frac = rng.uniform(*ranges.crop_fraction)
    ch, cw = h * frac, w * frac
    crop = (rng.uniform(0, h - ch), rng.uniform(0, w - cw), ch, cw)
    photo = tuple(Photometric(rng.uniform(-ranges.hue, ranges.hue),
                              rng.uniform(-ranges.brightness, ranges.brightness),
                              rng.uniform(-ranges.saturation, ranges.saturation),
                              rng.uniform(-ranges.contrast, ranges.contrast)) for _ in range(n_frames))
    return AugmentParams(bool(rng.random() < ranges.flip_prob), bool(rng.random() < ranges.flip_prob),
                         float(rng.uniform(-ranges.rotation, ranges.rotation)),
                         float(rng.uniform(*ranges.scale)), crop, photo)


def _warp_grid(params: AugmentParams, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Source (y, x) sample coordinates for every output pixel."""
    h, w = shape
    y0, x0, ch, cw = params.crop if params.crop is not None else (0.0, 0.0, float(h), float(w))
    # clamp the window into the frame
    ch, cw = min(ch, h), min(cw, w)
    y0, x0 = float(np.clip(y0, 0, h - ch)), float(np.clip(x0, 0, w - cw))
    py, px = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    uy = y0 + (py + 0.5) * ch / h - 0.5
    ux = x0 + (px + 0.5) * cw / w - 0.5
    cy, cx = (h - 1) / 2, (w - 1) / 2
    th = np.deg2rad(params.rotation)
    dy, dx = (uy - cy) / params.scale, (ux - cx) / params.scale
    sy = cy + np.cos(th) * dy - np.sin(th) * dx
    sx = cx + np.sin(th) * dy + np.cos(th) * dx
    return sy, sx


def bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Edge-clamped bilinear lookup of an ``H x W (x C)`` array at fractional coordinates."""
    h, w = img.shape[:2]
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    f = img.astype(np.float64)
    return ((1 - fy) * ((1 - fx) * f[y0, x0] + fx * f[y0, x1])
            + fy * ((1 - fx) * f[y1, x0] + fx * f[y1, x1]))


def _geometric(img: np.ndarray, params: AugmentParams, grid, nearest: bool) -> np.ndarray:
    if params.hflip:
        img = img[:, ::-1]
    if params.vflip:
        img = img[::-1]
    if grid is None:
        return np.ascontiguousarray(img)
    sy, sx = grid
    if nearest:
        h, w = img.shape[:2]
        return img[np.clip(np.rint(sy).astype(int), 0, h - 1), np.clip(np.rint(sx).astype(int), 0, w - 1)]
    return np.clip(np.rint(bilinear_sample(img, sy, sx)), 0, 255).astype(np.uint8)


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def photometric(img: np.ndarray, p: Photometric) -> np.ndarray:
    if p.is_identity:
        return img.copy()
    x = img.astype(np.float64)
    x = x * (1 + p.brightness)
    mean = x.mean()
    x = (x - mean) * (1 + p.contrast) + mean
    gray = (x @ _YIQ[0])[..., None]
    x = gray + (x - gray) * (1 + p.saturation)
    if p.hue:
        th = np.deg2rad(p.hue)
        rot = np.array([[1, 0, 0], [0, np.cos(th), -np.sin(th)], [0, np.sin(th), np.cos(th)]])
        x = x @ (_YIQ_INV @ rot @ _YIQ).T
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def apply_augment(seq: FrameSequence, params: AugmentParams) -> FrameSequence:
    shape = seq.frames.shape[1:3]
    grid = None if params.warp_is_identity else _warp_grid(params, shape)
    photo = params.photometric or (Photometric(),) * len(seq)
    if len(photo) != len(seq):
        raise ValueError("one photometric set per frame is required")
    frames = np.stack([photometric(_geometric(f, params, grid, nearest=False), ph)
                       for f, ph in zip(seq.frames, photo)])
    masks = [None if m is None else (_geometric(m, params, grid, nearest=True) > 0).astype(np.uint8)
             for m in seq.masks]
    return FrameSequence(frames, masks, list(seq.indices), seq.real_index, seq.video)


def augment_sequence(seq: FrameSequence, rng: np.random.Generator,
                     ranges: AugmentRanges = AugmentRanges()) -> FrameSequence:
    return apply_augment(seq, sample_augment(rng, len(seq), seq.frames.shape[1:3], ranges))


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p

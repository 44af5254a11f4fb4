"""Densely labeled synthetic sequences from one labeled frame.

The instrument is cut out, the hole is filled by diffusion, and the cut-out
is re-pasted along interpolated moving parameters with the real frame kept
at the centre of the sequence.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataio import FrameSequence, bilinear_sample

log = logging.getLogger(__name__)


class NoInstrument(ValueError):
    """The source mask has no instrument pixel."""


@dataclass(frozen=True)
class MovingParams:
    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0  # degrees

    def __iter__(self):
        return iter((self.dx, self.dy, self.dtheta))


@dataclass(frozen=True)
class SynthesisRanges:
    translation: tuple[float, float] = (15.0, 40.0)
    rotation: tuple[float, float] = (-30.0, 30.0)

    def __post_init__(self):
        lo, hi = self.translation
        if not 0 <= lo <= hi:
            raise ValueError("translation range must satisfy 0 <= lo <= hi")
        if self.rotation[0] > self.rotation[1]:
            raise ValueError("rotation range must be ordered")


def sample_endpoint_params(rng: np.random.Generator,
                           ranges: SynthesisRanges = SynthesisRanges()) -> tuple[MovingParams, MovingParams]:
    """Independent first/last placements; translation signs drawn per axis."""
    def one():
        mag = rng.uniform(*ranges.translation, size=2)
        sign = np.where(rng.random(2) < 0.5, -1.0, 1.0)
        return MovingParams(float(sign[0] * mag[0]), float(sign[1] * mag[1]),
                            float(rng.uniform(*ranges.rotation)))
    return one(), one()


def center_position(n: int) -> int:
    """1-based index of the real frame."""
    return (n + 1) // 2


def interpolate_params(first: MovingParams, last: MovingParams, n: int) -> list[MovingParams]:
    """Piecewise-linear between knots ``first`` (frame 1), zero (frame C) and ``last`` (frame N)."""
    if n < 1:
        raise ValueError("n must be positive")
    c = center_position(n)
    f, l = np.array(tuple(first), float), np.array(tuple(last), float)
    out = []
    for i in range(1, n + 1):
        if i < c:
            v = f * (c - i) / (c - 1)
        elif i == c:
            v = np.zeros(3)
        else:
            v = l * (i - c) / (n - c)
        out.append(MovingParams(*map(float, v)))
    return out


@dataclass
class Patch:
    image: np.ndarray   # bounding-box crop
    mask: np.ndarray    # local binary mask; zero = transparent
    y0: int
    x0: int

    @property
    def centroid(self) -> tuple[float, float]:
        """(y, x) in source-frame coordinates."""
        ys, xs = np.nonzero(self.mask)
        return self.y0 + ys.mean(), self.x0 + xs.mean()


def extract_instrument(frame: np.ndarray, mask: np.ndarray) -> Patch:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise NoInstrument("mask has no instrument pixel")
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    local = mask[y0:y1, x0:x1].astype(np.uint8)
    img = frame[y0:y1, x0:x1].copy()
    img[local == 0] = 0
    return Patch(img, local, int(y0), int(x0))


def inpaint(frame: np.ndarray, mask: np.ndarray, tol: float = 0.5, max_iter: int = 500) -> np.ndarray:
    """Fill masked pixels by Jacobi neighbour-mean sweeps; unmasked pixels are left untouched."""
    hole = np.asarray(mask).astype(bool)
    if not hole.any():
        return frame.copy()
    x = frame.astype(np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if hole.all():
        log.warning("inpaint: every pixel is masked, filling with the global mean")
        return np.broadcast_to(np.rint(x.mean(axis=(0, 1))), x.shape).astype(frame.dtype).reshape(frame.shape)
    h, w = hole.shape
    known = ~hole
    x[hole] = x[known].mean(axis=0)
    ones = np.ones((h, w))
    count = np.zeros((h, w))
    count[1:] += ones[:-1]
    count[:-1] += ones[1:]
    count[:, 1:] += ones[:, :-1]
    count[:, :-1] += ones[:, 1:]
    count = count[..., None]
    for _ in range(max_iter):
        acc = np.zeros_like(x)
        acc[1:] += x[:-1]
        acc[:-1] += x[1:]
        acc[:, 1:] += x[:, :-1]
        acc[:, :-1] += x[:, 1:]
        new = acc / count
        change = np.abs(new[hole] - x[hole]).max()
        x[hole] = new[hole]
        if change < tol:
            break
    out = frame.copy()
    filled = np.clip(np.rint(x), 0, 255).astype(frame.dtype).reshape(frame.shape if frame.ndim == 3 else (h, w, 1))
    if frame.ndim == 2:
        out[hole] = filled[..., 0][hole]
    else:
        out[hole] = filled[hole]
    return out


def _inverse_map(py, px, cy, cx, params: MovingParams):
    """Source coordinates of output pixels: undo the translation, then the rotation about the centroid."""
    th = np.deg2rad(params.dtheta)
    ry, rx = py - cy - params.dy, px - cx - params.dx
    c, s = np.cos(th), np.sin(th)
    # forward rotation is x' = c x - s y, y' = s x + c y (x right, y down)
    sx = c * rx + s * ry
    sy = -s * rx + c * ry
    return cy + sy, cx + sx


def transform_paste(background: np.ndarray, patch: Patch, params: MovingParams):
    """Rotate the patch about its centroid, shift it and composite it over ``background``.

    Returns ``(frame, mask)``; the mask is the warped patch alpha thresholded at 0.5.
    """
    h, w = background.shape[:2]
    cy, cx = patch.centroid
    ph, pw = patch.mask.shape
    # output window: transformed patch corners, padded by one pixel for bilinear support
    th = np.deg2rad(params.dtheta)
    corners = np.array([[patch.y0 - 1, patch.x0 - 1], [patch.y0 - 1, patch.x0 + pw],
                        [patch.y0 + ph, patch.x0 - 1], [patch.y0 + ph, patch.x0 + pw]], float)
    ry, rx = corners[:, 0] - cy, corners[:, 1] - cx
    ty = cy + params.dy + np.sin(th) * rx + np.cos(th) * ry
    tx = cx + params.dx + np.cos(th) * rx - np.sin(th) * ry
    oy0, oy1 = max(int(np.floor(ty.min())), 0), min(int(np.ceil(ty.max())) + 1, h)
    ox0, ox1 = max(int(np.floor(tx.min())), 0), min(int(np.ceil(tx.max())) + 1, w)

    frame = background.copy()
    mask = np.zeros((h, w), np.uint8)
    if oy0 >= oy1 or ox0 >= ox1:
        return frame, mask
    py, px = np.meshgrid(np.arange(oy0, oy1, dtype=float), np.arange(ox0, ox1, dtype=float), indexing="ij")
    sy, sx = _inverse_map(py, px, cy, cx, params)
    ly, lx = sy - patch.y0, sx - patch.x0
    # pad by one transparent pixel so out-of-patch samples fade to zero alpha
    alpha_src = np.pad(patch.mask.astype(np.float64), 1)
    color_src = np.pad(patch.image.astype(np.float64) * patch.mask[..., None], ((1, 1), (1, 1), (0, 0)))
    inside = (ly > -1) & (ly < ph) & (lx > -1) & (lx < pw)
    alpha = np.where(inside, bilinear_sample(alpha_src, ly + 1, lx + 1), 0.0)
    premult = np.where(inside[..., None], bilinear_sample(color_src, ly + 1, lx + 1), 0.0)
    bg = background[oy0:oy1, ox0:ox1].astype(np.float64)
    out = premult + (1 - alpha[..., None]) * bg
    frame[oy0:oy1, ox0:ox1] = np.clip(np.rint(out), 0, 255).astype(background.dtype)
    mask[oy0:oy1, ox0:ox1] = (alpha >= 0.5).astype(np.uint8)
    return frame, mask


def fully_contained(patch: Patch, params: MovingParams, shape: tuple[int, int]) -> bool:
    """Whether every instrument pixel centre lands inside the frame after the transform."""
    ys, xs = np.nonzero(patch.mask)
    cy, cx = patch.centroid
    th = np.deg2rad(params.dtheta)
    ry, rx = ys + patch.y0 - cy, xs + patch.x0 - cx
    ty = cy + params.dy + np.sin(th) * rx + np.cos(th) * ry
    tx = cx + params.dx + np.cos(th) * rx - np.sin(th) * ry
    return bool((ty >= 0).all() and (ty <= shape[0] - 1).all() and (tx >= 0).all() and (tx <= shape[1] - 1).all())


def synthesize_sequence(frame: np.ndarray, label: np.ndarray, n: int, rng: np.random.Generator,
                        ranges: SynthesisRanges = SynthesisRanges(), background: np.ndarray | None = None,
                        return_params: bool = False):
    """``n`` labeled frames; frame ``C = (n+1)//2`` is the untouched source pair.

    ``background`` may carry a precomputed inpainting of ``frame`` (it depends
    only on the source pair, so callers cache it).
    """
    patch = extract_instrument(frame, label)
    if background is None:
        background = inpaint(frame, label)
    first, last = sample_endpoint_params(rng, ranges)
    params = interpolate_params(first, last, n)
    c = center_position(n) - 1
    frames, masks = [], []
    for i, p in enumerate(params):
        if i == c:
            frames.append(frame.copy())
            masks.append(label.astype(np.uint8).copy())
        else:
            f, m = transform_paste(background, patch, p)
            frames.append(f)
            masks.append(m)
    seq = FrameSequence(np.stack(frames), masks, list(range(n)), c)
    return (seq, params) if return_params else seq

"""Multi-frame feature aggregation: a temporal gate block followed by spatial attention.

Parameters live in a flat ``name -> Parameter`` mapping so the model can
serialize them alongside encoder and decoder weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

NORMALIZATIONS = ("row_softmax", "raw")


@dataclass(frozen=True)
class MFFAConfig:
    channels: int = 64
    attention_normalization: str = "row_softmax"

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"MFFA channels must be even and >= 2, got {self.channels}")
        if self.attention_normalization not in NORMALIZATIONS:
            raise ValueError(f"attention_normalization must be one of {NORMALIZATIONS}")


@dataclass
class MFFAState:
    """What one time step hands to the next: aggregated features and the predicted mask."""

    h_prev: Tensor
    mask_prev: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask_prev)
        if m.dtype != bool and not ((m == 0) | (m == 1)).all():
            raise ValueError("mask_prev must be binary")
        self.mask_prev = m.astype(np.uint8)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Parameter:
    bound = np.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def conv_param(rng, k: int, cin: int, cout: int, dtype) -> tuple[Parameter, Parameter]:
    return (kaiming_uniform(rng, (k, k, cin, cout), k * k * cin, dtype),
            Parameter(np.zeros(cout, dtype=dtype)))


def init_params(cfg: MFFAConfig, rng: np.random.Generator, dtype=np.float32, prefix: str = "mffa.",
                temporal: bool = True) -> dict[str, Parameter]:
    c, half = cfg.channels, cfg.channels // 2
    p: dict[str, Parameter] = {}

    def put(name, k, cin, cout):
        p[f"{prefix}{name}.kernel"], p[f"{prefix}{name}.bias"] = conv_param(rng, k, cin, cout, dtype)

    if temporal:
        put("tab.agg", 1, 2 * c, c)
        put("tab.gate", 1, 2 * c, 1)
    put("sab.query", 1, c, half)
    put("sab.key", 1, c, half)
    p[f"{prefix}sab.w"] = Parameter((np.eye(c) + rng.normal(0, 0.01, (c, c))).astype(dtype))
    p[f"{prefix}sab.b"] = Parameter(np.zeros(c, dtype=dtype))
    put("sab.coarse", 1, c, 2)
    put("sab.refine1", 3, c + 2, half)
    put("sab.refine2", 3, half, c)
    return p


def _conv(p: Mapping[str, Tensor], name: str, x: Tensor, prefix: str) -> Tensor:
    return T.conv2d(x, p[f"{prefix}{name}.kernel"], p[f"{prefix}{name}.bias"])


def downsample_mask(mask: np.ndarray, hw: tuple[int, int], dtype) -> Tensor:
    """Nearest-neighbour resize of a frame-resolution mask to feature resolution, as an ``H x W x 1`` map."""
    small = T.resize_nearest(np.asarray(mask), hw)
    return Tensor(small[..., None].astype(dtype))


def tab_forward(p: Mapping[str, Tensor], f: Tensor, state: MFFAState, prefix: str = "mffa.") -> Tensor:
    if f.shape != state.h_prev.shape:
        raise ShapeError("tab_forward", "channels" if f.shape[:-1] == state.h_prev.shape[:-1] else "H/W",
                         f.shape, state.h_prev.shape)
    mask = downsample_mask(state.mask_prev, f.shape[-3:-1], f.dtype)
    prev_inst = T.mul(state.h_prev, mask)
    cat = T.concat_channels(prev_inst, f)
    agg = _conv(p, "tab.agg", cat, prefix)
    gate = T.sigmoid(_conv(p, "tab.gate", cat, prefix))
    return T.relu(T.add(f, T.mul(agg, gate)))


def attention_matrix(p: Mapping[str, Tensor], f: Tensor, cfg: MFFAConfig, prefix: str = "mffa.") -> Tensor:
    """``(HW) x (HW)`` pairwise similarity between positions of ``f``."""
    *lead, h, w, _c = f.shape
    half = cfg.channels // 2
    q = T.relu(_conv(p, "sab.query", f, prefix))
    k = T.relu(_conv(p, "sab.key", f, prefix))
    q = T.reshape(q, (*lead, h * w, half))
    k = T.reshape(k, (*lead, h * w, half))
    a = T.matmul(q, T.transpose(k))
    if cfg.attention_normalization == "row_softmax":
        a = T.softmax_channel(a)
    return a


def sab_forward(p: Mapping[str, Tensor], f: Tensor, cfg: MFFAConfig, prefix: str = "mffa.",
                return_parts: bool = False):
    """Returns ``(h, s_crs)``; with ``return_parts`` also the attention matrix and pre-refinement features."""
    *lead, h, w, c = f.shape
    if c % 2:
        raise ShapeError("sab_forward", "channels", "even", c)
    if c != cfg.channels:
        raise ShapeError("sab_forward", "channels", cfg.channels, c)
    a = attention_matrix(p, f, cfg, prefix)
    flat = T.reshape(f, (*lead, h * w, c))
    h_lin = T.linear(T.matmul(a, flat), p[f"{prefix}sab.w"], p[f"{prefix}sab.b"])
    h_lin = T.reshape(h_lin, (*lead, h, w, c))
    # every conv inside SAB is followed by a ReLU, the coarse head included
    s_crs = T.softmax_channel(T.relu(_conv(p, "sab.coarse", h_lin, prefix)))
    phi = T.relu(_conv(p, "sab.refine1", T.concat_channels(h_lin, s_crs), prefix))
    phi = T.relu(_conv(p, "sab.refine2", phi, prefix))
    out = T.add(h_lin, phi)
    if return_parts:
        return out, s_crs, a, h_lin
    return out, s_crs


def mffa_forward(p: Mapping[str, Tensor], f: Tensor, state: MFFAState | None, cfg: MFFAConfig,
                 prefix: str = "mffa.", temporal: bool = True) -> tuple[Tensor, Tensor]:
    """First frame of a traversal (no state) skips the temporal block."""
    if state is not None and temporal:
        f = tab_forward(p, f, state, prefix)
    return sab_forward(p, f, cfg, prefix)

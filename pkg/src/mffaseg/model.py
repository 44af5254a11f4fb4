"""Toy encoder/decoder around the MFFA module and the recurrent sequence runner."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .mffa import MFFAConfig, MFFAState, conv_param, init_params as init_mffa, mffa_forward
from .tensor import Parameter, Tensor

AGGREGATIONS = ("tab+sab", "sab", "none")
INSTRUMENT = 0  # channel index of the instrument class in every 2-channel map


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "trimmed"
    base_channels: int = 16
    output_stride: int = 4
    out_channels: int = 64

    def __post_init__(self):
        if self.variant not in ("full", "trimmed"):
            raise ValueError(f"encoder variant must be 'full' or 'trimmed', got {self.variant!r}")
        s = self.output_stride
        if s < 1 or s & (s - 1):
            raise ValueError("output_stride must be a power of two")
        if self.num_blocks < int(np.log2(s)):
            raise ValueError(f"{self.variant} encoder has too few blocks for output_stride {s}")

    @property
    def num_blocks(self) -> int:
        return 4 if self.variant == "full" else 2

    def block_layout(self) -> list[tuple[int, int, int]]:
        """``(cin, cout, stride)`` per 3x3 block; stride 2 until the output stride is reached."""
        layout, cin, reached = [], 3, 1
        for k in range(self.num_blocks):
            cout = self.base_channels * 2 ** k
            stride = 2 if reached < self.output_stride else 1
            reached *= stride
            layout.append((cin, cout, stride))
            cin = cout
        return layout


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mffa: MFFAConfig = field(default_factory=MFFAConfig)
    aggregation: str = "tab+sab"
    decoder_channels: int = 32

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.encoder.out_channels != self.mffa.channels:
            raise ValueError("encoder out_channels must equal MFFA channels")

    @property
    def temporal(self) -> bool:
        return self.aggregation == "tab+sab"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig(**d["encoder"]), mffa=MFFAConfig(**d["mffa"]),
                   aggregation=d["aggregation"], decoder_channels=d["decoder_channels"])


@dataclass
class SequenceOutput:
    """Per-frame softmax maps in original frame order, each with its provenance tag j.

    ``j`` in ``1..N`` names the frame whose aggregated features were used;
    ``0`` or ``N + 1`` means the map was produced without temporal state.
    """

    probs: list[Tensor]
    provenance: list[int]
    direction: str
    features: list[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.probs)


def to_input(frames: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 RGB in ``[0, 255]`` to the network's centred float range."""
    return (np.asarray(frames, dtype=dtype) / 127.5 - 1.0).astype(dtype)


class SegModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, Parameter] | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else self._init(np.random.default_rng(seed))

    def _init(self, rng) -> dict[str, Parameter]:
        p: dict[str, Parameter] = {}
        ec = self.cfg.encoder
        for k, (cin, cout, _s) in enumerate(ec.block_layout()):
            p[f"encoder.block{k}.kernel"], p[f"encoder.block{k}.bias"] = conv_param(rng, 3, cin, cout, self.dtype)
        last = ec.block_layout()[-1][1]
        p["encoder.proj.kernel"], p["encoder.proj.bias"] = conv_param(rng, 1, last, ec.out_channels, self.dtype)
        if self.cfg.aggregation != "none":
            p.update(init_mffa(self.cfg.mffa, rng, self.dtype, temporal=self.cfg.temporal))
        c, d = self.cfg.mffa.channels, self.cfg.decoder_channels
        p["decoder.conv.kernel"], p["decoder.conv.bias"] = conv_param(rng, 3, c, d, self.dtype)
        p["decoder.head.kernel"], p["decoder.head.bias"] = conv_param(rng, 1, d, 2, self.dtype)
        return p

    # -- parameter plumbing
    def parameters(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def zero_grad(self) -> None:
        for prm in self.params.values():
            prm.zero_grad()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    # -- network pieces
    def encode(self, frame) -> Tensor:
        x = frame if isinstance(frame, Tensor) else Tensor(frame, dtype=self.dtype)
        hf, wf = x.shape[-3], x.shape[-2]
        s = self.cfg.encoder.output_stride
        if hf % s or wf % s:
            raise ValueError(f"frame extents {(hf, wf)} not divisible by output_stride {s}")
        p = self.params
        for k, (_cin, _cout, stride) in enumerate(self.cfg.encoder.block_layout()):
            x = T.relu(T.conv2d(x, p[f"encoder.block{k}.kernel"], p[f"encoder.block{k}.bias"], stride=stride))
        return T.relu(T.conv2d(x, p["encoder.proj.kernel"], p["encoder.proj.bias"]))

    def aggregate(self, f: Tensor, state: MFFAState | None) -> tuple[Tensor, Tensor | None]:
        if self.cfg.aggregation == "none":
            return f, None
        return mffa_forward(self.params, f, state, self.cfg.mffa, temporal=self.cfg.temporal)

    def decode(self, h: Tensor, frame_size: tuple[int, int]) -> Tensor:
        p = self.params
        x = T.relu(T.conv2d(h, p["decoder.conv.kernel"], p["decoder.conv.bias"]))
        # the 1x1 head and bilinear upsampling are both linear and commute exactly
        # (bilinear rows sum to 1), so the head runs at feature resolution
        logits = T.conv2d(x, p["decoder.head.kernel"], p["decoder.head.bias"])
        return T.softmax_channel(T.resample(logits, frame_size, "bilinear"))

    def step(self, frame, state: MFFAState | None, features: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """One time step: ``(softmax map, aggregated features h_i)``."""
        f = features if features is not None else self.encode(frame)
        size = (frame.shape[-3], frame.shape[-2])
        h, _s_crs = self.aggregate(f, state)
        return self.decode(h, size), h

    def run_sequence(self, frames, direction: str = "forward",
                     features: Sequence[Tensor] | None = None) -> SequenceOutput:
        """Recurrent pass over ``N`` frames (axis ``-4``; a leading batch axis is allowed)."""
        frames = frames if isinstance(frames, Tensor) else Tensor(frames, dtype=self.dtype)
        n = frames.shape[-4]
        if n < 1:
            raise ValueError("sequence must be nonempty")
        if direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward or backward, got {direction!r}")
        order = range(n) if direction == "forward" else range(n - 1, -1, -1)
        probs: list[Tensor | None] = [None] * n
        feats: list[Tensor | None] = [None] * n
        tags = [0] * n
        state = None
        prev = None
        for i in order:
            x = Tensor(frames.data[..., i, :, :, :])
            f = features[i] if features is not None else None
            s, h = self.step(x, state, f)
            probs[i], feats[i] = s, h
            # tags are 1-based frame numbers of the state's source
            tags[i] = (prev + 1) if prev is not None else (0 if direction == "forward" else n + 1)
            state = MFFAState(h, predict_mask(s))
            prev = i
        return SequenceOutput(probs, tags, direction, feats)


def predict_mask(s) -> np.ndarray:
    """Instrument where its probability strictly beats background; ties go to background."""
    d = s.data if isinstance(s, Tensor) else np.asarray(s)
    if d.shape[-1] != 2:
        raise ValueError("predict_mask expects a 2-channel map")
    return (d[..., INSTRUMENT] > d[..., 1 - INSTRUMENT]).astype(np.uint8)


def onehot(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    m = np.asarray(mask).astype(dtype)
    return np.stack([m, 1 - m], axis=-1) if INSTRUMENT == 0 else np.stack([1 - m, m], axis=-1)


# ------------------------------------------------------------------ cost model

def conv_macs(h: int, w: int, k: int, cin: int, cout: int) -> int:
    return h * w * k * k * cin * cout


def count_flops(cfg: EncoderConfig, extents: tuple[int, int]) -> int:
    """Exact multiply-accumulate count of the encoder on one frame."""
    h, w = extents
    total = 0
    for cin, cout, stride in cfg.block_layout():
        h = T.conv_output_size(h, 3, stride, "same")
        w = T.conv_output_size(w, 3, stride, "same")
        total += conv_macs(h, w, 3, cin, cout)
    total += conv_macs(h, w, 1, cfg.block_layout()[-1][1], cfg.out_channels)
    return total


def model_flops(cfg: ModelConfig, extents: tuple[int, int]) -> dict[str, int]:
    """MACs per frame split into encoder / MFFA / decoder (state present)."""
    s = cfg.encoder.output_stride
    h, w = extents[0] // s, extents[1] // s
    c, half, hw = cfg.mffa.channels, cfg.mffa.channels // 2, (extents[0] // s) * (extents[1] // s)
    mffa = 0
    if cfg.aggregation != "none":
        if cfg.temporal:
            mffa += conv_macs(h, w, 1, 2 * c, c) + conv_macs(h, w, 1, 2 * c, 1)
        mffa += 2 * conv_macs(h, w, 1, c, half)
        mffa += hw * hw * half + hw * hw * c + hw * c * c
        mffa += conv_macs(h, w, 1, c, 2) + conv_macs(h, w, 3, c + 2, half) + conv_macs(h, w, 3, half, c)
    d = cfg.decoder_channels
    dec = conv_macs(h, w, 3, c, d) + conv_macs(h, w, 1, d, 2)
    return {"encoder": count_flops(cfg.encoder, extents), "mffa": mffa, "decoder": dec}

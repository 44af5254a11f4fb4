"""Adam, the step learning-rate schedule, the synthetic-then-real curriculum and checkpoints."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import queue
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import bytes_to_tensor, load_tensors, save_tensors, tensor_to_bytes
from .dataio import AugmentRanges, FrameSequence, Video, augment_sequence, extract_real_sequences
from .losses import (LossWeights, cross_entropy, loss_backward_seq, loss_first, loss_forward_seq, loss_last,
                     total_loss_real, total_loss_synthetic)
from .mffa import MFFAConfig
from .model import EncoderConfig, ModelConfig, SegModel, to_input
from .synth import NoInstrument, SynthesisRanges, inpaint, synthesize_sequence
from .tensor import Parameter

log = logging.getLogger(__name__)

CURRICULA = ("real_only", "synthetic_then_real")


class NonFiniteGradient(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    lr: float = 0.0005
    decay: float = 0.5
    decay_every: int = 5
    decay_start: int = 20
    curriculum: str = "synthetic_then_real"
    seq_len: int = 4
    seed: int = 0
    encoder: str = "trimmed"
    aggregation: str = "tab+sab"
    channels: int = 64
    base_channels: int = 16
    output_stride: int = 4
    decoder_channels: int = 32
    attention_normalization: str = "row_softmax"
    weights: LossWeights = field(default_factory=LossWeights)
    first_loss: bool = True
    clip_norm: float | None = 5.0
    augment: bool = True
    sampling_stride: int = 3
    synth_translation: tuple[float, float] = (15.0, 40.0)
    synth_rotation: tuple[float, float] = (-30.0, 30.0)
    train_folds: tuple[int, ...] = (0, 1)
    eval_folds: tuple[int, ...] = (2,)

    def __post_init__(self):
        if self.curriculum not in CURRICULA:
            raise ValueError(f"curriculum must be one of {CURRICULA}")
        if self.epochs < 1 or self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("epochs, batch_size and seq_len must be positive")

    @property
    def switch_epoch(self) -> int:
        """First epoch of the real phase."""
        return self.epochs // 2 if self.curriculum == "synthetic_then_real" else 0

    def phase(self, epoch: int) -> str:
        return "synthetic" if epoch < self.switch_epoch else "real"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(self.encoder, self.base_channels, self.output_stride, self.channels),
            mffa=MFFAConfig(self.channels, self.attention_normalization),
            aggregation=self.aggregation,
            decoder_channels=self.decoder_channels,
        )

    def effective_weights(self) -> LossWeights:
        return self.weights if self.first_loss else self.weights.without_first()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        for key in ("synth_translation", "synth_rotation", "train_folds", "eval_folds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Constant until ``decay_start``; halved there and every ``decay_every`` epochs after."""
    if epoch < cfg.decay_start:
        return cfg.lr
    return cfg.lr * cfg.decay ** ((epoch - cfg.decay_start) // cfg.decay_every + 1)


class Adam:
    def __init__(self, params: dict[str, Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params: dict[str, Parameter], lr: float) -> None:
        for name, p in params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_global_norm(params: dict[str, Parameter], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values())))
    if np.isfinite(total) and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            p.grad *= scale
    return total


# ------------------------------------------------------------------ checkpoints

@dataclass
class Checkpoint:
    model: SegModel
    optimizer: Adam
    epoch: int
    config: TrainConfig

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in sorted(self.model.params):
            out[f"model/{name}"] = self.model.params[name].data
        for name in sorted(self.model.params):
            out[f"adam.m/{name}"] = self.optimizer.m[name]
            out[f"adam.v/{name}"] = self.optimizer.v[name]
        out["adam.step"] = np.asarray(self.optimizer.t, np.float32)
        out["meta.epoch"] = np.asarray(self.epoch, np.float32)
        text = self.config.to_json().encode()
        out["meta.config"] = bytes_to_tensor(text)
        out["meta.config_hash"] = bytes_to_tensor(hashlib.sha256(text).digest()[:8])
        return out

    def save(self, path) -> None:
        save_tensors(path, self.tensors())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        t = load_tensors(path)
        text = tensor_to_bytes(t["meta.config"])
        if tensor_to_bytes(t["meta.config_hash"]) != hashlib.sha256(text).digest()[:8]:
            raise ValueError("checkpoint config hash mismatch")
        cfg = TrainConfig.from_dict(json.loads(text))
        params = {k[len("model/"):]: Parameter(v) for k, v in t.items() if k.startswith("model/")}
        model = SegModel(cfg.model_config(), params=params)
        expected = set(SegModel(cfg.model_config()).params)
        if set(params) != expected:
            raise ValueError("checkpoint parameters do not match the configured architecture")
        opt = Adam(params)
        for name in params:
            opt.m[name] = t[f"adam.m/{name}"].copy()
            opt.v[name] = t[f"adam.v/{name}"].copy()
        opt.t = int(t["adam.step"])
        return cls(model, opt, int(t["meta.epoch"]), cfg)


# ------------------------------------------------------------------ batches

@dataclass
class Batch:
    frames: np.ndarray            # B x N x H x W x 3, network input range
    labels: list[np.ndarray | None]  # per position: B x H x W masks or None
    real_index: int


def _stack(seqs: Sequence[FrameSequence], dtype) -> Batch:
    frames = to_input(np.stack([s.frames for s in seqs]), dtype)
    n = len(seqs[0])
    labels = []
    for i in range(n):
        ms = [s.masks[i] for s in seqs]
        labels.append(None if any(m is None for m in ms) else np.stack(ms))
    return Batch(frames, labels, seqs[0].real_index)


class SequenceSource:
    """Per-epoch sequence lists for both phases; inpainted backgrounds are cached per source frame."""

    def __init__(self, videos: Sequence[Video], cfg: TrainConfig):
        self.cfg = cfg
        self.real, self.report = extract_real_sequences(videos, cfg.seq_len, cfg.sampling_stride)
        self.sources = [(s.frames[-1], s.masks[-1]) for s in self.real]
        self._backgrounds: dict[int, np.ndarray] = {}
        self.ranges = SynthesisRanges(cfg.synth_translation, cfg.synth_rotation)

    def background(self, k: int) -> np.ndarray:
        if k not in self._backgrounds:
            frame, label = self.sources[k]
            self._backgrounds[k] = inpaint(frame, label)
        return self._backgrounds[k]

    def epoch_sequences(self, phase: str, rng: np.random.Generator) -> list[FrameSequence]:
        order = rng.permutation(len(self.real))
        if phase == "real":
            return [self.real[k] for k in order]
        out = []
        for k in order:
            frame, label = self.sources[k]
            try:
                out.append(synthesize_sequence(frame, label, self.cfg.seq_len, rng, self.ranges,
                                               background=self.background(k)))
            except NoInstrument:
                log.info("skipping synthesis for an instrument-free labeled frame")
        return out


def _batches(seqs: list[FrameSequence], cfg: TrainConfig, rng, dtype) -> Iterator[Batch]:
    for start in range(0, len(seqs), cfg.batch_size):
        chunk = seqs[start:start + cfg.batch_size]
        if cfg.augment:
            chunk = [augment_sequence(s, rng, AugmentRanges()) for s in chunk]
        yield _stack(chunk, dtype)


def _prefetch(it: Iterator[Batch], capacity: int = 2) -> Iterator[Batch]:
    """Build batches on a helper thread, at most ``capacity`` ahead of the consumer."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    errors: list[BaseException] = []

    def work():
        try:
            for b in it:
                q.put(b)
        except BaseException as exc:  # surfaced on the consumer side
            errors.append(exc)
        finally:
            q.put(done)

    th = threading.Thread(target=work, daemon=True)
    th.start()
    while True:
        b = q.get()
        if b is done:
            break
        yield b
    th.join()
    if errors:
        raise errors[0]


# ------------------------------------------------------------------ objectives

def batch_losses(model: SegModel, batch: Batch, phase: str, weights: LossWeights) -> dict[str, T.Tensor]:
    """Loss terms for one batch; ``total`` is the objective to differentiate."""
    frames = T.Tensor(batch.frames)
    n = batch.frames.shape[1]
    feats = [model.encode(T.Tensor(batch.frames[:, i])) for i in range(n)]
    use_first = (weights.first_synthetic if phase == "synthetic" else weights.first_real) > 0
    terms: dict[str, T.Tensor] = {}

    def stateless(i):
        s, _h = model.step(T.Tensor(batch.frames[:, i]), None, feats[i])
        return s

    if phase == "synthetic":
        if model.cfg.temporal:
            fw = model.run_sequence(frames, "forward", feats)
            bw = model.run_sequence(frames, "backward", feats)
            terms["fw"] = loss_forward_seq(fw, batch.labels)
            terms["bw"] = loss_backward_seq(bw, batch.labels)
        else:
            # without the temporal block every frame is segmented independently,
            # so both traversals produce the same maps
            outs = [stateless(i) for i in range(n)]
            terms["fw"] = terms["bw"] = T.scale(T.add_n([cross_entropy(batch.labels[i], s)
                                                         for i, s in enumerate(outs)]), 1.0 / n)
        if use_first:
            terms["first"] = loss_first(stateless(batch.real_index), batch.labels[batch.real_index])
        terms["total"] = total_loss_synthetic(terms["fw"], terms["bw"], terms.get("first", 0.0), weights)
    else:
        if model.cfg.temporal:
            terms["last"] = loss_last(model.run_sequence(frames, "forward", feats), batch.labels[-1])
        else:
            terms["last"] = cross_entropy(batch.labels[-1], stateless(n - 1))
        if use_first:
            terms["first"] = loss_first(stateless(n - 1), batch.labels[-1])
        terms["total"] = total_loss_real(terms["last"], terms.get("first", 0.0), weights)
    return terms


@contextlib.contextmanager
def thread_cap():
    """Honour ``MFFA_THREADS`` as a cap on BLAS worker threads."""
    n = os.environ.get("MFFA_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(n)):
        yield


@dataclass
class TrainResult:
    model: SegModel
    optimizer: Adam
    history: list[dict]


def train(cfg: TrainConfig, videos: Sequence[Video], out_dir=None,
          on_epoch: Callable[[int, SegModel, dict], None] | None = None,
          resume: Checkpoint | None = None, until: int | None = None) -> TrainResult:
    """Run the curriculum; writes per-epoch checkpoints and a JSON-lines loss log when ``out_dir`` is set.

    ``until`` stops before that epoch without changing the schedule (which is
    defined by ``cfg.epochs``).
    """
    if not videos:
        raise ValueError("no training videos")
    shapes = {v.frames.shape[1:3] for v in videos}
    if len(shapes) != 1:
        raise ValueError(f"training videos have mixed frame sizes: {shapes}")
    (hf, wf), = shapes
    if hf % cfg.output_stride or wf % cfg.output_stride:
        raise ValueError(f"frame size {(hf, wf)} not divisible by output_stride {cfg.output_stride}")
    if any(v.truth is None for v in videos):
        raise ValueError("training videos need ground truth for their labeled frames")
    source = SequenceSource(videos, cfg)
    if not source.real:
        raise ValueError(f"no sequence of length {cfg.seq_len} fits the labeled frames")

    if resume is not None:
        model, opt, start = resume.model, resume.optimizer, resume.epoch + 1
    else:
        model = SegModel(cfg.model_config(), seed=cfg.seed)
        opt = Adam(model.params)
        start = 0
    weights = cfg.effective_weights()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    with thread_cap():
        for epoch in range(start, cfg.epochs if until is None else min(until, cfg.epochs)):
            rng = np.random.default_rng([cfg.seed, epoch])
            phase = cfg.phase(epoch)
            lr = lr_schedule(epoch, cfg)
            seqs = source.epoch_sequences(phase, rng)
            sums: dict[str, float] = {}
            count = 0
            for batch in _prefetch(_batches(seqs, cfg, rng, model.dtype)):
                model.zero_grad()
                terms = batch_losses(model, batch, phase, weights)
                terms["total"].backward()
                if cfg.clip_norm is not None:
                    clip_global_norm(model.params, cfg.clip_norm)
                opt.step(model.params, lr)
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + float(v.data)
                count += 1
            rec = {"epoch": epoch, "phase": phase, "lr": lr,
                   "loss_total": sums["total"] / count,
                   "loss_fw": sums["fw"] / count if "fw" in sums else None,
                   "loss_bw": sums["bw"] / count if "bw" in sums else None,
                   "loss_last": sums["last"] / count if "last" in sums else None,
                   "loss_1st": sums["first"] / count if "first" in sums else None}
            history.append(rec)
            log.info("epoch %d %s lr=%.3g loss=%.4f", epoch, phase, lr, rec["loss_total"])
            if out is not None:
                ck = Checkpoint(model, opt, epoch, cfg)
                ck.save(out / f"epoch{epoch:03d}.mffa")
                ck.save(out / "last.mffa")
                with open(out / "loss_log.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")
            if on_epoch is not None:
                on_epoch(epoch, model, rec)
    return TrainResult(model, opt, history)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)

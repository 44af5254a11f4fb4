"""Sequence objectives built on per-frame cross-entropy."""
from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import SequenceOutput, onehot
from .tensor import ShapeError, Tensor


class MissingLabel(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    fw: float = 1 / 3
    bw: float = 1 / 3
    first_synthetic: float = 1 / 3
    last: float = 1 / 2
    first_real: float = 1 / 2

    def __post_init__(self):
        if any(v < 0 for v in astuple(self)):
            raise ValueError("loss weights must be nonnegative")

    def without_first(self) -> "LossWeights":
        return LossWeights(self.fw, self.bw, 0.0, self.last, 0.0)


def _as_onehot(label, like: Tensor) -> np.ndarray:
    lab = np.asarray(label)
    if lab.shape == like.shape:
        return lab.astype(like.dtype)
    if lab.shape == like.shape[:-1]:
        return onehot(lab, like.dtype)
    raise ShapeError("cross_entropy", "shape", like.shape, lab.shape)


def cross_entropy(s, s_tilde: Tensor) -> Tensor:
    """Mean over every element of the one-hot map (pixels x 2 channels)."""
    return T.cross_entropy(_as_onehot(s, s_tilde), s_tilde)


def _mean(terms: list[Tensor]) -> Tensor:
    return T.scale(T.add_n(terms), 1.0 / len(terms))


def _check_labels(labels: Sequence, n: int) -> None:
    if len(labels) != n:
        raise MissingLabel(f"expected {n} labels, got {len(labels)}")
    for i, lab in enumerate(labels):
        if lab is None:
            raise MissingLabel(f"frame {i + 1} has no label")


def loss_forward_seq(outputs: SequenceOutput, labels: Sequence) -> Tensor:
    n = len(outputs)
    _check_labels(labels, n)
    if outputs.provenance != list(range(n)):
        raise ValueError("loss_forward_seq needs outputs of a forward traversal")
    return _mean([cross_entropy(lab, s) for lab, s in zip(labels, outputs.probs)])


def loss_backward_seq(outputs: SequenceOutput, labels: Sequence) -> Tensor:
    n = len(outputs)
    _check_labels(labels, n)
    if outputs.provenance != list(range(2, n + 2)):
        raise ValueError("loss_backward_seq needs outputs of a backward traversal")
    return _mean([cross_entropy(lab, s) for lab, s in zip(labels, outputs.probs)])


def loss_last(outputs: SequenceOutput, label_last) -> Tensor:
    if label_last is None:
        raise MissingLabel("last frame is unlabeled")
    if outputs.direction != "forward":
        raise ValueError("loss_last needs outputs of a forward traversal")
    return cross_entropy(label_last, outputs.probs[-1])


def loss_first(s_tilde: Tensor, label, provenance: int = 0, n: int | None = None) -> Tensor:
    """Loss on a labeled frame segmented without temporal state (tag 0 or N+1)."""
    if provenance != 0 and (n is None or provenance != n + 1):
        raise ValueError(f"loss_first needs a state-free output, got provenance {provenance}")
    if label is None:
        raise MissingLabel("labeled frame has no label")
    return cross_entropy(label, s_tilde)


def _combine(pairs):
    if all(not isinstance(v, Tensor) for _w, v in pairs):
        return float(sum(w * v for w, v in pairs))
    terms = [T.scale(v if isinstance(v, Tensor) else Tensor(v), w) for w, v in pairs if w != 0]
    return T.add_n(terms) if terms else Tensor(0.0)


def total_loss_synthetic(fw, bw, first, weights: LossWeights = LossWeights()):
    return _combine([(weights.fw, fw), (weights.bw, bw), (weights.first_synthetic, first)])


def total_loss_real(last, first, weights: LossWeights = LossWeights()):
    return _combine([(weights.last, last), (weights.first_real, first)])

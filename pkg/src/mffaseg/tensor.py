"""Small reverse-mode autodiff engine over numpy arrays.

Feature maps are channels-last: ``H x W x C``, optionally with a leading batch
axis (``B x H x W x C``).  Every op records a backward closure on its output;
``Tensor.backward`` replays those closures in strict reverse creation order.
"""
from __future__ import annotations

import contextlib
import functools
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand extents do not fit an op's contract."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: mismatch on axis '{axis}' (expected {expected}, got {got})")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        self._accumulate(grad)
        tape.replay()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf; ``grad`` always exists and matches ``value``'s shape."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.op = "param"

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Tape:
    """Ordered op records reachable from one output."""

    def __init__(self, records: list[Tensor]):
        # creation ids are monotone, so descending id is a valid reverse topological order
        self.records = sorted(records, key=lambda t: t._id, reverse=True)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        stack = [out]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        return cls(nodes)

    def replay(self) -> list[int]:
        visited = []
        for node in self.records:
            if node.grad is not None:
                node._backward(node.grad)
            visited.append(node._id)
        return visited


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise

def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == b.ndim and a.shape[:-1] == b.shape[:-1]:
        if b.shape[-1] == 1:
            return "b_map"
        if a.shape[-1] == 1:
            return "a_map"
    if a.ndim != b.ndim:
        raise ShapeError(op, "rank", a.ndim, b.ndim)
    for ax, (m, n) in enumerate(zip(a.shape, b.shape)):
        if m != n:
            name = "channels" if ax == a.ndim - 1 else f"axis{ax}"
            raise ShapeError(op, name, m, n)
    raise ShapeError(op, "shape", a.shape, b.shape)


def _reduce_to(g: np.ndarray, kind: str, which: str) -> np.ndarray:
    if (kind == "b_map" and which == "b") or (kind == "a_map" and which == "a"):
        return g.sum(axis=-1, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, kind, "a"))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, kind, "b"))

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    """Pointwise product; a single-channel map broadcasts over channels."""
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, kind, "a"))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, kind, "b"))

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        x._accumulate(g * c)

    return _make(x.data * c, (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (out > 0))

    return _make(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def backward(g):
        x._accumulate(g * s * (1 - s))

    return _make(s, (x,), backward, "sigmoid")


def elementwise(op: str, *operands) -> Tensor:
    table = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


# -------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ------------------------------------------------------------ shape plumbing

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g):
        x._accumulate(g.reshape(src))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def backward(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(x.data, -1, -2), (x,), backward, "transpose")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        for ax, (m, n) in enumerate(zip(a.shape[:-1], b.shape[:-1])):
            if m != n:
                raise ShapeError("concat_channels", ("H", "W")[ax - (a.ndim - 3)] if ax >= a.ndim - 3 else "batch", m, n)
        raise ShapeError("concat_channels", "rank", a.ndim, b.ndim)
    ca = a.shape[-1]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[..., :ca])
        if b.requires_grad:
            b._accumulate(g[..., ca:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), backward, "concat")


# --------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``M x K`` times ``K x N`` (leading batch axes allowed)."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner", a.shape[-1], b.shape[-2])

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ _contig(np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            gb = _contig(np.swapaxes(a.data, -1, -2)) @ g
            while gb.ndim > b.data.ndim:
                gb = gb.sum(axis=0)
            b._accumulate(gb)

    # BLAS is several times slower on transposed views; pay for the copy instead
    return _make(_contig(a.data) @ _contig(b.data), (a, b), backward, "matmul")


def _contig(x: np.ndarray) -> np.ndarray:
    return x if x.flags.c_contiguous else np.ascontiguousarray(x)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", "inner", w.shape[0], x.shape[-1])
    parents = (x, w) if b is None else (x, w, b)
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, parents, backward, "linear")


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> list[np.ndarray]:
    return [
        xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
        for i in range(kh) for j in range(kw)
    ]


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    pad = k // 2 if padding == "same" else 0
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation of a channels-last map with a ``kh x kw x Cin x Cout`` kernel.

    "same" zero-pads by ``k // 2``; with stride 1 it preserves ``H x W``.
    """
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", "kernel", "odd extents", (kh, kw))
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if stride < 1:
        raise ValueError("stride must be positive")
    xd = x.data
    squeeze = xd.ndim == 3
    if squeeze:
        xd = xd[None]
    if xd.ndim != 4:
        raise ShapeError("conv2d", "rank", "3 or 4", x.data.ndim)
    if xd.shape[-1] != cin:
        raise ShapeError("conv2d", "channels", cin, xd.shape[-1])
    nb, h, w, _ = xd.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "H" if ho < 1 else "W", f">= {kh}", (h, w))
    ph, pw = (kh // 2, kw // 2) if padding == "same" else (0, 0)
    w2 = kernel.data.reshape(kh * kw * cin, cout)

    if kh == 1 and kw == 1:
        xs = xd[:, ::stride, ::stride, :] if stride > 1 else xd
        cols = xs
    else:
        if ph or pw:
            xp = np.zeros((nb, h + 2 * ph, w + 2 * pw, cin), dtype=xd.dtype)
            xp[:, ph:ph + h, pw:pw + w, :] = xd
        else:
            xp = xd
        cols = np.concatenate(_patches(xp, kh, kw, stride, ho, wo), axis=-1)
    # one flat GEMM; a 4-D operand would be run as H separate small products
    out = (_contig(cols).reshape(-1, cols.shape[-1]) @ w2).reshape(nb, ho, wo, cout)
    if bias is not None:
        out += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(-1, cout)
        if kernel.requires_grad:
            kernel._accumulate((cols.reshape(-1, cols.shape[-1]).T @ g2).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(nb, ho, wo, -1)
            if kh == 1 and kw == 1:
                if stride == 1:
                    gx = gcols
                else:
                    gx = np.zeros_like(xd)
                    gx[:, ::stride, ::stride, :] = gcols
            else:
                gxp = np.zeros((nb, h + 2 * ph, w + 2 * pw, cin), dtype=xd.dtype)
                for idx, (i, j) in enumerate(itertools.product(range(kh), range(kw))):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                        gcols[..., idx * cin:(idx + 1) * cin]
                gx = gxp[:, ph:ph + h, pw:pw + w, :]
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, parents, backward, "conv2d")


# ---------------------------------------------------------------- softmax

def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    if x.shape[-1] < 2:
        raise ShapeError("softmax_channel", "channels", ">= 2", x.shape[-1])
    s = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), backward, "softmax")


# ---------------------------------------------------------------- resampling

@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row i holds half-pixel-centred linear weights for output sample i (cached, read-only)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == n_in:
        np.fill_diagonal(m, 1)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    m.flags.writeable = False
    return m


def nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int), n_in - 1)


def resample(x: Tensor, target: tuple[int, int], mode: str = "bilinear") -> Tensor:
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError("target extents must be positive")
    xd = x.data
    h, w = xd.shape[-3], xd.shape[-2]
    if mode == "nearest":
        ri, ci = nearest_indices(th, h), nearest_indices(tw, w)
        return Tensor(xd[..., ri, :, :][..., :, ci, :])
    if mode != "bilinear":
        raise ValueError(f"unknown resample mode {mode!r}")
    if (th, tw) == (h, w):
        return _make(xd.copy(), (x,), lambda g: x._accumulate(g), "resample")
    ry = _bilinear_matrix(th, h, xd.dtype)
    rx = _bilinear_matrix(tw, w, xd.dtype)
    # out[..., p, q, c] = sum_ij ry[p, i] rx[q, j] x[..., i, j, c], as two matmuls
    lead, c = xd.shape[:-3], xd.shape[-1]
    tmp = (ry @ xd.reshape(*lead, h, w * c)).reshape(*lead, th, w, c)
    out = rx @ tmp

    def backward(g):
        gt = (rx.T @ g).reshape(*lead, th, w * c)
        x._accumulate((ry.T @ gt).reshape(xd.shape))

    return _make(out, (x,), backward, "resample")


def resize_nearest(arr: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest resize of a plain ``H x W`` (or ``... x H x W``) array."""
    ri = nearest_indices(target[0], arr.shape[-2])
    ci = nearest_indices(target[1], arr.shape[-1])
    return arr[..., ri, :][..., :, ci]


# ---------------------------------------------------------------- loss primitive

LOG_CLAMP = 1e-12


def cross_entropy(target: np.ndarray, probs: Tensor) -> Tensor:
    """``-(1/M) sum_k t_k log p_k`` with M the element count of ``target``."""
    t = np.asarray(target, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise ShapeError("cross_entropy", "shape", t.shape, probs.shape)
    m = t.size
    p = probs.data
    clipped = np.maximum(p, LOG_CLAMP)
    val = -(t * np.log(clipped)).sum() / m

    def backward(g):
        probs._accumulate(np.where(p >= LOG_CLAMP, -g * t / (m * clipped), 0).astype(p.dtype))

    return _make(np.asarray(val, dtype=p.dtype), (probs,), backward, "cross_entropy")


def add_n(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out

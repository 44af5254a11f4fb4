"""Central-difference gradient verification and the registered-op suite."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` must return a scalar tensor.  When ``max_coords`` is set, a random
    subset of coordinates is probed (the analytic gradient is still full).
    """
    if isinstance(x, Parameter):
        x.zero_grad()
    else:
        x.grad = None
        x.requires_grad = True
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    with T.no_grad():
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            up = float(f(x).data)
            flat[k] = orig - eps
            down = float(f(x).data)
            flat[k] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[k])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def check_many(f: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float = 1e-5,
               max_coords: int | None = None) -> dict[str, float]:
    """Run ``finite_diff_check`` for each named input of a closure ``f()``."""
    return {name: finite_diff_check(lambda _t: f(), t, eps=eps, max_coords=max_coords)
            for name, t in tensors.items()}


# ------------------------------------------------------------------ registry

def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(out: Tensor, rng) -> Tensor:
    # random projection keeps every output coordinate in play
    w = Tensor(rng.standard_normal(out.shape))
    return T.sum_all(T.mul(out, w))


def _case_conv(rng, shape):
    h, w, cin, cout, k, stride, pad = shape
    x = _rand(rng, h, w, cin)
    kern = _rand(rng, k, k, cin, cout)
    b = _rand(rng, cout)
    return [x, kern, b], lambda: _weighted_sum(T.conv2d(x, kern, b, stride=stride, padding=pad), np.random.default_rng(1))


def _case_matmul(rng, shape):
    m, k, n = shape
    a, b = _rand(rng, m, k), _rand(rng, k, n)
    return [a, b], lambda: _weighted_sum(T.matmul(a, b), np.random.default_rng(1))


def _case_linear(rng, shape):
    m, k, n = shape
    x, w, b = _rand(rng, m, k), _rand(rng, k, n), _rand(rng, n)
    return [x, w, b], lambda: _weighted_sum(T.linear(x, w, b), np.random.default_rng(1))


def _case_add(rng, shape):
    a, b = _rand(rng, *shape), _rand(rng, *shape[:-1], 1)
    return [a, b], lambda: _weighted_sum(T.add(a, b), np.random.default_rng(1))


def _case_mul(rng, shape):
    a, b = _rand(rng, *shape), _rand(rng, *shape[:-1], 1)
    return [a, b], lambda: _weighted_sum(T.mul(a, b), np.random.default_rng(1))


def _case_relu(rng, shape):
    x = _rand(rng, *shape)
    # keep probes away from the kink
    x.data[np.abs(x.data) < 1e-3] = 0.5
    return [x], lambda: _weighted_sum(T.relu(x), np.random.default_rng(1))


def _case_sigmoid(rng, shape):
    x = _rand(rng, *shape)
    return [x], lambda: _weighted_sum(T.sigmoid(x), np.random.default_rng(1))


def _case_softmax(rng, shape):
    x = _rand(rng, *shape)
    return [x], lambda: _weighted_sum(T.softmax_channel(x), np.random.default_rng(1))


def _case_concat(rng, shape):
    h, w, ca, cb = shape
    a, b = _rand(rng, h, w, ca), _rand(rng, h, w, cb)
    return [a, b], lambda: _weighted_sum(T.concat_channels(a, b), np.random.default_rng(1))


def _case_resample(rng, shape):
    h, w, c, th, tw = shape
    x = _rand(rng, h, w, c)
    return [x], lambda: _weighted_sum(T.resample(x, (th, tw)), np.random.default_rng(1))


def _case_reshape_transpose(rng, shape):
    h, w, c = shape
    x = _rand(rng, h, w, c)
    return [x], lambda: _weighted_sum(T.transpose(T.reshape(x, (h * w, c))), np.random.default_rng(1))


def _case_cross_entropy(rng, shape):
    h, w = shape
    logits = _rand(rng, h, w, 2)
    lab = rng.integers(0, 2, size=(h, w))
    onehot = np.stack([lab, 1 - lab], axis=-1).astype(np.float64)
    return [logits], lambda: T.cross_entropy(onehot, T.softmax_channel(logits))


@dataclass(frozen=True)
class RegisteredOp:
    name: str
    build: Callable
    shapes: tuple


REGISTERED_OPS: tuple[RegisteredOp, ...] = (
    RegisteredOp("conv2d", _case_conv, (
        (5, 5, 2, 3, 3, 1, "same"), (6, 7, 3, 2, 3, 2, "same"), (7, 6, 2, 2, 3, 1, "valid"),
        (4, 4, 3, 5, 1, 1, "same"))),
    RegisteredOp("matmul", _case_matmul, ((4, 6, 5), (1, 3, 2), (5, 2, 7))),
    RegisteredOp("linear", _case_linear, ((4, 6, 5), (9, 3, 3), (2, 4, 1))),
    RegisteredOp("add", _case_add, ((3, 3, 2), (2, 4, 5), (4, 2, 3))),
    RegisteredOp("mul", _case_mul, ((3, 3, 2), (2, 4, 5), (4, 2, 3))),
    RegisteredOp("relu", _case_relu, ((3, 3, 2), (5, 1, 4), (2, 6, 3))),
    RegisteredOp("sigmoid", _case_sigmoid, ((3, 3, 2), (5, 1, 4), (2, 6, 3))),
    RegisteredOp("softmax_channel", _case_softmax, ((3, 3, 2), (4, 4, 3), (9, 9))),
    RegisteredOp("concat_channels", _case_concat, ((2, 2, 3, 5), (3, 4, 1, 2), (4, 3, 2, 0))),
    RegisteredOp("resample", _case_resample, ((3, 3, 2, 6, 6), (4, 5, 3, 8, 10), (6, 6, 2, 3, 4))),
    RegisteredOp("reshape_transpose", _case_reshape_transpose, ((3, 3, 2), (4, 2, 5), (2, 6, 3))),
    RegisteredOp("cross_entropy", _case_cross_entropy, ((3, 3), (4, 5), (6, 2))),
)


def run_registered(eps: float = 1e-5, seed: int = 0) -> list[tuple[str, tuple, float]]:
    """Gradient-check every registered op on each of its shapes (double precision)."""
    rng = np.random.default_rng(seed)
    results = []
    for op in REGISTERED_OPS:
        for shape in op.shapes:
            inputs, f = op.build(rng, shape)
            err = max(finite_diff_check(lambda _t: f(), t, eps=eps) for t in inputs if t.data.size)
            results.append((op.name, shape, err))
    return results


def run_composite(eps: float = 1e-5, seeds=(0, 1, 2), max_coords: int | None = None):
    """encode -> MFFA -> decode -> cross-entropy, checked w.r.t. every parameter."""
    from .model import EncoderConfig, ModelConfig, SegModel
    from .mffa import MFFAConfig, MFFAState

    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        side = (12, 16, 24)[seed % 3]
        cfg = ModelConfig(
            encoder=EncoderConfig(variant="trimmed", base_channels=2, output_stride=4, out_channels=4),
            mffa=MFFAConfig(channels=4),
            decoder_channels=3,
        )
        model = SegModel(cfg, seed=seed, dtype=np.float64)
        # zero biases put pre-activations exactly on ReLU kinks, where central differences are meaningless
        for name, prm in model.params.items():
            if name.endswith("bias"):
                prm.data[...] = rng.normal(0, 0.1, prm.shape)
        frame = Tensor(rng.uniform(0, 1, (side, side, 3)))
        fh = side // 4
        state = MFFAState(Tensor(np.abs(rng.standard_normal((fh, fh, 4)))),
                          (rng.uniform(size=(side, side)) > 0.5).astype(np.uint8))
        lab = rng.integers(0, 2, size=(side, side))
        onehot = np.stack([lab, 1 - lab], axis=-1).astype(np.float64)

        def f():
            s, _h = model.step(frame, state)
            return T.cross_entropy(onehot, s)

        errs = check_many(f, dict(model.params.items()), eps=eps, max_coords=max_coords)
        results.append((f"composite[{side}x{side}]", max(errs, key=errs.get), max(errs.values())))
    return results


def main(full: bool = False, tol: float = 1e-4, out=print) -> bool:
    start = time.perf_counter()
    ok = True
    for name, shape, err in run_registered():
        passed = err < tol
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name} {shape} max_rel_err={err:.3e}")
    if full:
        for name, worst_param, err in run_composite():
            passed = err < tol
            ok &= passed
            out(f"{'PASS' if passed else 'FAIL'} {name} worst={worst_param} max_rel_err={err:.3e}")
    out(f"gradcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.1f}s")
    return ok

"""Finite-difference gradient suite over every differentiable op.

Each op is checked on ``instances`` random small inputs in float64, once per
differentiable argument. A random fixed projection turns the op's output into
a scalar so every output coordinate contributes to the checked gradient.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .models import ConvLSTMState, cam_attention, convlstm_step
from .rng import make_stream

TOLERANCE = 1e-4


def _proj(y: T.Tensor, key: int) -> T.Tensor:
    """Scalar <y, w> with w regenerated from a fixed stream on every call."""
    w = make_stream(key, "gradsuite/projection").standard_normal(y.shape)
    return T.tsum(T.mul(y, T.Tensor(w)))


def _away(rng, shape, margin=0.1, scale=1.0):
    """Values with |x| >= margin, for ops with a kink at zero."""
    x = rng.uniform(margin, scale + margin, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _cases(rng):
    """Yield (op name, input array, scalar function of one Tensor)."""
    sn = rng.standard_normal
    a, b = sn((3, 4)), sn((3, 4))
    yield "add", a, lambda x: _proj(T.add(x, T.Tensor(b)), 1)
    yield "add(broadcast)", sn((4,)), lambda x: _proj(T.add(T.Tensor(a), x), 2)
    yield "sub", a, lambda x: _proj(T.sub(T.Tensor(b), x), 3)
    yield "mul", a, lambda x: _proj(T.mul(x, T.Tensor(b)), 4)
    yield "relu", _away(rng, (3, 5)), lambda x: _proj(T.relu(x), 5)
    yield "sigmoid", sn((3, 5)) * 2, lambda x: _proj(T.sigmoid(x), 6)
    yield "tanh", sn((3, 5)), lambda x: _proj(T.tanh(x), 7)
    yield "exp", sn((3, 5)) * 0.5, lambda x: _proj(T.exp(x), 8)
    yield "log", rng.uniform(0.2, 2.0, (3, 5)), lambda x: _proj(T.log(x), 9)
    yield "safe_log", rng.uniform(0.05, 0.95, (3, 5)), lambda x: _proj(T.safe_log(x), 10)
    yield "clamp", _away(rng, (3, 5), 0.05, 1.8), lambda x: _proj(T.clamp(x, -1.0, 1.0), 11)
    yield "sum", sn((2, 3, 4)), lambda x: _proj(T.tsum(x, axis=1), 12)
    yield "mean", sn((2, 3, 4)), lambda x: _proj(T.mean(x, axis=(0, 2)), 13)
    yield "softmax", sn((3, 7)) * 2, lambda x: _proj(T.softmax(x, axis=-1), 14)
    m1, m2 = sn((3, 5)), sn((5, 4))
    yield "matmul(a)", m1, lambda x: _proj(T.matmul(x, T.Tensor(m2)), 15)
    yield "matmul(b)", m2, lambda x: _proj(T.matmul(T.Tensor(m1), x), 16)
    lw, lb = sn((6, 4)), sn((4,))
    li = sn((3, 6))
    yield "linear(x)", li, lambda x: _proj(T.linear(x, T.Tensor(lw), T.Tensor(lb)), 17)
    yield "linear(w)", lw, lambda x: _proj(T.linear(T.Tensor(li), x, T.Tensor(lb)), 18)
    yield "linear(b)", lb, lambda x: _proj(T.linear(T.Tensor(li), T.Tensor(lw), x), 19)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    ci, cw, cb = sn((2, 2, 5, 5)), sn((3, 2, 3, 3)) * 0.5, sn((3,))
    yield "conv2d(x)", ci, lambda x: _proj(T.conv2d(x, T.Tensor(cw), T.Tensor(cb), stride, pad), 20)
    yield "conv2d(w)", cw, lambda x: _proj(T.conv2d(T.Tensor(ci), x, T.Tensor(cb), stride, pad), 21)
    yield "conv2d(b)", cb, lambda x: _proj(T.conv2d(T.Tensor(ci), T.Tensor(cw), x, stride, pad), 22)
    yield "avg_pool2d", sn((2, 3, 4, 4)), lambda x: _proj(T.avg_pool2d(x, 2), 23)
    yield "avg_pool2d(global)", sn((2, 3, 3, 3)), lambda x: _proj(T.avg_pool2d(x, global_pool=True), 24)
    yield "reshape", sn((2, 6)), lambda x: _proj(T.reshape(x, (3, 4)), 25)
    yield "flatten", sn((2, 3, 2, 2)), lambda x: _proj(T.flatten(x), 26)
    yield "transpose", sn((2, 3, 4)), lambda x: _proj(T.transpose(x, (2, 0, 1)), 27)
    other = sn((2, 2, 3))
    yield "concat", sn((2, 1, 3)), lambda x: _proj(T.concat([T.Tensor(other), x], axis=1), 28)
    yield "stack", sn((2, 3)), lambda x: _proj(T.stack([x, T.Tensor(other[:, 0])], axis=0), 29)
    yield "slice", sn((4, 5)), lambda x: _proj(T.getitem(x, (slice(1, 3), slice(None, None, 2))), 30)
    idx = rng.integers(0, 4, 6)
    yield "gather", sn((4, 3)), lambda x: _proj(T.getitem(x, idx), 31)
    hx, wx, wh, bias = sn((1, 3, 3, 3)), sn((8, 3, 3, 3)) * 0.3, sn((8, 2, 3, 3)) * 0.3, sn((8,)) * 0.3
    h0, c0 = sn((1, 2, 3, 3)) * 0.5, sn((1, 2, 3, 3)) * 0.5

    def lstm(x=None, w=None):
        st = ConvLSTMState(T.Tensor(h0), T.Tensor(c0))
        xin = x if x is not None else T.Tensor(hx)
        st = convlstm_step(xin, st, w if w is not None else T.Tensor(wx), T.Tensor(wh), T.Tensor(bias))
        return T.add(_proj(st.h, 32), _proj(st.c, 33))
    yield "convlstm_step(x)", hx, lambda x: lstm(x=x)
    yield "convlstm_step(w)", wx, lambda x: lstm(w=x)
    fw, fb = sn((3, 4)), sn((4,))
    yield "cam_attention", sn((2, 3, 3, 3)), lambda x: _proj(cam_attention(x, T.Tensor(fw), T.Tensor(fb))[0],
                                                              34)


def run_suite(instances: int = 10, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per op over ``instances`` random instances."""
    worst: dict[str, float] = {}
    for i in range(instances):
        for name, x, fn in _cases(make_stream(seed, f"gradsuite/{i}")):
            err = T.grad_check(fn, np.asarray(x, np.float64), eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def report(instances=10, seed=0) -> tuple[bool, list[str], float]:
    t0 = time.perf_counter()
    worst = run_suite(instances, seed)
    lines = [f"{name:<22s} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}" for name, err in worst.items()]
    return all(e < TOLERANCE for e in worst.values()), lines, time.perf_counter() - t0

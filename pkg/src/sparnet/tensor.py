"""Dense tensors with reverse-mode automatic differentiation.

Storage is numpy (NCHW, row-major). Every differentiable op records a
:class:`Node` holding its inputs and a backward rule; :func:`backward`
orders the recorded nodes into a :class:`Tape` and walks it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
_BATCHED_MIN_PIXELS = 256
DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, where: str):
        super().__init__(f"non-finite {where} at op '{op}'")
        self.op = op


_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "output", "rule", "seq", "consumed")

    def __init__(self, op, inputs, rule):
        self.op = op
        self.inputs = inputs
        self.rule = rule
        self.output = None
        self.seq = next(_seq)
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data, op, inputs, rule) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        node = Node(op, inputs, rule)
        node.output = out
        out.node = node
        out.requires_grad = True
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift(a, b):
    """Wrap python scalars in the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _make(y, "relu", (x,), lambda g: (g * (y > 0),))


def sigmoid(x: Tensor) -> Tensor:
    # two-sided form keeps exp() from overflowing
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1 - y * y),))


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clamp(x: Tensor, lo=None, hi=None) -> Tensor:
    y = np.clip(x.data, lo, hi)
    inside = y == x.data
    return _make(y, "clamp", (x,), lambda g: (g * inside,))


def safe_log(p: Tensor) -> Tensor:
    """log of probabilities after clamping to [PROB_FLOOR, 1]."""
    return log(clamp(p, PROB_FLOOR, 1.0))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
    return _make(np.asarray(y, dtype=x.dtype), "sum", (x,), rule)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, "softmax", (x,), rule)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} x {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """out[b, k] = sum_d x[b, d] * weight[d, k] + bias[k]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear {x.shape} with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias {bias.shape} for {weight.shape[1]} outputs")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data

    def rule(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads if bias is None else grads + (g.sum(axis=0),)
    return _make(y, "linear", inputs, rule)


def conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, NCHW input, OCkk weight (im2col + matmul)."""
    if stride < 1 or padding < 0:
        raise GeometryError(f"stride={stride} padding={padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias {bias.shape} for {o} outputs")
    ho, wo = conv_out_size(h, kh, stride, padding), conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise GeometryError(f"conv2d output extent {ho}x{wo} from input {h}x{w}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # cols[n, (c, i, j), (y, x)] = xp[n, c, i + stride*y, j + stride*x]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    w2 = weight.data.reshape(o, -1)
    # large maps: one matmul per image; small maps: a single flat matmul
    batched = ho * wo >= _BATCHED_MIN_PIXELS
    if batched:
        cols = cols.reshape(n, c * kh * kw, ho * wo)
        y = np.matmul(w2, cols)
    else:
        cols = np.ascontiguousarray(cols.reshape(n, c * kh * kw, ho * wo).transpose(0, 2, 1)).reshape(n * ho * wo, -1)
        y = (cols @ w2.T).reshape(n, ho * wo, o).transpose(0, 2, 1)
    if bias is not None:
        y = y + bias.data[:, None]
    y = np.ascontiguousarray(y).reshape(n, o, ho, wo)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        g3 = g.reshape(n, o, ho * wo)
        if batched:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
        else:
            g2 = np.ascontiguousarray(g3.transpose(0, 2, 1)).reshape(-1, o)
            gw = g2.T @ cols
        gx = None
        if x.requires_grad:
            if batched:
                gcols = np.matmul(w2.T, g3).reshape(n, c, kh, kw, ho, wo)
            else:
                gcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = (gx, gw.reshape(weight.shape))
        return grads if bias is None else grads + (g3.sum(axis=(0, 2)),)
    return _make(y, "conv2d", inputs, rule)


def avg_pool2d(x: Tensor, window=None, global_pool=False) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if global_pool:
        return mean(x, axis=(2, 3), keepdims=True)
    k = int(window)
    if k < 1 or k > h or k > w:
        raise GeometryError(f"pool window {k} on {h}x{w} input")
    if h % k or w % k:
        raise GeometryError(f"pool window {k} does not divide {h}x{w}")
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def rule(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx.astype(x.dtype),)
    return _make(y.astype(x.dtype), "avg_pool2d", (x,), rule)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (shape.count(-1) == 0 and int(np.prod(shape)) != x.size) or \
            (shape.count(-1) == 1 and (not known or x.size % int(np.prod(known)))):
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor, start_axis=1) -> Tensor:
    return reshape(x, x.shape[:start_axis] + (-1,))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along {ax}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def rule(g):
        return tuple(np.take(g, range(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), rule)


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    parts = []
    for t in tensors:
        shp = list(t.shape)
        shp.insert(axis % (t.ndim + 1), 1)
        parts.append(reshape(t, shp))
    return concat(parts, axis)


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]
    basic = _is_basic_index(index)

    def rule(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)
    return _make(np.array(y, dtype=x.dtype, copy=True), "slice", (x,), rule)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------- shape inference

def infer_shape(op: str, *shapes, **kw) -> tuple:
    """Output shape of ``op`` from input shapes alone."""
    if op in ("add", "sub", "mul"):
        return tuple(np.broadcast_shapes(*shapes))
    if op in ("relu", "sigmoid", "tanh", "exp", "log", "clamp", "softmax"):
        return tuple(shapes[0])
    if op == "matmul" or op == "linear":
        (b, d), (d2, k) = shapes[0], shapes[1]
        if d != d2:
            raise ShapeError(f"{op} {shapes[0]} x {shapes[1]}")
        return (b, k)
    if op == "conv2d":
        (n, c, h, w), (o, ci, kh, kw_) = shapes[0], shapes[1]
        if c != ci:
            raise ShapeError("channel mismatch")
        s, p = kw.get("stride", 1), kw.get("padding", 0)
        return (n, o, conv_out_size(h, kh, s, p), conv_out_size(w, kw_, s, p))
    if op == "avg_pool2d":
        n, c, h, w = shapes[0]
        if kw.get("global_pool"):
            return (n, c, 1, 1)
        k = kw["window"]
        return (n, c, h // k, w // k)
    if op == "sum":
        axes = _norm_axis(kw.get("axis"), len(shapes[0]))
        keep = kw.get("keepdims", False)
        return tuple((1 if i in axes else s) for i, s in enumerate(shapes[0]) if keep or i not in axes)
    if op == "reshape":
        target = list(kw["shape"])
        total = int(np.prod(shapes[0]))
        if -1 in target:
            rest = int(np.prod([t for t in target if t != -1]))
            target[target.index(-1)] = total // rest
        return tuple(target)
    if op == "flatten":
        start = kw.get("start_axis", 1)
        return tuple(shapes[0][:start]) + (int(np.prod(shapes[0][start:])),)
    if op == "concat":
        ax = kw.get("axis", 0) % len(shapes[0])
        out = list(shapes[0])
        out[ax] = sum(s[ax] for s in shapes)
        return tuple(out)
    if op == "transpose":
        axes = kw.get("axes") or tuple(reversed(range(len(shapes[0]))))
        return tuple(shapes[0][a] for a in axes)
    raise KeyError(op)


# ---------------------------------------------------------------- tape and backward

class Tape:
    """Recorded nodes reachable from an output, in topological order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen, stack_, nodes = set(), [out], []
        while stack_:
            t = stack_.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack_.extend(node.inputs)
        # creation order is a valid topological order
        nodes.sort(key=lambda nd: nd.seq)
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for node in self.nodes:
            for t in node.inputs:
                if t.node is None and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, accumulate: bool = False, check_finite: bool = False) -> Tape:
    """Populate ``.grad`` of every leaf that requires grad.

    With ``accumulate=False`` (default) a graph can be walked once and leaf
    grads must have been reset; with ``accumulate=True`` the graph is kept
    and gradients add into existing buffers.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss.node is None:
        _deposit(loss, np.ones_like(loss.data), accumulate)
        return Tape([])
    tape = Tape.from_output(loss)
    for node in tape:
        if node.consumed:
            raise TapeError("graph already consumed by a previous backward(); rebuild it or use accumulate=True")
    leaves = tape.leaves()
    if not accumulate:
        for leaf in leaves:
            if leaf.grad is not None:
                raise TapeError(f"grad of {leaf!r} was not reset before backward()")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.rule(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if check_finite and not np.all(np.isfinite(gi)):
                raise NonFiniteError(node.op, "gradient")
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
        if not accumulate:
            node.consumed = True
            node.rule = None
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is not None:
            _deposit(leaf, g, accumulate)
    return tape


def _deposit(leaf: Tensor, g, accumulate):
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    elif accumulate:
        leaf.grad = leaf.grad + g
    else:
        raise TapeError(f"grad of {leaf!r} was not reset before backward()")


# ---------------------------------------------------------------- initialisation

def init_param(shape, scheme: str, rng: np.random.Generator | None, dtype=np.float32,
               fan_in: int | None = None, fan_out: int | None = None, name: str | None = None) -> Tensor:
    """Parameter tensor drawn from ``rng``.

    Fans default to conv layout (OCkk: fan_in = C*k*k) for 4-d shapes and to
    the in-by-out linear layout ([D, K]: fan_in = D) for 2-d shapes.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid parameter shape {shape}")
    if scheme == "zeros":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
    if rng is None:
        raise ValueError(f"scheme {scheme!r} needs an rng stream")
    if fan_in is None or fan_out is None:
        fi, fo = _fans(shape)
        fan_in = fi if fan_in is None else fan_in
        fan_out = fo if fan_out is None else fan_out
    if scheme == "kaiming":
        data = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    elif scheme == "xavier":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype), requires_grad=True, name=name)


def _fans(shape):
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    rf = int(np.prod(shape[2:]))
    return shape[1] * rf, shape[0] * rf


# ---------------------------------------------------------------- gradient checking

def first_nonfinite(out: Tensor) -> str | None:
    """Name of the earliest recorded op whose value is non-finite."""
    if out.node is None:
        return None if np.all(np.isfinite(out.data)) else "leaf"
    for node in Tape.from_output(out):
        if not np.all(np.isfinite(node.output.data)):
            return node.op
    return None


def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|, |numeric|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = fn(probe)
    bad = first_nonfinite(out)
    if bad is not None:
        raise NonFiniteError(bad, "value")
    backward(out, check_finite=True)
    analytic = probe.grad
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = fn(Tensor(base.copy())).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("finite-difference probe", "value")
            num_flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))

"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations executed inside an active :class:`Graph` context are appended to
that graph's tape; :func:`backward` then replays the tape in reverse.  Outside
any graph, operations simply compute values (inference mode).

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_(matmul(w, Tensor([[3.0]])))
    >>> backward(g, loss)
    >>> w.grad
    array([[3.]])
"""

from __future__ import annotations

import contextlib
import json
import threading
from collections import OrderedDict
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateInputError, DimensionError, FormatError, NumericError

CHECKPOINT_FORMAT_VERSION = 1
NORM_EPS = 1e-12


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor {name or ''} has non-finite values")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self):
        return self.values

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Node(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Graph:
    """Append-only tape of operation records.

    Used as a context manager; nested graphs shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


class _State(threading.local):
    def __init__(self):
        self.stack: list[Graph] = []
        self.faults: set[str] = set()


_state = _State()


def active_graph():
    return _state.stack[-1] if _state.stack else None


@contextlib.contextmanager
def inject_fault(op_name):
    """Test hook: corrupt the backward pass of ``op_name`` (scales grads by 1.001)."""
    _state.faults.add(op_name)
    try:
        yield
    finally:
        _state.faults.discard(op_name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, values, inputs, backward_fn):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{op} produced non-finite values")
    graph = active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        if op in _state.faults:
            inner = backward_fn

            def backward_fn(g, _inner=inner):
                return tuple(None if r is None else r * 1.001 for r in _inner(g))

        graph.record(op, inputs, out, backward_fn)
    return out


def backward(graph: Graph, loss: Tensor):
    """Accumulate dloss/dt into ``t.grad`` for every tensor on the tape.

    Gradients are added to existing buffers, so calling this twice without
    :meth:`Tensor.zero_grad` doubles them.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    pending = {id(loss): (loss, np.ones_like(loss.values))}
    for node in reversed(graph.nodes):
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        out, g = entry
        out.grad = g.copy() if out.grad is None else out.grad + g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = (inp, pending[key][1] + gi)
            else:
                pending[key] = (inp, gi)
    for t, g in pending.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values - b.values
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _make("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make("mul", out, (a, b), bw)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.values)
    return _make("exp", out, (x,), lambda g: (g * out,))


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0
    return _make("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def sum_(x, axis=None):
    x = as_tensor(x)
    out = np.asarray(x.values.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), bw)


def mean(x):
    x = as_tensor(x)
    return mul(sum_(x), 1.0 / x.size)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x):
    """Collapse all axes after the first: (n, ...) -> (n, prod(...))."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def transpose(x):
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _make("transpose", x.values.T.copy(), (x,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make("concat", out, tensors, bw)


def take_rows(x, rows):
    """Select rows of a matrix by integer index (duplicates allowed)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, rows, g)
        return (gx,)

    return _make("take_rows", x.values[rows], (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.values @ b.values

    def bw(g):
        return (g @ b.values.T if a.requires_grad else None,
                a.values.T @ g if b.requires_grad else None)

    return _make("matmul", out, (a, b), bw)


def dense(x, weight, bias):
    """Affine layer ``x @ weight + bias``; ``x`` is (in,) or (n, in), weight (in, out)."""
    x = as_tensor(x)
    if x.values.ndim == 1:
        return reshape(dense(reshape(x, (1, -1)), weight, bias), (-1,))
    return add(matmul(x, weight), bias)


def conv2d(x, kernels, stride=1):
    """Valid-padding cross-correlation.

    ``x`` is (c_in, h, w) or (n, c_in, h, w); ``kernels`` is (c_out, c_in, kh, kw).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.values.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernels, stride)
        return reshape(out, out.shape[1:])
    if stride < 1 or int(stride) != stride:
        raise ContractError(f"conv2d: stride must be a positive int, got {stride}")
    if x.values.ndim != 4 or kernels.values.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernels, got {x.shape} and {kernels.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernels {kernels.shape} expect {ck}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    # columns laid out (c*kh*kw, n*oh*ow) so the copy walks memory in order
    win = sliding_window_view(x.values, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)
    kmat = kernels.values.reshape(o, c * kh * kw)
    out = (kmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)

    def bw(g):
        gflat = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        gk = (gflat @ cols.T).reshape(kernels.shape)
        if not x.requires_grad:
            return None, gk
        dcols = (kmat.T @ gflat).reshape(c, kh, kw, n, oh, ow)
        gx = np.zeros((c, n, h, w))
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += dcols[:, i, j]
        return gx.transpose(1, 0, 2, 3), gk

    return _make("conv2d", np.ascontiguousarray(out), (x, kernels), bw)


def avgpool2(x):
    """Mean over non-overlapping 2x2 windows of a (c, h, w) or (n, c, h, w) input."""
    x = as_tensor(x)
    if x.values.ndim not in (3, 4):
        raise DimensionError(f"avgpool2: expected 3-d or 4-d input, got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2: spatial dims must be even, got {h}x{w}")
    lead = x.shape[:-2]
    out = x.values.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0,)

    return _make("avgpool2", out, (x,), bw)


def l2_normalize(x):
    """Scale each vector along the last axis to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.values * x.values, axis=-1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateInputError("l2_normalize: vector with norm <= 1e-12")
    y = x.values / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (x,), bw)


def softmax_cross_entropy(logits, target):
    """Cross-entropy of softmax(logits) against integer class targets.

    A 1-d ``logits`` with an int target gives that example's loss; a 2-d
    ``logits`` with a target array gives the mean over rows.
    """
    logits = as_tensor(logits)
    single = logits.values.ndim == 1
    z = logits.values.reshape(1, -1) if single else logits.values
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, k = z.shape
    if t.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {n} rows but targets of shape {t.shape}")
    if np.any((t < 0) | (t >= k)):
        raise ContractError(f"softmax_cross_entropy: target index outside [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = np.asarray(-logp[np.arange(n), t].mean())

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        p *= g / n
        return (p.reshape(logits.shape),)

    return _make("softmax_cross_entropy", out, (logits,), bw)


def masked_log_softmax(x, mask):
    """Row-wise log-softmax restricted to entries where ``mask`` is true.

    Entries outside the mask (and rows with an empty mask) are returned as 0
    and receive no gradient.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape or x.values.ndim != 2:
        raise DimensionError(f"masked_log_softmax: mask {mask.shape} vs input {x.shape}")
    live = mask.any(axis=1, keepdims=True)
    masked = np.where(mask, x.values, -np.inf)
    m = np.where(live, masked.max(axis=1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.values - m, 0.0)), 0.0)
    s = e.sum(axis=1, keepdims=True)
    lse = np.log(np.where(live, s, 1.0))
    out = np.where(mask, x.values - m - lse, 0.0)
    p = e / np.where(live, s, 1.0)

    def bw(g):
        gm = np.where(mask, g, 0.0)
        return (gm - p * gm.sum(axis=1, keepdims=True),)

    return _make("masked_log_softmax", out, (x,), bw)


# ---------------------------------------------------------------------------
# parameters and checkpoints


class ParamSet(OrderedDict):
    """Named collection of trainable tensors, iterated in sorted-name order."""

    def __setitem__(self, name, tensor):
        if not isinstance(tensor, Tensor):
            raise TypeError(f"ParamSet values must be Tensor, got {type(tensor).__name__}")
        if not tensor.requires_grad:
            raise ContractError(f"parameter {name!r} must require grad")
        super().__setitem__(name, tensor)

    def add(self, name, values):
        if name in self:
            raise ContractError(f"duplicate parameter name {name!r}")
        self[name] = Tensor(values, requires_grad=True, name=name)
        return self[name]

    def sorted_items(self):
        return sorted(self.items())

    def zero_grad(self):
        for t in self.values():
            t.zero_grad()

    def copy(self):
        out = ParamSet()
        for name, t in self.items():
            out.add(name, t.values.copy())
        return out

    def to_dict(self):
        return {"format_version": CHECKPOINT_FORMAT_VERSION,
                "params": {name: {"shape": list(t.shape), "values": t.values.ravel().tolist()}
                           for name, t in self.sorted_items()}}

    @classmethod
    def from_dict(cls, data):
        if data.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint format_version {data.get('format_version')!r}")
        out = cls()
        for name, entry in data["params"].items():
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"parameter {name!r}: {values.size} values for shape {shape}")
            out.add(name, values.reshape(shape))
        return out

    def save(self, path):
        # json writes floats via repr(), which round-trips doubles exactly
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

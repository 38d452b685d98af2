"""Define-by-run reverse-mode autodiff on dense numpy arrays.

Every primitive records ``(op, inputs, output, ctx)`` on the active
:class:`Tape`. Adjoint rules are written in terms of the same primitives, so
running a backward pass with ``create_graph=True`` records the gradient
computation itself and it can be differentiated again (double backprop).

Broadcasting is limited to batch-dimension expansion (a ``(D,)`` or ``(1, D)``
operand against ``(N, D)``) and 0-d scalars; everything else is a
:class:`ShapeError` raised before any arithmetic happens.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from evuq import _kernels

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []
ADJOINTS: dict[str, Callable] = {}


class ShapeError(ValueError):
    pass


class AutodiffError(RuntimeError):
    """Contract violation in backward (non-scalar output, detached input, missing adjoint)."""


class TrainingError(RuntimeError):
    def __init__(self, message, iteration=None, phase=None):
        super().__init__(message)
        self.iteration = iteration
        self.phase = phase


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with (e.g. float64 for gradchecks)."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, o):
        return add(self, o) if isinstance(o, Tensor) else shift(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o) if isinstance(o, Tensor) else shift(self, -o)

    def __rsub__(self, o):
        return shift(neg(self), o)

    def __mul__(self, o):
        return mul(self, o) if isinstance(o, Tensor) else scale(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o) if isinstance(o, Tensor) else scale(self, 1.0 / o)

    def __rtruediv__(self, o):
        return div(Tensor(np.full(self.shape, o)), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.recording = True

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    @contextlib.contextmanager
    def paused(self):
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], create_graph=False, allow_unused=True):
        """Reverse sweep from scalar ``output``; returns one gradient Tensor per ``wrt`` entry."""
        if output.data.ndim != 0:
            raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, Tensor] = {id(output): Tensor(np.ones((), dtype=output.data.dtype))}
        n_recorded = len(self.nodes)
        ctx = contextlib.nullcontext() if create_graph else self.paused()
        with ctx:
            for node in reversed(self.nodes[:n_recorded]):
                g_out = grads.get(id(node.output))
                if g_out is None:
                    continue
                rule = ADJOINTS.get(node.op)
                if rule is None:
                    raise AutodiffError(f"no adjoint registered for primitive {node.op!r}")
                g_in = rule(node, g_out)
                for x, gx in zip(node.inputs, g_in):
                    if gx is None or not x.requires_grad:
                        continue
                    if gx.shape != x.shape:
                        raise AutodiffError(
                            f"adjoint of {node.op!r} produced shape {gx.shape} for input {x.shape}")
                    prev = grads.get(id(x))
                    grads[id(x)] = gx if prev is None else add(prev, gx)
        out = []
        for w in wrt:
            g = grads.get(id(w))
            if g is None:
                if not allow_unused:
                    raise AutodiffError("requested input does not participate in the output's graph")
                g = Tensor(np.zeros(w.shape))
            out.append(g)
        return out


def current_tape():
    return _TAPES[-1] if _TAPES else None


def _record(op, out_data, inputs, **ctx) -> Tensor:
    tape = current_tape()
    needs = tape is not None and tape.recording and any(x.requires_grad for x in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, tuple(inputs), out, ctx))
    return out


def adjoint(name):
    def deco(fn):
        ADJOINTS[name] = fn
        return fn
    return deco


def backward(tape: Tape, output: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Plain first-order gradients as numpy arrays (zeros for unused params)."""
    return [g.data for g in tape.gradient(output, params)]


def grad_as_node(tape: Tape, output: Tensor, input_node: Tensor) -> Tensor:
    """d(output)/d(input_node) as a recorded, differentiable tensor."""
    if not input_node.requires_grad:
        raise AutodiffError("input is detached from the tape (requires_grad=False)")
    return tape.gradient(output, [input_node], create_graph=True, allow_unused=False)[0]


# --------------------------------------------------------------------------
# broadcasting helpers
# --------------------------------------------------------------------------

def _broadcast_shape(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) == 2 and sb in ((sa[1],), (1, sa[1])):
        return sa
    if len(sb) == 2 and sa in ((sb[1],), (1, sb[1])):
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == shape:
        return g
    if shape == ():
        return tsum(g)
    if shape == (g.shape[1],):
        return tsum(g, 0)
    if shape == (1, g.shape[1]):
        return reshape(tsum(g, 0), shape)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


# --------------------------------------------------------------------------
# elementwise binary
# --------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b))


@adjoint("add")
def _(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b))


@adjoint("sub")
def _(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b))


@adjoint("mul")
def _(node, g):
    a, b = node.inputs
    ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
    gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    return _record("div", a.data / b.data, (a, b))


@adjoint("div")
def _(node, g):
    a, b = node.inputs
    ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        gb = _unbroadcast(neg(div(mul(g, node.output), b)), b.shape)
    return ga, gb


def neg(x):
    return _record("neg", -x.data, (x,))


@adjoint("neg")
def _(node, g):
    return (neg(g),)


def scale(x, c: float):
    return _record("scale", x.data * c, (x,), c=c)


@adjoint("scale")
def _(node, g):
    return (scale(g, node.ctx["c"]),)


def shift(x, c: float):
    return _record("shift", x.data + c, (x,))


@adjoint("shift")
def _(node, g):
    return (g,)


# --------------------------------------------------------------------------
# linear algebra / shape
# --------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b))


@adjoint("matmul")
def _(node, g):
    a, b = node.inputs
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


def transpose(x):
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _record("transpose", np.ascontiguousarray(x.data.T), (x,))


@adjoint("transpose")
def _(node, g):
    return (transpose(g),)


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _record("reshape", x.data.reshape(shape), (x,))


@adjoint("reshape")
def _(node, g):
    return (reshape(g, node.inputs[0].shape),)


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[axis] for x in xs]
    return _record("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                   axis=axis, sizes=sizes)


@adjoint("concat")
def _(node, g):
    axis = node.ctx["axis"]
    out, start = [], 0
    for n in node.ctx["sizes"]:
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, start + n)
        out.append(getitem(g, tuple(idx)))
        start += n
    return tuple(out)


def _check_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    for p in parts:
        if not isinstance(p, (slice, int, np.integer)):
            raise ShapeError("slice: only basic int/slice indexing is supported")


def getitem(x, idx):
    _check_basic_index(idx)
    return _record("slice", np.array(x.data[idx]), (x,), idx=idx)


@adjoint("slice")
def _(node, g):
    return (pad_slice(g, node.inputs[0].shape, node.ctx["idx"]),)


def pad_slice(x, shape, idx):
    out = np.zeros(shape, dtype=x.data.dtype)
    out[idx] = x.data
    return _record("pad_slice", out, (x,), idx=idx)


@adjoint("pad_slice")
def _(node, g):
    return (getitem(g, node.ctx["idx"]),)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def tsum(x, axis=None):
    if axis is not None and (x.ndim != 2 or axis not in (0, 1)):
        raise ShapeError("sum over an axis expects a matrix and axis 0 or 1")
    return _record("sum", np.asarray(x.data.sum(axis=axis)), (x,), axis=axis)


@adjoint("sum")
def _(node, g):
    return (expand(g, node.inputs[0].shape, node.ctx["axis"]),)


def tmean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def expand(x, shape, axis=None):
    """Inverse of ``sum``: repeat a scalar (axis=None), a row (0) or a column (1)."""
    shape = tuple(shape)
    if axis is None:
        if x.shape != ():
            raise ShapeError("expand(axis=None) takes a scalar")
        data = np.broadcast_to(x.data, shape).copy()
    elif axis == 0:
        if x.shape != (shape[1],):
            raise ShapeError(f"expand rows: {x.shape} vs {shape}")
        data = np.broadcast_to(x.data[None, :], shape).copy()
    else:
        if x.shape != (shape[0],):
            raise ShapeError(f"expand cols: {x.shape} vs {shape}")
        data = np.broadcast_to(x.data[:, None], shape).copy()
    return _record("expand", data, (x,), axis=axis)


@adjoint("expand")
def _(node, g):
    return (tsum(g, node.ctx["axis"]),)


# --------------------------------------------------------------------------
# elementwise unary
# --------------------------------------------------------------------------

def relu(x):
    return _record("relu", np.maximum(x.data, 0), (x,))


@adjoint("relu")
def _(node, g):
    mask = Tensor((node.inputs[0].data > 0).astype(g.data.dtype))
    return (mul(g, mask),)


def sigmoid(x):
    with np.errstate(over="ignore"):
        s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", s, (x,))


@adjoint("sigmoid")
def _(node, g):
    s = node.output
    return (mul(g, mul(s, shift(neg(s), 1.0))),)


def softplus(x):
    d = x.data
    return _record("softplus", np.logaddexp(0, d).astype(d.dtype), (x,))


@adjoint("softplus")
def _(node, g):
    return (mul(g, sigmoid(node.inputs[0])),)


def exp(x):
    return _record("exp", np.exp(x.data), (x,))


@adjoint("exp")
def _(node, g):
    return (mul(g, node.output),)


def log(x):
    return _record("log", np.log(x.data), (x,))


@adjoint("log")
def _(node, g):
    return (div(g, node.inputs[0]),)


def square(x):
    return _record("square", x.data * x.data, (x,))


@adjoint("square")
def _(node, g):
    return (scale(mul(g, node.inputs[0]), 2.0),)


def sqrt(x):
    return _record("sqrt", np.sqrt(x.data), (x,))


@adjoint("sqrt")
def _(node, g):
    return (scale(div(g, node.output), 0.5),)


def sign(x):
    return _record("sign", np.sign(x.data), (x,))


@adjoint("sign")
def _(node, g):
    return (None,)


# --------------------------------------------------------------------------
# row-wise primitives
# --------------------------------------------------------------------------

_NORM_EPS = 1e-12


def l2_norm_rows(x):
    if x.ndim != 2:
        raise ShapeError("l2_norm_rows expects a matrix")
    return _record("l2_norm_rows", np.sqrt(np.sum(x.data * x.data, axis=1) + _NORM_EPS), (x,))


@adjoint("l2_norm_rows")
def _(node, g):
    return (mul_rows(node.inputs[0], div(g, node.output)),)


def mul_rows(x, s):
    """Scale row ``i`` of ``x`` by ``s[i]``."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"mul_rows: {x.shape} with {s.shape}")
    return _record("mul_rows", x.data * s.data[:, None], (x, s))


@adjoint("mul_rows")
def _(node, g):
    x, s = node.inputs
    gx = mul_rows(g, s) if x.requires_grad else None
    gs = tsum(mul(g, x), 1) if s.requires_grad else None
    return gx, gs


def logsumexp_rows(x):
    if x.ndim != 2:
        raise ShapeError("logsumexp_rows expects a matrix")
    d = x.data
    mx = d.max(axis=1, keepdims=True)
    out = (mx + np.log(np.exp(d - mx).sum(axis=1, keepdims=True)))[:, 0]
    return _record("logsumexp_rows", out, (x,))


@adjoint("logsumexp_rows")
def _(node, g):
    x = node.inputs[0]
    soft = exp(sub(x, expand(node.output, x.shape, 1)))
    return (mul_rows(soft, g),)


def softmax_rows(x):
    return exp(sub(x, expand(logsumexp_rows(x), x.shape, 1)))


PRIMITIVES = tuple(ADJOINTS)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

class AdamState:
    def __init__(self, params: Sequence[Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, iteration=None):
    """One bias-corrected Adam update, applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must align")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at iteration {iteration}", iteration=iteration)
    state.step += 1
    t = state.step
    c2 = math.sqrt(1.0 - state.beta2 ** t)
    lr_t = state.lr * c2 / (1.0 - state.beta1 ** t)
    eps_t = state.eps * c2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        _kernels.adam_update(p.data, np.ascontiguousarray(g, dtype=p.data.dtype), m, v,
                             lr_t, state.beta1, state.beta2, eps_t)
    return params


def clip_weights(params: Sequence[Tensor], c: float):
    if c <= 0:
        raise ValueError("clip bound must be positive")
    for p in params:
        np.clip(p.data, -c, c, out=p.data)
    return params

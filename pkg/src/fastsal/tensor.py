"""Dense tensor type with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (logical N,C,H,W order for feature maps,
arbitrary rank allowed for parameter vectors and scalar losses). Operations
executed while a Tape is active are recorded and can be replayed in reverse to
produce gradients. Inference without an active tape records nothing and
allocates no gradient state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeError

_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense numeric array plus an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live below as free functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: object
    backward: object  # callable(grad_out) -> tuple of arrays aligned with inputs


class Tape:
    """Ordered record of gradient-contributing operations.

    Usable as a context manager; ops executed inside are appended in execution
    order, so replaying the node list reversed visits each consumer before its
    producers. Gradients accumulate additively when a tensor fans out.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(TapeNode(op, tuple(inputs), output, backward_fn))

    def gradients(self, loss, leaves):
        """Gradient of a scalar loss w.r.t. each leaf; zeros for leaves the loss
        does not depend on."""
        grads = _replay(self, loss)
        out = []
        for leaf in leaves:
            g = grads.get(id(leaf))
            out.append(g if g is not None else np.zeros_like(leaf.data))
        return out


def _replay(tape, loss):
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.backward(gout)
        for tensor, gin in zip(node.inputs, gins):
            if gin is None or not tensor.requires_grad:
                continue
            acc = grads.get(id(tensor))
            grads[id(tensor)] = gin if acc is None else acc + gin
        # keep a reference so id() stays unique while grads are alive
        grads.setdefault(("done", id(node.output)), node.output)
    return {k: v for k, v in grads.items() if not isinstance(k, tuple)}


def backward(tape, loss):
    """Replay the tape in reverse, storing dLoss/dLeaf on every requires_grad
    leaf that participated. Leaves on the tape that do not contribute get a
    zero gradient."""
    grads = _replay(tape, loss)
    produced = {id(n.output) for n in tape.nodes}
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in seen:
                seen.add(id(t))
                g = grads.get(id(t))
                t.grad = g if g is not None else np.zeros_like(t.data)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def apply_op(name, inputs, out_data, backward_fn):
    """Wrap a forward result; record on the active tape when gradients flow."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(name, inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", (a, b), out, bwd)


def sub(a, b):
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return apply_op("sub", (a, b), out, bwd)


def mul(a, b):
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return apply_op("mul", (a, b), out, bwd)


def div(a, b):
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return apply_op("div", (a, b), out, bwd)


def power(a, p):
    out = a.data ** p
    ad = a.data

    def bwd(g):
        return (g * p * ad ** (p - 1),)

    return apply_op("pow", (a,), out, bwd)


def log(a):
    if np.any(a.data <= 0):
        raise NumericDomainError("log requires strictly positive input")
    out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return apply_op("log", (a,), out, bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return apply_op("exp", (a,), out, bwd)


def sqrt(a):
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return apply_op("sqrt", (a,), out, bwd)


def clip(a, lo, hi):
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * mask,)

    return apply_op("clip", (a,), out, bwd)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", (a,), out, bwd)


def relu6(a):
    out = np.clip(a.data, 0.0, 6.0)
    mask = (a.data > 0.0) & (a.data < 6.0)

    def bwd(g):
        return (g * mask,)

    return apply_op("relu6", (a,), out, bwd)


# ---------------------------------------------------------------------------
# reductions and reshapes
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", (a,), np.asarray(out), bwd)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    n = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return apply_op("mean", (a,), np.asarray(out), bwd)


def reshape(a, shape):
    out = a.data.reshape(shape)
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return apply_op("reshape", (a,), out, bwd)


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NumericDomainError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    passed: bool
    checked: int = 0
    notes: str = ""


def grad_check(fn, x, step=1e-4, tolerance=1e-4):
    """Compare the taped gradient of a scalar-valued fn against central finite
    differences, elementwise over x. Runs at the precision of x (use float64
    inputs for tight tolerances)."""
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        y = fn(x64)
    if y.data.size != 1:
        raise ContractError("grad_check requires fn to produce a scalar")
    if not np.all(np.isfinite(y.data)):
        raise NumericDomainError("fn produced a non-finite value")
    analytic = tape.gradients(y, [x64])[0]

    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        yp = fn(Tensor(x64.data, requires_grad=False)).data.reshape(-1)[0]
        flat[i] = orig - step
        ym = fn(Tensor(x64.data, requires_grad=False)).data.reshape(-1)[0]
        flat[i] = orig
        nflat[i] = (yp - ym) / (2.0 * step)

    denom = np.abs(analytic).max() + np.abs(numeric).max() + 1e-12
    max_rel = float(np.abs(analytic - numeric).max() / denom)
    return GradCheckReport(max_rel_err=max_rel, tolerance=tolerance,
                           passed=max_rel <= tolerance, checked=flat.size)

"""Minimal dense-tensor layer with reverse-mode differentiation.

Tensors wrap float64 NumPy arrays.  Every op that sees at least one input
with ``requires_grad`` records its inputs and a backward closure on the
output node; ``backward(loss)`` replays the recorded graph once in reverse
topological order and accumulates gradients into the participating nodes.
A graph can be replayed only once; re-running ``backward`` without
re-recording raises ``GradError``.

Any NaN or Inf produced by an op is an error state and raises
``NonFiniteError`` immediately (disable via ``set_finite_checks`` for
throughput experiments).

Elementwise ops are shape-strict between tensors; the only implicit
broadcast allowed is tensor-vs-python-scalar.  Shape expansion is explicit
through ``broadcast_to``.  General NumPy broadcasting is deliberately not
supported.
"""

import math

import numpy as np

from . import kernels


class GradError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, consumed or detached graph)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_FINITE_CHECKS = True


def set_finite_checks(enabled):
    """Toggle the NaN/Inf guard on op outputs. Returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _check_finite(arr, what):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor constructor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """A leaf view of the same data, cut off from the recorded graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar (tensor-tensor shape-strict, or tensor-scalar) --

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, what):
    """Build an op output node; record the graph only if a parent needs grad."""
    _check_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data - s, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul")
    _same_shape(a, b, "mul")

    def backward(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data / s, (a,), lambda g: (g / s,), "div")
    _same_shape(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        return g / b.data, -g * out_data / b.data

    return _make(out_data, (a, b), backward, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.data.shape} @ {b.data.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinear


def exp(a):
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g / (2.0 * out_data),), "sqrt")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Smooth GELU nonlinearity (tanh form)."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _make(out_data, (a,), backward, "gelu")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes through the un-clamped region."""
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _reduce_sum(a, axis, keepdims):
    axes = _norm_axes(axis, a.data.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.data.shape),)

    return _make(out_data, (a,), backward, "sum")


def _reduce_mean(a, axis, keepdims):
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, a.data.shape),)

    return _make(out_data, (a,), backward, "mean")


# ---------------------------------------------------------------------------
# softmax family (max-shifted for stability)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return _make(out_data, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    shape = tuple(shape)
    in_shape = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),), "reshape")


def transpose(a, axes=None):
    axes = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def broadcast_to(a, shape):
    """Explicit expansion of size-1 axes; the only broadcast this layer allows."""
    shape = tuple(shape)
    if a.data.ndim != len(shape):
        raise ValueError(f"broadcast_to: rank mismatch {a.data.shape} -> {shape}")
    expanded = []
    for ax, (src, dst) in enumerate(zip(a.data.shape, shape)):
        if src != dst:
            if src != 1:
                raise ValueError(f"broadcast_to: cannot expand axis {ax} from {src} to {dst}")
            expanded.append(ax)
    axes = tuple(expanded)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast_to")


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].data.ndim
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    axis = axis % a.data.ndim
    idx = tuple(
        slice(start, start + length) if ax == axis else slice(None)
        for ax in range(a.data.ndim)
    )

    def backward(g):
        gz = np.zeros_like(a.data)
        gz[idx] = g
        return (gz,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward, "narrow")


def gather_rows(a, index):
    """Select rows of a 2-d tensor by integer index (with repetition allowed)."""
    if a.data.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-d tensor, got {a.data.shape}")
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        gz = np.zeros_like(a.data)
        np.add.at(gz, index, g)
        return (gz,)

    return _make(a.data[index], (a,), backward, "gather_rows")


def l2_normalize(a, axis=-1):
    """Rows scaled to unit length; the norm gets a 1e-12 guard against zero vectors."""
    sq = _reduce_sum(mul(a, a), axis, keepdims=True)
    norm = add(sqrt(sq), 1e-12)
    return div(a, broadcast_to(norm, a.data.shape))


# ---------------------------------------------------------------------------
# grouped convolution


def grouped_conv2d(x, w, bias=None, groups=1, stride=1, padding=0):
    """Grouped 2-d convolution on channel-last input.

    x: (H,W,Cin) or (B,H,W,Cin); w: (kh,kw,Cin/groups,Cout); bias: (Cout,).
    Output channel block g is a function of input channel block g only.
    """
    squeeze = x.data.ndim == 3
    x4 = reshape(x, (1,) + x.data.shape) if squeeze else x
    bias_arr = None if bias is None else bias.data
    y, cache = kernels.conv2d_forward(
        x4.data, w.data, bias_arr, groups=groups, stride=stride, padding=padding
    )

    def backward(g):
        gx, gw, gb = kernels.conv2d_backward(g, cache)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    parents = (x4, w) if bias is None else (x4, w, bias)
    out = _make(y, parents, backward, "grouped_conv2d")
    return reshape(out, out.data.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad for every recorded leaf.

    The loss must be a scalar attached to a freshly recorded graph; each
    recorded op is replayed exactly once and then released.
    """
    if loss.data.size != 1:
        raise GradError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GradError("loss is detached: no recorded graph reaches a differentiable leaf")
    order = _topo_order(loss)
    if any(node._consumed for node in order):
        raise GradError("graph already consumed by a previous backward call")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
        node._consumed = True
        node._backward = None
        node._parents = ()

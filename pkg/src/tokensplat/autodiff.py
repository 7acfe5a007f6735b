"""Minimal reverse-mode autodiff over dense numpy arrays.

Eager execution with a recorded graph: every differentiable op creates a
node holding references to its parents and a closure that routes the output
gradient back to them.  Gradients accumulate into ``.grad``; call
``zero_grad`` explicitly between backward passes.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    # sum away leading dims
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum dims that were broadcast from 1
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a_shape, b_shape):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(op, a_shape, b_shape) from None


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100  # keep numpy from absorbing Tensor operands

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad}, op={self._op})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accum_grad(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # ---- graph construction --------------------------------------------------

    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def backward(self, grad=None):
        """Backpropagate from this tensor to all requires_grad leaves.

        Root must be a scalar unless an explicit seed gradient is given.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward: root must be scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward: root is detached from the tape")
        # iterative topological order (graphs can be deep)
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.accum_grad(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- elementwise binary --------------------------------------------------

    def _binary(self, other, op, fwd, bwd_a, bwd_b):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        _check_broadcast(op, self.shape, other.shape)
        out_data = fwd(self.data, other.data)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accum_grad(_unbroadcast(bwd_a(g, a.data, b.data, out_data), a.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(bwd_b(g, a.data, b.data, out_data), b.shape))

        return Tensor._result(out_data, (a, b), backward, op)

    def __add__(self, other):
        return self._binary(other, "add", np.add,
                            lambda g, x, y, o: g, lambda g, x, y, o: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, "sub", np.subtract,
                            lambda g, x, y, o: g, lambda g, x, y, o: -g)

    def __rsub__(self, other):
        return Tensor(np.asarray(other, dtype=self.dtype)) - self

    def __mul__(self, other):
        return self._binary(other, "mul", np.multiply,
                            lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, "div", np.divide,
                            lambda g, x, y, o: g / y,
                            lambda g, x, y, o: -g * x / (y * y))

    def __rtruediv__(self, other):
        return Tensor(np.asarray(other, dtype=self.dtype)) / self

    def __neg__(self):
        def backward(g):
            self.accum_grad(-g)
        return Tensor._result(-self.data, (self,), backward, "neg")

    def maximum(self, other):
        # ties route the gradient to self (fixed convention)
        return self._binary(other, "maximum", np.maximum,
                            lambda g, x, y, o: g * (x >= y),
                            lambda g, x, y, o: g * (y > x))

    def minimum(self, other):
        return self._binary(other, "minimum", np.minimum,
                            lambda g, x, y, o: g * (x <= y),
                            lambda g, x, y, o: g * (y < x))

    # ---- elementwise unary ---------------------------------------------------

    def _unary(self, op, out_data, dfun):
        def backward(g):
            self.accum_grad(dfun(g))
        return Tensor._result(out_data, (self,), backward, op)

    def exp(self):
        o = np.exp(self.data)
        return self._unary("exp", o, lambda g: g * o)

    def log(self):
        return self._unary("log", np.log(self.data), lambda g: g / self.data)

    def sqrt(self):
        o = np.sqrt(self.data)
        return self._unary("sqrt", o, lambda g: g / (2.0 * o))

    def tanh(self):
        o = np.tanh(self.data)
        return self._unary("tanh", o, lambda g: g * (1.0 - o * o))

    def relu(self):
        # gradient at exactly 0 is 0
        return self._unary("relu", np.maximum(self.data, 0.0),
                           lambda g: g * (self.data > 0))

    def sign(self):
        # zero-gradient by definition
        return Tensor(np.sign(self.data))

    def abs(self):
        return self._unary("abs", np.abs(self.data), lambda g: g * np.sign(self.data))

    def clamp(self, lo=None, hi=None):
        # subgradient 1 at the boundaries, 0 strictly outside
        o = np.clip(self.data, lo, hi)
        inside = np.ones_like(self.data)
        if lo is not None:
            inside = inside * (self.data >= lo)
        if hi is not None:
            inside = inside * (self.data <= hi)
        return self._unary("clamp", o, lambda g: g * inside)

    def pow(self, p):
        p = float(p)
        o = np.power(self.data, p)
        return self._unary("pow", o, lambda g: g * p * np.power(self.data, p - 1.0))

    __pow__ = pow

    # ---- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        o = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accum_grad(np.broadcast_to(g, self.shape))

        return Tensor._result(o, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[a] for a in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- shape manipulation --------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        o = self.data.reshape(shape)

        def backward(g):
            self.accum_grad(g.reshape(self.shape))

        return Tensor._result(o, (self,), backward, "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        o = self.data.transpose(axes)

        def backward(g):
            self.accum_grad(g.transpose(inv))

        return Tensor._result(o, (self,), backward, "transpose")

    @property
    def T(self):
        return self.transpose()

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, idx):
        o = self.data[idx]

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self.accum_grad(full)

        return Tensor._result(o, (self,), backward, "slice")

    def gather(self, indices, axis=0):
        """Select rows/entries along `axis` by integer index array."""
        indices = np.asarray(indices)
        o = np.take(self.data, indices, axis=axis)

        def backward(g):
            full = np.zeros_like(self.data)
            sl = [slice(None)] * self.ndim
            sl[axis] = indices
            np.add.at(full, tuple(sl), g)
            self.accum_grad(full)

        return Tensor._result(o, (self,), backward, "gather")

    # ---- linear algebra ------------------------------------------------------

    def matmul(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        if self.ndim < 2 or other.ndim < 2 or self.shape[-1] != other.shape[-2]:
            raise ShapeError("matmul", self.shape, other.shape)
        o = np.matmul(self.data, other.data)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a.accum_grad(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b.accum_grad(_unbroadcast(gb, b.shape))

        return Tensor._result(o, (a, b), backward, "matmul")

    __matmul__ = matmul

    def softmax(self, axis=-1):
        x = self.data
        m = np.max(x, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)  # all-masked rows
        e = np.exp(x - m)
        o = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * o).sum(axis=axis, keepdims=True)
            self.accum_grad(o * (g - dot))

        return Tensor._result(o, (self,), backward, "softmax")


# ---- free-function helpers ---------------------------------------------------


def concatenate(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    o = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accum_grad(g[tuple(sl)])

    return Tensor._result(o, tuple(tensors), backward, "concatenate")


def stack(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    o = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accum_grad(np.take(g, i, axis=axis))

    return Tensor._result(o, tuple(tensors), backward, "stack")


def where_mask(mask, a, b):
    """Select a where mask is true else b; mask is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    o = np.where(mask, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a.accum_grad(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor._result(o, (a, b), backward, "where")


def custom_op(inputs, out_data, backward_fn, op="custom"):
    """Create a graph node with a hand-written backward.

    `backward_fn(grad_out)` must return one gradient array (or None) per input.
    """
    inputs = tuple(inputs)

    def backward(g):
        grads = backward_fn(g)
        for t, gi in zip(inputs, grads):
            if t.requires_grad and gi is not None:
                t.accum_grad(gi)

    return Tensor._result(out_data, inputs, backward, op)


def finite_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar-valued f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradients(analytic, numeric, rel_tol=1e-6, abs_tol=1e-8):
    """Max relative error where gradients are non-negligible, absolute otherwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    big = np.abs(numeric) > 1e-8
    ok = True
    if big.any():
        rel = np.abs(analytic[big] - numeric[big]) / np.abs(numeric[big])
        ok &= bool(rel.max() <= rel_tol)
    small = ~big
    if small.any():
        ok &= bool(np.abs(analytic[small] - numeric[small]).max() <= abs_tol)
    return ok


def max_rel_error(analytic, numeric, floor=1e-4):
    """Max elementwise relative error with a scale-aware floor.

    Entries much smaller than the largest gradient are compared against
    floor * max|numeric| so finite-difference noise on near-zero entries
    does not dominate the metric.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if not analytic.size:
        return 0.0
    scale = max(float(np.abs(numeric).max()), 1.0)
    denom = np.abs(numeric) + floor * scale
    return float(np.max(np.abs(analytic - numeric) / denom))

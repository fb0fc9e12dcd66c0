"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray. Every operation on tensors that require
gradients records its parents and a backward closure on the output node.
``backward(loss)`` topologically sorts the reachable graph into a Tape and
sweeps it once in reverse, accumulating ``.grad`` on every leaf.

Double precision is the default; call ``set_default_dtype(np.float32)`` to
opt into single precision (gradient-check tolerances assume float64).
"""

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise AutodiffError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite values in output of %r" % op)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward

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
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return tslice(self, key)

    def __repr__(self):
        return "Tensor(op=%s, shape=%s, requires_grad=%s)" % (
            self.op, self.shape, self.requires_grad)


def astensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data):
    return Tensor(data, requires_grad=True)


class Tape:
    """Topologically ordered record of the operations reaching one root.

    Built on demand by ``backward``; each node's parents appear before the
    node itself, and the reverse sweep visits every node exactly once.
    """

    def __init__(self, nodes):
        self.nodes = nodes
        self.consumed = False

    @classmethod
    def from_root(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, root):
        if self.consumed:
            raise AutodiffError("backward already run on this tape; reset first")
        self.consumed = True
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(output):
    """Accumulate gradients of a scalar output onto all requires_grad leaves."""
    if output.size != 1:
        raise ShapeError("backward requires a scalar output, got shape %s"
                         % (output.shape,))
    if output.grad is not None:
        raise AutodiffError("backward already run for this output; zero grads first")
    Tape.from_root(output).backward(output)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, op, parents, backward_fn):
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents),
                      backward=backward_fn)
    return Tensor(data, op=op)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), bwd)


def subtract(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_data, "subtract", (a, b), bwd)


def multiply(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "multiply", (a, b), bwd)


def divide(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, "divide", (a, b), bwd)


def negate(a):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make(-a.data, "negate", (a,), bwd)


def power(a, p):
    a = astensor(a)
    p = float(p)
    out_data = a.data ** p

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * p * a.data ** (p - 1.0))

    return _make(out_data, "power", (a,), bwd)


def tabs(a):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data))

    return _make(np.abs(a.data), "abs", (a,), bwd)


def maximum(a, c):
    """Elementwise max with a constant; subgradient 0 on the clamped side."""
    a = astensor(a)
    c = float(c)
    out_data = np.maximum(a.data, c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > c))

    return _make(out_data, "max-with-constant", (a,), bwd)


def minimum(a, c):
    a = astensor(a)
    c = float(c)
    out_data = np.minimum(a.data, c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data < c))

    return _make(out_data, "min-with-constant", (a,), bwd)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a):
    a = astensor(a)
    out_data = _sigmoid_np(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, "sigmoid", (a,), bwd)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a, beta=1.0):
    """softplus(x) = log(1+exp(beta*x))/beta, numerically stable."""
    a = astensor(a)
    z = beta * a.data
    out_data = (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * _sigmoid_np(z))

    return _make(out_data, "softplus", (a,), bwd)


def relu(a):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), "relu", (a,), bwd)


def tsin(a):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.cos(a.data))

    return _make(np.sin(a.data), "sin", (a,), bwd)


def tcos(a):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g * np.sin(a.data))

    return _make(np.cos(a.data), "cos", (a,), bwd)


def texp(a):
    a = astensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _make(out_data, "exp", (a,), bwd)


def tlog(a):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(np.log(a.data), "log", (a,), bwd)


def tsqrt(a):
    a = astensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out_data)

    return _make(out_data, "sqrt", (a,), bwd)


def softmax(a, axis=-1):
    a = astensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    out_data = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))

    return _make(out_data, "softmax", (a,), bwd)


def l2norm(a, axis=-1, keepdims=False, eps=0.0):
    """L2 norm along an axis; eps guards the gradient at exactly zero."""
    a = astensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq + eps)
    out_data = n if keepdims else np.squeeze(n, axis=axis)

    def bwd(g):
        if a.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(gk * a.data / n)

    return _make(out_data, "L2-norm", (a,), bwd)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
            else:
                gk = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gk, a.shape).copy())

    return _make(out_data, "sum", (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g / denom, a.shape).copy())
            else:
                gk = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gk / denom, a.shape).copy())

    return _make(out_data, "mean", (a,), bwd)


def reshape(a, shape):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), bwd)


def swapaxes(a, ax1, ax2):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, ax1, ax2))

    return _make(np.swapaxes(a.data, ax1, ax2), "swapaxes", (a,), bwd)


def tslice(a, key):
    a = astensor(a)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a.accumulate_grad(full)

    return _make(a.data[key], "slice", (a,), bwd)


def concat(tensors, axis=-1):
    tensors = [astensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(p)

    return _make(out_data, "concat", tuple(tensors), bwd)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least 1-d operands")
    out_data = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        a1 = ad.reshape(1, -1) if ad.ndim == 1 else ad
        b1 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
        g1 = g
        if ad.ndim == 1 and bd.ndim == 1:
            g1 = g.reshape(1, 1)
        elif ad.ndim == 1:
            g1 = np.expand_dims(g, -2)
        elif bd.ndim == 1:
            g1 = np.expand_dims(g, -1)
        if a.requires_grad:
            ga = g1 @ np.swapaxes(b1, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a1.shape).reshape(a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a1, -1, -2) @ g1
            b.accumulate_grad(_unbroadcast(gb, b1.shape).reshape(b.shape))

    return _make(out_data, "matmul", (a, b), bwd)


# ---------------------------------------------------------------------------
# Indexed ops
# ---------------------------------------------------------------------------

def _sum_rows_by_index(idx, rows, length):
    """Sum ``rows`` (N, ...) into a (length, ...) array grouped by ``idx``.

    bincount-based scatter-add; much faster than np.add.at for the long,
    narrow row blocks the sparse volumes produce.
    """
    n = idx.shape[0]
    flat = rows.reshape(n, -1)
    c = flat.shape[1]
    keys = (idx[:, None] * c + np.arange(c)).ravel()
    out = np.bincount(keys, weights=flat.ravel(), minlength=length * c)
    return out.reshape((length,) + rows.shape[1:])


def gather(a, idx, axis=0):
    """Take rows along an axis with an integer index array."""
    a = astensor(a)
    idx = np.asarray(idx)
    out_data = np.take(a.data, idx, axis=axis)

    def bwd(g):
        if a.requires_grad:
            if axis == 0:
                rows = g.reshape(idx.size, *a.shape[1:])
                full = _sum_rows_by_index(idx.ravel(), rows, a.shape[0])
            else:
                full = np.zeros_like(a.data)
                moved = np.moveaxis(full, axis, 0)
                gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)),
                                 tuple(range(idx.ndim)))
                np.add.at(moved, idx.ravel(), gm.reshape(idx.size, *moved.shape[1:]))
            a.accumulate_grad(full)

    return _make(out_data, "gather", (a,), bwd)


def scatter_add(src, idx, length):
    """Scatter rows of src into a zero tensor of ``length`` rows, adding."""
    src = astensor(src)
    idx = np.asarray(idx)
    out_data = _sum_rows_by_index(idx, src.data, length)

    def bwd(g):
        if src.requires_grad:
            src.accumulate_grad(np.take(g, idx, axis=0))

    return _make(out_data, "scatter-add", (src,), bwd)


def exclusive_cumprod(a, axis=-1):
    """y_i = prod_{j<i} x_j along axis (y_0 = 1).

    Inputs are clamped away from zero by the caller; backward divides by x.
    """
    a = astensor(a)
    shifted = np.roll(a.data, 1, axis=axis)
    ind = [slice(None)] * a.ndim
    ind[axis] = 0
    shifted[tuple(ind)] = 1.0
    out_data = np.cumprod(shifted, axis=axis)

    def bwd(g):
        if a.requires_grad:
            # dL/dx_k = (sum_{i>k} g_i y_i) / x_k
            gy = g * out_data
            rev = np.flip(np.cumsum(np.flip(gy, axis=axis), axis=axis), axis=axis)
            tail = np.roll(rev, -1, axis=axis)
            ind2 = [slice(None)] * a.ndim
            ind2[axis] = -1
            tail[tuple(ind2)] = 0.0
            a.accumulate_grad(tail / a.data)

    return _make(out_data, "exclusive-cumprod", (a,), bwd)


# ---------------------------------------------------------------------------
# Primitive registry (uniform dispatch surface, used by the gradient audit)
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "negate": negate,
    "power": power,
    "abs": tabs,
    "concat": concat,
    "sum": tsum,
    "mean": tmean,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "sin": tsin,
    "cos": tcos,
    "exp": texp,
    "log": tlog,
    "sqrt": tsqrt,
    "softmax": softmax,
    "L2-norm": l2norm,
    "slice": tslice,
    "reshape": reshape,
    "swapaxes": swapaxes,
    "gather": gather,
    "scatter-add": scatter_add,
    "max-with-constant": maximum,
    "min-with-constant": minimum,
    "exclusive-cumprod": exclusive_cumprod,
}


def forward(primitive, *args, **kwargs):
    """Apply a primitive by name; records on the graph when inputs need grad."""
    if primitive not in PRIMITIVES:
        raise AutodiffError("unsupported primitive %r" % primitive)
    return PRIMITIVES[primitive](*args, **kwargs)

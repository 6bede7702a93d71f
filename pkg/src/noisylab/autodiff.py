"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap numpy arrays and record the operations that produced them as
a graph of parent links plus backward closures. Calling ``backward()`` on a
scalar tensor walks that graph in reverse topological order and accumulates
gradients into every reachable tensor with ``requires_grad=True``.

The operator catalog is exactly what the small models and losses need:
matmul, broadcasting add/mul, relu, sigmoid, exp, log, clamp, square,
sum/mean, softmax/log-softmax, reshape, 2-d convolution, transposed
convolution and max/avg pooling. No GPU, no broadcasting beyond bias-style
shapes, no fusion.

Default dtype is float32; pass float64 arrays for wide-precision work
(gradient checking needs it).
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

# Log arguments derived from probabilities are clamped to this range.
PROB_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes invalid for an operator."""


class DomainError(ValueError):
    """Operand values outside an operator's domain (e.g. log of x <= 0)."""


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A numpy array with an optional gradient and graph provenance."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- construction helper for op results -------------------------------
    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor(data)
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        """Same values, cut off from the graph (no gradient flows through)."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- backward pass -----------------------------------------------------
    def backward(self):
        """Accumulate gradients of this scalar w.r.t. every reachable leaf."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic --------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        try:
            data = self.data + other.data
        except ValueError as exc:
            raise ShapeError(f"add: incompatible shapes {self.shape} and {other.shape}") from exc

        def backward(g, a=self, b=other):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

        return Tensor._result(data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward(g, a=self):
            return ((a, -g),)

        return Tensor._result(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        try:
            data = self.data * other.data
        except ValueError as exc:
            raise ShapeError(f"multiply: incompatible shapes {self.shape} and {other.shape}") from exc

        def backward(g, a=self, b=other):
            return (
                (a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)),
            )

        return Tensor._result(data, (self, other), backward, "multiply")

    __rmul__ = __mul__

    def matmul(self, other):
        other = self._coerce(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError(
                f"matmul: expects 2-d operands, got {self.shape} and {other.shape}"
            )
        if self.shape[1] != other.shape[0]:
            raise ShapeError(
                f"matmul: inner dims differ, {self.shape} @ {other.shape}"
            )
        data = self.data @ other.data

        def backward(g, a=self, b=other):
            return ((a, g @ b.data.T), (b, a.data.T @ g))

        return Tensor._result(data, (self, other), backward, "matmul")

    __matmul__ = matmul

    # -- elementwise nonlinearities ---------------------------------------
    def relu(self):
        mask = self.data > 0

        def backward(g, a=self, m=mask):
            return ((a, g * m),)

        return Tensor._result(self.data * mask, (self,), backward, "relu")

    def sigmoid(self):
        # exp overflow for very negative inputs saturates to exactly 0, which
        # is the correct limit; suppress the spurious warning.
        with np.errstate(over="ignore"):
            y = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g, a=self, y=y):
            return ((a, g * y * (1.0 - y)),)

        return Tensor._result(y, (self,), backward, "sigmoid")

    def exp(self):
        y = np.exp(self.data)

        def backward(g, a=self, y=y):
            return ((a, g * y),)

        return Tensor._result(y, (self,), backward, "exp")

    def log(self):
        if np.any(self.data <= 0):
            raise DomainError("log: non-positive input outside the clamp path")
        y = np.log(self.data)

        def backward(g, a=self):
            return ((a, g / a.data),)

        return Tensor._result(y, (self,), backward, "log")

    def clamp(self, lo, hi):
        """Clip values to [lo, hi]; gradient passes only inside the range."""
        mask = (self.data >= lo) & (self.data <= hi)

        def backward(g, a=self, m=mask):
            return ((a, g * m),)

        return Tensor._result(np.clip(self.data, lo, hi), (self,), backward, "clamp")

    def square(self):
        def backward(g, a=self):
            return ((a, g * 2.0 * a.data),)

        return Tensor._result(self.data * self.data, (self,), backward, "square")

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return ((a, np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False)),)

        return Tensor._result(data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape -------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(g, a=self):
            return ((a, g.reshape(a.shape)),)

        return Tensor._result(data, (self,), backward, "reshape")

    # -- softmax family ----------------------------------------------------
    def softmax(self, axis=-1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g, a=self, y=y, axis=axis):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return ((a, y * (g - dot)),)

        return Tensor._result(y, (self,), backward, "softmax")

    def log_softmax(self, axis=-1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        sm = np.exp(out)

        def backward(g, a=self, sm=sm, axis=axis):
            return ((a, g - sm * g.sum(axis=axis, keepdims=True)),)

        return Tensor._result(out, (self,), backward, "log_softmax")


def _unbroadcast(grad, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (gdim, sdim) in enumerate(zip(grad.shape, shape)):
        if sdim == 1 and gdim != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Spatial operators (im2col based, stride/padding on the default path only
# as far as the model zoo needs them)
# ---------------------------------------------------------------------------

def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, xshape, kh, kw, stride, pad):
    n, c, h, w = xshape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution. x: (N,C,H,W), w: (Cout,Cin,kh,kw), b: (Cout,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-d x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d: channel mismatch, x has {c}, w expects {cin}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(cout, -1)
    out = np.einsum("ok,nkl->nol", w2, cols, optimize=True).reshape(n, cout, ho, wo)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g, x=x, w=w, b=b, cols=cols, w2=w2, shapes=(n, cout, ho, wo, kh, kw)):
        n, cout, ho, wo, kh, kw = shapes
        g2 = g.reshape(n, cout, ho * wo)
        dw = np.einsum("nol,nkl->ok", g2, cols, optimize=True).reshape(w.shape)
        dcols = np.einsum("ok,nol->nkl", w2, g2, optimize=True)
        dx = _col2im(dcols, x.shape, kh, kw, stride, padding)
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    return Tensor._result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-d convolution. x: (N,Cin,H,W), w: (Cin,Cout,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expects 4-d x and w, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: channel mismatch, x has {cin}, w expects {wcin}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    w2 = w.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(n, cin, h * wd)
    cols = np.einsum("ck,ncl->nkl", w2, x2, optimize=True)
    out = _col2im(cols, (n, cout, ho, wo), kh, kw, stride, padding)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape}, expected ({cout},)")
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g, x=x, w=w, b=b, w2=w2, x2=x2, dims=(n, h, wd, kh, kw)):
        n, h, wd, kh, kw = dims
        # im2col of the output-grad has L == h*wd positions by construction
        cols_g, _, _ = _im2col(g, kh, kw, stride, padding)
        dx = np.einsum("ck,nkl->ncl", w2, cols_g, optimize=True).reshape(x.shape)
        dw = np.einsum("ncl,nkl->ck", x2, cols_g, optimize=True).reshape(w.shape)
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    return Tensor._result(out, parents, backward, "conv_transpose2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route to the first element."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} not divisible by {k}")
    xr = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = xr.reshape(n, c, h // k, w // k, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g, x=x, idx=idx, dims=(n, c, h, w, k)):
        n, c, h, w, k = dims
        dflat = np.zeros((n, c, h // k, w // k, k * k), dtype=g.dtype)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = (
            dflat.reshape(n, c, h // k, w // k, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return ((x, dx),)

    return Tensor._result(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g, x=x, dims=(n, c, h, w, k)):
        n, c, h, w, k = dims
        dx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return ((x, dx.astype(x.dtype, copy=False)),)

    return Tensor._result(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# Generic dispatch + gradient checking
# ---------------------------------------------------------------------------

_OP_TABLE = {
    "matmul": lambda ops, attrs: ops[0].matmul(ops[1]),
    "add": lambda ops, attrs: ops[0] + ops[1],
    "multiply": lambda ops, attrs: ops[0] * ops[1],
    "relu": lambda ops, attrs: ops[0].relu(),
    "sigmoid": lambda ops, attrs: ops[0].sigmoid(),
    "exp": lambda ops, attrs: ops[0].exp(),
    "log": lambda ops, attrs: ops[0].log(),
    "square": lambda ops, attrs: ops[0].square(),
    "sum": lambda ops, attrs: ops[0].sum(**attrs),
    "mean": lambda ops, attrs: ops[0].mean(**attrs),
    "softmax": lambda ops, attrs: ops[0].softmax(**attrs),
    "log_softmax": lambda ops, attrs: ops[0].log_softmax(**attrs),
    "reshape": lambda ops, attrs: ops[0].reshape(attrs["shape"]),
    "clamp": lambda ops, attrs: ops[0].clamp(attrs["lo"], attrs["hi"]),
    "conv2d": lambda ops, attrs: conv2d(*ops, **attrs),
    "conv_transpose2d": lambda ops, attrs: conv_transpose2d(*ops, **attrs),
    "max_pool2d": lambda ops, attrs: max_pool2d(ops[0], **attrs),
    "avg_pool2d": lambda ops, attrs: avg_pool2d(ops[0], **attrs),
}


def forward_op(kind: str, operands, attrs: dict | None = None) -> Tensor:
    """Apply a catalog operator by name. Raises KeyError for unknown kinds."""
    if kind not in _OP_TABLE:
        raise KeyError(f"unknown operator kind: {kind!r}")
    return _OP_TABLE[kind](list(operands), attrs or {})


def grad_check(f, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. The point should be float64;
    the returned error is max over coordinates of
    |analytic - numeric| / max(1, |numeric|). NaN on either side counts as
    infinite error.
    """
    p = Tensor(point.data.astype(np.float64), requires_grad=True)
    out = f(p)
    out.backward()
    analytic = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad, dtype=np.float64)

    flat = p.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(p.data.copy())).item()
        flat[i] = orig - step
        lo = f(Tensor(p.data.copy())).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)
    numeric = numeric.reshape(p.data.shape)

    if np.any(np.isnan(analytic)) or np.any(np.isnan(numeric)):
        return float("inf")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0

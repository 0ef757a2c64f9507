"""Dense tensors with reverse-mode autodiff.

A minimal tape-based engine: every operation records a backward closure on
its output, ``backward()`` walks the tape in reverse topological order.
Kernels are numpy-backed with a fixed accumulation order, so results are
deterministic for identical inputs. All operations raise on non-finite
results rather than letting NaN/Inf propagate silently.
"""

from __future__ import annotations

import numpy as np

from . import precision


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array with an optional gradient.

    ``data`` is a numpy array in the active precision; ``grad`` has the same
    shape once a backward pass has reached this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=precision.active_dtype()))
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents, backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(data, op)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Reverse-mode pass seeding this tensor's gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            t._accum(g)
            if t._backward is not None:
                for parent, pg in t._backward(g):
                    if not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = pg

    # -- elementwise arithmetic --------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        def back(g):
            return ((self, _unbroadcast(g, self.shape)),
                    (other, _unbroadcast(g, other.shape)))
        return Tensor._result(self.data + other.data, (self, other), back, "add")

    __radd__ = __add__

    def __neg__(self):
        def back(g):
            return ((self, -g),)
        return Tensor._result(-self.data, (self,), back, "neg")

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        def back(g):
            return ((self, _unbroadcast(g * other.data, self.shape)),
                    (other, _unbroadcast(g * self.data, other.shape)))
        return Tensor._result(self.data * other.data, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        inv = 1.0 / other.data
        def back(g):
            return ((self, _unbroadcast(g * inv, self.shape)),
                    (other, _unbroadcast(-g * self.data * inv * inv, other.shape)))
        return Tensor._result(self.data * inv, (self, other), back, "div")

    # -- reductions and shape ------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def back(g):
            if axis is None:
                return ((self, np.broadcast_to(g, self.shape).copy()),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            gg = g if keepdims else np.expand_dims(g, ax)
            return ((self, np.broadcast_to(gg, self.shape).copy()),)
        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims),
                              (self,), back, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        def back(g):
            return ((self, g.reshape(old)),)
        return Tensor._result(self.data.reshape(shape), (self,), back, "reshape")

    # -- elementwise functions -------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        def back(g):
            return ((self, g * out_data),)
        return Tensor._result(out_data, (self,), back, "exp")

    def log(self):
        def back(g):
            return ((self, g / self.data),)
        return Tensor._result(np.log(self.data), (self,), back, "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)
        def back(g):
            return ((self, g * (0.5 / out_data)),)
        return Tensor._result(out_data, (self,), back, "sqrt")

    def relu(self):
        mask = self.data > 0
        def back(g):
            return ((self, g * mask),)
        return Tensor._result(self.data * mask, (self,), back, "relu")

    def matmul(self, other):
        other = Tensor._lift(other)
        def back(g):
            return ((self, g @ other.data.T), (other, self.data.T @ g))
        return Tensor._result(self.data @ other.data, (self, other), back, "matmul")

    __matmul__ = matmul


def relu(x: Tensor) -> Tensor:
    return x.relu()


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x[N,D] @ weight[M,D].T + bias[M]``."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    def back(g):
        return ((x, g @ weight.data),
                (weight, g.T @ x.data),
                (bias, g.sum(axis=0)))
    return Tensor._result(x.data @ weight.data.T + bias.data,
                          (x, weight, bias), back, "linear")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Row-wise log softmax with max-subtraction for stability."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    softmax = np.exp(out_data)
    def back(g):
        return ((x, g - softmax * g.sum(axis=axis, keepdims=True)),)
    return Tensor._result(out_data, (x,), back, "log_softmax")


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, u: int, v: int, stride: int, padding: int):
    """Extract conv patches: returns (cols[N, C*U*V, L], H2, W2)."""
    n, c, h, w = x.shape
    h2 = _conv_out_size(h, u, stride, padding)
    w2 = _conv_out_size(w, v, stride, padding)
    if h2 < 1 or w2 < 1:
        raise ValueError(f"conv2d: output spatial size {h2}x{w2} < 1")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, u, v, h2, w2),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(windows).reshape(n, c * u * v, h2 * w2)
    return cols, h2, w2


def _col2im(cols: np.ndarray, x_shape, u, v, stride, padding, h2, w2) -> np.ndarray:
    """Scatter-add column gradients back to the input layout."""
    n, c, h, w = x_shape
    xpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, u, v, h2, w2)
    for i in range(u):
        for j in range(v):
            xpad[:, :, i:i + stride * h2:stride, j:j + stride * w2:stride] += cols6[:, :, i, j]
    if padding:
        return xpad[:, :, padding:-padding, padding:-padding]
    return xpad


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of ``x[N,C1,H,W]`` with ``kernels[C2,C1,U,V]``.

    Zero padding only; per-output-channel sum runs over input channels then
    kernel rows/cols via im2col + GEMM.
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError("conv2d expects 4D input and kernels")
    if x.shape[1] != kernels.shape[1]:
        raise ValueError(f"conv2d: input channels {x.shape[1]} != kernel channels {kernels.shape[1]}")
    c2, c1, u, v = kernels.shape
    cols, h2, w2 = _im2col(x.data, u, v, stride, padding)
    wmat = kernels.data.reshape(c2, c1 * u * v)
    out_data = np.matmul(wmat, cols).reshape(x.shape[0], c2, h2, w2)

    def back(g):
        gflat = g.reshape(x.shape[0], c2, h2 * w2)
        gw = np.einsum("ncl,nkl->ck", gflat, cols, optimize=True).reshape(kernels.shape)
        gcols = np.matmul(wmat.T, gflat)
        gx = _col2im(gcols, x.shape, u, v, stride, padding, h2, w2)
        return ((x, gx), (kernels, gw))

    return Tensor._result(out_data, (x, kernels), back, "conv2d")


def batchnorm2d(x: Tensor, mu, sigma, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize per channel with fixed statistics: ``(x - mu) * gamma / sigma + beta``.

    ``mu``/``sigma`` are treated as constants (eval-mode statistics); ``sigma``
    must already include the epsilon floor, i.e. sigma = sqrt(var + eps).
    """
    mu = np.asarray(mu if not isinstance(mu, Tensor) else mu.data)
    sigma = np.asarray(sigma if not isinstance(sigma, Tensor) else sigma.data)
    if np.any(sigma <= 0):
        raise ValueError("batchnorm2d: sigma must be positive")
    c = x.shape[1]
    if not (mu.shape == sigma.shape == gamma.shape == beta.shape == (c,)):
        raise ValueError("batchnorm2d: per-channel parameter shapes must all equal (C,)")
    shape = (1, c, 1, 1)
    scale = (gamma / Tensor(sigma)).reshape(shape)
    return (x - Tensor(mu.reshape(shape))) * scale + beta.reshape(shape)


def batchnorm2d_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch-statistics normalization, differentiable through the statistics.

    Returns ``(out, batch_mu, batch_sigma)`` where the statistics are plain
    per-channel arrays (biased variance, sigma = sqrt(var + eps)) for the
    caller's running-average update.
    """
    c = x.shape[1]
    shape = (1, c, 1, 1)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    sigma = (var + eps).sqrt()
    out = xc / sigma * gamma.reshape(shape) + beta.reshape(shape)
    return out, mu.data.reshape(c).copy(), sigma.data.reshape(c).copy()


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Requires 64-bit mode; the
    relative error is |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
    maximized over coordinates.
    """
    if precision.active_dtype() != np.float64:
        raise RuntimeError("grad_check requires 64-bit precision mode")
    if not (1e-7 <= h <= 1e-4):
        raise ValueError("grad_check step h must lie in [1e-7, 1e-4]")
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max())

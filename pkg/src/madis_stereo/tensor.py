"""Dense float64 tensor with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that keeps a
reference to its inputs and a closure mapping the output gradient to input
gradients.  :meth:`Tensor.backward` orders the recorded graph topologically
(the "tape") and replays the closures in reverse.  The graph is released
after the backward pass, so nothing leaks from one training step into the
next.

Inside a :func:`no_grad` block nothing is recorded.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "concat",
    "take_rows",
    "softmax",
    "layer_norm",
    "gelu",
    "softplus",
    "conv2d",
    "upsample_nearest",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class DomainError(ValueError):
    """An operand lies outside the domain of the operation (e.g. log of 0)."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the enclosed block (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    ``data`` is always a C-contiguous ``np.float64`` array; ``grad`` is
    either ``None`` or an array of identical shape.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(_as_array(data))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""

    # -- construction helpers -------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        Leaf gradients accumulate additively across calls; intermediate
        gradients are discarded once propagated.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward (loss must be scalar)", self.shape)
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward: tensor does not require grad (empty tape)")
        tape = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in tape:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        _check_broadcast("add", self, other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        _check_broadcast("sub", self, other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
            "sub",
        )

    def __rsub__(self, other):
        return _wrap(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = _wrap(other)
        _check_broadcast("mul", self, other)
        a, b = self.data, other.data

        def back(g):
            return (
                _unbroadcast(g * b, a.shape) if self.requires_grad else None,
                _unbroadcast(g * a, b.shape) if other.requires_grad else None,
            )

        return Tensor._make(a * b, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        _check_broadcast("div", self, other)
        a, b = self.data, other.data
        if np.any(b == 0):
            raise DomainError("div: division by zero")
        out = a / b

        def back(g):
            return (
                _unbroadcast(g / b, a.shape) if self.requires_grad else None,
                _unbroadcast(-g * out / b, b.shape) if other.requires_grad else None,
            )

        return Tensor._make(out, (self, other), back, "div")

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("pow: only scalar exponents are supported")
        p = float(exponent)
        a = self.data
        if p != int(p) and np.any(a < 0):
            raise DomainError("pow: negative base with non-integer exponent")
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a_shape = self.shape
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

        def back(g):
            full = np.zeros(a_shape)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), back, "getitem")

    # -- elementwise functions ---------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        if np.any(a <= 0):
            raise DomainError("log: non-positive input")
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    def sqrt(self) -> "Tensor":
        a = self.data
        if np.any(a < 0):
            raise DomainError("sqrt: negative input")
        out = np.sqrt(a)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a_shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape).copy(),)

        return Tensor._make(out, (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        if count == 0:
            raise DomainError("mean: empty reduction")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", a_shape, shape) from None
        return Tensor._make(out.copy(), (self,), lambda g: (g.reshape(a_shape),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        if sorted(axes) != list(range(self.ndim)):
            raise ShapeError("transpose", self.shape, axes)
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(self.data.transpose(axes))
        return Tensor._make(out, (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching/broadcast semantics (ndim >= 2)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), back, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tensors, back, "concat")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along axis 1 with per-batch indices.

    ``x`` has shape (B, T, D) and ``index`` integer shape (B, K); the result
    has shape (B, K, D) with ``out[b, k] = x[b, index[b, k]]``.
    """
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError("take_rows", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeError("take_rows (index out of range)", x.shape, index.shape)
    x_shape = x.shape
    out = np.take_along_axis(x.data, index[:, :, None], axis=1)

    def back(g):
        full = np.zeros(x_shape)
        b_idx = np.repeat(np.arange(x_shape[0]), index.shape[1])
        np.add.at(full, (b_idx, index.reshape(-1)), g.reshape(-1, x_shape[2]))
        return (full,)

    return Tensor._make(out, (x,), back, "take_rows")


# -- neural network primitives ----------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), back, "softmax")


def layer_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    if eps <= 0:
        raise DomainError("layer_norm: eps must be positive")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    normed = Tensor._make(xhat, (x,), back, "layer_norm")
    if weight is not None:
        if weight.shape != (d,):
            raise ShapeError("layer_norm weight", x.shape, weight.shape)
        normed = normed * weight
    if bias is not None:
        normed = normed + bias
    return normed


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))

    def back(g):
        return (g * (cdf + a * _INV_SQRT2PI * np.exp(-0.5 * a * a)),)

    return Tensor._make(a * cdf, (x,), back, "gelu")


def softplus(x: Tensor) -> Tensor:
    a = x.data
    out = np.logaddexp(0.0, a)

    def back(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * a)),)

    return Tensor._make(out, (x,), back, "softplus")


def _correlate(xp: np.ndarray, kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum over kernel offsets of shifted-window matmuls; ``kernel`` is (kh, kw, C_in, C_out)."""
    kh, kw = kernel.shape[:2]
    out = None
    for i in range(kh):
        for j in range(kw):
            term = xp[:, i : i + h, j : j + w, :] @ kernel[i, j]
            out = term if out is None else out + term
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) on NHWC input.

    ``weight`` has shape (kh, kw, C_in, C_out) with odd kernel sizes.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != x.shape[3]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d (kernel must be odd)", weight.shape)
    b, h, w, _ = x.shape
    pad = ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0))
    xp = np.pad(x.data, pad)
    out = _correlate(xp, weight.data, h, w)
    parents: tuple = (x, weight)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError("conv2d bias", weight.shape, bias.shape)
        out += bias.data
        parents = (x, weight, bias)

    def back(g):
        gw = None
        if weight.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.empty(weight.shape)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = xp[:, i : i + h, j : j + w, :].reshape(-1, cin).T @ g2
        gx = None
        if x.requires_grad:
            # correlation of the output gradient with the flipped, transposed kernel
            flipped = np.ascontiguousarray(weight.data[::-1, ::-1].transpose(0, 1, 3, 2))
            gx = _correlate(np.pad(g, pad), flipped, h, w)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return Tensor._make(out, parents, back, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of an NHWC tensor by an integer factor."""
    if x.ndim != 4 or factor < 1:
        raise ShapeError("upsample_nearest", x.shape)
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def back(g):
        return (g.reshape(b, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return Tensor._make(out, (x,), back, "upsample")


# -- gradient oracle ----------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max |analytic - cd| / max(|analytic|, |cd|, 1e-8)`` over the
    checked flat indices (all of them by default).  ``f`` is evaluated twice
    at the unperturbed point; differing values mean it is not deterministic
    and a ``RuntimeError`` is raised.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    x.grad = None
    prev = x.requires_grad
    x.requires_grad = True
    out = f(x)
    if out.size != 1:
        raise ShapeError("finite_diff_check (f must be scalar)", out.shape)
    f0 = out.item()
    if out.requires_grad:
        out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None
    x.requires_grad = prev

    flat = x.data.reshape(-1)
    idx = range(x.size) if indices is None else list(indices)
    with no_grad():
        if f(x).item() != f0:
            raise RuntimeError("finite_diff_check: f is not deterministic (pin its RNG)")
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            cd = (fp - fm) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst

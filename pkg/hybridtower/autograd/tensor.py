"""
Dense float64 tensor with tape-based reverse-mode automatic differentiation
"""
import contextlib
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from hybridtower.errors import NumericError, ShapeError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    """A float64 array that records the operations producing it

    Leaves created with ``requires_grad=True`` accumulate ``grad`` on every call to
    ``backward``; call ``zero_grad`` (or set ``grad = None``) between steps.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    # ----------------------------------------------------------------- basics

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # --------------------------------------------------------------- backward

    def backward(self):
        """Accumulate dSelf/dLeaf into every reachable ``requires_grad`` leaf"""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that depends on no parameter")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                grad = np.array(grad, dtype=np.float64).reshape(node.data.shape)
                node.grad = grad if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._result(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._result(a / b, (self, other), backward)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __matmul__(self, other):
        return matmul(self, other)

    # ------------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # ---------------------------------------------------------- elementwise

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,))

    # ----------------------------------------------------------------- shape

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"Cannot reshape {original} to {shape}: {e}")
        return Tensor._result(out, (self,), lambda g: (g.reshape(original),))

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        out = np.swapaxes(self.data, axis1, axis2)
        return Tensor._result(out, (self,), lambda g: (np.swapaxes(g, axis1, axis2),))

    def expand(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        out = np.broadcast_to(self.data, shape)
        return Tensor._result(out, (self,), lambda g: (_unbroadcast(g, original),))

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(self.data[index], (self,), backward)


class Parameter(Tensor):
    """Trainable leaf tensor"""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


# ------------------------------------------------------------------ kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast

    Gradients: dA = dC @ B^T and dB = A^T @ dC, summed over broadcast axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return Tensor._result(np.matmul(a_data, b_data), (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``"""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shape mismatch {[t.shape for t in tensors]}: {e}")
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tensors, backward)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax

    Args:
        x: Input tensor
        axis: Normalization axis
        mask: Optional boolean array broadcastable to ``x``; True entries get -inf
            before normalization and exactly 0 probability after it

    Returns:
        Tensor of probabilities
    """
    z = x.data if mask is None else np.where(mask, -np.inf, x.data)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - logsumexp
    probs = np.exp(y)

    def backward(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift"""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gamma.shape}/{beta.shape} does not match {d}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / d * (d * gxhat
                        - np.sum(gxhat, axis=-1, keepdims=True)
                        - xhat * np.sum(gxhat * xhat, axis=-1, keepdims=True))
        ggamma = np.sum((g * xhat).reshape(-1, d), axis=0)
        gbeta = np.sum(g.reshape(-1, d), axis=0)
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), backward)


def quick_gelu(x: Tensor) -> Tensor:
    """x * sigmoid(1.702 x), the CLIP transformer activation"""
    s = 0.5 * (1.0 + np.tanh(0.851 * x.data))
    out = x.data * s

    def backward(g):
        return (g * (s + 1.702 * x.data * s * (1.0 - s)),)

    return Tensor._result(out, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by the L2 norm along ``axis``; norms below ``eps`` raise NumericError"""
    norms = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norms < eps):
        raise NumericError("Cannot normalize a zero-norm vector")
    return x / (x * x).sum(axis=axis, keepdims=True).sqrt()


def check_finite(value, where: str = "tensor"):
    """Raise NumericError when ``value`` (Tensor or array) holds NaN/Inf"""
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"Non-finite values detected in {where}")
    if isinstance(value, Tensor) and value.grad is not None and not np.all(np.isfinite(value.grad)):
        raise NumericError(f"Non-finite gradient detected in {where}")

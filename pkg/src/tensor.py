"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Features:
- Tensor: immutable numpy-backed value, optionally a node on a Tape
- Tape: append-only record of operations with their vector-Jacobian products
- Primitive ops for a small pre-norm transformer (matmul, softmax, layernorm, gelu, ...)
- Central finite differences as the gradient oracle

A fresh Tape is created per forward pass. Leaves are the tensors we want
gradients for (patch pixels, or model parameters during training); every
other input is a constant and receives no gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from src.exceptions import ShapeError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ============================================================================
# TAPE
# ============================================================================

@dataclass
class Node:
    """One recorded operation. Leaves have no vjp."""
    parents: Tuple[Optional[int], ...]
    vjp: Optional[VJP]
    shape: Tuple[int, ...]
    op: str = "leaf"


class Tape:
    """
    Append-only operation record.

    Parents always precede their children, so a single reverse sweep over
    the node list visits every node exactly once.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value: ArrayLike, name: str = "leaf") -> "Tensor":
        """Register a differentiable input."""
        data = _as_array(value)
        self.nodes.append(Node(parents=(), vjp=None, shape=data.shape, op=name))
        return Tensor(data, tape=self, node=len(self.nodes) - 1)

    def record(self, data: np.ndarray, inputs: Sequence["Tensor"], vjp: VJP, op: str) -> "Tensor":
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(Node(parents=parents, vjp=vjp, shape=data.shape, op=op))
        return Tensor(data, tape=self, node=len(self.nodes) - 1)

    def backward(self, loss: "Tensor") -> "GradientMap":
        """
        Reverse sweep from a scalar loss.

        Args:
            loss: scalar Tensor recorded on this tape

        Returns:
            GradientMap with d(loss)/d(node) for every node reached
        """
        if loss.tape is not self or loss.node is None:
            raise UsageError("backward: loss is not recorded on this tape")
        if loss.data.size != 1:
            raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.node] = np.ones_like(loss.data)

        for index in range(loss.node, -1, -1):
            g = grads[index]
            node = self.nodes[index]
            if g is None or node.vjp is None:
                continue
            for parent, parent_grad in zip(node.parents, node.vjp(g)):
                if parent is None or parent_grad is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = parent_grad
                else:
                    grads[parent] = grads[parent] + parent_grad

        return GradientMap(self, grads)


class GradientMap:
    """Gradients of one backward pass, indexed by the tensors they belong to."""

    def __init__(self, tape: Tape, grads: List[Optional[np.ndarray]]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, tensor: "Tensor") -> "Tensor":
        if tensor.tape is not self._tape or tensor.node is None:
            return Tensor(np.zeros(tensor.shape))
        g = self._grads[tensor.node]
        if g is None:
            return Tensor(np.zeros(tensor.shape))
        return Tensor(np.array(g, dtype=np.float64).reshape(tensor.shape))


def backward(loss: "Tensor") -> GradientMap:
    """Gradient map from tape leaves for a scalar loss."""
    if loss.tape is None:
        raise UsageError("backward: loss is a constant, not recorded on any tape")
    return loss.tape.backward(loss)


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """Immutable float64 array, optionally tracked by a Tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, tape: Optional[Tape] = None, node: Optional[int] = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    def __repr__(self) -> str:
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

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
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)

    def permute(self, axes: Sequence[int]) -> "Tensor":
        return permute(self, axes)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def detach(self) -> "Tensor":
        return detach(self)


# ============================================================================
# HELPERS
# ============================================================================

def _as_array(value: ArrayLike) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _common_tape(inputs: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise UsageError("operands are recorded on different tapes")
    return tape


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP, op: str) -> Tensor:
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, vjp, op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise UsageError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ============================================================================
# ELEMENTWISE
# ============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit(out, (a, b), vjp, "div")


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _emit(x.data * factor, (x,), vjp, "scale")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _emit(out, (x,), vjp, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (g / x.data,)

    return _emit(np.log(x.data), (x,), vjp, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _emit(out, (x,), vjp, "sqrt")


def gelu(x) -> Tensor:
    """Exact GELU x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data ** 2)
        return (g * (cdf + x.data * pdf),)

    return _emit(x.data * cdf, (x,), vjp, "gelu")


def detach(x) -> Tensor:
    """Stop-gradient: same values, no tape membership."""
    x = as_tensor(x)
    return Tensor(x.data)


# ============================================================================
# SHAPE OPS
# ============================================================================

def matmul(a, b) -> Tensor:
    """Matrix product over the last two dimensions (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(x) -> Tensor:
    """Swap the last two dimensions."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dimensions, got shape {x.shape}")

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit(np.swapaxes(x.data, -1, -2), (x,), vjp, "transpose")


def permute(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of the axes of shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(x.data, axes), (x,), vjp, "permute")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _emit(out, (x,), vjp, "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    axis = _normalize_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return _emit(out, tensors, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit(out, tensors, vjp, "stack")


def getitem(x, key) -> Tensor:
    """Slicing / integer indexing with scatter-add backward."""
    x = as_tensor(x)
    try:
        out = np.array(x.data[key])
    except IndexError as e:
        raise ShapeError(f"index {key!r} invalid for shape {x.shape}: {e}") from None

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, key, g)
        return (full,)

    return _emit(out, (x,), vjp, "getitem")


def pad_block(x, shape: Sequence[int], offset: Sequence[int]) -> Tensor:
    """
    Place x inside a zero tensor of `shape`, anchored at `offset` on the
    trailing len(offset) dimensions.
    """
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim:
        raise ShapeError(f"pad_block: rank mismatch between {x.shape} and {shape}")
    lead = x.ndim - len(offset)
    region = [slice(None)] * lead
    for dim, start in enumerate(offset):
        stop = start + x.shape[lead + dim]
        if start < 0 or stop > shape[lead + dim]:
            raise ShapeError(f"pad_block: block {x.shape} at {tuple(offset)} exceeds {shape}")
        region.append(slice(start, stop))
    region = tuple(region)
    if x.shape[:lead] != shape[:lead]:
        raise ShapeError(f"pad_block: leading dims differ between {x.shape} and {shape}")
    out = np.zeros(shape)
    out[region] = x.data

    def vjp(g):
        return (np.array(g[region]),)

    return _emit(out, (x,), vjp, "pad_block")


# ============================================================================
# REDUCTIONS
# ============================================================================

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit(np.asarray(out, dtype=np.float64), (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max_lastdim(x) -> Tensor:
    """Hard maximum over the last dimension; gradient goes to the first argmax."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"max_lastdim needs a non-empty last dimension, got shape {x.shape}")
    index = np.argmax(x.data, axis=-1)[..., None]
    out = np.take_along_axis(x.data, index, axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, index, np.asarray(g)[..., None], axis=-1)
        return (full,)

    return _emit(out, (x,), vjp, "max")


def logsumexp_lastdim(x) -> Tensor:
    """log(sum(exp(x))) over the last dimension, max-shift stabilized."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"logsumexp needs a non-empty last dimension, got shape {x.shape}")
    shift = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - shift)
    total = np.sum(e, axis=-1, keepdims=True)
    out = (shift + np.log(total))[..., 0]
    weights = e / total

    def vjp(g):
        return (weights * np.asarray(g)[..., None],)

    return _emit(out, (x,), vjp, "logsumexp")


# ============================================================================
# FUSED NETWORK OPS
# ============================================================================

def softmax_lastdim(x) -> Tensor:
    """Row-stochastic softmax over the last dimension, max-shift stabilized."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    e = np.exp(x.data - np.max(x.data, axis=-1, keepdims=True))
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit(out, (x,), vjp, "softmax")


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-token normalization over the last dimension followed by gamma * x_hat + beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layernorm: gamma {gamma.shape} / beta {beta.shape} must match last dim of {x.shape}"
        )
    centered = x.data - np.mean(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered ** 2, axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = gamma.data * x_hat + beta.data

    def vjp(g):
        d_hat = g * gamma.data
        dx = inv_std / width * (
            width * d_hat
            - np.sum(d_hat, axis=-1, keepdims=True)
            - x_hat * np.sum(d_hat * x_hat, axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * x_hat, gamma.shape), _unbroadcast(g, beta.shape)

    return _emit(out, (x, gamma, beta), vjp, "layernorm")


# ============================================================================
# GRADIENT ORACLE
# ============================================================================

def finite_difference_gradient(
    f: Callable[[Tensor], Union[Tensor, float]],
    x: Union[Tensor, ArrayLike],
    h: float = 1e-5
) -> Tensor:
    """
    Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.

    Args:
        f: scalar function of a constant Tensor
        x: evaluation point
        h: step, must be positive

    Returns:
        Tensor shaped like x
    """
    if h <= 0:
        raise UsageError(f"finite difference step must be positive, got {h}")
    point = np.array(_as_array(x), dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)

    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = _scalar_value(f(Tensor(point.copy())))
        flat[i] = original - h
        lower = _scalar_value(f(Tensor(point.copy())))
        flat[i] = original
        grad.flat[i] = (upper - lower) / (2.0 * h)

    return Tensor(grad)


def _scalar_value(value: Union[Tensor, float]) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def relative_error(actual: ArrayLike, expected: ArrayLike) -> float:
    """||a - b|| / max(||a|| + ||b||, 1e-12); 0 when both are zero."""
    a, b = _as_array(actual), _as_array(expected)
    denominator = np.linalg.norm(a) + np.linalg.norm(b)
    if denominator < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denominator)

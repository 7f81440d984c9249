"""
Module: services.numeric
------------------------

Dense tensor arithmetic with tape-based reverse-mode automatic
differentiation, and a central finite-difference gradient checker. Every
other service builds on this module.

Key Components:
- Tensor: a float64 numpy array plus gradient bookkeeping. Operations record
  their parents and a backward closure; ``Tensor.backward`` walks the graph in
  reverse topological order and accumulates gradients into leaf tensors.
  Operations are whole-array (not per-scalar), so graphs stay small.
- custom_op: the hook other services use to register primitives with their
  own analytic backward (transposed convolution, bilinear sampling).
- Differentiable functions: matmul, softmax_with_temperature, logsumexp,
  cosine_similarity, scatter_add, concat/stack and the elementwise set.
- MlpParams / mlp_forward: affine + activation stacks applied along the
  trailing axis.
- grad_check: compares reverse-mode gradients against central differences.

Conventions:
- Broadcasting follows numpy; gradients are summed back to operand shapes.
- Cosine similarity with a zero-norm operand is defined as 0, with zero
  gradient.
- ``no_grad()`` disables graph recording for the current thread.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.utils.errors import DimensionError, EvaluationError, ParameterError
from app.utils.validators import validate_positive, validate_range

ACTIVATIONS = ("identity", "relu")

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    # --------------------------
    # Introspection
    # --------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __len__(self):
        return len(self.data)

    # --------------------------
    # Backward pass
    # --------------------------

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
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
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise ParameterError("backward() called on a tensor without grad tracking")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # --------------------------
    # Arithmetic
    # --------------------------

    def __add__(self, other):
        other = as_tensor(other)
        return custom_op(
            self.data + other.data, (self, other), lambda g: (g, g), "add"
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return custom_op(
            self.data - other.data, (self, other), lambda g: (g, -g), "sub"
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return custom_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return custom_op(
            a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div"
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return custom_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ParameterError("only scalar exponents are supported")
        x = self.data
        return custom_op(
            x**exponent,
            (self,),
            lambda g: (g * exponent * x ** (exponent - 1),),
            "pow",
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        if isinstance(index, Tensor):
            index = index.data.astype(np.int64)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return custom_op(self.data[index], (self,), backward, "getitem")

    # --------------------------
    # Reductions and shape
    # --------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return custom_op(
            self.data.sum(axis=axes, keepdims=keepdims), (self,), backward, "sum"
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return custom_op(
            self.data.reshape(shape),
            (self,),
            lambda g: (g.reshape(original),),
            "reshape",
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return custom_op(
            np.transpose(self.data, axes),
            (self,),
            lambda g: (np.transpose(g, inverse),),
            "transpose",
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def flip(self, axes) -> "Tensor":
        axes = _normalize_axes(axes, self.ndim)
        return custom_op(
            np.flip(self.data, axes), (self,), lambda g: (np.flip(g, axes),), "flip"
        )

    # --------------------------
    # Elementwise functions
    # --------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return custom_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return custom_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return custom_op(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return custom_op(
            np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu"
        )

    def sigmoid(self) -> "Tensor":
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return custom_op(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str = "",
) -> Tensor:
    """Wrap ``data`` as the output of a primitive with analytic ``backward``.

    ``backward(g)`` receives the gradient w.r.t. the output and returns one
    gradient (or None) per parent; broadcast gradients are reduced here.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# --------------------------
# Linear algebra and structure
# --------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    vector = a.ndim == 1
    a2 = a.data[None, :] if vector else a.data
    out = a2 @ b.data

    def backward(g):
        g2 = g[..., None, :] if vector else g
        ga = g2 @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if vector:
            ga = ga[..., 0, :]
        return ga, gb

    return custom_op(out[..., 0, :] if vector else out, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return custom_op(out, tensors, backward, "stack")


def scatter_add(src: Tensor, index: np.ndarray, size: int) -> Tensor:
    """Sum ``src[..., k]`` into ``out[..., index[..., k]]`` along the last axis.

    ``index`` broadcasts against ``src``; entries < 0 are dropped.
    """
    src = as_tensor(src)
    index = np.broadcast_to(np.asarray(index, dtype=np.int64), src.shape)
    lead = src.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    flat_index = index.reshape(rows, -1)
    keep = flat_index >= 0
    row_ids = np.broadcast_to(np.arange(rows)[:, None], flat_index.shape)
    out = np.zeros((rows, size))
    np.add.at(out, (row_ids[keep], flat_index[keep]), src.data.reshape(rows, -1)[keep])

    def backward(g):
        g = g.reshape(rows, size)
        grad = np.zeros(flat_index.shape)
        grad[keep] = g[row_ids[keep], flat_index[keep]]
        return (grad.reshape(src.shape),)

    return custom_op(out.reshape(lead + (size,)), (src,), backward, "scatter_add")


# --------------------------
# Normalized maps
# --------------------------


def softmax_with_temperature(x, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``x / tau`` along ``axis``, stabilized by max subtraction."""
    validate_positive("tau", tau)
    x = as_tensor(x)
    z = x.data / tau
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gz = p * (g - (g * p).sum(axis=axis, keepdims=True))
        return (gz / tau,)

    return custom_op(p, (x,), backward, "softmax")


def logsumexp(x, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """log Σ exp(x) along ``axis``, restricted to entries where ``mask`` holds.

    Rows with an empty mask evaluate to 0 and carry no gradient.
    """
    x = as_tensor(x)
    keep = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(mask, x.shape)
    masked = np.where(keep, x.data, -np.inf)
    peak = masked.max(axis=axis, keepdims=True)
    has_any = np.isfinite(peak)
    peak = np.where(has_any, peak, 0.0)
    e = np.where(keep, np.exp(masked - peak), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    safe_total = np.where(has_any, total, 1.0)
    out = np.squeeze(peak + np.log(safe_total), axis=axis)
    weights = e / safe_total

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return custom_op(out, (x,), backward, "logsumexp")


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis`` with numpy broadcasting.

    A zero-norm operand gives similarity 0 and no gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise DimensionError(
            f"cosine_similarity: trailing extents differ, {a.shape} vs {b.shape}"
        )
    dot = (a.data * b.data).sum(axis=axis)
    na = np.sqrt((a.data * a.data).sum(axis=axis))
    nb = np.sqrt((b.data * b.data).sum(axis=axis))
    ok = (na > 0) & (nb > 0)
    safe_na = np.where(na > 0, na, 1.0)
    safe_nb = np.where(nb > 0, nb, 1.0)
    cos = np.where(ok, dot / (safe_na * safe_nb), 0.0)
    cos = np.clip(cos, -1.0, 1.0)

    def backward(g):
        scale = np.expand_dims(np.where(ok, g, 0.0), axis)
        c = np.expand_dims(cos, axis)
        ea = np.expand_dims(safe_na, axis)
        eb = np.expand_dims(safe_nb, axis)
        ga = scale * (b.data / (ea * eb) - c * a.data / (ea * ea))
        gb = scale * (a.data / (ea * eb) - c * b.data / (eb * eb))
        return ga, gb

    return custom_op(cos, (a, b), backward, "cosine")


# --------------------------
# MLP
# --------------------------


@dataclass
class MlpParams:
    """Per-layer weights (in × out), biases (out) and activation tags."""

    weights: List[Tensor]
    biases: List[Tensor]
    activations: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.activations:
            self.activations = ["identity"] * len(self.weights)
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("MlpParams: weights, biases and activations differ in count")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ParameterError(f"layer {i}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i}: input {w.shape[0]} does not match previous "
                    f"output {self.weights[i - 1].shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> List[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    @classmethod
    def initialize(
        cls,
        dims: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
        scale: float = 1.0,
    ) -> "MlpParams":
        """He-style normal init; ``scale`` shrinks the last layer's weights."""
        weights, biases = [], []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            std = np.sqrt(2.0 / d_in)
            if i == len(dims) - 2:
                std *= scale
            weights.append(Tensor(rng.normal(0.0, std, (d_in, d_out)), requires_grad=True))
            biases.append(Tensor(np.zeros(d_out), requires_grad=True))
        return cls(weights, biases, list(activations))


def mlp_forward(params: MlpParams, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != params.in_dim:
        raise DimensionError(
            f"mlp_forward: input shape {x.shape} does not match first layer "
            f"weight shape {params.weights[0].shape}"
        )
    for w, b, act in zip(params.weights, params.biases, params.activations):
        x = matmul(x, w) + b
        if act == "relu":
            x = x.relu()
    return x


# --------------------------
# Gradient checking
# --------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    per_element: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def within(self, rtol: float = 1e-4, atol: float = 0.0) -> bool:
        bound = atol + rtol * np.maximum(np.abs(self.analytic), np.abs(self.numeric))
        return bool(np.all(np.abs(self.analytic - self.numeric) <= bound))


def _scalar_value(value) -> float:
    value = as_tensor(value)
    if value.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {value.shape}")
    result = float(value.data.reshape(-1)[0])
    if not np.isfinite(result):
        raise EvaluationError(f"function value is not finite: {result}")
    return result


def grad_check(
    f: Callable[[Tensor], Tensor], x, eps: float = 1e-6, floor: float = 1e-8
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` to central differences."""
    validate_range("eps", eps, 1e-7, 1e-3)
    base = np.array(as_tensor(x).data, dtype=np.float64)

    probe = Tensor(base.copy(), requires_grad=True)
    value = as_tensor(f(probe))
    _scalar_value(value)
    if value.requires_grad:
        value.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            shifted = flat.copy()
            shifted[i] = flat[i] + eps
            upper = _scalar_value(f(Tensor(shifted.reshape(base.shape))))
            shifted[i] = flat[i] - eps
            lower = _scalar_value(f(Tensor(shifted.reshape(base.shape))))
            numeric[i] = (upper - lower) / (2.0 * eps)
    numeric = numeric.reshape(base.shape)

    abs_err = np.abs(analytic - numeric)
    rel = abs_err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(
        max_rel_err=float(rel.max()) if rel.size else 0.0,
        max_abs_err=float(abs_err.max()) if abs_err.size else 0.0,
        per_element=rel,
        analytic=analytic,
        numeric=numeric,
    )

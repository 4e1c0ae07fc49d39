"""
Dense float64 tensors with a reverse-mode gradient tape.

A Tensor wraps a contiguous numpy float64 array. Operations executed while a
GradTape is active (``with GradTape() as tape:``) are appended to the tape in
execution order; ``tape.backward(loss)`` replays them in reverse and
accumulates one gradient per tensor, keyed by tensor identity.

Shape algebra is kept deliberately small: element-wise ops require equal
shapes, and the only broadcast is a trailing-axis bias (``add_bias``).
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from faalab.errors import ContractError, DegenerateInputError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()
_faulty_ops: set = set()

GELU_C = float(np.sqrt(2.0 / np.pi))


class Tensor:
    """
    A float64 array plus a flag telling the tape whether gradients flow into it.

    Args:
        data: Array-like values; copied into a contiguous float64 array
        requires_grad: Mark as a trainable leaf (or derived from one)
        name: Optional canonical name, used for parameters
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def from_external(cls, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        """
        Build a tensor from untrusted input, rejecting NaN and infinities.

        Raises:
            DegenerateInputError: If any value is not finite
        """
        tensor = cls(data, requires_grad=requires_grad, name=name)
        if not np.all(np.isfinite(tensor.data)):
            label = f"tensor '{name}'" if name else "tensor"
            raise DegenerateInputError(f"{label} contains non-finite values")
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name='{self.name}'" if self.name else ""
        return f"<Tensor shape={self.shape}{label} requires_grad={self.requires_grad}>"

    # Operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data: ArrayLike, name: str) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data: ArrayLike) -> Tensor:
    """Create a tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward


class GradTape:
    """
    Ordered record of primitive operations and the gradients they produce.

    Usage:
        with GradTape() as tape:
            loss = some_scalar_function(params)
        tape.backward(loss)
        grad = tape.gradient(params["face.w1"])
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.grads: Dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = []
            _state.tapes = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tapes.pop()

    def record(self, op: str, out: Tensor, inputs: Tuple[Tensor, ...], backward: Backward) -> None:
        self.records.append(_Record(op, out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """
        Replay the tape in reverse from a scalar loss.

        Raises:
            ContractError: If the loss is not a single element
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            grad_out = grads.get(id(rec.out))
            if grad_out is None:
                continue
            input_grads = rec.backward(grad_out)
            if rec.op in _faulty_ops:
                input_grads = tuple(None if g is None else g * 1.01 for g in input_grads)
            for tensor, grad in zip(rec.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
        self.grads = grads

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Gradient accumulated for ``tensor`` (zeros if it did not influence the loss)."""
        grad = self.grads.get(id(tensor))
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad


def _active_tape() -> Optional[GradTape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _result(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: Backward) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape.record(op, out, inputs, backward)
    return out


@contextlib.contextmanager
def inject_fault(op: str) -> Iterator[None]:
    """Scale the backward rule of ``op`` by 1.01 while the context is open (self-test fault injection)."""
    _faulty_ops.add(op)
    try:
        yield
    finally:
        _faulty_ops.discard(op)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Element-wise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result("add_scalar", a.data + c, (a,), lambda g: (g,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D bias along the trailing axis (the only broadcast this module allows)."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match trailing axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def log1p(x: Tensor) -> Tensor:
    return _result("log1p", np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner),)

    return _result("gelu", y, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the clip is active."""
    mask = (x.data >= lo) & (x.data <= hi)
    return _result("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result("sum", data, (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    return _result("transpose", data, (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _result("concat", data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result("take", data, (x,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of a (m x k) and b (k x n).

    Raises:
        ShapeError: If either operand is not 2-D or inner dimensions disagree
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of (n x m x k) and (n x k x p)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return (g @ np.transpose(b.data, (0, 2, 1)), np.transpose(a.data, (0, 2, 1)) @ g)

    return _result("bmm", a.data @ b.data, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilised by subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax_rows", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each trailing-axis row to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered / sigma
    y = x_hat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        d_hat = g * gain.data
        dx = (d_hat - d_hat.mean(axis=-1, keepdims=True)
              - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)) / sigma
        return (dx, (g * x_hat).sum(axis=lead), g.sum(axis=lead))

    return _result("layer_norm", y, (x, gain, bias), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """
    Scale each trailing-axis row to unit L2 norm.

    Raises:
        DegenerateInputError: If any row has zero norm
    """
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize_rows: zero-norm row")
    y = x.data / norms

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _result("l2_normalize_rows", y, (x,), backward)


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """
    Pairwise cosine similarity S[i][j] = <a_i, b_j> / (|a_i| |b_j|), clipped to [-1, 1].

    Raises:
        ShapeError: If the operands are not 2-D with a common width
        DegenerateInputError: If any row has zero norm
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity_matrix: incompatible shapes {a.shape} and {b.shape}")
    s = matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)))
    # rounding can leave |S| a few ulps above 1; clip without blocking the gradient
    return _result("unit_clip", np.clip(s.data, -1.0, 1.0), (s,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """
    Result of comparing tape gradients with central finite differences.

    Attributes:
        name: Identifier of the checked function
        tolerance: Maximum allowed relative error
        errors: Max relative error per parameter name
    """

    name: str
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    @property
    def worst(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)


def grad_check(
    fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    name: str = "",
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare tape gradients of a scalar function with central finite differences.

    The relative error of a parameter is max|analytic - numeric| divided by the
    larger of the two gradients' max magnitudes (floored at 1e-8).

    Args:
        fn: Zero-argument function recomputing the scalar from ``params``
        params: Parameters to check, by name; their data is perturbed in place and restored
        tolerance: Pass threshold on the max relative error
        step: Finite-difference step
        name: Identifier reported back (e.g. the op under test)
        max_elements: If set, check at most this many elements per parameter (seeded sample)
        seed: Seed for the element sample

    Returns:
        GradCheckReport

    Raises:
        ContractError: If ``fn`` is not scalar-valued
    """
    with GradTape() as tape:
        out = fn()
    if out.data.size != 1:
        raise ContractError(f"grad_check({name}): function returns shape {out.shape}, expected a scalar")
    tape.backward(out)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(name=name, tolerance=tolerance)
    for pname, tensor in params.items():
        analytic = tape.gradient(tensor)
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.zeros(len(indices))
        for pos, idx in enumerate(indices):
            original = flat[idx]
            flat[idx] = original + step
            plus = fn().item()
            flat[idx] = original - step
            minus = fn().item()
            flat[idx] = original
            numeric[pos] = (plus - minus) / (2.0 * step)
        chosen = analytic.reshape(-1)[indices]
        scale_ = max(np.abs(chosen).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        report.errors[pname] = float(np.abs(chosen - numeric).max(initial=0.0) / scale_)
    logger.debug(f"grad_check {name}: max relative error {report.max_error:.3e} (worst {report.worst})")
    return report

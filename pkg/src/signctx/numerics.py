"""Dense float64 tensors with reverse-mode differentiation.

Each differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` walks the recorded
graph in reverse topological order. Hot paths (linear, layer norm, softmax,
cross entropy) are fused so the graph stays small.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DegenerateMaskError,
    DimensionError,
    EmptyDimensionError,
    NonFiniteError,
    UndefinedMeanError,
    UninitializedGradientError,
    VocabularyError,
)

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward on non-scalar tensor of shape {self.shape} needs a seed gradient")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g, "gradient")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent: float):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Parameter(Tensor):
    """Trainable leaf tensor carrying its name and Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(a.data**exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis) * (1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear_forward(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b over the last axis of ``x`` (any leading shape)."""
    x = as_tensor(x)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]) if w.requires_grad else None
        gb = g.reshape(-1, w.shape[1]).sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# normalisation and probabilities


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalisation to zero mean and unit population variance."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise EmptyDimensionError("layer_norm over an empty last dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv_std * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggain = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward, "layer_norm")


def _softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.shape[-1] == 0:
        raise EmptyDimensionError("softmax over an empty axis")
    y = _softmax_array(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax restricted to positions where ``mask`` is true; others get exactly 0."""
    mask = np.broadcast_to(mask, x.shape)
    if not mask.any(axis=-1).all():
        raise DegenerateMaskError("a query row has no attendable position")
    scores = np.where(mask, x.data, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "masked_softmax")


def cross_entropy_label_smoothed(logits: Tensor, targets, smoothing: float = 0.0, pad_id: int = 0) -> Tensor:
    """Mean smoothed cross entropy over non-pad positions.

    ``logits`` has shape [..., V] and ``targets`` the matching leading shape.
    The smoothed target puts ``1 - smoothing`` on the gold token and spreads
    ``smoothing`` uniformly over the other ``V - 1`` tokens.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    V = logits.shape[-1]
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise UndefinedMeanError("every target position is padding")
    gold = targets[keep]
    if gold.min() < 0 or gold.max() >= V:
        raise DimensionError(f"target id outside [0, {V})")
    flat = logits.data.reshape(-1, V)[keep.reshape(-1)]
    logp = log_softmax_array(flat)
    off = smoothing / (V - 1) if V > 1 else 0.0
    q = np.full_like(logp, off)
    q[np.arange(count), gold] = 1.0 - smoothing
    loss = -(q * logp).sum() / count

    def backward(g):
        full = np.zeros((keep.size, V))
        full[keep.reshape(-1)] = (np.exp(logp) - q) * (float(g) / count)
        return (full.reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# lookup and regularisation


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = int(ids[(ids < 0) | (ids >= V)].flat[0])
        raise VocabularyError(bad, V)
    return _result(table.data[ids], (table,), backward, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# modules


class Module:
    """Container that discovers parameters and submodules from attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _named(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            for child in _children(value):
                yield from child.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)


def _children(value) -> Iterator[Module]:
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _children(v)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _children(v)


def _named(value, path: str) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _named(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _named(v, f"{path}.{k}")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = Parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = LAYER_NORM_EPS):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def assign_names(module: Module) -> None:
    seen: set[str] = set()
    for name, p in module.named_parameters():
        if name in seen:
            raise ValueError(f"duplicate parameter name {name}")
        seen.add(name)
        p.name = name


# ---------------------------------------------------------------------------
# optimisation


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update in place, then clear gradients."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UninitializedGradientError(f"parameter {p.name or '<unnamed>'} has no gradient")
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        _check_finite(p.data, f"parameter {p.name}")
        p.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``. When a
    parameter has more than ``max_coords`` entries a random subset is probed.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                a = grad.reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst

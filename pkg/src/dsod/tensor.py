"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded when at
least one operand requires a gradient.  ``Tape.backward`` replays the
recording in reverse and accumulates gradients into the ``grad`` buffers of
the leaf tensors that require them.  Outside a tape nothing is recorded, which
is how inference ("no tape") runs.
"""

from __future__ import annotations

import functools
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_TAPES: list["Tape"] = []


_sum = np.add.reduce


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_recorded")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check and not (math.isfinite(_sum(arr, axis=None)) or np.isfinite(arr).all()):
            raise ValueError("non-finite values in tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if type(x) is float and math.isfinite(x):
        # python-float constants dominate op operands; skip the array checks
        return _wrap(np.float64(x))
    return Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations for one training step.

    Use as a context manager; a tape is single-use and must not be shared
    between steps.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        out.requires_grad = True
        out._recorded = True
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
        if self._closed:
            raise RuntimeError("tape already consumed; record a new one per step")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._closed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._recorded:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=np.float64)
                    else:
                        inp.grad = inp.grad + gi
        if not loss._recorded and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        self.nodes.clear()


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _wrap(data: np.ndarray) -> Tensor:
    # op results are fresh arrays; skip the defensive copy
    arr = np.asarray(data, dtype=np.float64)
    # a finite sum implies finite entries; only an overflowing sum needs the full test
    total = arr.item() if arr.size == 1 else _sum(arr, axis=None)
    if not math.isfinite(total) and not np.isfinite(arr).all():
        raise ValueError("non-finite values in tensor data")
    out = Tensor.__new__(Tensor)
    out.data, out.grad, out.requires_grad, out._recorded = arr, None, False, False
    return out


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = _wrap(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        _TAPES[-1].record(out, inputs, backward)
    return out


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape else np.asarray(g.sum())


# ----------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _binary_operands(a, b)
    pick_a = a.data >= b.data
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)),
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _binary_operands(a, b)
    pick_a = a.data <= b.data
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """``a[..., K] @ b[K, N]``; leading axes of ``a`` act as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1]) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, w, bias) -> Tensor:
    """``x @ w + bias`` with the bias broadcast over every leading axis."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise ShapeError(f"linear shapes x{x.shape} w{w.shape} b{bias.shape}")

    # flatten leading axes: one GEMM instead of a stack of small ones
    x2 = x.data.reshape(-1, w.shape[0])
    out_shape = x.shape[:-1] + (w.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        return gx, gw, g2.sum(axis=0) if bias.requires_grad else None

    return _make((x2 @ w.data + bias.data).reshape(out_shape), (x, w, bias), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise ValueError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    if exponent == 2:
        return square(x)
    out = np.power(x.data, exponent)
    return _make(out, (x,), lambda g: (g * exponent * np.power(x.data, exponent - 1),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def total(x) -> Tensor:
    """Sum of all elements, exactly rounded so element order never matters."""
    x = as_tensor(x)
    return _make(np.asarray(math.fsum(x.data.ravel())), (x,), lambda g: (np.full(x.shape, float(g)),))


def sum_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.data.ndim
    return _make(x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _make(np.asarray(math.fsum(x.data.ravel()) / n), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (no affine parameters)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    y = (x.data - mu) / sigma

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) / sigma,)

    return _make(y, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of nothing")
    nd = ts[0].data.ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(t.shape[d] != ts[0].shape[d] for d in range(nd) if d != axis):
            raise ShapeError(f"concat shapes {[t.shape for t in ts]} along axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x, index) -> Tensor:
    """Differentiable indexing (basic or advanced numpy index)."""
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index]), (x,), backward)


def stack_rows(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, (1,) + t.shape) for t in ts], axis=0)


# ----------------------------------------------------------------- resize


@functools.lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in); cached, read-only."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize sizes must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
    elif n_out == 1:
        m[0, 0] = 1.0
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        frac = pos - lo
        m[np.arange(n_out), lo] = 1.0 - frac
        m[np.arange(n_out), lo + 1] += frac
    m.flags.writeable = False
    return m


def bilinear_resize(src, out_h: int, out_w: int, axes: tuple[int, int] = (-2, -1)) -> Tensor:
    """Align-corners bilinear resize over two spatial axes.

    The default layout is ``[..., H, W]`` (e.g. ``[C, H, W]``); channels-last
    callers pass ``axes=(-3, -2)``.  Equal sizes return an exact copy.
    """
    src = as_tensor(src)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be >= 1, got ({out_h}, {out_w})")
    nd = src.data.ndim
    ah, aw = axes[0] % nd, axes[1] % nd
    h, w = src.shape[ah], src.shape[aw]
    if (h, w) == (out_h, out_w):
        return _make(src.data.copy(), (src,), lambda g: (g,))
    ry, rx = interp_matrix(h, out_h), interp_matrix(w, out_w)

    def apply(arr, my, mx):
        arr = np.moveaxis(np.tensordot(my, arr, axes=([1], [ah])), 0, ah)
        return np.moveaxis(np.tensordot(mx, arr, axes=([1], [aw])), 0, aw)

    return _make(apply(src.data, ry, rx), (src,), lambda g: (apply(g, ry.T, rx.T),))


# ----------------------------------------------------------------- parameters


class ParamStore:
    """Ordered named parameters plus the subset excluded from optimization.

    Names listed in ``locked`` are frozen permanently (the foundation
    encoder); trying to unfreeze one raises.
    """

    def __init__(self):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.frozen: set[str] = set()
        self.locked: set[str] = set()

    def add(self, name: str, value, frozen: bool = False, locked: bool = False) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = not (frozen or locked)
        self.entries[name] = t
        if frozen or locked:
            self.frozen.add(name)
        if locked:
            self.locked.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def keys(self):
        return list(self.entries)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.entries.items() if k not in self.frozen]

    def freeze(self, name: str) -> None:
        self.frozen.add(name)
        self.entries[name].requires_grad = False

    def unfreeze(self, name: str) -> None:
        if name in self.locked:
            raise PermissionError(f"parameter {name!r} is permanently frozen")
        self.frozen.discard(name)
        self.entries[name].requires_grad = True

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def copy(self, requires_grad: bool | None = None) -> "ParamStore":
        """Deep copy; ``requires_grad=False`` gives an inference-only store."""
        out = ParamStore()
        for k, t in self.entries.items():
            c = Tensor(t.data.copy(), check=False)
            c.requires_grad = t.requires_grad if requires_grad is None else (requires_grad and k not in self.frozen)
            out.entries[k] = c
        out.frozen = set(self.frozen)
        out.locked = set(self.locked)
        return out

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.entries.items())


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ParamStore, state: OptimizerState) -> ParamStore:
    """One Adam update over the non-frozen parameters, then zero their grads."""
    trainable = params.trainable()
    for name, t in trainable:
        if t.grad is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, t in trainable:
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        t.data = t.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.grad = np.zeros_like(t.data)
    return params


# ----------------------------------------------------------------- verification


def grad_check(loss_fn: Callable[[], Tensor], params: ParamStore, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must build its scalar loss from ``params`` on every call.
    Frozen parameters are skipped; with nothing to check the error is 0.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    first = loss_fn().item()
    if loss_fn().item() != first:
        raise RuntimeError("loss_fn is not deterministic")
    trainable = params.trainable()
    if not trainable:
        return 0.0
    for _, t in trainable:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    worst = 0.0
    for _, t in trainable:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        t.grad = None
    return worst


def cosine_similarity(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).ravel()
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"cosine of lengths {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine between matching rows of two ``[N, D]`` arrays; zero rows give 0."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    den = na * nb
    out = np.zeros(a.shape[0])
    ok = den > 0
    out[ok] = (a[ok] * b[ok]).sum(axis=1) / den[ok]
    return np.clip(out, -1.0, 1.0)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def iter_params(stores: Iterable[ParamStore]) -> Iterator[Tensor]:
    for s in stores:
        yield from s.entries.values()

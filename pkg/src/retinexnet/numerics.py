"""Small reverse-mode differentiation core over NCHW numpy arrays.

Only the operations the two networks and their losses need are provided.
Every op records a node with a closure that maps the output gradient to
parent gradients; :func:`backprop` walks the graph in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the dimension."""


_grad_enabled = True
_kink_margins: list[float] | None = None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording graph nodes (inference, frozen nets)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class KinkMonitor:
    margin: float = float("inf")


@contextlib.contextmanager
def kink_monitor() -> Iterator[KinkMonitor]:
    """Record the smallest nonzero |x| fed to abs/relu during a forward pass.

    Finite-difference checks are only meaningful when every kink is further
    than the step size from its input. Exact zeros are skipped: they come from
    structural positions (the zeroed last row/column of a forward difference)
    that no input perturbation moves, and both sides agree there.
    """
    global _kink_margins
    prev = _kink_margins
    _kink_margins = []
    mon = KinkMonitor()
    try:
        yield mon
    finally:
        if _kink_margins:
            mon.margin = min(_kink_margins)
        _kink_margins = prev


def _note_kink(x: np.ndarray) -> None:
    if _kink_margins is not None and x.size:
        mag = np.abs(x[x != 0])
        if mag.size:
            _kink_margins.append(float(np.min(mag)))


class Tensor:
    """Dense array node in a differentiable computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backprop(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        out.op = op
    else:
        out.op = op
    return out


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backprop(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad ancestor of a scalar loss.

    Leaf gradients accumulate across calls; the caller resets them.
    Intermediate nodes receive the gradient of this pass only.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor,
                               eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (perturbs in place, restores)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(x))
            flat[i] = orig - eps
            fm = _scalar(f(x))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    for dim, (m, n) in enumerate(zip(a.shape, b.shape)):
        if m == n:
            continue
        if dim == 1 and (m == 1 or n == 1):
            continue
        raise ShapeError(f"{op}: dimension {dim} mismatch ({m} vs {n}) in {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (m, n) in enumerate(zip(g.shape, shape)) if n == 1 and m != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = a.data.dtype.type(k)
    return _make(a.data * k, (a,), lambda g: (g * k,), "scale")


def abs(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = as_tensor(a)
    _note_kink(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def relu(a) -> Tensor:
    a = as_tensor(a)
    _note_kink(a.data)
    mask = a.data > 0
    # np.maximum propagates NaN so a diverged network is not silently zeroed
    return _make(np.maximum(a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def stop_gradient(a) -> Tensor:
    """Same values, no gradient path back to ``a``."""
    a = as_tensor(a)
    return Tensor(a.data)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "abs": abs, "exp": exp,
    "relu": relu, "sigmoid": sigmoid, "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, abs, exp, relu, sigmoid, scale."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref):
            raise ShapeError(f"concat: rank mismatch {ref} vs {t.shape}")
        for dim, (m, n) in enumerate(zip(ref, t.shape)):
            if dim != axis and m != n:
                raise ShapeError(f"concat: dimension {dim} mismatch ({m} vs {n})")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), grad_fn, "channel_slice")


def channel_mean(a: Tensor) -> Tensor:
    """Mean over axis 1, keeping it as a singleton."""
    a = as_tensor(a)
    c = a.shape[1]
    return _make(a.data.mean(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / a.dtype.type(c), a.shape).copy(),), "channel_mean")


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.data.size
    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                 lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def reduce_mean_abs(a: Tensor) -> Tensor:
    """mean(|a|) as a scalar node."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("reduce_mean_abs of an empty tensor")
    _note_kink(a.data)
    n = a.data.size
    return _make(np.asarray(np.abs(a.data).mean(), dtype=a.dtype), (a,),
                 lambda g: (np.sign(a.data) * (g / n),), "reduce_mean_abs")


# ---------------------------------------------------------------------------
# spatial


def spatial_gradient(a: Tensor, axis: str) -> Tensor:
    """Forward difference along width ("horizontal") or height ("vertical").

    The last column/row is zero.
    """
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"spatial_gradient expects NCHW, got {a.shape}")
    if a.shape[2] < 2 or a.shape[3] < 2:
        raise ShapeError(f"spatial_gradient needs H, W >= 2, got {a.shape[2:]}")
    if axis == "horizontal":
        ax = 3
    elif axis == "vertical":
        ax = 2
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    out = np.zeros_like(a.data)
    head = [slice(None)] * 4
    tail = [slice(None)] * 4
    head[ax] = slice(0, -1)
    tail[ax] = slice(1, None)
    head, tail = tuple(head), tuple(tail)
    out[head] = a.data[tail] - a.data[head]

    def grad_fn(g):
        gi = np.zeros_like(g)
        gi[tail] += g[head]
        gi[head] -= g[head]
        return (gi,)

    return _make(out, (a,), grad_fn, "spatial_gradient")


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def resize_nearest(a: Tensor, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbour resize with source index floor(out * in / target)."""
    a = as_tensor(a)
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"resize_nearest target must be >= 1, got {(target_h, target_w)}")
    _, _, h, w = a.shape
    ih = _nearest_index(h, target_h)
    iw = _nearest_index(w, target_w)
    if target_h == h and target_w == w:
        return _make(a.data.copy(), (a,), lambda g: (g,), "resize_nearest")
    out = a.data[:, :, ih][:, :, :, iw]

    def grad_fn(g):
        # one-hot selection matrices: exact gradient accumulation per source cell
        sh = np.zeros((target_h, h), dtype=g.dtype)
        sh[np.arange(target_h), ih] = 1
        sw = np.zeros((target_w, w), dtype=g.dtype)
        sw[np.arange(target_w), iw] = 1
        return (sh.T @ g @ sw,)

    return _make(out, (a,), grad_fn, "resize_nearest")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def output_extent(self, n: int) -> int:
        return -(-n // self.stride)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-padded cross-correlation, output extent ceil(n / stride)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.shape}")
    b, cin, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    if cin != spec.in_channels:
        raise ShapeError(f"conv2d: input channels {cin} != spec.in_channels {spec.in_channels}")
    if weight.shape != (spec.out_channels, spec.in_channels, k, k):
        raise ShapeError(f"conv2d: weight shape {weight.shape} != "
                         f"{(spec.out_channels, spec.in_channels, k, k)}")
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != {(spec.out_channels,)}")
    ho, wo = spec.output_extent(h), spec.output_extent(w)
    cout = spec.out_channels
    # work in (channel, batch, y, x) order so each layer is a single
    # (cout x taps) @ (taps x pixels) product
    xt = x.data.transpose(1, 0, 2, 3)
    if p:
        xp = np.zeros((cin, b, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p:p + h, p:p + w] = xt
    else:
        xp = xt
    if k == 1:
        cols = np.ascontiguousarray(xp[:, :, ::s, ::s]).reshape(cin, b * ho * wo)
    else:
        cols6 = np.empty((cin, k, k, b, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols6[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
        cols = cols6.reshape(cin * k * k, b * ho * wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = w2 @ cols
    out += bias.data[:, None]
    out = out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)

    def grad_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = w2.T @ g2
            if k == 1:
                gxt = np.zeros((cin, b, h, w), dtype=x.dtype)
                gxt[:, :, ::s, ::s] = gcols.reshape(cin, b, ho, wo)
            else:
                gcols = gcols.reshape(cin, k, k, b, ho, wo)
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j]
                gxt = gxp[:, :, p:p + h, p:p + w]
            gx = gxt.transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _make(out, (x, weight, bias), grad_fn, "conv2d")

"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Every differentiable primitive computes its forward value with numpy and, when
any input requires a gradient, appends a :class:`Node` to the active
:class:`Tape`. Because nodes are appended as they are created, the tape is
already in topological order; :func:`backward` walks it once in reverse.

Storage defaults to float32. Pass ``dtype=np.float64`` when building leaves to
run the whole graph in double precision (the gradient checker does this).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "GradCheckReport",
    "backward",
    "grad_check",
    "no_grad",
    "strict_mode",
    "is_strict",
    "primitive_forward",
    "matmul",
    "conv2d",
    "relu",
    "maxpool2d",
    "global_avgpool",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "sum",
    "mean",
    "l2_normalize_rows",
    "concat_rows",
    "transpose",
    "reshape",
    "take_rows",
    "diagonal",
    "logsumexp",
    "clamp",
    "NORM_EPS",
]

NORM_EPS = 1e-12


class Tensor:
    """Dense n-dimensional array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass(eq=False)
class Node:
    """One recorded primitive: its inputs, output and vector-Jacobian product."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of the primitives evaluated while it is active.

    Use as a context manager to scope a computation; otherwise operations land
    on a module-level default tape. The tape is emptied after each
    :func:`backward` unless ``retain`` is requested.
    """

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self
        self.clear()


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]
_STRICT = [False]


def active_tape() -> Tape:
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Reject non-finite operands (and non-unit features in the losses)."""
    _STRICT.append(enabled)
    try:
        yield
    finally:
        _STRICT.pop()


def is_strict() -> bool:
    return _STRICT[-1]


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and isinstance(x, (int, float)):
        return Tensor._wrap(np.asarray(x, dtype=like.dtype))
    return Tensor._wrap(np.asarray(x))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if is_strict() and not np.all(np.isfinite(out)):
        raise NumericDomainError(f"{op} produced non-finite values")
    needs = _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        node = Node(op, inputs, result, vjp)
        result._node = node
        active_tape().record(node)
    return result


def _check_finite(op: str, *tensors: Tensor) -> None:
    if not is_strict():
        return
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericDomainError(f"{op}: non-finite input of shape {t.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_finite("matmul", a, b)
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _make("matmul", A @ B, (a, b), vjp)


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation. ``x`` is B×C×H×W, ``w`` is O×C×kh×kw."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} or padding={padding}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    inputs = (x, w) if bias is None else (x, w, _as_tensor(bias))
    if bias is not None and inputs[2].shape != (O,):
        raise ShapeError(f"conv2d: bias shape {inputs[2].shape} != ({O},)")
    _check_finite("conv2d", *inputs)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    acc = np.zeros((B, Ho, Wo, O), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + hs : stride, j : j + ws : stride]
            acc += np.tensordot(patch, w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        out += inputs[2].data[None, :, None, None]
    wdata = w.data

    def vjp(g):
        gT = g.transpose(0, 2, 3, 1)
        gxp = np.zeros_like(xp, dtype=g.dtype)
        gw = np.zeros_like(wdata, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride))
                gw[:, :, i, j] = np.tensordot(gT, xp[sl], axes=([0, 1, 2], [0, 2, 3]))
                gxp[sl] += np.tensordot(gT, wdata[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make("conv2d", out, inputs, vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("relu", x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"maxpool2d: spatial size {H}x{W} not divisible by {size}")
    _check_finite("maxpool2d", x)
    Ho, Wo = H // size, W // size
    win = x.data.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _make("maxpool2d", out, (x,), vjp)


def global_avgpool(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool: expected 4-D input, got {x.shape}")
    _check_finite("global_avgpool", x)
    B, C, H, W = x.shape
    inv = 1.0 / (H * W)

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, (B, C, H, W)).copy(),)

    return _make("global_avgpool", x.data.mean(axis=(2, 3)), (x,), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (gradients are un-broadcast)."""
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    _check_finite("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    _check_finite("mul", a, b)
    A, B = a.data, b.data
    return _make("mul", out, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    _check_finite("scale", x)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("exp", x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("log", x)
    if np.any(x.data <= 0):
        raise NumericDomainError("log: non-positive input")
    X = x.data
    return _make("log", np.log(X), (x,), lambda g: (g / X,))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    _check_finite("sum", x)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis), 1.0 / n)


def l2_normalize_rows(x, eps: float = NORM_EPS) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm.

    Rows whose norm is below ``eps`` get ``eps`` added to the norm, so an all-zero
    row maps to zeros instead of NaN.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected 2-D input, got {x.shape}")
    _check_finite("l2_normalize_rows", x)
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norm = np.where(norm < eps, norm + eps, norm)
    y = x.data / norm

    def vjp(g):
        return ((g - y * (y * g).sum(axis=1, keepdims=True)) / norm,)

    return _make("l2_normalize_rows", y, (x,), vjp)


def concat_rows(tensors: Iterable) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat_rows: nothing to concatenate")
    tail = ts[0].shape[1:]
    for t in ts:
        if t.ndim < 1 or t.shape[1:] != tail:
            raise ShapeError(f"concat_rows: trailing shapes differ: {[t.shape for t in ts]}")
    _check_finite("concat_rows", *ts)
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])

    def vjp(g):
        return [g[bounds[k] : bounds[k + 1]] for k in range(len(ts))]

    return _make("concat_rows", np.concatenate([t.data for t in ts], axis=0), ts, vjp)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got {x.shape}")
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def take_rows(x, index) -> Tensor:
    """Gather rows by integer index; repeated indices accumulate gradient."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")
    src = x.shape

    def vjp(g):
        gx = np.zeros(src, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("take_rows", x.data[idx], (x,), vjp)


def diagonal(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diagonal: expected a square matrix, got {x.shape}")
    n = x.shape[0]

    def vjp(g):
        gx = np.zeros((n, n), dtype=g.dtype)
        gx[np.arange(n), np.arange(n)] = g
        return (gx,)

    return _make("diagonal", np.diagonal(x.data).copy(), (x,), vjp)


def logsumexp(x, axis: int, keepdims: bool = False) -> Tensor:
    """log Σ exp along ``axis`` with the running maximum subtracted first."""
    x = _as_tensor(x)
    _check_finite("logsumexp", x)
    X = x.data
    top = X.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0)
    shifted = np.exp(X - top)
    lse_k = np.log(shifted.sum(axis=axis, keepdims=True)) + top

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(X - lse_k),)

    out = lse_k if keepdims else np.squeeze(lse_k, axis=axis)
    return _make("logsumexp", out, (x,), vjp)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input was inside."""
    x = _as_tensor(x)
    _check_finite("clamp", x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "global_avgpool": global_avgpool,
    "add": add,
    "scale": scale,
    "mul": mul,
    "exp": exp,
    "log": log,
    "sum": sum,
    "l2_normalize_rows": l2_normalize_rows,
    "concat_rows": lambda *ts, **kw: concat_rows(ts),
    "transpose": transpose,
    "reshape": reshape,
    "take_rows": take_rows,
    "diagonal": diagonal,
    "logsumexp": logsumexp,
    "clamp": clamp,
}


def primitive_forward(op_kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("conv2d", [x, w], {"padding": 1})``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, retain: bool = False) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays, so call
    :meth:`Tensor.zero_grad` between independent steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward(): loss does not depend on any tensor that requires grad")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return

    tape = next((t for t in reversed(_TAPES) if loss._node in t.nodes), None)
    if tape is None:
        raise ContractError("backward(): loss was not recorded on any active tape")
    start = len(tape.nodes) - 1 - tape.nodes[::-1].index(loss._node)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: start + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    if not retain:
        tape.clear()


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    failures: list[tuple[int, ...]]

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-3,
    tol: float = 1e-4,
    floor: float = 1.0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` to central differences.

    Both paths run in float64. The per-element error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``, i.e. relative
    for gradients larger than ``floor`` and absolute below it.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    with Tape():
        xt = Tensor(x0, requires_grad=True, dtype=np.float64)
        out = f(xt)
        if out.size != 1:
            raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
        backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.astype(np.float64)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for k in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[k] += step
            xm[k] -= step
            fp = f(Tensor(xp.reshape(x0.shape), dtype=np.float64)).item()
            fm = f(Tensor(xm.reshape(x0.shape), dtype=np.float64)).item()
            flat[k] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    failures = [tuple(int(i) for i in idx) for idx in np.argwhere(rel > tol)]
    return GradCheckReport(analytic, numeric, rel, tol, failures)

"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation is a registered primitive with a numpy forward
rule and a backward rule written in terms of other primitives. Gradients
taken with ``create_graph=True`` are recorded on the same tape as ordinary
operations, so they can be differentiated a second time.

    >>> with Tape():
    ...     x = Tensor(np.array(2.0), requires_grad=True)
    ...     (g,) = grad(x * x * x, [x], create_graph=True)
    ...     (h,) = grad(g, [x])
    >>> float(h.data)
    12.0
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "grad", "apply", "no_grad", "current_tape",
    "finite_difference_check", "ShapeError", "NonFiniteError", "TapeError",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy a primitive's shape rule."""


class NonFiniteError(FloatingPointError):
    """A primitive was asked to produce a non-finite value (log of <= 0, x / 0)."""


class TapeError(RuntimeError):
    """Differentiation request that the tape cannot satisfy."""


_local = threading.local()


def current_tape() -> "Tape | None":
    if not getattr(_local, "recording", True):
        return None
    return getattr(_local, "tape", None)


@contextlib.contextmanager
def _recording(tape: "Tape | None"):
    prev = (getattr(_local, "tape", None), getattr(_local, "recording", True))
    _local.tape = tape
    _local.recording = tape is not None
    try:
        yield
    finally:
        _local.tape, _local.recording = prev


@contextlib.contextmanager
def no_grad():
    """Suspend recording on the active tape."""
    prev = getattr(_local, "recording", True)
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self._node}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, o):
        return apply("add", self, _lift(o, self))

    def __radd__(self, o):
        return apply("add", _lift(o, self), self)

    def __sub__(self, o):
        return apply("sub", self, _lift(o, self))

    def __rsub__(self, o):
        return apply("sub", _lift(o, self), self)

    def __mul__(self, o):
        return apply("mul", self, _lift(o, self))

    def __rmul__(self, o):
        return apply("mul", _lift(o, self), self)

    def __truediv__(self, o):
        return apply("div", self, _lift(o, self))

    def __rtruediv__(self, o):
        return apply("div", _lift(o, self), self)

    def __neg__(self):
        return apply("neg", self)

    def __pow__(self, p: float):
        return apply("power", self, p=float(p))

    def __matmul__(self, o):
        return apply("matmul", self, o)

    def __getitem__(self, key):
        return apply("slice", self, key=_normalize_key(key))

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=_axis(axis), keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", self, axes=tuple(axes))


def _raise_not_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _axis(axis):
    if axis is None or isinstance(axis, int):
        return axis
    return tuple(axis)


def _normalize_key(key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (isinstance(k, (int, slice, np.integer)) or k is Ellipsis):
            raise ShapeError(f"only basic slicing is supported, got {type(k).__name__}")
    return key


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Entry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict


class Tape:
    """Ordered record of primitive applications.

    Entries are appended as operations run, so the list is always in
    topological order. Use as a context manager to make it the active tape
    for the current thread.
    """

    def __init__(self):
        self.entries: list[Entry] = []
        self._producer: dict[int, int] = {}
        self._next_id = 0
        self._saved: list = []

    def __enter__(self) -> "Tape":
        self._saved.append((getattr(_local, "tape", None), getattr(_local, "recording", True)))
        _local.tape = self
        _local.recording = True
        return self

    def __exit__(self, *exc):
        _local.tape, _local.recording = self._saved.pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf of this tape (no-op if already on it)."""
        if t._tape is not self:
            t._tape = self
            t._node = self._new_id()
        return t

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def _record(self, kind, inputs, out, attrs):
        out._tape = self
        out._node = self._new_id()
        self._producer[out._node] = len(self.entries)
        self.entries.append(Entry(kind, inputs, out, attrs))

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward rule from the leaf values.

        Returns the recomputed output of each entry, in tape order.
        """
        values: dict[int, np.ndarray] = {}
        outs = []
        for e in self.entries:
            xs = [values.get(t._node, t.data) if t._tape is self else t.data for t in e.inputs]
            y = _PRIMS[e.kind].forward(*xs, **e.attrs)
            values[e.output._node] = y
            outs.append(y)
        return outs


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------


@dataclass
class Primitive:
    forward: Callable
    backward: Callable  # (g, entry, needs) -> sequence of Tensor | None


_PRIMS: dict[str, Primitive] = {}


def _register(kind: str, forward: Callable, backward: Callable):
    _PRIMS[kind] = Primitive(forward, backward)


def apply(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run primitive ``kind`` and record it on the active tape if any input is tracked."""
    prim = _PRIMS[kind]
    out = Tensor(prim.forward(*(t.data for t in inputs), **attrs))
    tape = current_tape()
    if tape is not None:
        tracked = False
        for t in inputs:
            if t._tape is tape:
                tracked = True
            elif t.requires_grad:
                tape.watch(t)
                tracked = True
        if tracked:
            tape._record(kind, inputs, out, attrs)
    return out


# -- shape helpers ----------------------------------------------------------


def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return apply("sum_to", g, shape=tuple(shape))


def _sum_to_fwd(x, shape):
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return x.sum(axis=axes, keepdims=True).reshape(shape) if axes else x.reshape(shape)


_register(
    "sum_to",
    _sum_to_fwd,
    lambda g, e, n: (apply("broadcast_to", g, shape=e.inputs[0].shape),),
)
_register(
    "broadcast_to",
    lambda x, shape: np.broadcast_to(x, shape),
    lambda g, e, n: (_unbroadcast(g, e.inputs[0].shape),),
)


# -- elementwise arithmetic -------------------------------------------------


def _binary(kind, fn):
    def fwd(a, b):
        try:
            return fn(a, b)
        except ValueError:
            raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None

    return fwd


def _div_fwd(a, b):
    if np.any(b == 0):
        raise NonFiniteError("div: division by zero")
    try:
        return a / b
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from None


_register(
    "add",
    _binary("add", np.add),
    lambda g, e, n: (
        _unbroadcast(g, e.inputs[0].shape) if n[0] else None,
        _unbroadcast(g, e.inputs[1].shape) if n[1] else None,
    ),
)
_register(
    "sub",
    _binary("sub", np.subtract),
    lambda g, e, n: (
        _unbroadcast(g, e.inputs[0].shape) if n[0] else None,
        _unbroadcast(-g, e.inputs[1].shape) if n[1] else None,
    ),
)
_register(
    "mul",
    _binary("mul", np.multiply),
    lambda g, e, n: (
        _unbroadcast(g * e.inputs[1], e.inputs[0].shape) if n[0] else None,
        _unbroadcast(g * e.inputs[0], e.inputs[1].shape) if n[1] else None,
    ),
)


def _div_bwd(g, e, n):
    a, b = e.inputs
    ga = _unbroadcast(g / b, a.shape) if n[0] else None
    gb = _unbroadcast(-(g * e.output) / b, b.shape) if n[1] else None
    return ga, gb


_register("div", _div_fwd, _div_bwd)
_register("neg", np.negative, lambda g, e, n: (-g,))


def _exp_fwd(x):
    with np.errstate(over="ignore"):
        return np.exp(x)


def _log_fwd(x):
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return np.log(x)


def _power_fwd(x, p):
    if not float(p).is_integer() and np.any(x < 0):
        raise NonFiniteError("power: negative base with fractional exponent")
    if p < 0 and np.any(x == 0):
        raise NonFiniteError("power: zero base with negative exponent")
    return np.power(x, p)


_register("exp", _exp_fwd, lambda g, e, n: (g * e.output,))
_register("log", _log_fwd, lambda g, e, n: (g / e.inputs[0],))
_register(
    "power",
    _power_fwd,
    lambda g, e, n: (
        g * (e.attrs["p"] * (e.inputs[0] ** (e.attrs["p"] - 1.0)))
        if e.attrs["p"] != 1.0
        else g,
    ),
)
_register("abs", np.abs, lambda g, e, n: (g * Tensor(np.sign(e.inputs[0].data)),))


def _sigmoid_fwd(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_register("sigmoid", _sigmoid_fwd, lambda g, e, n: (g * (e.output * (1.0 - e.output)),))
_register(
    "softplus",
    lambda x: np.logaddexp(np.zeros_like(x), x),
    lambda g, e, n: (g * apply("sigmoid", e.inputs[0]),),
)


def _silu_bwd(g, e, n):
    x = e.inputs[0]
    s = apply("sigmoid", x)
    return (g * (s * (1.0 + x * (1.0 - s))),)


_register("silu", lambda x: x * _sigmoid_fwd(x), _silu_bwd)


def _clamp_fwd(x, lo, hi):
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    return np.clip(x, lo, hi)


def _clamp_bwd(g, e, n):
    x = e.inputs[0].data
    # boundary points count as inside
    mask = ((x >= e.attrs["lo"]) & (x <= e.attrs["hi"])).astype(x.dtype)
    return (g * Tensor(mask),)


_register("clamp", _clamp_fwd, _clamp_bwd)


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g: Tensor, in_shape, axis, keepdims) -> Tensor:
    if axis is None:
        g = apply("reshape", g, shape=(1,) * len(in_shape))
    elif not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(a % len(in_shape) for a in axes)
        shape = list(g.shape)
        for a in axes:
            shape.insert(a, 1)
        g = apply("reshape", g, shape=tuple(shape))
    return apply("broadcast_to", g, shape=tuple(in_shape))


_register(
    "sum",
    lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
    lambda g, e, n: (_expand_reduced(g, e.inputs[0].shape, e.attrs["axis"], e.attrs["keepdims"]),),
)


def _max_bwd(g, e, n):
    x = e.inputs[0].data
    axis = e.attrs["axis"]
    m = np.max(x, axis=axis, keepdims=True)
    mask = (x == m).astype(x.dtype)
    mask /= mask.sum(axis=axis, keepdims=True)
    gx = _expand_reduced(g, x.shape, axis, e.attrs["keepdims"])
    return (gx * Tensor(mask),)


_register(
    "max",
    lambda x, axis, keepdims: np.max(x, axis=axis, keepdims=keepdims),
    _max_bwd,
)


def _softmax_fwd(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    ex = np.exp(x - m)
    return ex / ex.sum(axis=axis, keepdims=True)


def _softmax_bwd(g, e, n):
    s = e.output
    axis = e.attrs["axis"]
    dot = apply("sum", g * s, axis=axis, keepdims=True)
    return (s * (g - dot),)


_register("softmax", _softmax_fwd, _softmax_bwd)


def _lse_fwd(x, axis, keepdims):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _lse_bwd(g, e, n):
    x = e.inputs[0]
    axis = e.attrs["axis"]
    gx = _expand_reduced(g, x.shape, axis, e.attrs["keepdims"])
    return (gx * apply("softmax", x, axis=axis),)


_register("logsumexp", _lse_fwd, _lse_bwd)


# -- linear algebra and layout ------------------------------------------------


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape} vs {b.shape}") from None
    return np.matmul(a, b)


def _mT(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return apply("transpose", t, axes=axes)


def _matmul_bwd(g, e, n):
    a, b = e.inputs
    ga = gb = None
    if n[0]:
        ga = _unbroadcast(apply("matmul", g, _mT(b)), a.shape)
    if n[1]:
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold batch dims into rows instead of reducing a batched product
            a2 = apply("reshape", a, shape=(-1, a.shape[-1]))
            g2 = apply("reshape", g, shape=(-1, g.shape[-1]))
            gb = apply("matmul", _mT(a2), g2)
        else:
            gb = _unbroadcast(apply("matmul", _mT(a), g), b.shape)
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_bwd)


def _reshape_fwd(x, shape):
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None


_register(
    "reshape",
    _reshape_fwd,
    lambda g, e, n: (apply("reshape", g, shape=e.inputs[0].shape),),
)
_register(
    "transpose",
    lambda x, axes: np.transpose(x, axes),
    lambda g, e, n: (apply("transpose", g, axes=tuple(np.argsort(e.attrs["axes"]).tolist())),),
)


def _concat_fwd(*xs, axis):
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} on axis {axis}") from None


def _concat_bwd(g, e, n):
    axis = e.attrs["axis"] % g.ndim
    out, start = [], 0
    for t, need in zip(e.inputs, n):
        stop = start + t.shape[axis]
        if need:
            key = (slice(None),) * axis + (slice(start, stop),)
            out.append(apply("slice", g, key=key))
        else:
            out.append(None)
        start = stop
    return out


_register("concat", _concat_fwd, _concat_bwd)


def _slice_fwd(x, key):
    try:
        return x[key]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {x.shape}") from None


def _index_put_fwd(g, key, shape):
    out = np.zeros(shape, dtype=g.dtype)
    out[key] = g
    return out


_register(
    "slice",
    _slice_fwd,
    lambda g, e, n: (apply("index_put", g, key=e.attrs["key"], shape=e.inputs[0].shape),),
)
_register(
    "index_put",
    _index_put_fwd,
    lambda g, e, n: (apply("slice", g, key=e.attrs["key"]),),
)


def _gather_fwd(table, idx):
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {table.shape[0]} rows")
    return table[idx]


def _scatter_fwd(g, idx, n_rows):
    out = np.zeros((n_rows, g.shape[-1]), dtype=g.dtype)
    np.add.at(out, idx.reshape(-1), g.reshape(-1, g.shape[-1]))
    return out


_register(
    "gather_rows",
    _gather_fwd,
    lambda g, e, n: (apply("scatter_rows", g, idx=e.attrs["idx"], n_rows=e.inputs[0].shape[0]),),
)
_register(
    "scatter_rows",
    _scatter_fwd,
    lambda g, e, n: (apply("gather_rows", g, idx=e.attrs["idx"]),),
)


# -- fused model primitives -------------------------------------------------


def _rms_fwd(x, eps):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def _rms_bwd(g, e, n):
    x, y = e.inputs[0], e.output
    r = (apply("sum", x * x, axis=-1, keepdims=True) * (1.0 / x.shape[-1]) + e.attrs["eps"]) ** -0.5
    proj = apply("sum", g * y, axis=-1, keepdims=True) * (1.0 / x.shape[-1])
    return (r * (g - y * proj),)


_register("rms_normalize", _rms_fwd, _rms_bwd)


def _cos_fwd(a, b, axis):
    na = np.sqrt(np.sum(a * a, axis=axis))
    nb = np.sqrt(np.sum(b * b, axis=axis))
    if np.any(na == 0) or np.any(nb == 0):
        raise NonFiniteError("cosine_similarity: zero-norm input")
    return np.sum(a * b, axis=axis) / (na * nb)


def _cos_bwd(g, e, n):
    a, b = e.inputs
    axis = e.attrs["axis"]
    c = apply("reshape", e.output, shape=_keepdims_shape(a.shape, axis, e.output.shape))
    gk = apply("reshape", g, shape=c.shape)
    sa = apply("sum", a * a, axis=axis, keepdims=True)
    sb = apply("sum", b * b, axis=axis, keepdims=True)
    inv = (sa * sb) ** -0.5
    ga = gk * (b * inv - c * a / sa) if n[0] else None
    gb = gk * (a * inv - c * b / sb) if n[1] else None
    return (
        _unbroadcast(ga, a.shape) if ga is not None else None,
        _unbroadcast(gb, b.shape) if gb is not None else None,
    )


def _keepdims_shape(in_shape, axis, out_shape):
    shape = list(out_shape)
    shape.insert(axis % len(in_shape), 1)
    return tuple(shape)


_register("cosine_similarity", _cos_fwd, _cos_bwd)


def _rope_fwd(x, cos, sin):
    if x.shape[-1] % 2:
        raise ShapeError(f"rope: last axis must be even, got {x.shape[-1]}")
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (2 * h,)), dtype=np.result_type(x, cos))
    np.subtract(x1 * cos, x2 * sin, out=out[..., :h])
    np.add(x1 * sin, x2 * cos, out=out[..., h:])
    return out


_register(
    "rope",
    _rope_fwd,
    lambda g, e, n: (apply("rope", g, cos=e.attrs["cos"], sin=-e.attrs["sin"]),),
)


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------


def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def abs_(x):
    return apply("abs", x)


def sigmoid(x):
    return apply("sigmoid", x)


def softplus(x):
    return apply("softplus", x)


def silu(x):
    return apply("silu", x)


def clamp(x, lo: float, hi: float):
    return apply("clamp", x, lo=float(lo), hi=float(hi))


def sum_(x, axis=None, keepdims=False):
    return apply("sum", x, axis=_axis(axis), keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return apply("sum", x, axis=_axis(axis), keepdims=keepdims) * (1.0 / count)


def max_(x, axis=None, keepdims=False):
    return apply("max", x, axis=_axis(axis), keepdims=keepdims)


def softmax(x, axis=-1):
    return apply("softmax", x, axis=axis)


def logsumexp(x, axis=-1, keepdims=False):
    return apply("logsumexp", x, axis=axis, keepdims=keepdims)


def concat(xs: Sequence[Tensor], axis=0):
    return apply("concat", *xs, axis=axis)


def transpose(x, axes):
    return apply("transpose", x, axes=tuple(axes))


def matmul(a, b):
    return apply("matmul", a, b)


def gather_rows(table, idx):
    return apply("gather_rows", table, idx=np.asarray(idx))


def rms_normalize(x, eps: float = 1e-6):
    return apply("rms_normalize", x, eps=float(eps))


def cosine_similarity(a, b, axis=-1):
    return apply("cosine_similarity", a, b, axis=axis)


def rope(x, cos, sin):
    return apply("rope", x, cos=cos, sin=sin)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the backward computation is itself recorded on the
    tape, so the returned gradients can be differentiated again.
    """
    if output.data.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    tape = output._tape
    if tape is None:
        raise TapeError("grad: output is not on a tape")
    for w in wrt:
        if w._tape is not tape:
            raise TapeError(f"grad: {w!r} is not on the output's tape")

    end = tape._producer.get(output._node)
    entries = tape.entries[: end + 1] if end is not None else []
    dep = {w._node for w in wrt}
    for e in entries:
        for t in e.inputs:
            if t._tape is tape and t._node in dep:
                dep.add(e.output._node)
                break

    grads: dict[int, Tensor] = {output._node: Tensor(np.ones_like(output.data))}
    with _recording(tape if create_graph else None):
        for e in reversed(entries):
            g = grads.get(e.output._node)
            if g is None or e.output._node not in dep:
                continue
            needs = tuple(t._tape is tape and t._node in dep for t in e.inputs)
            if not any(needs):
                continue
            gs = _PRIMS[e.kind].backward(g, e, needs)
            for t, gi, need in zip(e.inputs, gs, needs):
                if not need or gi is None:
                    continue
                prev = grads.get(t._node)
                grads[t._node] = gi if prev is None else prev + gi

    out = []
    for w in wrt:
        g = grads.get(w._node)
        if g is None:
            g = Tensor(np.zeros_like(w.data))
        elif not create_graph:
            g = Tensor(g.data)
        out.append(g)
    return out


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5, floor: float = 1e-6
) -> float:
    """Max per-coordinate relative error between the tape gradient and central differences.

    Each coordinate's error is ``|g - fd| / max(|g|, |fd|, floor)``; pass a large
    ``floor`` to measure on an absolute scale near zero gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    with Tape():
        xt = Tensor(x.copy(), requires_grad=True)
        (g,) = grad(f(xt), [xt])
    analytic = g.data.reshape(-1)
    numeric = np.empty_like(analytic)
    flat = x.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += eps
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(x.shape))).item()
            fm = f(Tensor(xm.reshape(x.shape))).item()
            numeric[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0

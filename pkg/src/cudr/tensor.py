"""Minimal reverse-mode autodiff over numpy buffers.

Tensors hold a numpy array (float32 by default) and, optionally, a gradient.
Operations executed while a :class:`Tape` is active and any input requires
grad are recorded on that tape; :meth:`Tape.backward` replays them in reverse.
Reductions (matmul, sums) accumulate in float64 and cast back to the storage
dtype; the backward pass runs entirely in float64.

Broadcasting in binary elementwise ops is limited to prepending leading
dimensions (e.g. a bias of shape ``[d]`` against ``[b, s, d]``).  Anything
else needs an explicit :func:`broadcast_to` or :func:`reshape`.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPES: list["Tape"] = []

GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "retains_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.retains_grad = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside are recorded when at
    least one input requires grad.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple, Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self.entries.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def is_leaf(self, t: Tensor) -> bool:
        return id(t) not in self._produced

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] = (), seed: float = 1.0) -> None:
        backward(loss, self, leaves=leaves, seed=seed)


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def no_tape_active() -> bool:
    return not _ACTIVE_TAPES


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.data.dtype for t in ts])


def _emit(data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    stripped = small
    while stripped and stripped[0] == 1:
        stripped = stripped[1:]
    if stripped == big[len(big) - len(stripped):]:
        return big
    raise ShapeError(f"{op}: shapes {a} and {b} only broadcast over leading dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "add")
    out = (a.data + b.data).astype(_result_dtype(a, b), copy=False)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "sub")
    out = (a.data - b.data).astype(_result_dtype(a, b), copy=False)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "mul")
    out = (a.data * b.data).astype(_result_dtype(a, b), copy=False)

    def bw(g):
        return (
            _unbroadcast(g * b.data.astype(np.float64), a.shape),
            _unbroadcast(g * a.data.astype(np.float64), b.shape),
        )

    return _emit(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "div")
    out = (a.data / b.data).astype(_result_dtype(a, b), copy=False)

    def bw(g):
        bd = b.data.astype(np.float64)
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * a.data.astype(np.float64) / (bd * bd), b.shape),
        )

    return _emit(out, (a, b), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out.astype(np.float64),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out.astype(np.float64) ** 2),))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU (the GPT-2 variant)."""
    xd = x.data.astype(np.float64)
    inner = GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = (0.5 * xd * (1.0 + t)).astype(x.dtype)

    def bw(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit(out, (x,), bw)


# --- reductions and linear algebra ----------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    out = np.asarray(out)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dimensions broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = np.matmul(a64, b64).astype(_result_dtype(a, b))

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b64, -1, -2))
        gb = np.matmul(np.swapaxes(a64, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data.astype(np.float64)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    out = p.astype(x.dtype)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data.astype(np.float64)
    m = xd.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=axis, keepdims=True))
    out64 = xd - lse
    p = np.exp(out64)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit(out64.astype(x.dtype), (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    g64 = gamma.data.astype(np.float64)
    out = (xhat * g64 + beta.data).astype(_result_dtype(x, gamma))

    def bw(g):
        gx = g * g64
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gamma, beta), bw)


# --- shape manipulation ----------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit(out, (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    out = np.swapaxes(x.data, a1, a2)
    return _emit(out, (x,), lambda g: (np.swapaxes(g, a1, a2),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)
    return _emit(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    out = np.asarray(x.data[idx])

    def bw(g):
        full = np.zeros(x.shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(out, (x,), bw)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of ids."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bw(g):
        full = np.zeros(table.shape, dtype=np.float64)
        np.add.at(full, ids, g)
        return (full,)

    return _emit(out, (table,), bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([x.data for x in xs], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _emit(out, tuple(xs), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(xs), bw)


# --- backward --------------------------------------------------------------


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] = (), seed: float = 1.0) -> None:
    """Populate ``.grad`` on every grad-requiring leaf reached from ``loss``.

    Intermediate tensors receive ``.grad`` only if ``retain_grad()`` was
    called.  Leaves listed in ``leaves`` that the loss does not depend on get
    an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, seed, dtype=np.float64)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, fn in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if out.retains_grad:
            out.grad = g.astype(out.dtype)
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
                owners[key] = t
    for key, g in grads.items():
        t = owners[key]
        if t.requires_grad and (tape.is_leaf(t) or t.retains_grad):
            t.grad = np.asarray(g, dtype=np.float64).astype(t.dtype).reshape(t.shape)
    for t in leaves:
        if t.grad is None:
            t.grad = np.zeros(t.shape, dtype=t.dtype)


def check_gradients(
    fn: Callable[..., Tensor],
    point: np.ndarray | dict[str, np.ndarray],
    h: float = 1e-3,
    coords: dict[str, np.ndarray] | np.ndarray | None = None,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``fn`` takes a Tensor (or a dict of Tensors, mirroring ``point``) and
    returns a scalar Tensor.  The error per coordinate is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-8)``.  ``coords``
    optionally restricts the finite-difference sweep to flat indices.
    """
    single = not isinstance(point, dict)
    pts = {"x": point} if single else point
    pts = {k: np.array(v, dtype=np.float64) for k, v in pts.items()}

    def call(arrs, requires_grad=False):
        ts = {k: Tensor(v, requires_grad=requires_grad, dtype=np.float64) for k, v in arrs.items()}
        return ts, fn(ts["x"] if single else ts)

    with Tape() as tape:
        leaves, loss = call(pts, requires_grad=True)
    backward(loss, tape, leaves=leaves.values())
    worst = 0.0
    for name, base in pts.items():
        analytic = leaves[name].grad.reshape(-1)
        if coords is None:
            idxs = range(base.size)
        elif single:
            idxs = np.asarray(coords).reshape(-1)
        else:
            idxs = np.asarray(coords.get(name, np.arange(base.size))).reshape(-1)
        flat = base.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = call(pts)[1].item()
            flat[i] = orig - h
            fm = call(pts)[1].item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[i])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: numpy's PCG64 seeded with a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))

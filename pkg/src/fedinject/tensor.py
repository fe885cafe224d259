"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the thread's active :class:`Tape` only while
one is open and at least one input requires a gradient, so plain forward
passes (evaluation, finite differences) build no graph at all.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications on one thread.

    Nodes are appended as operations execute, which is already a topological
    order: every input exists before the node that consumes it.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def get(self, t: Tensor) -> np.ndarray | None:
        return self._grads.get(id(t))

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            raise KeyError(f"no gradient recorded for {t!r}")
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.nodes.append(Node(out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(.) through ``tape`` and return leaf gradients.

    Leaves with ``requires_grad=False`` (frozen parameters, data) never
    receive an entry.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.get(id(node.out))
        if g is None:
            continue
        del grads[id(node.out)]
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key in list(grads):
        if key in produced:
            del grads[key]
    return Gradients(grads)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, m = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _emit(ad @ bd, (a, b), bw)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences stay meaningful)."""
    xd = x.data
    c = np.sqrt(2.0 / np.pi)
    u = c * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = c * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _emit(y, (x,), bw)


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(x.data[idx], (x,), bw)


def take(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]`` (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, ids, g)
        return (z,)

    return _emit(table.data[ids], (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    n = len(tensors)
    return _emit(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- nn primitives


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = _as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ContractError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _emit(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, target, weights=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over all leading positions.

    ``logits`` has classes on the last axis; ``target`` holds integer class ids
    for every leading position. ``weights`` (same shape as ``target``) turns the
    mean into a weighted mean, used to mask padded positions.
    """
    logits = _as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    n_classes = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: target shape {target.shape} vs logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise IndexError(f"cross_entropy: target out of range [0, {n_classes})")
    w = np.ones(target.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    den = w.sum()
    if den <= 0:
        raise ContractError("cross_entropy: no positions carry weight")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / den

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None],
                          np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w / den)[..., None] * g,)

    return _emit(np.asarray(loss), (logits,), bw)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Parameter-free normalisation over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _emit(y, (x,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- gradient check


@dataclass
class FDEntry:
    path: str
    status: str  # "pass" | "fail" | "frozen"
    max_rel_error: float = 0.0
    checked: int = 0


@dataclass
class FDReport:
    entries: dict[str, FDEntry]

    @property
    def passed(self) -> bool:
        return all(e.status != "fail" for e in self.entries.values())

    def failures(self) -> list[FDEntry]:
        return [e for e in self.entries.values() if e.status == "fail"]

    def __str__(self) -> str:
        lines = [f"{e.status:6s} {e.max_rel_error:.3e} ({e.checked}) {e.path}"
                 for e in self.entries.values()]
        return "\n".join(lines)


def relative_error(a, n, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(f, params, step: float = 1e-5, tol: float = 1e-4,
                      max_entries: int | None = None, seed: int = 0,
                      paths: Iterable[str] | None = None) -> FDReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` maps a ``{path: Tensor}`` dict (leaves built from ``params``) to a
    scalar Tensor. ``max_entries`` caps how many coordinates per path are
    probed (chosen with a seeded generator); ``None`` probes all of them.
    Never raises on a mismatch: failures are reported per path.
    """
    leaves = params.tensors()
    with Tape() as tape:
        loss = f(leaves)
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    selected = list(paths) if paths is not None else params.paths()
    entries: dict[str, FDEntry] = {}
    for path in selected:
        if params.is_frozen(path):
            entries[path] = FDEntry(path, "frozen")
            continue
        analytic = grads.get(leaves[path])
        value = params.value(path)
        if analytic is None:
            analytic = np.zeros_like(value)
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f(params.tensors()).data)
            flat[i] = orig - step
            down = float(f(params.tensors()).data)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
        entries[path] = FDEntry(path, "pass" if worst <= tol else "fail", worst, len(coords))
    return FDReport(entries)

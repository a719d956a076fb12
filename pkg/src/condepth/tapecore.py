"""Dense tensors over numpy with a reverse-mode tape, AdamW and the LR schedule.

Ops record themselves on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  Without an active tape nothing is recorded,
which is how the oracle and the inference path run.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class ConfigError(ValueError):
    """Invalid shapes or hyperparameters."""


class UsageError(ValueError):
    """An API was called outside its contract."""


class PartitionError(RuntimeError):
    """A frozen parameter received a gradient or update."""


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops; the reverse of the record is a valid
    reverse topological order because ops are appended as they execute."""

    def __init__(self) -> None:
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_tape():
    """Suspend recording (used for oracle labels and inference)."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE[:] = saved


class Tensor:
    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data)
        self.requires_grad = requires_grad

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

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ConfigError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    xd = x.data
    return _emit(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),))


def huber(x: Tensor, target, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of ``x - target`` with transition ``delta``."""
    target = _const(target, x)
    _check_broadcast(x.data, target.data, "huber")
    e = x.data - target.data
    ae = np.abs(e)
    out = np.where(ae <= delta, 0.5 * e * e, delta * (ae - 0.5 * delta))
    slope = np.clip(e, -delta, delta)
    sx, st = x.shape, target.shape
    return _emit(out, (x, target),
                 lambda g: (_unbroadcast(g * slope, sx), -_unbroadcast(g * slope, st)))


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; no edge is recorded, so the upstream adjoint is zero."""
    return Tensor(x.data)


def straight_through(m_hard: np.ndarray, p: Tensor) -> Tensor:
    """``sg(m_hard - p) + p`` fused so the forward value is exactly ``m_hard``.

    The composite form rounds ``(1 - p) + p`` and can miss 1.0 by an ulp; the
    fused op keeps the forward bit-exact and passes the adjoint to ``p``.
    """
    m_hard = np.asarray(m_hard)
    if m_hard.shape != p.shape:
        raise ConfigError(f"straight_through: {m_hard.shape} vs {p.shape}")
    return _emit(m_hard.astype(p.dtype, copy=True), (p,), lambda g: (g,))


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2:
        raise ConfigError(f"matmul: need a.ndim>=1, b.ndim>=2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    if bd.ndim == 2:
        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb

    return _emit(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat of nothing")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat: {exc}") from exc
    return _emit(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(x: Tensor, key) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        z = np.zeros(src_shape, dtype=dtype)
        np.add.at(z, key, g)
        return (z,)

    return _emit(x.data[key], (x,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    wshape, dtype = weight.shape, weight.dtype

    def backward(g):
        z = np.zeros(wshape, dtype=dtype)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (z,)

    return _emit(weight.data[ids], (weight,), backward)


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ------------------------------------------------------- normalisation & co.

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` False entries get zero probability."""
    xd = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ConfigError(f"layer_norm: affine {weight.shape} for input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    wd = weight.data
    n = xd.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gw = np.sum(g * xhat, axis=lead)
        gb = np.sum(g, axis=lead)
        gx_hat = g * wd
        gx = rstd * (gx_hat - gx_hat.sum(-1, keepdims=True) / n
                     - xhat * (gx_hat * xhat).sum(-1, keepdims=True) / n)
        return gx, gw, gb

    return _emit(xhat * wd + bias.data, (x, weight, bias), backward)


COSINE_EPS = 1e-8


def cosine_similarity(x: Tensor, y: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine along the last axis with denominator ``max(|x| |y|, eps)``."""
    y = _const(y, x)
    if x.shape != y.shape:
        raise ConfigError(f"cosine_similarity: {x.shape} vs {y.shape}")
    xd, yd = x.data, y.data
    nx = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    ny = np.sqrt(np.sum(yd * yd, axis=-1, keepdims=True))
    raw = nx * ny
    clamped = raw <= eps
    den = np.where(clamped, eps, raw)
    dot = np.sum(xd * yd, axis=-1, keepdims=True)
    c = dot / den

    def backward(g):
        g = g[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(clamped, yd / den, yd / den - c * xd / (nx * nx))
            gy = np.where(clamped, xd / den, xd / den - c * yd / (ny * ny))
        return g * gx, g * gy

    return _emit(c[..., 0], (x, y), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position ``-log softmax(logits)[target]`` (no reduction)."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ConfigError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    ld = logits.data
    mx = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - mx)
    s = e.sum(axis=-1, keepdims=True)
    lse = (mx + np.log(s))[..., 0]
    picked = np.take_along_axis(ld, targets[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = e / s
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * g[..., None],)

    return _emit(lse - picked, (logits,), backward)


# ----------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Adjoints of scalar ``loss`` for every tensor in ``wrt`` (zeros if unreached)."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.nodes):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        for parent, gp in zip(parents, fn(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = adj.get(key)
            adj[key] = gp if prev is None else prev + gp
    result = {}
    for name, t in wrt.items():
        g = adj.get(id(t))
        result[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return result


# ------------------------------------------------------- parameters & AdamW

class ParamStore:
    """Named tensors with a fixed trainable/frozen split and AdamW moments.

    Constructing a store sets ``requires_grad`` on the shared tensors to match
    its partition, so only one store should drive training at a time.
    """

    def __init__(self, tensors: Mapping[str, Tensor], trainable: Iterable[str]) -> None:
        self._tensors = dict(tensors)
        trainable = frozenset(trainable)
        unknown = trainable - self._tensors.keys()
        if unknown:
            raise ConfigError(f"unknown trainable names: {sorted(unknown)}")
        self._trainable = trainable
        for name, t in self._tensors.items():
            t.requires_grad = name in trainable
        self.m = {n: np.zeros_like(self._tensors[n].data) for n in sorted(trainable)}
        self.v = {n: np.zeros_like(self._tensors[n].data) for n in sorted(trainable)}

    @property
    def trainable(self) -> frozenset[str]:
        return self._trainable

    @property
    def frozen(self) -> frozenset[str]:
        return frozenset(self._tensors) - self._trainable

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {n: self._tensors[n] for n in sorted(self._trainable)}

    def n_trainable(self) -> int:
        return sum(self._tensors[n].data.size for n in self._trainable)

    def fingerprint(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.frozen if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._tensors[n].data).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 1000
    total_steps: int = 20000
    final_lr_fraction: float = 0.01

    def __post_init__(self) -> None:
        if min(self.lr, self.eps, self.clip_norm, self.final_lr_fraction) <= 0:
            raise ConfigError("optimizer values must be positive")
        if self.weight_decay < 0 or not all(0 < b < 1 for b in self.betas):
            raise ConfigError("bad weight decay or betas")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 < warmup_steps < total_steps")


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``lr * final_lr_fraction``."""
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    progress = min(1.0, (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps))
    floor = cfg.lr * cfg.final_lr_fraction
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], clip_norm: float):
    """Return ``(clipped_grads, pre_clip_norm)``."""
    if clip_norm <= 0:
        raise ConfigError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads), norm
    scale = clip_norm / norm
    return {n: (g * scale).astype(g.dtype, copy=False) for n, g in grads.items()}, norm


def adamw_step(store: ParamStore, grads: Mapping[str, np.ndarray], step: int,
               cfg: OptimConfig, lr: float | None = None) -> float:
    """Decoupled-decay Adam update of the trainable partition; returns the lr used."""
    if step < 1:
        raise UsageError("adamw_step counts steps from 1")
    stray = set(grads) - store.trainable
    if stray:
        raise PartitionError(f"gradients for frozen/unknown params: {sorted(stray)}")
    missing = store.trainable - set(grads)
    if missing:
        raise PartitionError(f"missing gradients for {sorted(missing)}")
    lr = lr_at(step, cfg) if lr is None else lr
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name in sorted(store.trainable):
        t = store[name]
        g = grads[name]
        m = store.m[name] = b1 * store.m[name] + (1.0 - b1) * g
        v = store.v[name] = b2 * store.v[name] + (1.0 - b2) * g * g
        w = t.data * (1.0 - lr * cfg.weight_decay)
        t.data = (w - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(t.dtype, copy=False)
    return lr


# ------------------------------------------------------- gradient checking

@dataclass
class FDReport:
    max_rel_err: float
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def finite_difference_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], *,
                            n_coords: int = 12, h: float = 1e-5, floor: float = 1e-6,
                            rng: np.random.Generator | None = None) -> FDReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``n_coords`` coordinates per parameter are drawn at random.  The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    saved_flags = {n: t.requires_grad for n, t in params.items()}
    for t in params.values():
        t.requires_grad = True
    try:
        with Tape() as tape:
            loss = f()
        grads = backward(tape, loss, params)
        worst, worst_at, count = 0.0, None, 0
        with no_tape():
            for name, t in params.items():
                t.data = np.ascontiguousarray(t.data)
                flat = t.data.reshape(-1)
                idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(f().data)
                    flat[i] = orig - h
                    fm = float(f().data)
                    flat[i] = orig
                    num = (fp - fm) / (2 * h)
                    ana = float(grads[name].reshape(-1)[i])
                    err = abs(ana - num) / max(abs(ana), abs(num), floor)
                    count += 1
                    if worst_at is None or err > worst:
                        worst, worst_at = err, (name, tuple(int(k) for k in np.unravel_index(i, t.shape)))
        return FDReport(worst, count, worst_at)
    finally:
        for n, t in params.items():
            t.requires_grad = saved_flags[n]

"""Dense tensors with reverse-mode automatic differentiation.

numpy holds the values; every differentiable op records its parents and a
backward rule that maps the output gradient to one gradient per parent.
Broadcasting is limited to leading-batch expansion (the smaller operand's
shape must be a suffix of the larger one), which keeps each rule short.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

_default_dtype: type = np.float32
_grad_enabled = True

DROPOUT_TAG = 1
GUMBEL_TAG = 2
SHUFFLE_TAG = 3
INIT_TAG = 4
DATA_TAG = 5


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (64-bit for gradient tests)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{op}: non-finite value at index {tuple(int(i) for i in bad)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this graph; rebuild the forward pass first")
        _check_finite("backward", self.data)
        self._consumed = True
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scalar_mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int]


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t.op = "const"
    t._parents = ()
    t._backward = None
    t._consumed = False
    return t


def _as_tensor(x: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants; they take ``like``'s dtype so a 64-bit graph stays 64-bit."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else _default_dtype
    return _wrap(np.asarray(x, dtype=dtype))


def _pair(a: TensorLike, b: TensorLike) -> tuple[Tensor, Tensor]:
    return _as_tensor(a, b), _as_tensor(b, a)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    _check_finite(op, data)
    out = _wrap(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------

def _check_expand(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if len(small) and big[len(big) - len(small):] != small:
        raise ValueError(f"{op}: shapes {a} and {b} differ beyond leading-batch expansion")
    return big


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _check_expand("add", a.shape, b.shape)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _check_expand("mul", a.shape, b.shape)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scalar_mul", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply every slice ``x[b]`` by the scalar ``w[b]``."""
    if w.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ValueError(f"scale_rows: weights {w.shape} do not match rows of {x.shape}")
    wb = w.data.reshape((-1,) + (1,) * (x.ndim - 1))

    def backward(g):
        return g * wb, (g * x.data).reshape(x.shape[0], -1).sum(axis=1)

    return _result("scale_rows", x.data * wb, (x, w), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result("log", out, (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _result("relu", a.data * keep, (a,), lambda g: (g * keep,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, a.data.dtype.type(floor))
    return _result("clamp_min", out, (a,), lambda g: (g * keep,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result("getitem", np.array(a.data[idx]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result("stack", np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scalar_mul(tensor_sum(a, axis, keepdims), 1.0 / count)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """``a @ b`` for ``b`` a matrix shared across a's leading dims, or same-rank batched operands."""
    a, b = _pair(a, b)
    if b.ndim == 2:
        k, m = b.shape
        if a.shape[-1] != k:
            raise ValueError(f"matmul: {a.shape} @ {b.shape}")

        def backward(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            return ga, gb

    else:
        if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: {a.shape} @ {b.shape}")

        def backward(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result("matmul", a.data @ b.data, (a, b), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max-subtraction."""
    _check_finite("softmax", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    _check_finite("log_softmax", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _reduce_to(g * xhat, gain.shape), _reduce_to(g, bias.shape)

    return _result("layer_norm", out, (x, gain, bias), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {weight.shape[0]})")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _result("embedding", weight.data[ids], (weight,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = -1e9) -> Tensor:
    """Replace positions where ``mask`` is True by ``value`` (blocked attention logits)."""
    mask = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(mask.shape, x.shape) != x.shape:
        raise ValueError(f"masked_fill: mask {mask.shape} does not fit {x.shape}")
    out = np.where(mask, x.data.dtype.type(value), x.data)
    return _result("masked_fill", out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the counter ``key`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


class RngContext:
    """Per-step random streams keyed by (seed, step, op index).

    Each call to :meth:`next` hands out a fresh generator whose state depends only
    on the seed, the step and how many streams were taken before it in this step,
    so the forward pass is reproducible regardless of anything else drawn.
    """

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)
        self.counter = 0

    def next(self, tag: int = DROPOUT_TAG) -> np.random.Generator:
        self.counter += 1
        return stream(self.seed, tag, self.step, self.counter)


def dropout(x: Tensor, p: float, rng: Optional[RngContext]) -> Tensor:
    """Inverted dropout. ``rng=None`` means evaluation mode (identity)."""
    if rng is None or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = rng.next(DROPOUT_TAG).random(x.shape) >= p
    scale = np.asarray(keep, dtype=x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _result("dropout", x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy_ls(
    logits: Tensor,
    targets,
    smoothing: float = 0.0,
    pad_id: Optional[int] = None,
    reduction: str = "mean",
) -> Tensor:
    """Label-smoothed cross-entropy over the last axis of ``logits``.

    Per position the loss is ``(1-eps)*NLL(target) + eps*mean_v NLL(v)``; positions
    whose target equals ``pad_id`` are excluded.

    reduction:
        ``"mean"`` averages over non-pad positions, ``"sum"`` adds them up and
        ``"rows"`` sums over the last target axis, leaving one value per sequence.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy_ls: targets {targets.shape} vs logits {logits.shape}")
    keep = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("empty target")
    live = targets[keep]
    if live.min() < 0 or live.max() >= V:
        raise IndexError(f"cross_entropy_ls: target ids outside [0, {V})")
    _check_finite("cross_entropy_ls", logits.data)

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe_t = np.where(keep, targets, 0)
    nll_t = -np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    per_pos = ((1.0 - smoothing) * nll_t - smoothing * logp.mean(axis=-1)) * keep
    dt = logits.dtype.type

    if reduction == "mean":
        out = np.asarray(per_pos.sum() / count, dtype=logits.dtype)
    elif reduction == "sum":
        out = np.asarray(per_pos.sum(), dtype=logits.dtype)
    elif reduction == "rows":
        out = per_pos.sum(axis=-1).astype(logits.dtype)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        target_dist = np.full(logp.shape, smoothing / V, dtype=logits.dtype)
        np.put_along_axis(target_dist, safe_t[..., None], dt(1.0 - smoothing + smoothing / V), axis=-1)
        d = (np.exp(logp) - target_dist) * keep[..., None]
        if reduction == "mean":
            d = d * (g / count)
        elif reduction == "sum":
            d = d * g
        else:
            d = d * np.asarray(g)[..., None, None]
        return (d.astype(logits.dtype),)

    return _result("cross_entropy_ls", out, (logits,), backward)

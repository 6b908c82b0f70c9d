"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation executed while it is active and
whose inputs require gradients.  Gradients are pulled back from a scalar
root by walking the recorded nodes in reverse creation order, which is a
valid reverse topological order because nodes are appended as they are
created.

Broadcasting is deliberately narrow: the second operand of a binary op may
only omit *leading* extents of the first (``(B, d) + (d,)``, ``(B,) + ()``),
never trailing ones.  Anything else is a shape error.

Example
-------
>>> a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     root = (a * a).sum()
>>> tape.gradient(root, [a])[0]
array([2., 4., 6.])
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "Adam",
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "backward",
    "value_and_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "affine",
    "sum",
    "mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "lipswish",
    "square_norm",
    "reshape",
    "take",
    "clip_grad_norm",
]


class AutodiffError(RuntimeError):
    """Misuse of the tape (non-scalar root, consumed tape, ...)."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_TAPES: List["Tape"] = []

Backward = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Immutable-by-convention float64 array that can be recorded on a tape.

    Leaves created with ``requires_grad=True`` are the differentiable inputs
    (model parameters, sampler positions).  Optimizers are the only code that
    writes into ``data`` of a leaf, and only between tapes.
    """

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by exp(-log) instead")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None):
        return sum(self, axis)

    def mean(self, axis: Optional[int] = None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t: Tensor):
    raise AutodiffError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations for one forward pass; usable for one backward pass."""

    def __init__(self):
        self._nodes: List[Tuple[Tensor, Tuple[Tensor, ...], Backward]] = []
        self._leaves: Dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: Tuple[Tensor, ...], fn: Backward) -> None:
        if self.consumed:
            raise AutodiffError("tape already consumed")
        for t in inputs:
            if t.requires_grad and t._tape is None:
                self._leaves[id(t)] = t
        out._tape = self
        self._nodes.append((out, inputs, fn))

    @property
    def leaves(self) -> List[Tensor]:
        return list(self._leaves.values())

    def gradient(self, root: Tensor, sources: Sequence[Tensor]) -> List[np.ndarray]:
        """d root / d source for every source; zeros where root does not depend on it."""
        if root.data.size != 1:
            _raise_not_scalar(root)
        if self.consumed:
            raise AutodiffError("tape already consumed")
        self.consumed = True

        live = {id(s) for s in sources}
        needs: List[Optional[Tuple[bool, ...]]] = []
        for out, inputs, _ in self._nodes:
            flags = tuple([id(t) in live for t in inputs])
            if True in flags:
                live.add(id(out))
                needs.append(flags)
            else:
                needs.append(None)

        grads: Dict[int, np.ndarray] = {}
        if root._tape is self and id(root) in live:
            grads[id(root)] = np.ones_like(root.data)
            for (out, inputs, fn), flags in zip(reversed(self._nodes), reversed(needs)):
                if flags is None:
                    continue
                g = grads.pop(id(out), None)
                if g is None:
                    continue
                for t, flag, gi in zip(inputs, flags, fn(g, flags)):
                    if not flag or gi is None:
                        continue
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        elif id(root) in live:
            # the root is itself one of the sources
            grads[id(root)] = np.ones_like(root.data)

        self._nodes = []
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def backward(root: Tensor, sources: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Gradient map of a scalar root over its leaves.

    With ``sources=None`` every differentiable leaf that took part in the
    computation gets an entry.
    """
    tape = root._tape
    if tape is None:
        raise AutodiffError("root was not produced under an active tape")
    srcs = tape.leaves if sources is None else list(sources)
    return dict(zip(srcs, tape.gradient(root, srcs)))


def value_and_grad(fn: Callable[..., Tensor], *arrays: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Evaluate scalar ``fn`` on fresh leaves built from ``arrays`` and differentiate."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        root = fn(*leaves)
    return root.item(), tape.gradient(root, leaves)


# ---------------------------------------------------------------------------
# op plumbing


def _make(data: np.ndarray, inputs: Tuple[Tensor, ...], fn: Backward) -> Tensor:
    rg = False
    for t in inputs:
        if t.requires_grad:
            rg = True
            break
    out = Tensor(data, requires_grad=rg)
    if rg and _TAPES:
        _TAPES[-1]._record(out, inputs, fn)
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    long, short = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(short) < len(long) and long[len(long) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform (only leading extents broadcast)")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, -_unbroadcast(g, sb) if needs[1] else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        )

    return _make(ad * bd, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, needs: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant (non-differentiable) scalar."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g, needs: (g * c,))


def matmul(a, b) -> Tensor:
    """2-D matrix product ``(n, k) @ (k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")

    def bw(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _make(ad @ bd, (a, b), bw)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a batch ``x`` of shape (n, k), ``w`` (k, m), ``b`` (m,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0] or b.shape != (wd.shape[1],):
        raise ShapeError(f"affine: shapes {xd.shape}, {wd.shape}, {b.shape} do not conform")

    def bw(g, needs):
        return (
            g @ wd.T if needs[0] else None,
            xd.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _make(xd @ wd + b.data, (x, w, b), bw)


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    if axis is None:

        def bw(g, needs):
            return (np.broadcast_to(g, shape).copy(),)

        return _make(np.asarray(a.data.sum()), (a,), bw)
    ax = axis % a.ndim

    def bw_axis(g, needs):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(a.data.sum(axis=ax), (a,), bw_axis)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g, needs: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g, needs: (g * (1.0 - out * out),))


_sigmoid = expit


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g, needs: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    a = as_tensor(a)
    ad = a.data
    return _make(_softplus(ad), (a,), lambda g, needs: (g * _sigmoid(ad),))


def log_sigmoid(a) -> Tensor:
    """log sigmoid(x) = -softplus(-x)."""
    a = as_tensor(a)
    ad = a.data
    return _make(-_softplus(-ad), (a,), lambda g, needs: (g * _sigmoid(-ad),))


LIPSWISH_SCALE = 1.1


def lipswish(a) -> Tensor:
    """x * sigmoid(x) / 1.1, a Lipschitz-1 variant of Swish."""
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    out = ad * s / LIPSWISH_SCALE

    def bw(g, needs):
        return (g * (s + ad * s * (1.0 - s)) / LIPSWISH_SCALE,)

    return _make(out, (a,), bw)


def square_norm(a) -> Tensor:
    """Sum of squares over the last axis."""
    a = as_tensor(a)
    ad = a.data
    return _make(np.einsum("...i,...i->...", ad, ad), (a,), lambda g, needs: (2.0 * g[..., None] * ad,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return _make(out, (a,), lambda g, needs: (g.reshape(old),))


def take(a, index: np.ndarray, pad: bool = False) -> Tensor:
    """Gather columns: ``a[:, index]`` for a batch ``a`` of shape (n, k).

    ``index`` may have any shape; the result has shape ``(n,) + index.shape``.
    Repeated indices accumulate gradient (used for im2col convolution).  With
    ``pad=True`` a negative index selects a constant zero instead of wrapping.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take expects a 2-D batch, got {a.shape}")
    idx = np.asarray(index, dtype=np.intp)
    n, k = a.shape
    flat = idx.reshape(-1)
    if pad:
        flat = np.where(flat < 0, k, flat)
        src = np.concatenate([a.data, np.zeros((n, 1))], axis=1)
    else:
        src = a.data
    width = src.shape[1]

    def bw(g, needs):
        out = np.zeros((n, width))
        np.add.at(out, (slice(None), flat), g.reshape(n, -1))
        return (out[:, :k],)

    return _make(src[:, flat].reshape((n,) + idx.shape), (a,), bw)


# ---------------------------------------------------------------------------
# optimisation


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    """Rescale ``grads`` so their global norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    total = math.sqrt(float(np.sum([np.vdot(g, g) for g in grads])))
    if max_norm is None or total <= max_norm or total == 0.0:
        return list(grads), total
    factor = max_norm / total
    return [g * factor for g in grads], total


class Adam:
    """Bias-corrected Adam acting in place on leaf tensors.

    ``step`` *descends* the supplied gradients; callers maximising an
    objective pass its negated gradient.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.99, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: Optional[float] = None) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient passed to Adam")
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

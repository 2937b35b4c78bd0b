"""Dense float64 tensors with reverse-mode gradients.

Every op returns a new :class:`Tensor` that remembers its parents and a
vector-Jacobian product.  Nodes carry a global creation sequence number, so
sorting the reachable nodes of a loss by that number yields the execution
order of the computation (a valid topological order); :func:`backward` walks
it in reverse.

Only what the VIRM models need is here: affine layers, exact-erf GeLU,
training-mode batch norm, softmax cross-entropy, MSE and the handful of
elementwise / reshaping ops used to assemble the losses.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateBatchError, DimensionError, LabelIndexError

_seq = itertools.count()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            _not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)


def _not_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._seq = next(_seq)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


# numpy's axis reductions are slow on tall, narrow matrices; a matrix-vector
# product against ones does the same sums through BLAS.
def _colsum(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return np.ones(a.shape[0]) @ a
    return a.sum(axis=0)


def _rowsum(a: np.ndarray) -> np.ndarray:
    return a @ np.ones(a.shape[1])


def _rowmax(a: np.ndarray) -> np.ndarray:
    if a.shape[1] > 8:
        return a.max(axis=1)
    out = a[:, 0].copy()
    for j in range(1, a.shape[1]):
        np.maximum(out, a[:, j], out=out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = _colsum(g)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


# shape ops -------------------------------------------------------------------

def stack(scalars: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D tensor."""
    scalars = [as_tensor(s) for s in scalars]
    if not scalars:
        raise ContractError("cannot stack an empty list")
    for s in scalars:
        if s.size != 1:
            _not_scalar(s)
    out = np.array([s.data.reshape(()) for s in scalars], dtype=np.float64)
    return _node(out, scalars, lambda g: tuple(np.asarray(gi).reshape(s.shape)
                                               for gi, s in zip(g, scalars)))


def tile_rows(x: Tensor, copies: int) -> Tensor:
    """Stack ``copies`` replicas of ``x`` along the rows: copy u occupies rows u*b:(u+1)*b."""
    b = x.shape[0]
    out = np.tile(x.data, (copies,) + (1,) * (x.ndim - 1))
    return _node(out, (x,), lambda g: (g.reshape((copies, b) + x.shape[1:]).sum(axis=0),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)
    return _node(out, parts, lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _node(x.data[start:stop].copy(), (x,), vjp)


def take_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    unique = len(np.unique(index)) == len(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        if unique:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), vjp)


# layers ----------------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor | None) -> Tensor:
    """``x @ W + b`` for a batch of row vectors; ``b=None`` drops the bias."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: cannot multiply x{list(x.shape)} by W{list(W.shape)}")
    if b is not None and (b.ndim != 1 or b.shape[0] != W.shape[1]):
        raise DimensionError(f"affine: bias b{list(b.shape)} does not match W{list(W.shape)}")
    out = x.data @ W.data
    if b is None:
        return _node(out, (x, W), lambda g: (g @ W.data.T, x.data.T @ g))
    out += b.data
    return _node(out, (x, W, b), lambda g: (g @ W.data.T, x.data.T @ g, _colsum(g)))


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature standardization with the batch's own (population) statistics."""
    if x.ndim != 2:
        raise DimensionError(f"batchnorm_train expects a matrix, got shape {list(x.shape)}")
    n, k = x.shape
    if n < 2:
        raise DegenerateBatchError(f"batch norm needs at least 2 rows, got {n}")
    if gamma.shape != (k,) or beta.shape != (k,):
        raise DimensionError(f"batchnorm_train: gamma{list(gamma.shape)} / beta{list(beta.shape)} "
                             f"do not match {k} features")
    centered = x.data - _colsum(x.data) / n
    inv_std = 1.0 / np.sqrt(_colsum(centered * centered) / n + eps)
    xhat = centered * inv_std

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv_std / n * (n * dxhat - _colsum(dxhat) - xhat * _colsum(dxhat * xhat))
        return dx, _colsum(g * xhat), _colsum(g)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


def softmax(logits: Tensor) -> Tensor:
    z = logits.data - _rowmax(logits.data)[:, None]
    p = np.exp(z)
    p /= _rowsum(p)[:, None]
    return _node(p, (logits,), lambda g: (p * (g - _rowsum(g * p)[:, None]),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be a matrix, got shape {list(logits.shape)}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {list(labels.shape)} does not match logits {list(logits.shape)}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise LabelIndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - _rowmax(logits.data)[:, None]
    lse = np.log(_rowsum(np.exp(z)))
    idx = np.arange(n)
    loss = np.mean(lse - z[idx, labels])

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[idx, labels] -= 1.0
        return (p * (g / n),)

    return _node(np.asarray(loss), (logits,), vjp)


def mse(a: Tensor, b) -> Tensor:
    """``sum((a - b)**2) / (2 n)`` where n is the number of rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {list(a.shape)} and {list(b.shape)} differ")
    n = a.shape[0] if a.ndim else 1
    diff = a.data - b.data
    return _node(np.asarray((diff * diff).sum() / (2.0 * n)), (a, b),
                 lambda g: (g * diff / n, -g * diff / n))


def population_variance(values: Sequence[Tensor]) -> Tensor:
    """(1/M) sum (v_e - mean)^2 over a list of scalar tensors."""
    if len(values) == 0:
        raise ContractError("population_variance of an empty list")
    v = stack(values)
    return mean(square(v - mean(v)))


# reverse mode ----------------------------------------------------------------

class Tape:
    """The nodes reachable from ``output`` that carry gradients, in execution order."""

    def __init__(self, output: Tensor):
        seen = set()
        nodes = []
        stack_ = [output]
        while stack_:
            node = stack_.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack_.extend(node._parents)
        nodes.sort(key=lambda t: t._seq)
        self.output = output
        self.nodes: list[Tensor] = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def replay(self) -> list[Tensor]:
        """Nodes in the order the backward pass visits them."""
        return self.nodes[::-1]


def backward(loss: Tensor, params: Iterable[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    """Gradient of scalar ``loss`` w.r.t. each of ``params``; zeros where unreachable."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    if tape is None:
        tape = Tape(loss)
    elif tape.output is not loss:
        raise ContractError("tape was recorded for a different output")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in tape.replay():
        if node._vjp is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [np.array(grads[id(p)], dtype=np.float64).reshape(p.shape) if id(p) in grads
            else np.zeros(p.shape) for p in params]


def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor], point: Sequence[np.ndarray],
                      step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a list of tensors (built from ``point``) to a scalar tensor.
    Relative error per coordinate uses ``max(|analytic|, |numeric|, 1e-8)``
    as its denominator.
    """
    point = [np.array(p, dtype=np.float64) for p in point]
    params = [Tensor(p, requires_grad=True) for p in point]
    analytic = backward(f(params), params)
    worst = 0.0
    for i, p in enumerate(point):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = f([Tensor(q) for q in point]).item()
            flat[j] = orig - step
            lo = f([Tensor(q) for q in point]).item()
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst

"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately minimal: exactly the operations the transformer models and
their training losses need, nothing more. Graphs are built eagerly as
ops run; ``backward`` walks the recorded parents in reverse topological
order, so two identical graphs produce bit-identical gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self) -> None:
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc) -> bool:
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array that may participate in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data outside any graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, leaves=None) -> None:
        backward(self, leaves)

    # arithmetic sugar; scalars only on the right where ambiguous
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_const(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients g @ b.T and a.T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}"
        )
    out_data = a.data @ b.data

    def backward_fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out_data, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a vector broadcast over the last dim."""
    if a.data.shape == b.data.shape:
        def backward_fn(g):
            _accum(a, g)
            _accum(b, g)
    elif b.data.ndim == 1 and a.data.shape[-1:] == b.data.shape:
        def backward_fn(g):
            _accum(a, g)
            _accum(b, g.reshape(-1, b.data.shape[0]).sum(axis=0))
    else:
        raise DimensionError(f"add shapes incompatible: {a.data.shape} + {b.data.shape}")
    return _node(a.data + b.data, (a, b), backward_fn)


def add_const(a: Tensor, c: float) -> Tensor:
    def backward_fn(g):
        _accum(a, g)

    return _node(a.data + c, (a,), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes incompatible: {a.data.shape} * {b.data.shape}")

    def backward_fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    def backward_fn(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), backward_fn)


def tsum(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), backward_fn)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward_fn(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), backward_fn)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x**2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        _accum(a, g * da)

    return _node(out, (a,), backward_fn)


def softmax(a: Tensor) -> Tensor:
    """Stable softmax over the last dimension; rejects NaN input."""
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    x_shift = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x_shift)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        _accum(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (a,), backward_fn)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if np.isnan(x).any():
        raise NumericError("log_softmax input contains NaN")
    x_shift = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x_shift).sum(axis=-1, keepdims=True))
    out = x_shift - lse
    p = np.exp(out)

    def backward_fn(g):
        _accum(a, g - p * g.sum(axis=-1, keepdims=True))

    return _node(out, (a,), backward_fn)


def causal_softmax(scores: Tensor) -> Tensor:
    """Row softmax of a square score matrix with strict upper triangle masked out.

    Masked positions get exactly zero probability and zero gradient.
    """
    x = scores.data
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"causal_softmax needs a square matrix, got {x.shape}")
    if np.isnan(x).any():
        raise NumericError("causal_softmax input contains NaN")
    mask = np.tril(np.ones(x.shape, dtype=bool))
    masked = np.where(mask, x, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        _accum(scores, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (scores,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-dim slice to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu) / sigma
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        dxhat = g * gain.data
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) / sigma
        _accum(x, dx)

    return _node(out, (x, gain, bias), backward_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer id; gradients scatter-add back."""
    idx = np.asarray(ids, dtype=np.intp)
    out = table.data[idx]

    def backward_fn(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            _accum(table, acc)

    return _node(out, (table,), backward_fn)


def pick(a: Tensor, ids) -> Tensor:
    """Select one column per row: out[t] = a[t, ids[t]]."""
    idx = np.asarray(ids, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def backward_fn(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, idx), g)
        _accum(a, acc)

    return _node(out, (a,), backward_fn)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    def backward_fn(g):
        acc = np.zeros_like(a.data)
        acc[lo:hi] = g
        _accum(a, acc)

    return _node(a.data[lo:hi].copy(), (a,), backward_fn)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def backward_fn(g):
        acc = np.zeros_like(a.data)
        acc[..., lo:hi] = g
        _accum(a, acc)

    return _node(a.data[..., lo:hi].copy(), (a,), backward_fn)


def concat_cols(parts: list[Tensor]) -> Tensor:
    widths = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[..., lo:hi])

    return _node(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), backward_fn)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose2d needs rank 2, got shape {a.data.shape}")

    def backward_fn(g):
        _accum(a, g.T)

    return _node(a.data.T.copy(), (a,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass and optimizer step
# ---------------------------------------------------------------------------


def backward(loss: Tensor, leaves=None) -> None:
    """Populate d(loss)/d(leaf) for every requires_grad tensor in the graph.

    `loss` must be a scalar. Tensors listed in `leaves` that the graph never
    reached end up with an explicit zero gradient rather than None.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = {id(loss)}
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, i = stack[-1]
        if i < len(node._parents):
            stack[-1] = (node, i + 1)
            parent = node._parents[i]
            if id(parent) not in visited and parent.requires_grad:
                visited.add(id(parent))
                stack.append((parent, 0))
        else:
            stack.pop()
            topo.append(node)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)

    if leaves is not None:
        for t in leaves:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def sgd_step(params, lr: float) -> None:
    """p <- p - lr * grad for every param, then clear the grads."""
    if not np.isfinite(lr) or lr < 0:
        raise ContractError(f"learning rate must be finite and >= 0, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step called on a parameter with no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None

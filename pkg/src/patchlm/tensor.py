"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery for the models in this package: broadcasting
elementwise ops, (batched) matmul, softmax, gather-style embedding lookup,
segment pooling over contiguous spans, and a fused NLL-from-logits. Graphs
are built eagerly; ``backward()`` walks a topological order and accumulates
vector-Jacobian products into ``.grad``. Gradients are never mutated in
place, so views handed out by a vjp stay valid.

Dtype discipline: ops never upcast silently; python scalars stay weak, so a
float32 graph remains float32 and a float64 graph (used for gradient checks)
remains float64.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None
        self.name = name

    # -- graph construction ---------------------------------------------------

    @staticmethod
    def _result(data, parents, vjp) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in node._vjp(node.grad):
                if not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return Tensor._result(
                self.data + other.data,
                (self, other),
                lambda g: [(self, _unbroadcast(g, self.shape)), (other, _unbroadcast(g, other.shape))],
            )
        return Tensor._result(self.data + other, (self,), lambda g: [(self, _unbroadcast(g, self.shape))])

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: [(self, -g)])

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return Tensor._result(
                self.data - other.data,
                (self, other),
                lambda g: [(self, _unbroadcast(g, self.shape)), (other, _unbroadcast(-g, other.shape))],
            )
        return Tensor._result(self.data - other, (self,), lambda g: [(self, _unbroadcast(g, self.shape))])

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return Tensor._result(
                self.data * other.data,
                (self, other),
                lambda g: [
                    (self, _unbroadcast(g * other.data, self.shape)),
                    (other, _unbroadcast(g * self.data, other.shape)),
                ],
            )
        return Tensor._result(self.data * other, (self,), lambda g: [(self, _unbroadcast(g * other, self.shape))])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return Tensor._result(
                self.data / other.data,
                (self, other),
                lambda g: [
                    (self, _unbroadcast(g / other.data, self.shape)),
                    (other, _unbroadcast(-g * self.data / (other.data * other.data), other.shape)),
                ],
            )
        return self.__mul__(1.0 / other)

    def __pow__(self, c):
        assert np.isscalar(c), "only scalar exponents are supported"
        out_data = self.data**c
        return Tensor._result(out_data, (self,), lambda g: [(self, g * c * self.data ** (c - 1))])

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: [(self, g.reshape(orig))])

    def swapaxes(self, a, b):
        return Tensor._result(self.data.swapaxes(a, b), (self,), lambda g: [(self, g.swapaxes(a, b))])

    def __getitem__(self, idx):
        def vjp(g):
            z = np.zeros_like(self.data)
            z[idx] = g
            return [(self, z)]

        return Tensor._result(self.data[idx], (self,), vjp)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        orig = self.data.shape

        def vjp(g):
            if axis is None:
                return [(self, np.broadcast_to(g, orig))]
            gx = g if keepdims else np.expand_dims(g, axis)
            return [(self, np.broadcast_to(gx, orig))]

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- nonlinearities -------------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._result(out_data, (self,), lambda g: [(self, g * out_data)])

    def log(self):
        return Tensor._result(np.log(self.data), (self,), lambda g: [(self, g / self.data)])

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._result(out_data, (self,), lambda g: [(self, g * 0.5 / out_data)])

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._result(out_data, (self,), lambda g: [(self, g * out_data * (1.0 - out_data))])

    def silu(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out_data = self.data * s
        return Tensor._result(out_data, (self,), lambda g: [(self, g * (s + out_data * (1.0 - s)))])

    # -- matmul ------------------------------------------------------------------------

    def __matmul__(self, other):
        assert isinstance(other, Tensor)
        assert self.ndim >= 2 and other.ndim >= 2

        def vjp(g):
            ga = _unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape)
            gb = _unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape)
            return [(self, ga), (other, gb)]

        return Tensor._result(self.data @ other.data, (self, other), vjp)


# -------------------------------------------------------------------------------
# Free functions
# -------------------------------------------------------------------------------


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return list(zip(tensors, pieces))

    return Tensor._result(np.concatenate(datas, axis=axis), tuple(tensors), vjp)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather with scatter-add backward (indices may repeat)."""
    idx = np.asarray(idx)

    def vjp(g):
        z = np.zeros_like(table.data)
        np.add.at(z, idx, g)
        return [(table, z)]

    return Tensor._result(table.data[idx], (table,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [(x, y * (g - dot))]

    return Tensor._result(y, (x,), vjp)


def nll_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood in nats, numerically stable."""
    targets = np.asarray(targets)
    n = logits.data.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1)
    probs = e / z[:, None]
    out_data = m[:, 0] + np.log(z) - logits.data[np.arange(n), targets]

    def vjp(g):
        gl = probs * g[:, None]
        gl[np.arange(n), targets] -= g
        return [(logits, gl)]

    return Tensor._result(out_data, (logits,), vjp)


def segment_max(x: Tensor, starts: np.ndarray) -> Tensor:
    """Columnwise max over contiguous row segments; grad flows to the first argmax."""
    starts = np.asarray(starts, dtype=np.int64)
    n, d = x.data.shape
    m = len(starts)
    out_data = np.maximum.reduceat(x.data, starts, axis=0)

    def vjp(g):
        seg_of = np.searchsorted(starts, np.arange(n), side="right") - 1
        is_max = x.data == out_data[seg_of]
        offset = np.arange(n) - starts[seg_of]
        candidate = np.where(is_max, offset[:, None], n + 1)
        first = np.minimum.reduceat(candidate, starts, axis=0)  # (m, d)
        rows = (starts[:, None] + first).ravel()
        cols = np.tile(np.arange(d), m)
        z = np.zeros_like(x.data)
        np.add.at(z, (rows, cols), g.ravel())
        return [(x, z)]

    return Tensor._result(out_data, (x,), vjp)


def segment_mean(x: Tensor, starts: np.ndarray) -> Tensor:
    """Columnwise mean over contiguous row segments."""
    starts = np.asarray(starts, dtype=np.int64)
    n, _ = x.data.shape
    lengths = np.diff(np.append(starts, n)).astype(x.data.dtype)
    sums_data = np.add.reduceat(x.data, starts, axis=0)

    def vjp(g):
        seg_of = np.searchsorted(starts, np.arange(n), side="right") - 1
        return [(x, (g / lengths[:, None])[seg_of])]

    return Tensor._result(sums_data / lengths[:, None], (x,), vjp)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)

"""Reverse-mode automatic differentiation over dense 2-D arrays.

Every value in the model is a `Tensor` wrapping a 2-D numpy array. Ops build
a tape (parents + backward closure); `Tensor.backward()` walks it in reverse
topological order and accumulates gradients in place. The op set is the small
fixed vocabulary the model needs: matmul, broadcast add, elementwise product,
concat along either axis, sigmoid/relu/leaky-relu/elu, row softmax and row
log-softmax, sum/mean reduction, scalar scale, transpose, and row
gather/slice for assembling windows from calendar-indexed features.

Gradient checking is done against central finite differences; run it in
64-bit mode (the default dtype) so the comparison is meaningful.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

_grad_enabled = True
_debug_checks = False


def set_debug_checks(on: bool) -> None:
    """Enable NaN/Inf checks after every forward op (slow, for tests)."""
    global _debug_checks
    _debug_checks = bool(on)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense 2-D array node in the computation graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def backward(self, seed=None) -> None:
        """Accumulate gradients of this (scalar) tensor into the graph."""
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.values)
        self._ensure_grad()
        self.grad += seed
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def node(values: np.ndarray, parents, backward) -> Tensor:
    """Create a tape node. `backward(g)` must accumulate into parent grads.

    This is the extension point used by the fused batched ops elsewhere in
    the package; it applies the same grad-mode and debug-check rules as the
    built-in ops.
    """
    out = Tensor(values)
    if _debug_checks and not np.all(np.isfinite(values)):
        raise NumericError("non-finite values produced by a forward op")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    out_vals = a.values @ b.values

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g @ b.values.T
        if b.requires_grad:
            b._ensure_grad()
            b.grad += a.values.T @ g

    return node(out_vals, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (which broadcast up to g.shape)."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    for ax in (0, 1):
        na, nb = a.shape[ax], b.shape[ax]
        if na != nb and na != 1 and nb != 1:
            raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; rows or columns of size 1 broadcast (bias add)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out_vals = a.values + b.values

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(g, b.shape)

    return node(out_vals, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with the same broadcast rules as add."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_vals = a.values * b.values

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g * b.values, a.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(g * a.values, b.shape)

    return node(out_vals, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out_vals = a.values * c

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * c

    return node(out_vals, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g.T

    return node(a.values.T.copy(), (a,), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ncols = {p.cols for p in parts}
    if len(ncols) != 1:
        raise ShapeError(f"concat_rows: column counts differ: {sorted(ncols)}")
    out_vals = np.concatenate([p.values for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._ensure_grad()
                p.grad += g[lo:hi]

    return node(out_vals, tuple(parts), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    nrows = {p.rows for p in parts}
    if len(nrows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {sorted(nrows)}")
    out_vals = np.concatenate([p.values for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._ensure_grad()
                p.grad += g[:, lo:hi]

    return node(out_vals, tuple(parts), backward)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= lo <= hi <= a.rows):
        raise ShapeError(f"slice_rows[{lo}:{hi}] out of range for {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad[lo:hi] += g

    return node(a.values[lo:hi].copy(), (a,), backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= lo <= hi <= a.cols):
        raise ShapeError(f"slice_cols[{lo}:{hi}] out of range for {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad[:, lo:hi] += g

    return node(a.values[:, lo:hi].copy(), (a,), backward)


def scatter_add_rows(target: np.ndarray, idx: np.ndarray, g: np.ndarray) -> None:
    """target[idx] += g with repeated indices, via sort + reduceat.

    Much faster than np.add.at for the window-gather workloads here.
    """
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    sg = g[order]
    boundaries = np.flatnonzero(np.concatenate(([True], sidx[1:] != sidx[:-1])))
    sums = np.add.reduceat(sg, boundaries, axis=0)
    target[sidx[boundaries]] += sums


def gather_rows(a: Tensor, idx) -> Tensor:
    """out[i] = a[idx[i]]; repeated indices allowed (backward scatter-adds)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows index must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ShapeError(f"gather_rows index out of range for {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            scatter_add_rows(a.grad, idx, g)

    return node(a.values[idx], (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_vals = np.empty_like(a.values)
    pos = a.values >= 0
    out_vals[pos] = 1.0 / (1.0 + np.exp(-a.values[pos]))
    ex = np.exp(a.values[~pos])
    out_vals[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * out_vals * (1.0 - out_vals)

    return node(out_vals, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_vals = np.maximum(a.values, 0.0)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * (a.values > 0)

    return node(out_vals, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out_vals = np.where(a.values > 0, a.values, slope * a.values)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * np.where(a.values > 0, 1.0, slope)

    return node(out_vals, (a,), backward)


def elu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    neg = np.expm1(np.minimum(a.values, 0.0))
    out_vals = np.where(a.values > 0, a.values, neg)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g * np.where(a.values > 0, 1.0, neg + 1.0)

    return node(out_vals, (a,), backward)


# ---------------------------------------------------------------------------
# softmax family (row-stabilized)


def _softmax(vals: np.ndarray) -> np.ndarray:
    shifted = vals - vals.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_vals = _softmax(a.values)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            dot = (g * out_vals).sum(axis=1, keepdims=True)
            a.grad += out_vals * (g - dot)

    return node(out_vals, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_vals = shifted - lse
    soft = np.exp(out_vals)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g - soft * g.sum(axis=1, keepdims=True)

    return node(out_vals, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_vals = np.array([[a.values.sum()]], dtype=a.values.dtype)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g[0, 0]

    return node(out_vals, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_vals = np.array([[a.values.mean()]], dtype=a.values.dtype)
    inv = 1.0 / a.values.size

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += g[0, 0] * inv

    return node(out_vals, (a,), backward)


# ---------------------------------------------------------------------------
# parameters and gradient checking


@dataclass
class Parameter:
    """Named learnable weight with Adam state attached."""

    name: str
    tensor: Tensor
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.tensor.values)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.tensor.values)

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    def zero_grad(self) -> None:
        self.tensor.grad = None


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` is a no-argument callable returning a scalar Tensor; it must read the
    parameter values afresh on every call. `params` is any iterable of
    Parameter. Relative error per entry is |analytic - fd| / max(1, |analytic|).
    """
    params = list(params)
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    for p in params:
        p.zero_grad()
    out = f()
    if out.values.size != 1:
        raise ShapeError("grad_check target must be scalar")
    out.backward()
    analytic = [
        p.tensor.grad.copy() if p.tensor.grad is not None else np.zeros_like(p.values)
        for p in params
    ]

    def probe() -> float:
        with no_grad():
            val = f().item()
        return val

    max_rel = 0.0
    for p, an in zip(params, analytic):
        vals = p.tensor.values
        for i in range(vals.shape[0]):
            for j in range(vals.shape[1]):
                orig = vals[i, j]
                vals[i, j] = orig + eps
                f_plus = probe()
                vals[i, j] = orig - eps
                f_minus = probe()
                vals[i, j] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(
                        f"non-finite objective while perturbing {p.name}[{i},{j}]"
                    )
                fd = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(an[i, j] - fd) / max(1.0, abs(an[i, j]))
                if rel > max_rel:
                    max_rel = rel
    return max_rel

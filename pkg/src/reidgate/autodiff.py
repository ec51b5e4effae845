"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float64 numpy array together with a gradient slot and
references to the tensors it was computed from.  Calling :func:`backward` on
a scalar tensor walks the graph in reverse topological order and accumulates
analytic gradients into every tensor that requires them.

Only the primitives the encoder and losses need are provided.  There is no
general broadcasting: elementwise ops require equal shapes or a scalar on
one side.  All shape mismatches raise :class:`ShapeError` naming the op and
both shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class Tensor:
    """Dense float64 array participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.name = name
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def accumulate_grad(t: Tensor, g) -> None:
    """Add ``g`` into ``t.grad`` (gradients accumulate, never overwrite)."""
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss node.

    Visits each node exactly once, consumers before producers, so shared
    subexpressions receive the sum of their downstream gradients before
    propagating.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    accumulate_grad(loss, np.ones_like(loss.data))
    if not loss.requires_grad:
        return
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_elementwise(op: str, a: Tensor, b: Tensor):
    """Equal shapes, or a true scalar on one side.  Returns (a_scalar, b_scalar)."""
    a_scalar = a.data.size == 1
    b_scalar = b.data.size == 1
    if a.data.shape != b.data.shape and not (a_scalar or b_scalar):
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not conform")
    return a_scalar, b_scalar


def _reduce_to(shape, g):
    """Collapse a gradient onto a scalar operand if needed."""
    g = np.asarray(g)
    if g.shape != shape:
        g = np.sum(g).reshape(shape)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)

    def bw(g):
        accumulate_grad(a, _reduce_to(a.data.shape, g))
        accumulate_grad(b, _reduce_to(b.data.shape, g))

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=bw, op="add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("sub", a, b)

    def bw(g):
        accumulate_grad(a, _reduce_to(a.data.shape, g))
        accumulate_grad(b, _reduce_to(b.data.shape, -np.asarray(g)))

    return Tensor(a.data - b.data, parents=(a, b), backward_fn=bw, op="sub")


def mul(a, b) -> Tensor:
    """Hadamard (elementwise) product; scalar-vs-tensor broadcast allowed."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)

    def bw(g):
        accumulate_grad(a, _reduce_to(a.data.shape, np.asarray(g) * b.data))
        accumulate_grad(b, _reduce_to(b.data.shape, np.asarray(g) * a.data))

    return Tensor(a.data * b.data, parents=(a, b), backward_fn=bw, op="mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bw(g):
        accumulate_grad(a, np.asarray(g) * c)

    return Tensor(a.data * c, parents=(a,), backward_fn=bw, op="scale")


def add_const(a, c: float) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        accumulate_grad(a, g)

    return Tensor(a.data + float(c), parents=(a,), backward_fn=bw, op="add_const")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim in (1, 2):
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    elif ad.ndim == 1 and bd.ndim == 1:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    else:
        raise ShapeError(f"matmul: unsupported ranks for shapes {ad.shape} and {bd.shape}")
    out = ad @ bd

    def bw(g):
        g = np.asarray(g)
        if ad.ndim == 2 and bd.ndim == 2:
            accumulate_grad(a, g @ bd.T)
            accumulate_grad(b, ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 1:
            accumulate_grad(a, np.outer(g, bd))
            accumulate_grad(b, ad.T @ g)
        else:  # 1-D dot product, scalar output
            accumulate_grad(a, g * bd)
            accumulate_grad(b, g * ad)

    return Tensor(out, parents=(a, b), backward_fn=bw, op="matmul")


def affine(W, x, b) -> Tensor:
    """W @ x + b."""
    return add(matmul(W, x), b)


def concat(tensors) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors:
        if t.data.ndim != 1:
            raise ShapeError(f"concat: only 1-D tensors supported, got shape {t.data.shape}")
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        g = np.asarray(g)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            accumulate_grad(t, g[lo:hi])

    return Tensor(np.concatenate([t.data for t in tensors]), parents=tuple(tensors), backward_fn=bw, op="concat")


def slice1d(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"slice1d: only 1-D tensors supported, got shape {a.data.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = np.asarray(g)
        accumulate_grad(a, full)

    return Tensor(a.data[start:stop].copy(), parents=(a,), backward_fn=bw, op="slice1d")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        accumulate_grad(a, np.asarray(g) * out * (1.0 - out))

    return Tensor(out, parents=(a,), backward_fn=bw, op="sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        accumulate_grad(a, np.asarray(g) * (1.0 - out * out))

    return Tensor(out, parents=(a,), backward_fn=bw, op="tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        accumulate_grad(a, np.asarray(g) * out)

    return Tensor(out, parents=(a,), backward_fn=bw, op="exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError(f"log: non-positive input (min={a.data.min()})")

    def bw(g):
        accumulate_grad(a, np.asarray(g) / a.data)

    return Tensor(np.log(a.data), parents=(a,), backward_fn=bw, op="log")


def max_with_zero(a) -> Tensor:
    """Elementwise max(x, 0); subgradient at 0 taken as 0."""
    a = _as_tensor(a)
    mask = (a.data > 0.0).astype(np.float64)

    def bw(g):
        accumulate_grad(a, np.asarray(g) * mask)

    return Tensor(a.data * mask, parents=(a,), backward_fn=bw, op="max_with_zero")


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        accumulate_grad(a, np.full_like(a.data, float(np.asarray(g))))

    return Tensor(np.sum(a.data), parents=(a,), backward_fn=bw, op="sum_all")


def mean_of(tensors) -> Tensor:
    """Mean of a list of scalar tensors."""
    if not tensors:
        raise ValueError("mean_of: empty list")
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(tensors))


def squared_euclidean(a, b) -> Tensor:
    """Sum of squared differences, as a single fused node."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"squared_euclidean: shapes {a.data.shape} and {b.data.shape} differ")
    d = a.data - b.data

    def bw(g):
        g = float(np.asarray(g))
        accumulate_grad(a, 2.0 * g * d)
        accumulate_grad(b, -2.0 * g * d)

    return Tensor(np.sum(d * d), parents=(a, b), backward_fn=bw, op="squared_euclidean")


def l2_normalize(a) -> Tensor:
    a = _as_tensor(a)
    norm = float(np.linalg.norm(a.data))
    if norm == 0.0:
        raise ValueError("l2_normalize: zero vector")
    out = a.data / norm

    def bw(g):
        g = np.asarray(g)
        accumulate_grad(a, (g - out * np.dot(out, g)) / norm)

    return Tensor(out, parents=(a,), backward_fn=bw, op="l2_normalize")


def softmax_cross_entropy(logits, label: int) -> Tensor:
    """-log softmax(logits)[label], computed with max-subtraction."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: logits must be 1-D, got shape {logits.data.shape}")
    k = int(label)
    n = logits.data.shape[0]
    if not 0 <= k < n:
        raise ValueError(f"softmax_cross_entropy: label {k} out of range for {n} classes")
    shifted = logits.data - logits.data.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    probs = np.exp(shifted - log_z)
    loss = log_z - shifted[k]

    def bw(g):
        g = float(np.asarray(g))
        grad = probs.copy()
        grad[k] -= 1.0
        accumulate_grad(logits, g * grad)

    return Tensor(loss, parents=(logits,), backward_fn=bw, op="softmax_cross_entropy")


def embedding_row(W, idx: int) -> Tensor:
    """Row lookup with row-sparse gradient."""
    W = _as_tensor(W)
    idx = int(idx)
    if not 0 <= idx < W.data.shape[0]:
        raise ValueError(f"embedding_row: id {idx} out of range for table with {W.data.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(W.data)
        full[idx] = np.asarray(g)
        accumulate_grad(W, full)

    return Tensor(W.data[idx].copy(), parents=(W,), backward_fn=bw, op="embedding_row")


def straight_through_threshold(soft, threshold=0.5) -> Tensor:
    """Forward: 1[soft >= threshold].  Backward: identity onto the soft value."""
    soft = _as_tensor(soft)
    hard = (soft.data >= threshold).astype(np.float64)

    def bw(g):
        accumulate_grad(soft, g)

    return Tensor(hard, parents=(soft,), backward_fn=bw, op="straight_through")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)


def grad_check(fn, params, epsilon=1e-6, tolerance=1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central finite differences.

    ``fn`` must be a deterministic scalar-valued closure over ``params``
    (stochastic pieces must run with a fixed noise sample).  Relative error
    uses a unit floor: |a - n| / max(|a|, |n|, 1).
    """
    zero_grads(params)
    loss = fn()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    report = GradCheckReport()
    for j, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = fn().item()
            flat[i] = orig - epsilon
            f_minus = fn().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)
        ga_flat = ga.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ga_flat), np.abs(numeric)), 1.0)
        rel = np.abs(ga_flat - numeric) / denom
        max_err = float(rel.max()) if rel.size else 0.0
        name = p.name or f"param{j}"
        report.entries.append(ParamCheck(name=name, max_rel_err=max_err, passed=max_err < tolerance))
    return report

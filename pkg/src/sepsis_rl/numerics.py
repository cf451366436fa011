"""Dense float64 tensors with a reverse-mode tape, Adam, and gradient checking.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the result records its parents and a closure that pushes the
upstream gradient back to them. :meth:`Tensor.backward` walks the recorded
graph in reverse topological order.

Ops whose inputs are all constants skip recording, so inference paths (target
networks, evaluation) run as plain numpy.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, NumericError

log = logging.getLogger(__name__)

DTYPE = np.float64
_grad_enabled = True
_kink_log: list | None = None  # activation sign patterns, recorded during gradient checks


@contextmanager
def no_grad():
    """Run ops without recording a tape, even on parameters."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def record_kinks():
    """Collect the sign pattern of every piecewise-linear activation evaluated inside."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_pattern(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(mask)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf on the tape."""
        if not self.requires_grad:
            raise NumericError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("grad must be given for a non-scalar output")
            grad = np.ones_like(self.data)

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

        # intermediate grads live only for this pass
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))


class Param(Tensor):
    """A learnable leaf tensor; its gradient buffer always exists."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        ),
    )


def relu(x) -> Tensor:
    """Elementwise max(0, x). The subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    _log_pattern(mask)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: ((x, g * mask),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _log_pattern(mask)
    scale = np.where(mask, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: ((x, g * scale),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: ((x, 2.0 * x.data * g),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def back(g):
        if not a.requires_grad:
            ga = None
        elif b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
        else:
            ga = g @ b.data.T
        if b.requires_grad:
            gb = np.outer(a.data, g) if a.ndim == 1 else a.data.T @ g
        else:
            gb = None
        return ((a, ga), (b, gb))

    return _make(a.data @ b.data, (a, b), back)


def linear(x, W, b=None) -> Tensor:
    """y = x W + b for a vector x[n_in] or a row batch x[m, n_in]."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: x{x.shape} does not conform to W{W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} vs W{W.shape}")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data

    def back(g):
        out = [
            (x, g @ W.data.T if x.requires_grad else None),
            (W, (np.outer(x.data, g) if x.ndim == 1 else x.data.T @ g) if W.requires_grad else None),
        ]
        if b is not None:
            out.append((b, g if g.ndim == 1 else g.sum(axis=0)))
        return out

    parents = (x, W) if b is None else (x, W, b)
    return _make(y, parents, back)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return [(p, piece) for p, piece in zip(parts, np.split(g, cuts, axis=axis))]

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def total(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sum(x.data), (x,), lambda g: ((x, np.broadcast_to(g, x.shape)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(np.mean(x.data), (x,), lambda g: ((x, np.broadcast_to(g / n, x.shape)),))


def sum_rows(x) -> Tensor:
    """Sum over the last axis."""
    x = as_tensor(x)
    return _make(x.data.sum(axis=-1), (x,), lambda g: ((x, np.broadcast_to(g[..., None], x.shape)),))


# ---------------------------------------------------------------- indexing / scatter


def take_rows(x, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate on the way back."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        return ((x, _scatter_matrix(index, n) @ g),)

    return _make(x.data[index], (x,), back)


def pick(x, cols: np.ndarray) -> Tensor:
    """Select ``x[i, cols[i]]`` for each row."""
    x = as_tensor(x)
    rows = np.arange(x.shape[0])
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x.data)
        out[rows, cols] = g
        return ((x, out),)

    return _make(x.data[rows, cols], (x,), back)


def _scatter_matrix(index: np.ndarray, n_out: int, weights: np.ndarray | None = None) -> sp.csr_matrix:
    m = len(index)
    w = np.ones(m) if weights is None else weights
    return sp.csr_matrix((w, (index, np.arange(m))), shape=(n_out, m))


def segment_sum(x, index: np.ndarray, n_out: int) -> Tensor:
    """out[k] = sum of rows x[i] with index[i] == k (zero for empty segments)."""
    x = as_tensor(x)
    S = _scatter_matrix(np.asarray(index, dtype=np.int64), n_out)
    return _make(S @ x.data, (x,), lambda g: ((x, S.T @ g),))


def segment_mean(x, index: np.ndarray, n_out: int) -> Tensor:
    """Per-segment mean of rows; an empty segment yields a zero row."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    counts = np.bincount(index, minlength=n_out).astype(DTYPE)
    w = 1.0 / counts[index] if len(index) else np.zeros(0)
    S = _scatter_matrix(index, n_out, w)
    return _make(S @ x.data, (x,), lambda g: ((x, S.T @ g),))


def segment_softmax(scores, index: np.ndarray, n_out: int) -> Tensor:
    """Softmax of a score vector within each segment (max-subtracted)."""
    scores = as_tensor(scores)
    index = np.asarray(index, dtype=np.int64)
    s = scores.data
    seg_max = np.full(n_out, -np.inf)
    np.maximum.at(seg_max, index, s)
    e = np.exp(s - seg_max[index])
    S = _scatter_matrix(index, n_out)
    denom = S @ e
    alpha = e / denom[index]

    def back(g):
        inner = S @ (alpha * g)
        return ((scores, alpha * (g - inner[index])),)

    return _make(alpha, (scores,), back)


def scale_rows(x, w) -> Tensor:
    """Multiply row i of x by scalar w[i]."""
    x, w = as_tensor(x), as_tensor(w)
    return _make(
        x.data * w.data[:, None],
        (x, w),
        lambda g: (
            (x, g * w.data[:, None] if x.requires_grad else None),
            (w, np.sum(g * x.data, axis=1) if w.requires_grad else None),
        ),
    )


# ---------------------------------------------------------------- distributions / losses


def softmax(v) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    z = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((v, p * (g - np.sum(g * p, axis=-1, keepdims=True))),)

    return _make(p, (v,), back)


def log_softmax(v) -> Tensor:
    v = as_tensor(v)
    z = v.data - v.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return ((v, g - p * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (v,), back)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        return _ce_rows(_as_row(logits), labels.reshape(1))
    return _ce_rows(logits, labels)


def _as_row(x: Tensor) -> Tensor:
    return _make(x.data[None, :], (x,), lambda g: ((x, g[0]),))


def _ce_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    if logits.shape[0] != len(labels):
        raise DimensionError("cross_entropy: label count differs from logit rows")
    return mul(mean(pick(log_softmax(logits), labels)), -1.0)


def gaussian_nll_unit_var(pred, target) -> Tensor:
    """0.5 * sum (pred - target)^2; the log-normalizer is dropped."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"gaussian_nll_unit_var: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data

    def back(g):
        return ((pred, g * diff), (target, -g * diff))

    return _make(0.5 * np.sum(diff * diff), (pred, target), back)


def huber(x, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty."""
    x = as_tensor(x)
    a = np.abs(x.data)
    small = a <= delta
    out = np.where(small, 0.5 * x.data**2, delta * (a - 0.5 * delta))
    d = np.where(small, x.data, delta * np.sign(x.data))
    return _make(out, (x,), lambda g: ((x, g * d),))


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize a row batch with its own statistics.

    Returns the output together with the batch mean and biased variance so
    the caller can maintain running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    m = x.shape[0]
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def back(g):
        gxhat = g * gamma.data
        gx = inv / m * (m * gxhat - gxhat.sum(axis=0) - xhat * np.sum(gxhat * xhat, axis=0))
        return ((x, gx), (gamma, np.sum(g * xhat, axis=0)), (beta, g.sum(axis=0)))

    return _make(out, (x, gamma, beta), back), mu, var


# ---------------------------------------------------------------- initialization


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param: Param, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(param: Param, state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    ``weight_decay`` adds an L2 term to the gradient before the moment
    updates (coupled decay). An exactly zero gradient skips the step, so the
    value and the moments stay as they are.
    """
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to adam_step")
    if state.weight_decay:
        g = g + state.weight_decay * param.data
    if not g.any():
        return
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam over an ordered collection of parameters."""

    def __init__(self, params: Iterable[Param], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.states = [
            AdamState.for_param(p, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)
            for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, s)


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _patterns_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def central_difference(evaluate: Callable[[float], float], h: float, refinements: int = 3) -> float:
    """(f(x+h) - f(x-h)) / 2h for ``evaluate(delta) = f(x + delta)``.

    If an activation changes sign between the two points the difference
    straddles a kink and says nothing about the derivative, so h shrinks
    tenfold and the pair is retried. Returns nan if every attempt straddles one.
    """
    for _ in range(refinements + 1):
        with record_kinks() as plus:
            fp = evaluate(h)
        with record_kinks() as minus:
            fm = evaluate(-h)
        if _patterns_equal(plus, minus):
            return (fp - fm) / (2.0 * h)
        h /= 10.0
    return float("nan")


def _worst(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    keep = ~np.isnan(numeric)
    if not keep.all():
        log.debug("gradient check: %d coordinate(s) sit on an activation kink", int((~keep).sum()))
    err = relative_error(analytic[keep], numeric[keep], floor)
    return float(err.max()) if len(err) else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, *,
               coords: np.ndarray | None = None, floor: float = 1e-4) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. ``coords`` limits
    the comparison to a subset of flat indices.
    """
    return grad_check_detail(f, x, h, coords=coords, floor=floor).max_rel_error


def grad_check_detail(f, x, h=1e-5, *, coords=None, floor=1e-4) -> GradCheckResult:
    x0 = np.array(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DTYPE), copy=True)
    p = Param(x0)
    out = f(p)
    out.backward()
    analytic = p.grad.reshape(-1)
    flat_idx = np.arange(x0.size) if coords is None else np.asarray(coords)

    def at(i, delta):
        xs = x0.copy().reshape(-1)
        xs[i] += delta
        return f(Tensor(xs.reshape(x0.shape))).item()

    numeric = np.array([central_difference(lambda d: at(i, d), h) for i in flat_idx])
    a = analytic[flat_idx]
    return GradCheckResult(_worst(a, numeric, floor), a, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5, *,
                      per_param: int | None = None, rng: np.random.Generator | None = None,
                      floor: float = 1e-4) -> float:
    """Check a loss against finite differences over (a sample of) every parameter entry.

    ``loss_fn`` re-runs the forward pass using the current parameter values.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1).copy()
        n = p.data.size
        if per_param is None or per_param >= n:
            idx = np.arange(n)
        else:
            idx = (rng or np.random.default_rng(0)).choice(n, size=per_param, replace=False)
        flat = p.data.reshape(-1)

        def at(i, delta):
            orig = flat[i]
            flat[i] = orig + delta
            try:
                return loss_fn().item()
            finally:
                flat[i] = orig

        numeric = np.array([central_difference(lambda d: at(i, d), h) for i in idx])
        worst = max(worst, _worst(analytic[idx], numeric, floor))
    return worst

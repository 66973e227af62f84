"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything runs on numpy arrays in 64-bit precision. Each operation records
its inputs and a backward closure on the result tensor; calling
``backward()`` on a scalar output walks the tape in reverse topological
order and accumulates gradients additively into ``.grad`` buffers. Gradients
are never cleared implicitly: call ``zero_grads`` between steps.

Every forward result and every gradient accumulation is checked for
NaN/Inf and raises ``NumericalError`` on violation.

Tensors and parameter stores are single-writer: forward passes on a fixed
parameter snapshot are safe to share across threads, mutation is not.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NumericalError(RuntimeError):
    """A value or gradient became NaN or infinite."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (forward-only compute)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        _check_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g
        _check_finite(self.grad, "gradient accumulation")

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar (size-1) output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Intermediate grads are only needed during the sweep; drop them so
        # repeated backwards do not double-count through stale buffers.
        for node in order:
            if node._backward is not None:
                node.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; decoder tapes get far deeper than the recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _make(result: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(result, "op result")
    out = Tensor.__new__(Tensor)
    out.data = result
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: x[n, d] + b[d]."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {b.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return _make(x.data + b.data, (x, b), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep)

    return _make(np.where(keep, x.data, 0.0), (x,), backward)


_ELEMENTWISE_BINARY = {"add": add, "mul": mul}
_ELEMENTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(kind: str, *args: Tensor) -> Tensor:
    """Dispatch surface over the pointwise ops by name."""
    if kind in _ELEMENTWISE_BINARY:
        if len(args) != 2:
            raise ValueError(f"{kind} takes two arguments")
        return _ELEMENTWISE_BINARY[kind](*args)
    if kind in _ELEMENTWISE_UNARY:
        if len(args) != 1:
            raise ValueError(f"{kind} takes one argument")
        return _ELEMENTWISE_UNARY[kind](*args)
    raise ValueError(f"unknown elementwise kind: {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _make(x.data * c, (x,), backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)

    return _make(x.data + c, (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g.reshape(-1)[0]))

    return _make(np.array([x.data.sum()]), (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(parts) == 0:
        raise ValueError("concat of an empty part list")
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ValueError("concat rank mismatch")
        for ax in range(ndim):
            if ax != axis and p.data.shape[ax] != parts[0].data.shape[ax]:
                raise ValueError(
                    f"concat shape mismatch off axis {axis}: "
                    f"{p.shape} vs {parts[0].shape}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                sl = [slice(None)] * ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                p.accumulate_grad(g[tuple(sl)])

    return _make(out_data, tuple(parts), backward)


def lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather from table[V, d]; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("lookup ids must be a flat sequence")
    v = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"lookup id out of range [0, {v})")

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table.accumulate_grad(acc)

    return _make(table.data[idx].copy(), (table,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep)

    return _make(x.data * keep, (x,), backward)


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; accepts [n, C] arrays."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor,
    targets: Sequence[int],
    mask: Sequence[bool] | None = None,
    weights: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Per-row cross-entropy over logits[n, C].

    Returns ``(loss, probs)`` where loss defaults to the mean of
    ``-log softmax(logits)[target]`` over unmasked rows. When ``weights`` is
    given it replaces the uniform 1/|unmasked| row weighting (rows with
    weight 0 contribute nothing); this is how callers express per-example
    averaging inside a flattened batch. ``probs`` is detached from the tape.
    """
    if logits.data.ndim != 2:
        raise ValueError("logits must be [n, C]")
    n, c = logits.data.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise ValueError("targets length must match logit rows")
    if weights is None:
        if mask is None:
            m = np.ones(n, dtype=bool)
        else:
            m = np.asarray(mask, dtype=bool)
            if m.shape != (n,):
                raise ValueError("mask length must match logit rows")
        count = int(m.sum())
        if count == 0:
            raise ValueError("all rows masked in softmax_cross_entropy")
        w = m.astype(np.float64) / count
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError("weights length must match logit rows")
    live = w != 0.0
    if live.any() and (tgt[live].min() < 0 or tgt[live].max() >= c):
        raise IndexError(f"target class out of range [0, {c})")
    tgt = np.where(live, tgt, 0)

    probs = stable_softmax(logits.data)
    rows = np.arange(n)
    nll = -np.log(probs[rows, tgt])
    loss_val = np.array([float((w * np.where(live, nll, 0.0)).sum())])

    def backward(g):
        if logits.requires_grad:
            gl = probs * w[:, None]
            gl[rows, tgt] -= w
            logits.accumulate_grad(gl * g.reshape(-1)[0])

    loss = _make(loss_val, (logits,), backward)
    return loss, Tensor(probs)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam buffers for a named parameter collection."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], lr: float = 1e-4,
                   beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place; increments state.t by one."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        _check_finite(p.data, f"adam update of {name!r}")
    return state


def zero_grads(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    tensors = params.values() if isinstance(params, Mapping) else params
    for p in tensors:
        p.grad = None


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Max relative error per parameter from a central-difference sweep."""

    per_param: dict[str, float]
    eps: float
    atol: float = 1e-9

    @property
    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def failures(self, threshold: float = 1e-4) -> dict[str, float]:
        return {k: v for k, v in self.per_param.items() if v >= threshold}

    def ok(self, threshold: float = 1e-4) -> bool:
        return not self.failures(threshold)


def check_gradients(fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    eps: float = 1e-5, atol: float = 1e-9) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` against central
    finite differences, entry by entry, for every parameter.

    Entries whose absolute disagreement is below ``atol`` count as exact:
    central differences carry noise of order |f|*(machine eps)/eps, so a
    relative comparison is meaningless for near-zero gradient entries.
    """
    zero_grads(params)
    out = fn()
    if out.data.size != 1:
        raise ValueError("check_gradients requires a scalar computation")
    out.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            if abs(a - numeric) <= atol:
                continue
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        report[name] = worst
    zero_grads(params)
    return GradCheckReport(per_param=report, eps=eps, atol=atol)

"""Reverse-mode automatic differentiation over dense float64 tensors.

Every operation appends a record to its ``Tape``; ``backward`` walks the
records in reverse append order, so gradient accumulation order is fixed by
the order the forward pass ran in. Only the operators the model and the
losses need are provided; there is no general broadcasting.
"""

import math
from dataclasses import dataclass
from typing import (
    Callable,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from copyforge.exceptions import (
    ContractError,
    DimensionError,
    EmptyDistributionError,
    NumericError,
    SlotIndexError,
)
from copyforge.models import GradCheckReport

LOG_FLOOR = 1e-10
MAX_CHECK_COORDS = 200

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
IndexLike = Union[int, Sequence[int], np.ndarray]


@dataclass(frozen=True)
class _Record:
    op: str
    inputs: Tuple[int, ...]
    requires: Tuple[bool, ...]
    output: int
    backward: Optional[BackwardFn]


class Tensor:
    """Array value bound to one node of a tape."""

    __slots__ = ("tape", "node_id", "values", "requires_grad")

    def __init__(
        self, tape: "Tape", node_id: int, values: np.ndarray, requires_grad: bool
    ) -> None:
        self.tape = tape
        self.node_id = node_id
        self.values = values
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tape.grads.get(self.node_id)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError("item() needs a single-element tensor", reason="size")
        return float(self.values.reshape(-1)[0])

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return apply_unary("neg", self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(id={self.node_id}, shape={self.shape})"


class Tape:
    """Append-only record of operations, confined to one thread."""

    def __init__(self, grad_enabled: bool = True) -> None:
        self.grad_enabled = grad_enabled
        self.nodes: List[_Record] = []
        self.grads: Dict[int, np.ndarray] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        node_id = self._next_id
        self._next_id += 1
        return node_id

    def leaf(self, values: Union[np.ndarray, Sequence[float], float], requires_grad: bool = False) -> Tensor:
        array = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericError("Leaf values must be finite", op="leaf")
        return Tensor(self, self._new_id(), array, requires_grad and self.grad_enabled)

    def constant(self, values: Union[np.ndarray, Sequence[float], float]) -> Tensor:
        return self.leaf(values, requires_grad=False)

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        values: np.ndarray,
        backward_fn: BackwardFn,
    ) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise ContractError(f"{op}: operand belongs to another tape", reason="tape")
        if not np.all(np.isfinite(values)):
            raise NumericError(f"{op} produced a non-finite value", op=op)
        requires = tuple(t.requires_grad for t in inputs)
        needs_grad = self.grad_enabled and any(requires)
        out = Tensor(self, self._new_id(), values, needs_grad)
        if self.grad_enabled:
            self.nodes.append(
                _Record(
                    op=op,
                    inputs=tuple(t.node_id for t in inputs),
                    requires=requires,
                    output=out.node_id,
                    backward=backward_fn if needs_grad else None,
                )
            )
        return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ", op=op, shapes=[a.shape, b.shape])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either operand may be a vector (but not both)."""
    if a.values.ndim not in (1, 2) or b.values.ndim not in (1, 2) or (
        a.values.ndim == 1 and b.values.ndim == 1
    ):
        raise DimensionError("matmul: unsupported ranks", op="matmul", shapes=[a.shape, b.shape])
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(
            "matmul: inner dimensions disagree", op="matmul", shapes=[a.shape, b.shape]
        )
    av, bv = a.values, b.values

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        da = g @ bv.T if bv.ndim == 2 else np.outer(g, bv)
        db = np.outer(av, g) if av.ndim == 1 else av.T @ g
        return da, db

    return a.tape.record("matmul", (a, b), av @ bv, _backward)


def apply_unary(kind: str, x: Tensor, c: float = 1.0) -> Tensor:
    """Elementwise tanh | sigmoid | relu | log | neg | scale (by ``c``)."""
    v = x.values
    if kind == "tanh":
        out = np.tanh(v)

        def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
            return (g * (1.0 - out * out),)

    elif kind == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * v))

        def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
            return (g * out * (1.0 - out),)

    elif kind == "relu":
        out = np.maximum(v, 0.0)

        def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
            return (g * (v > 0.0),)

    elif kind == "log":
        if np.any(v < 0.0):
            raise NumericError("log of a negative value", op="log")
        floored = np.maximum(v, LOG_FLOOR)
        out = np.log(floored)
        live = v >= LOG_FLOOR

        def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
            return (np.where(live, g / floored, 0.0),)

    elif kind == "neg":
        out = -v

        def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
            return (-g,)

    elif kind == "scale":
        out = c * v

        def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
            return (c * g,)

    else:
        raise ContractError(f"Unknown unary op '{kind}'", reason="kind")
    return x.tape.record(kind, (x,), out, _backward)


def softmax_masked(x: Tensor, mask: Union[Sequence[bool], np.ndarray]) -> Tensor:
    """Softmax over the last axis; masked positions get exactly zero."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != (x.shape[-1],):
        raise DimensionError(
            "softmax_masked: mask length differs", op="softmax_masked", shapes=[x.shape, m.shape]
        )
    if not m.any():
        raise EmptyDistributionError()
    z = np.where(m, x.values, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(z), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return x.tape.record("softmax_masked", (x,), p, _backward)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError("concat_last: leading dims differ", op="concat_last", shapes=[a.shape, b.shape])
    if b.shape[-1] == 0:
        return a
    k = a.shape[-1]

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g[..., :k], g[..., k:]

    return a.tape.record("concat_last", (a, b), np.concatenate([a.values, b.values], axis=-1), _backward)


def scatter_sum(weights: Tensor, slot_of: Union[Sequence[int], np.ndarray], n_slots: int) -> Tensor:
    """out[s] = sum of weights[i] over positions i with slot_of[i] == s."""
    slots = np.asarray(slot_of, dtype=np.int64)
    if slots.shape != weights.shape or weights.values.ndim != 1:
        raise DimensionError(
            "scatter_sum: slot map must align with weights", op="scatter_sum", shapes=[weights.shape, slots.shape]
        )
    if slots.size and (slots.min() < 0 or slots.max() >= n_slots):
        bad = int(slots[(slots < 0) | (slots >= n_slots)][0])
        raise SlotIndexError("scatter_sum: slot out of range", index=bad, size=n_slots)
    out = np.zeros(n_slots, dtype=np.float64)
    np.add.at(out, slots, weights.values)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g[slots],)

    return weights.tape.record("scatter_sum", (weights,), out, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return a.tape.record("add", (a, b), a.values + b.values, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return a.tape.record("sub", (a, b), a.values - b.values, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    av, bv = a.values, b.values
    return a.tape.record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a last-axis vector to a vector or to every row of a matrix."""
    if bias.values.ndim != 1 or x.shape[-1] != bias.shape[0] or x.values.ndim > 2:
        raise DimensionError("add_bias: bias must match the last axis", op="add_bias", shapes=[x.shape, bias.shape])
    rows = x.values.ndim == 2

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g, g.sum(axis=0) if rows else g

    return x.tape.record("add_bias", (x, bias), x.values + bias.values, _backward)


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Scale a tensor by a single-element tensor."""
    if s.values.size != 1:
        raise DimensionError("mul_scalar: scale must have one element", op="mul_scalar", shapes=[x.shape, s.shape])
    xv = x.values
    sv = float(s.values.reshape(-1)[0])
    s_shape = s.values.shape

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g * sv, np.full(s_shape, float(np.sum(g * xv)))

    return x.tape.record("mul_scalar", (x, s), xv * sv, _backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.values.shape
    return x.tape.record(
        "sum_all", (x,), np.array(x.values.sum()), lambda g: (np.full(shape, float(g)),)
    )


def add_n(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        raise ContractError("add_n needs at least one term", reason="empty")
    first = terms[0]
    for t in terms[1:]:
        _check_same_shape("add_n", first, t)
    total = np.zeros_like(first.values)
    for t in terms:
        total = total + t.values
    n = len(terms)
    return first.tape.record("add_n", tuple(terms), total, lambda g: tuple(g for _ in range(n)))


def take(x: Tensor, index: int) -> Tensor:
    """Single element of a vector, as a 0-d tensor."""
    if x.values.ndim != 1:
        raise DimensionError("take expects a vector", op="take", shapes=[x.shape])
    if not 0 <= index < x.shape[0]:
        raise SlotIndexError("take: index out of range", index=index, size=x.shape[0])
    shape = x.values.shape

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros(shape)
        out[index] = float(g)
        return (out,)

    return x.tape.record("take", (x,), np.array(x.values[index]), _backward)


def gather_rows(table: Tensor, ids: IndexLike) -> Tensor:
    """Embedding lookup; an int id returns a vector, a sequence a matrix."""
    idx = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise SlotIndexError("gather_rows: id out of range", index=int(idx.max()), size=n_rows)
    shape = table.values.shape

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return table.tape.record("gather_rows", (table,), table.values[idx], _backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[-1]:
        raise DimensionError("slice_last: bad bounds", op="slice_last", shapes=[x.shape])
    shape = x.values.shape

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return x.tape.record("slice_last", (x,), x.values[..., start:stop], _backward)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise DimensionError("transpose expects a matrix", op="transpose", shapes=[x.shape])
    return x.tape.record("transpose", (x,), x.values.T.copy(), lambda g: (g.T,))


def pad_last(x: Tensor, size: int) -> Tensor:
    """Zero-pad the last axis up to ``size``."""
    k = x.shape[-1]
    if size < k:
        raise DimensionError("pad_last: target smaller than input", op="pad_last", shapes=[x.shape])
    out = np.zeros(x.shape[:-1] + (size,))
    out[..., :k] = x.values
    return x.tape.record("pad_last", (x,), out, lambda g: (g[..., :k],))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    v = x.values
    inside = (v >= lo) & (v <= hi)
    return x.tape.record("clamp", (x,), np.clip(v, lo, hi), lambda g: (g * inside,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis with learned gain and bias."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            "layer_norm: gain/bias must match last axis", op="layer_norm", shapes=[x.shape, gain.shape, bias.shape]
        )
    v = x.values
    centered = v - v.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gv = gain.values
    rows = v.ndim == 2

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gv
        dx = (inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).sum(axis=0) if rows else g * xhat
        dbias = g.sum(axis=0) if rows else g
        return dx, dgain, dbias

    return x.tape.record("layer_norm", (x, gain, bias), xhat * gv + bias.values, _backward)


def backward(tape: Tape, root: Tensor) -> Dict[int, np.ndarray]:
    """Populate ``tape.grads`` with d(root)/d(node) for every node needing it."""
    if root.tape is not tape:
        raise ContractError("backward root belongs to another tape", reason="tape")
    if root.values.size != 1:
        raise ContractError("backward root must be a scalar", reason="non-scalar root")
    if not tape.grad_enabled:
        raise ContractError("backward on a tape with gradients disabled", reason="no-grad")
    tape.grads = {root.node_id: np.ones_like(root.values)}
    for rec in reversed(tape.nodes):
        if rec.output > root.node_id or rec.backward is None:
            continue
        g = tape.grads.get(rec.output)
        if g is None:
            continue
        for node_id, needs, gi in zip(rec.inputs, rec.requires, rec.backward(g)):
            if not needs or gi is None:
                continue
            prev = tape.grads.get(node_id)
            tape.grads[node_id] = gi if prev is None else prev + gi
    return tape.grads


LossFn = Callable[[Tape, Dict[str, Tensor]], Tensor]


def analytic_gradients(
    loss_fn: LossFn, params: Mapping[str, np.ndarray]
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss value and reverse-mode gradients for every named parameter."""
    tape = Tape()
    leaves = {name: tape.leaf(value, requires_grad=True) for name, value in params.items()}
    loss = loss_fn(tape, leaves)
    backward(tape, loss)
    grads = {
        name: tape.grads.get(leaf.node_id, np.zeros_like(leaf.values))
        for name, leaf in leaves.items()
    }
    return loss.item(), grads


def _forward_value(loss_fn: LossFn, params: Mapping[str, np.ndarray]) -> float:
    tape = Tape(grad_enabled=False)
    leaves = {name: tape.leaf(value) for name, value in params.items()}
    value = loss_fn(tape, leaves).item()
    if not math.isfinite(value):
        raise NumericError("Loss is not finite", op="finite_diff_check")
    return value


def check_gradients(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    max_coords: int = MAX_CHECK_COORDS,
) -> GradCheckReport:
    """Compare given gradients against central finite differences."""
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps={eps} outside [1e-7, 1e-3]", reason="eps")
    work = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    coords = [(name, i) for name, value in work.items() for i in range(value.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[int(k)] for k in picked]

    worst = (0.0, "", -1)
    for name, i in coords:
        flat = work[name].reshape(-1)
        original = flat[i]
        flat[i] = original + eps
        f_plus = _forward_value(loss_fn, work)
        flat[i] = original - eps
        f_minus = _forward_value(loss_fn, work)
        flat[i] = original
        g_fd = (f_plus - f_minus) / (2.0 * eps)
        g_ad = float(np.asarray(analytic[name]).reshape(-1)[i])
        rel = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
        if rel > worst[0] or worst[2] < 0:
            worst = (rel, name, i)

    return GradCheckReport(
        max_rel_error=worst[0],
        n_checked=len(coords),
        passed=worst[0] <= tol,
        worst_param=worst[1] or None,
        worst_index=worst[2] if worst[2] >= 0 else None,
        eps=eps,
        tol=tol,
    )


def finite_diff_check(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    max_coords: int = MAX_CHECK_COORDS,
) -> GradCheckReport:
    _, grads = analytic_gradients(loss_fn, params)
    return check_gradients(loss_fn, params, grads, eps=eps, tol=tol, seed=seed, max_coords=max_coords)

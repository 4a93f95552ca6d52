"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is deliberately small: just enough to express an LSTM
encoder/decoder with additive attention, softmax cross-entropy, and a
hinge term. Graphs are define-by-run: entering a ``Tape`` context records
every primitive application; ``backward`` replays the record in reverse.
Outside a tape, all operations are plain numpy evaluations (used for
inference and finite differencing).
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class NonFiniteError(ArithmeticError):
    """Raised when a primitive produces NaN or Inf values."""


class TapeError(RuntimeError):
    """Raised on computation-record misuse (e.g. double backward)."""


_ids = itertools.count()
_active = threading.local()


def _current_tape() -> Optional["Tape"]:
    return getattr(_active, "tape", None)


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "node_id", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = True, name: str = ""):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_ids)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{label})"


def tensor(values, requires_grad: bool = True, name: str = "") -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def const(values, name: str = "") -> Tensor:
    """A leaf that never receives a gradient (masks, one-hots, labels)."""
    return Tensor(values, requires_grad=False, name=name)


@dataclass
class TapeEntry:
    """One recorded primitive application."""

    kind: str
    input_ids: tuple
    output_id: int
    attrs: dict
    saved: Any = None


@dataclass
class Tape:
    """Ordered computation record for one forward pass.

    Entries are appended in creation order, so every input id precedes its
    consumer. A tape supports exactly one ``backward`` call; rebuild the
    graph (re-run forward under a fresh tape) to differentiate again.
    """

    entries: list = field(default_factory=list)
    tensors: dict = field(default_factory=dict)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise TapeError("nested tapes are not supported")
        _active.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active.tape = None

    def record(self, kind, inputs, output, attrs, saved) -> None:
        for t in inputs:
            self.tensors.setdefault(t.node_id, t)
        self.tensors[output.node_id] = output
        self.entries.append(
            TapeEntry(kind, tuple(t.node_id for t in inputs), output.node_id, attrs, saved)
        )

    def leaf_ids(self) -> list:
        produced = {e.output_id for e in self.entries}
        seen, leaves = set(), []
        for e in self.entries:
            for i in e.input_ids:
                if i not in produced and i not in seen:
                    seen.add(i)
                    leaves.append(i)
        return leaves

    def replay(self) -> bool:
        """Re-run the record forward from leaf values; True iff every
        recorded output is reproduced bit-exactly."""
        values = {i: self.tensors[i].values for i in self.leaf_ids()}
        for e in self.entries:
            spec = _OPS[e.kind]
            ins = [values[i] for i in e.input_ids]
            out, _ = spec.forward(ins, e.attrs)
            if not np.array_equal(out, self.tensors[e.output_id].values):
                return False
            values[e.output_id] = out
        return True


@dataclass
class OpSpec:
    forward: Callable  # (input_arrays, attrs) -> (out_array, saved)
    backward: Callable  # (grad, saved, input_arrays, out_array, attrs) -> list of grads


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive implementations
# ---------------------------------------------------------------------------


def _fw_matmul(ins, attrs):
    a, b = ins
    if a.ndim == 0 or b.ndim == 0 or b.ndim > 2:
        raise ShapeMismatchError(f"matmul expects (..., K) x (K,) or (K, M); got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return np.dot(a, b), None


def _bw_matmul(g, saved, ins, out, attrs):
    a, b = ins
    k = b.shape[0]
    if b.ndim == 1:
        ga = np.multiply.outer(g, b) if g.ndim else g * b
        gb = np.dot(a.reshape(-1, k).T, g.reshape(-1))
    else:
        ga = np.dot(g, b.T)
        gb = np.dot(a.reshape(-1, k).T, g.reshape(-1, b.shape[1]))
    return [ga.reshape(a.shape), gb]


def _fw_add(ins, attrs):
    a, b = ins
    try:
        return np.add(a, b), None
    except ValueError:
        raise ShapeMismatchError(f"add cannot broadcast {a.shape} with {b.shape}") from None


def _bw_add(g, saved, ins, out, attrs):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)]


def _fw_mul(ins, attrs):
    a, b = ins
    try:
        return np.multiply(a, b), None
    except ValueError:
        raise ShapeMismatchError(f"elementwise-mul cannot broadcast {a.shape} with {b.shape}") from None


def _bw_mul(g, saved, ins, out, attrs):
    a, b = ins
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _fw_smul(ins, attrs):
    return ins[0] * attrs["scalar"], None


def _bw_smul(g, saved, ins, out, attrs):
    return [g * attrs["scalar"]]


def _fw_sadd(ins, attrs):
    return ins[0] + attrs["scalar"], None


def _bw_sadd(g, saved, ins, out, attrs):
    return [g]


def _fw_tanh(ins, attrs):
    out = np.tanh(ins[0])
    return out, out


def _bw_tanh(g, saved, ins, out, attrs):
    return [g * (1.0 - saved * saved)]


def _fw_sigmoid(ins, attrs):
    x = ins[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def _bw_sigmoid(g, saved, ins, out, attrs):
    return [g * saved * (1.0 - saved)]


def _fw_softmax(ins, attrs):
    x = ins[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, out


def _bw_softmax(g, saved, ins, out, attrs):
    dot = (g * saved).sum(axis=-1, keepdims=True)
    return [saved * (g - dot)]


def _fw_log_softmax(ins, attrs):
    # fused: subtract the row max before exponentiating so vocab-sized
    # logit rows cannot overflow
    x = ins[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return out, None


def _bw_log_softmax(g, saved, ins, out, attrs):
    soft = np.exp(out)
    return [g - soft * g.sum(axis=-1, keepdims=True)]


def _fw_log(ins, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(ins[0]), None


def _bw_log(g, saved, ins, out, attrs):
    return [g / ins[0]]


def _fw_relu0(ins, attrs):
    return np.maximum(ins[0], 0.0), None


def _bw_relu0(g, saved, ins, out, attrs):
    # sub-gradient 0 at exactly zero input: only strictly positive inputs
    # pass gradient through
    return [g * (ins[0] > 0.0)]


def _fw_sum(ins, attrs):
    return ins[0].sum(axis=attrs["axis"]), None


def _bw_sum(g, saved, ins, out, attrs):
    a = ins[0]
    axis = attrs["axis"]
    if axis is None:
        return [np.full(a.shape, g)]
    g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, a.shape).copy()]


def _fw_concat(ins, attrs):
    axis = attrs["axis"]
    ref = list(ins[0].shape)
    for a in ins[1:]:
        other = list(a.shape)
        if len(other) != len(ref) or any(
            i != axis % len(ref) and other[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeMismatchError(f"concat shapes disagree off axis {axis}: {ins[0].shape} vs {a.shape}")
    return np.concatenate(ins, axis=axis), None


def _bw_concat(g, saved, ins, out, attrs):
    axis = attrs["axis"]
    sizes = [a.shape[axis] for a in ins]
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _fw_embed(ins, attrs):
    table = ins[0]
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeMismatchError(f"embed-lookup table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatchError(
            f"embed-lookup id out of range for table of {table.shape[0]} rows"
        )
    return table[ids], None


def _bw_embed(g, saved, ins, out, attrs):
    table = ins[0]
    grad = np.zeros_like(table)
    np.add.at(grad, attrs["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
    return [grad]


def _fw_gather(ins, attrs):
    x = ins[0]
    ids = attrs["ids"]
    if ids.shape != x.shape[:-1]:
        raise ShapeMismatchError(f"gather index shape {ids.shape} does not match {x.shape[:-1]}")
    return np.take_along_axis(x, ids[..., None], axis=-1)[..., 0], None


def _bw_gather(g, saved, ins, out, attrs):
    x = ins[0]
    grad = np.zeros_like(x)
    np.put_along_axis(grad, attrs["ids"][..., None], g[..., None], axis=-1)
    return [grad]


def _fw_slice(ins, attrs):
    return ins[0][..., attrs["start"]: attrs["stop"]].copy(), None


def _bw_slice(g, saved, ins, out, attrs):
    grad = np.zeros_like(ins[0])
    grad[..., attrs["start"]: attrs["stop"]] = g
    return [grad]


def _fw_reshape(ins, attrs):
    return ins[0].reshape(attrs["shape"]), None


def _bw_reshape(g, saved, ins, out, attrs):
    return [g.reshape(ins[0].shape)]


_OPS = {
    "matmul": OpSpec(_fw_matmul, _bw_matmul),
    "add": OpSpec(_fw_add, _bw_add),
    "elementwise-mul": OpSpec(_fw_mul, _bw_mul),
    "scalar-mul": OpSpec(_fw_smul, _bw_smul),
    "scalar-add": OpSpec(_fw_sadd, _bw_sadd),
    "tanh": OpSpec(_fw_tanh, _bw_tanh),
    "sigmoid": OpSpec(_fw_sigmoid, _bw_sigmoid),
    "softmax": OpSpec(_fw_softmax, _bw_softmax),
    "log-softmax": OpSpec(_fw_log_softmax, _bw_log_softmax),
    "log": OpSpec(_fw_log, _bw_log),
    "max-with-zero": OpSpec(_fw_relu0, _bw_relu0),
    "sum": OpSpec(_fw_sum, _bw_sum),
    "concat": OpSpec(_fw_concat, _bw_concat),
    "embed-lookup": OpSpec(_fw_embed, _bw_embed),
    "gather": OpSpec(_fw_gather, _bw_gather),
    "slice": OpSpec(_fw_slice, _bw_slice),
    "reshape": OpSpec(_fw_reshape, _bw_reshape),
}


def apply_primitive(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Apply a primitive, recording it on the active tape (if any).

    Output values are checked for finiteness; a NaN/Inf result rejects the
    whole operation naming the primitive.
    """
    if kind not in _OPS:
        raise ValueError(f"unknown primitive kind {kind!r}")
    spec = _OPS[kind]
    arrays = [t.values for t in inputs]
    out_values, saved = spec.forward(arrays, attrs)
    if not np.all(np.isfinite(out_values)):
        raise NonFiniteError(f"primitive {kind!r} produced non-finite values")
    out = Tensor(out_values, requires_grad=any(t.requires_grad for t in inputs))
    tape = _current_tape()
    if tape is not None:
        tape.record(kind, inputs, out, attrs, saved)
    return out


# Thin functional wrappers; these are what the model code actually calls.

def matmul(a, b):
    return apply_primitive("matmul", a, b)


def add(a, b):
    return apply_primitive("add", a, b)


def mul(a, b):
    return apply_primitive("elementwise-mul", a, b)


def smul(a, scalar: float):
    return apply_primitive("scalar-mul", a, scalar=float(scalar))


def sadd(a, scalar: float):
    return apply_primitive("scalar-add", a, scalar=float(scalar))


def sub(a, b):
    return add(a, smul(b, -1.0))


def tanh(a):
    return apply_primitive("tanh", a)


def sigmoid(a):
    return apply_primitive("sigmoid", a)


def softmax(a):
    return apply_primitive("softmax", a)


def log_softmax(a):
    return apply_primitive("log-softmax", a)


def log(a):
    return apply_primitive("log", a)


def max_with_zero(a):
    return apply_primitive("max-with-zero", a)


def sum_(a, axis=None):
    return apply_primitive("sum", a, axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = -1):
    return apply_primitive("concat", *tensors, axis=axis)


def embed_lookup(table, ids):
    return apply_primitive("embed-lookup", table, ids=np.asarray(ids, dtype=np.int64))


def gather(a, ids):
    return apply_primitive("gather", a, ids=np.asarray(ids, dtype=np.int64))


def slice_last(a, start: int, stop: int):
    return apply_primitive("slice", a, start=int(start), stop=int(stop))


def reshape(a, shape):
    return apply_primitive("reshape", a, shape=tuple(shape))


def backward(loss: Tensor, tape: Tape) -> None:
    """Assign ``grad`` on every leaf of ``tape`` from a scalar loss.

    The tape is single-shot: a second call without re-running the forward
    pass is rejected.
    """
    if loss.values.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.entries:
        raise TapeError("backward on an empty computation record")
    if tape.consumed:
        raise TapeError("backward already ran on this record; re-run forward first")
    if loss.node_id not in tape.tensors:
        raise TapeError("loss tensor does not belong to this record")
    tape.consumed = True

    grads = {loss.node_id: np.ones_like(loss.values)}
    for e in reversed(tape.entries):
        g = grads.pop(e.output_id, None)
        if g is None:
            continue
        out_t = tape.tensors[e.output_id]
        ins = [tape.tensors[i] for i in e.input_ids]
        if not any(t.requires_grad for t in ins):
            continue
        in_grads = _OPS[e.kind].backward(g, e.saved, [t.values for t in ins], out_t.values, e.attrs)
        for t, ig in zip(ins, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + ig
            else:
                grads[t.node_id] = ig

    produced = {e.output_id for e in tape.entries}
    for i in tape.leaf_ids():
        t = tape.tensors[i]
        if not t.requires_grad:
            continue
        t.grad = grads.get(i)
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
        elif not np.all(np.isfinite(t.grad)):
            raise NonFiniteError(f"non-finite gradient for leaf {t.name or t.node_id}")
    # intermediates keep grads too when available (useful in tests)
    for i, g in grads.items():
        if i in produced:
            tape.tensors[i].grad = g


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def gradient_check(
    loss_builder: Callable[[], Tensor],
    params: dict,
    step: float = 1e-6,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_builder`` must rebuild the scalar loss from the current values
    of ``params`` (a name -> Tensor mapping) on every call, and must be
    deterministic: two tape-free evaluations that disagree are rejected.
    Relative error per coordinate is |a - f| / max(|a|, |f|, 1e-3).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    v1 = float(loss_builder().values.reshape(-1)[0])
    v2 = float(loss_builder().values.reshape(-1)[0])
    if v1 != v2:
        raise ValueError(f"loss_builder is not deterministic: {v1!r} != {v2!r}")

    with Tape() as tape:
        loss = loss_builder()
    backward(loss, tape)
    analytic = {name: np.array(t.grad, copy=True) for name, t in params.items()}

    entries = []
    for name, t in params.items():
        flat = t.values.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_builder().values.reshape(-1)[0])
            flat[i] = orig - step
            lo = float(loss_builder().values.reshape(-1)[0])
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-3)
        err = float(np.max(np.abs(a - fd) / denom)) if flat.size else 0.0
        entries.append(GradCheckEntry(name, err, err <= tol))
    return GradCheckReport(entries, tol)

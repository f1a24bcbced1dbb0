"""A small reverse-mode differentiation core on float64 numpy arrays.

Only the operations the model needs are provided.  Every operation builds a
new :class:`Tensor` whose ``_backward`` closure pushes the output gradient to
its inputs.  Operations created while a :class:`Tape` is active are appended to
it in execution order, so a reverse walk of the tape is a valid backward
schedule.  Without a tape, :func:`backward` falls back to a topological sort.

Reductions use fixed orders (``np.add.reduceat`` over stably sorted segment
ids) so forward results are bit-reproducible.
"""

from __future__ import annotations

import builtins
import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NEG_INF = -np.inf
DEFAULT_SLOPE = 0.01

_TAPES: list["Tape"] = []
_PATTERN_SINKS: list[list[np.ndarray]] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("division only by constants")
        return scale(self, 1.0 / c)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Tape:
    """Append-only record of operations, in execution (topological) order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, t: Tensor):
        return any(n is t for n in self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        for tape in _TAPES:
            tape.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out_data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c), "scale")


def leaky_relu(a: Tensor, slope: float = DEFAULT_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    for sink in _PATTERN_SINKS:
        sink.append(pos)
    out = np.where(pos, a.data, slope * a.data)
    return _result(out, (a,), lambda g: _accumulate(a, np.where(pos, g, slope * g)), "leaky_relu")


nonlinearity = leaky_relu


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data), "log")


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**p
    return _result(out, (a,), lambda g: _accumulate(a, g * p * a.data ** (p - 1)), "power")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: _accumulate(a, g * inside), "clip")


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: _accumulate(a, np.transpose(g, inverse)), "transpose"
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(orig)), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, piece)

    return _result(out, tensors, backward, "concat")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(np.asarray(out, dtype=DTYPE), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


class Segments:
    """Precomputed grouping of rows by integer id, reusable across calls.

    Sums are taken with ``np.add.reduceat`` over ids in stable-sorted order,
    so each group's reduction order is fixed and depends only on its members.
    """

    def __init__(self, ids, num_segments: int | None = None):
        ids = np.asarray(ids, dtype=np.int64)
        self.ids = ids
        self.num = int(num_segments) if num_segments is not None else (int(ids.max()) + 1 if len(ids) else 0)
        if len(ids) == 0 or bool((ids[1:] >= ids[:-1]).all()):
            self.order = None
            ordered = ids
        else:
            self.order = np.argsort(ids, kind="stable")
            ordered = ids[self.order]
        self.starts = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1]]) if len(ids) else ids
        self.present = ordered[self.starts] if len(ids) else ids
        self.is_sorted = self.order is None

    def __len__(self):
        return len(self.ids)

    def sum(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros((self.num,) + values.shape[1:], dtype=DTYPE)
        if len(self.ids) == 0:
            return out
        ordered = values if self.order is None else values[self.order]
        out[self.present] = np.add.reduceat(ordered, self.starts, axis=0)
        return out

    def max(self, values: np.ndarray) -> np.ndarray:
        out = np.full((self.num,) + values.shape[1:], NEG_INF)
        if len(self.ids) == 0:
            return out
        ordered = values if self.order is None else values[self.order]
        out[self.present] = np.maximum.reduceat(ordered, self.starts, axis=0)
        return out


def _segments(ids, num: int | None = None) -> Segments:
    if isinstance(ids, Segments):
        return ids
    return Segments(ids, num)


def gather_rows(a: Tensor, index) -> Tensor:
    """``a[index]`` along axis 0; backward scatters with a fixed reduction order.

    ``index`` may be a :class:`Segments` plan to reuse its sort across calls.
    """
    a = as_tensor(a)
    plan = index if isinstance(index, Segments) else None
    index = plan.ids if plan is not None else np.asarray(index, dtype=np.int64)
    rows = a.shape[0]

    def backward(g):
        seg = plan if plan is not None and plan.num == rows else Segments(index.reshape(-1), rows)
        _accumulate(a, seg.sum(g.reshape((-1,) + a.shape[1:])))

    return _result(a.data[index], (a,), backward, "gather_rows")


def take(a: Tensor, flat_index) -> Tensor:
    """Select entries of the flattened tensor."""
    return gather_rows(reshape(a, (-1,)), flat_index)


def embedding_lookup(table: Tensor, index) -> Tensor:
    index_arr = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if index_arr.size and (index_arr.min() < 0 or index_arr.max() >= rows):
        raise IndexError(f"embedding index out of range for table with {rows} rows")
    return gather_rows(table, index_arr)


def segment_sum(a: Tensor, segments, num_segments: int | None = None) -> Tensor:
    """Sum rows of ``a`` into buckets given per-row segment ids (or a :class:`Segments` plan)."""
    a = as_tensor(a)
    seg = _segments(segments, num_segments)
    out = seg.sum(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g[seg.ids]), "segment_sum")


# ---------------------------------------------------------------- softmaxes


def _mask_valid(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=DTYPE)
    return np.broadcast_to(m == 0, shape)


def softmax_rows(a: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis of ``a + additive_mask``.

    Mask entries must be 0 or ``-inf``.  Rows with every entry masked come out
    as zeros rather than NaN.
    """
    a = as_tensor(a)
    valid = _mask_valid(additive_mask, a.shape)
    if valid is None:
        z = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        masked = np.where(valid, a.data, NEG_INF)
        m = masked.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(valid, np.exp(np.where(valid, a.data - m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    # s is 0 only for fully masked rows; NaN must propagate so divergence is caught
    y = np.divide(e, s, out=np.zeros_like(e), where=s != 0)

    def backward(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), backward, "softmax_rows")


def neighbor_softmax(scores: Tensor, groups, num_groups: int | None = None) -> Tensor:
    """Softmax of per-edge scores within each destination group.

    ``scores`` has edges on axis 0 (extra trailing axes, e.g. heads, are
    normalized independently); ``groups`` gives the destination of each edge,
    as an id array or a :class:`Segments` plan.
    """
    scores = as_tensor(scores)
    seg = _segments(groups, num_groups)
    gmax = seg.max(scores.data)
    e = np.exp(scores.data - gmax[seg.ids])
    w = e / seg.sum(e)[seg.ids]

    def backward(g):
        dot = seg.sum(g * w)
        _accumulate(scores, w * (g - dot[seg.ids]))

    return _result(w, (scores,), backward, "neighbor_softmax")


# ---------------------------------------------------------------- backward


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Fill ``.grad`` of every grad-requiring tensor that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays of leaves, so callers
    zero them between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None:
        if loss not in tape:
            raise ValueError("loss was not recorded on the given tape")
        schedule = reversed(tape.nodes)
    else:
        schedule = reversed(_topological(loss))
    interior: list[Tensor] = []
    loss.grad = np.ones_like(loss.data)
    for node in schedule:
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        interior.append(node)
    # interior grads are scratch space; leaves keep theirs
    for node in interior:
        node.grad = None


# ---------------------------------------------------------------- gradient check


@contextlib.contextmanager
def record_activation_patterns():
    """Collect the sign pattern of every nonlinearity input evaluated inside the block."""
    sink: list[np.ndarray] = []
    _PATTERN_SINKS.append(sink)
    try:
        yield sink
    finally:
        _PATTERN_SINKS.remove(sink)


def _same_patterns(p: list[np.ndarray], q: list[np.ndarray]) -> bool:
    return len(p) == len(q) and all(np.array_equal(x, y) for x, y in zip(p, q))


@dataclass
class TensorCheck:
    name: str
    checked: int
    skipped: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    tol: float
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    @property
    def skipped(self) -> int:
        return builtins.sum(t.skipped for t in self.tensors)

    @property
    def checked(self) -> int:
        return builtins.sum(t.checked for t in self.tensors)

    def __str__(self):
        lines = [f"gradient check: max rel error {self.max_rel_error:.3e} (tol {self.tol:g})"]
        for t in self.tensors:
            lines.append(f"  {t.name}: {t.max_rel_error:.3e} over {t.checked} coords ({t.skipped} skipped)")
        return "\n".join(lines)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Tensors with more than ``max_coords`` entries are sampled.  Relative error
    is ``|a - n| / max(|a|, |n|, floor)``.  A coordinate whose +h/-h
    evaluations land on different sides of a nonlinearity kink is retried at
    ``h / 100`` and skipped (and counted) if it still straddles one.
    """
    named = list(params.items()) if isinstance(params, dict) else [
        (p.name or f"param{i}", p) for i, p in enumerate(params)
    ]
    for _, p in named:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for _, p in named}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol)

    def central(p, idx, step):
        orig = p.data[idx]
        p.data[idx] = orig + step
        with record_activation_patterns() as pat_plus:
            fp = f().item()
        p.data[idx] = orig - step
        with record_activation_patterns() as pat_minus:
            fm = f().item()
        p.data[idx] = orig
        return (fp - fm) / (2 * step), _same_patterns(pat_plus, pat_minus)

    for name, p in named:
        size = p.size
        coords = np.arange(size) if size <= max_coords else np.sort(rng.choice(size, max_coords, replace=False))
        worst, checked, skipped = 0.0, 0, 0
        for flat in coords.tolist():
            idx = np.unravel_index(flat, p.shape)
            num, smooth = central(p, idx, h)
            if not smooth:
                num, smooth = central(p, idx, h * 1e-2)
                if not smooth:
                    skipped += 1
                    continue
            a = analytic[id(p)][idx]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, rel)
            checked += 1
        report.tensors.append(TensorCheck(name, checked, skipped, worst))
    for _, p in named:
        p.grad = None
    return report


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"DGCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, Tensor] | Iterable[tuple[str, Tensor]]) -> None:
    """Write named tensors as little-endian float64 in insertion order."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(items))]
    for name, t in items:
        data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(DTYPE).reshape(dims)
        pos += 8 * n
        out[name] = Tensor(values, requires_grad=True, name=name)
    return out

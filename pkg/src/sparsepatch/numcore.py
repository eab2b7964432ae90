"""Minimal reverse-mode autodiff over 2-D float64 arrays.

Design notes:

* Every tape value is a 2-D array. Vectors are (1, d) rows, scalars are
  (1, 1). Ops raise ShapeError on anything else, which keeps gradient
  bookkeeping trivial (no implicit rank games beyond row/column broadcast
  in ``add``/``mul``).
* Recording is explicit: ops only build a backward graph while a Tape is
  active (see the ``tape()`` context manager). Outside a tape the same
  functions are plain numpy computations, which is what inference and
  finite-difference probes use.
* Creation order is a valid topological order, so Tape.backward just
  walks its entries in reverse. Gradients accumulate on ``Tensor.grad``;
  leaf parameters keep theirs until zeroed.
* ``matmul`` is the only op that counts multiply-accumulates. All
  elementwise work, reductions, softmax, normalization and gathers count
  zero, and the analytic cost model relies on that convention.
"""

from __future__ import annotations

import math
import zlib
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError, ValidationError

# ---------------------------------------------------------------------------
# tensors and the tape
# ---------------------------------------------------------------------------


class Tensor:
    """A 2-D float64 array plus an accumulated gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor data must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a (1, 1) tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


class Tape:
    """Records (output, parents, backward_fn) triples in creation order."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list = []

    def record(self, out: Tensor, parents: tuple, backward) -> None:
        self._entries.append((out, parents, backward))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and push gradients back to the leaves."""
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._entries):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for parent, grad in zip(parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = grad.copy() if grad.base is not None else grad
                else:
                    parent.grad = parent.grad + grad


_TAPE_STACK: list[Tape] = []


@contextmanager
def tape():
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


def _record(out_data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Finalize an op: finite-check the result and register it if taping."""
    # A finite sum implies all entries are finite; the slow path only runs
    # when the fast reduction itself overflowed on legal large values.
    total = float(out_data.sum())
    if not math.isfinite(total) and not np.isfinite(out_data).all():
        raise NumericalError("operation produced non-finite values")
    needs = bool(_TAPE_STACK) and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    if needs:
        _TAPE_STACK[-1].record(out, parents, backward)
    return out


def _require_2d(*tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(f"expected 2-D tensor, got shape {t.data.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcast_ok(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# multiply-accumulate counting
# ---------------------------------------------------------------------------


class MacCounter:
    """Tally of matmul multiply-accumulates, grouped by pipeline stage.

    Ops that are not matmuls (elementwise work, reductions, SAD searches,
    eigendecompositions) contribute zero; callers may log those under
    ``uncounted`` so reports can disclose what the MAC total omits.
    """

    def __init__(self):
        self.total: int = 0
        self.by_stage: dict[str, int] = {}
        self.uncounted: dict[str, int] = {}
        self._stage_stack: list[str] = ["other"]

    def add(self, macs: int) -> None:
        label = self._stage_stack[-1]
        self.total += macs
        self.by_stage[label] = self.by_stage.get(label, 0) + macs

    def note_uncounted(self, kind: str, amount: int = 1) -> None:
        self.uncounted[kind] = self.uncounted.get(kind, 0) + amount

    @contextmanager
    def stage(self, label: str):
        self._stage_stack.append(label)
        try:
            yield
        finally:
            self._stage_stack.pop()


_COUNTER_STACK: list[MacCounter] = []


@contextmanager
def mac_counting(counter: MacCounter):
    _COUNTER_STACK.append(counter)
    try:
        yield counter
    finally:
        _COUNTER_STACK.pop()


def active_counter() -> MacCounter | None:
    return _COUNTER_STACK[-1] if _COUNTER_STACK else None


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    counter = active_counter()
    if counter is not None:
        counter.add(a.shape[0] * a.shape[1] * b.shape[1])
    out_data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out_data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    _require_2d(x)

    def backward(g):
        return (g.T,)

    return _record(x.data.T.copy(), (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add broadcast mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"sub broadcast mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul broadcast mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def scale(x: Tensor, c: float) -> Tensor:
    _require_2d(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _record(x.data * c, (x,), backward)


def add_const(x: Tensor, c: float) -> Tensor:
    _require_2d(x)

    def backward(g):
        return (g,)

    return _record(x.data + float(c), (x,), backward)


def relu(x: Tensor) -> Tensor:
    _require_2d(x)
    mask = x.data > 0.0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, y = x * Phi(x)."""
    _require_2d(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)

    def backward(g):
        return (g * (cdf + x.data * pdf),)

    return _record(x.data * cdf, (x,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    _require_2d(x)
    y = _stable_sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _record(y, (x,), backward)


def exp_(x: Tensor) -> Tensor:
    _require_2d(x)
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _record(y, (x,), backward)


def log_(x: Tensor) -> Tensor:
    _require_2d(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _record(y, (x,), backward)


def sqrt_(x: Tensor) -> Tensor:
    _require_2d(x)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / y,)

    return _record(y, (x,), backward)


def reciprocal(x: Tensor) -> Tensor:
    _require_2d(x)
    y = 1.0 / x.data

    def backward(g):
        return (-g * y * y,)

    return _record(y, (x,), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    return mul(a, reciprocal(b))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by the (detached) row maximum."""
    _require_2d(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return ((g - inner) * y,)

    return _record(y, (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def rowsum(x: Tensor) -> Tensor:
    _require_2d(x)
    n = x.shape[1]

    def backward(g):
        return (np.broadcast_to(g, (x.shape[0], n)).copy(),)

    return _record(x.data.sum(axis=1, keepdims=True), (x,), backward)


def rowmean(x: Tensor) -> Tensor:
    return scale(rowsum(x), 1.0 / x.shape[1])


def colsum(x: Tensor) -> Tensor:
    _require_2d(x)
    m = x.shape[0]

    def backward(g):
        return (np.broadcast_to(g, (m, x.shape[1])).copy(),)

    return _record(x.data.sum(axis=0, keepdims=True), (x,), backward)


def colmean(x: Tensor) -> Tensor:
    return scale(colsum(x), 1.0 / x.shape[0])


def sum_all(x: Tensor) -> Tensor:
    _require_2d(x)

    def backward(g):
        return (np.full(x.shape, g[0, 0]),)

    return _record(x.data.sum().reshape(1, 1), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def rowmax(x: Tensor) -> Tensor:
    """Row-wise max; gradient flows to the first argmax of each row."""
    _require_2d(x)
    idx = x.data.argmax(axis=1)
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g[:, 0]
        return (gx,)

    return _record(x.data[rows, idx].reshape(-1, 1), (x,), backward)


def rowmin(x: Tensor) -> Tensor:
    _require_2d(x)
    idx = x.data.argmin(axis=1)
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g[:, 0]
        return (gx,)

    return _record(x.data[rows, idx].reshape(-1, 1), (x,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    _require_2d(*parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows width mismatch: {sorted(widths)}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=0),
                   tuple(parts), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    _require_2d(*parts)
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeError(f"concat_cols height mismatch: {sorted(heights)}")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d(x)
    if not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record(x.data[start:stop].copy(), (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d(x)
    if not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _record(x.data[:, start:stop].copy(), (x,), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows by integer index; backward scatter-adds (repeats allowed)."""
    _require_2d(x)
    idx = np.asarray(idx, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(x.data[idx].copy(), (x,), backward)


def gather_labels(x: Tensor, labels) -> Tensor:
    """Pick one column per row, returning (m, 1)."""
    _require_2d(x)
    labels = np.asarray(labels, dtype=np.intp).ravel()
    if labels.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_labels needs {x.shape[0]} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        raise ShapeError(f"label out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, labels] = g[:, 0]
        return (gx,)

    return _record(x.data[rows, labels].reshape(-1, 1), (x,), backward)


def neighborhood_rows(x: Tensor, nbr: np.ndarray) -> Tensor:
    """Gather row neighborhoods into im2col form.

    ``nbr`` is (P, K) integer; entry -1 means "outside", contributing a
    zero row. Output is (P, K * C) where C = x.shape[1]. Backward
    scatter-adds into the source rows, skipping the padding slots.
    """
    _require_2d(x)
    nbr = np.asarray(nbr, dtype=np.intp)
    if nbr.ndim != 2:
        raise ShapeError(f"neighborhood index must be 2-D, got {nbr.shape}")
    if nbr.size and nbr.max() >= x.shape[0]:
        raise ShapeError("neighborhood index out of range")
    if nbr.size and nbr.min() < -1:
        raise ShapeError("neighborhood index below -1")
    p, k = nbr.shape
    c = x.shape[1]
    valid = nbr >= 0
    gathered = np.zeros((p, k, c))
    gathered[valid] = x.data[nbr[valid]]

    def backward(g):
        gx = np.zeros_like(x.data)
        gv = g.reshape(p, k, c)
        np.add.at(gx, nbr[valid], gv[valid])
        return (gx,)

    return _record(gathered.reshape(p, k * c), (x,), backward)


# ---------------------------------------------------------------------------
# gates and detachment
# ---------------------------------------------------------------------------


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy(), requires_grad=False)


def rowmax_detached(x: Tensor) -> Tensor:
    """Row maxima as a gradient-free constant, for log-softmax shifts."""
    _require_2d(x)
    return Tensor(x.data.max(axis=1, keepdims=True), requires_grad=False)


# Saturating-sigmoid surrogate used by the selection gate. The hard
# forward emits 1 where x > 0; the backward substitutes the slope of
# clip(1.2 * sigmoid(x) - 0.1, 0, 1), which is nonzero only while the
# clip is inactive, i.e. |x| < ln(11).
_GATE_BAND = math.log(11.0)


def soft_gate_value(x: np.ndarray) -> np.ndarray:
    return np.clip(1.2 * _stable_sigmoid(x) - 0.1, 0.0, 1.0)


def hard_gate(x: Tensor) -> Tensor:
    _require_2d(x)
    inside = np.abs(x.data) < _GATE_BAND
    s = _stable_sigmoid(x.data)

    def backward(g):
        return (g * np.where(inside, 1.2 * s * (1.0 - s), 0.0),)

    return _record((x.data > 0.0).astype(np.float64), (x,), backward)


def clip01(x: Tensor) -> Tensor:
    _require_2d(x)
    inside = (x.data > 0.0) & (x.data < 1.0)

    def backward(g):
        return (g * inside,)

    return _record(np.clip(x.data, 0.0, 1.0), (x,), backward)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization with learned scale and shift."""
    centered = sub(x, rowmean(x))
    var = rowmean(mul(centered, centered))
    inv = reciprocal(sqrt_(add_const(var, eps)))
    return add(mul(mul(centered, inv), gamma), beta)


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """1 - cos(a, b) for (1, d) rows; a zero vector yields exactly 1.

    The tiny constant inside each sqrt keeps the expression differentiable
    everywhere and, for an all-zero input, drives the cosine itself to
    zero rather than NaN.
    """
    na = sqrt_(add_const(rowsum(mul(a, a)), 1e-24))
    nb = sqrt_(add_const(rowsum(mul(b, b)), 1e-24))
    dot = rowsum(mul(a, b))
    cos = div(dot, mul(na, nb))
    return add_const(neg(cos), 1.0)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


def rng_stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for (seed, tags); strings hash via crc32."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode("utf-8")))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def seeded_gaussian(seed: int, shape: tuple[int, int], *tags) -> Tensor:
    rng = rng_stream(seed, "gaussian", *tags)
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# symmetric eigendecomposition
# ---------------------------------------------------------------------------


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.

    Returns plain numpy arrays; the decomposition is outside the autodiff
    tape by design. The result is verified by reconstruction before it is
    returned, so a silently bad factorization cannot leak downstream.
    """
    arr = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got {arr.shape}")
    scale_ = max(1.0, float(np.abs(arr).max()) if arr.size else 0.0)
    asym = float(np.abs(arr - arr.T).max()) if arr.size else 0.0
    if asym > 1e-9 * scale_:
        raise ValidationError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    if not np.isfinite(arr).all():
        raise NumericalError("sym_eig input contains non-finite values")
    sym = 0.5 * (arr + arr.T)
    try:
        eigenvalues, eigenvectors = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed to converge: {exc}") from exc
    norm = float(np.linalg.norm(sym))
    residual = float(np.linalg.norm(sym @ eigenvectors - eigenvectors * eigenvalues))
    if residual > 1e-8 * max(norm, 1.0):
        raise NumericalError(
            f"eigendecomposition residual {residual:.3e} exceeds tolerance")
    return eigenvalues, eigenvectors


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamSet:
    """Named collection of trainable tensors with stable iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        t = as_tensor(data)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ValidationError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def total_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def save_npz(self, path) -> None:
        np.savez(path, **{name: t.data for name, t in self.items()})

    @classmethod
    def load_npz(cls, path) -> "ParamSet":
        params = cls()
        with np.load(path) as archive:
            for name in sorted(archive.files):
                params.add(name, archive[name])
        return params


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5, coords=None,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` maps the tensor to a (1, 1) loss and must be deterministic. By
    default every coordinate of ``x`` is probed; pass ``coords`` (flat
    indices) or ``max_coords`` (seeded subsample) to bound the cost on
    large tensors.
    """
    x.requires_grad = True
    x.grad = None
    with tape() as t:
        y = f(x)
        if y.data.size != 1:
            raise ShapeError(f"grad_check function must return a scalar, got {y.shape}")
        t.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    size = x.data.size
    if coords is None:
        if max_coords is not None and size > max_coords:
            coords = rng_stream(seed, "gradcheck").choice(size, size=max_coords,
                                                          replace=False)
        else:
            coords = range(size)
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for c in coords:
        c = int(c)
        keep = flat[c]
        flat[c] = keep + eps
        up = f(x).item()
        flat[c] = keep - eps
        down = f(x).item()
        flat[c] = keep
        numeric = (up - down) / (2.0 * eps)
        err = abs(aflat[c] - numeric) / (abs(numeric) + 1e-8)
        if err > worst:
            worst = err
    return worst


def grad_check_params(build_loss, params: ParamSet, names=None,
                      eps: float = 1e-5, max_coords: int = 6,
                      seed: int = 0) -> dict[str, float]:
    """Run grad_check against each named parameter of a model.

    ``build_loss`` takes no arguments and reruns the forward pass against
    the live ParamSet, so perturbing a parameter in place is reflected.
    Returns the worst relative error per parameter name.
    """
    if names is None:
        names = params.names()
    report: dict[str, float] = {}
    for name in names:
        target = params[name]
        report[name] = grad_check(lambda _t: build_loss(), target, eps=eps,
                                  max_coords=max_coords, seed=seed)
    return report

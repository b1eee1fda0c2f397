"""Dense float64 tensors with reverse-mode automatic differentiation.

A forward pass records operations onto the thread-active `Tape`
(entered with ``with Tape():``); `backward` replays it once in reverse
and frees the graph. Ops executed with no active tape run as plain
numpy, which is the inference path.

Shape rules are strict: binary elementwise ops require identical shapes,
with 0-d scalars as the only broadcast exception (plus the explicit
`add_rowvec` for biases). `matmul` accepts 2-d operands and batched 3-d
operands, including a shared 2-d operand against a 3-d one.

Gradient correctness is checked against central finite differences by
`grad_check`; its relative error for a tensor is
``max|a - n| / max(max|a|, max|n|, 1)`` so near-zero gradients do not
blow up the ratio.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import backend as kern


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NumericsError(ArithmeticError):
    pass


_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Recording of one forward pass; consumed by a single backward."""

    __slots__ = ("nodes", "consumed", "_prev")

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc):
        _LOCAL.tape = self._prev
        self._prev = None
        return False


class Node:
    __slots__ = ("inputs", "bwd", "needs", "grad")


class Tensor:
    """n-d float64 array, optionally tracked on a tape.

    `requires_grad` marks leaves that accumulate into `.grad`; tensors
    produced by recorded ops carry a `node` reference instead and their
    gradient lives on the tape only.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; python scalars coerce to constant 0-d tensors.
    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0))


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.float64(x))


def _wrap(data: np.ndarray) -> Tensor:
    # fast Tensor construction for op outputs (already float64 arrays)
    out = object.__new__(Tensor)
    out.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
    out.requires_grad = False
    out.grad = None
    out.node = None
    out.tape = None
    return out


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = _wrap(data)
    tape = _active_tape()
    if tape is None:
        return out
    needs = []
    live = False
    for t in inputs:
        if t.node is not None:
            if t.tape is not tape:
                raise GraphError("op input was recorded on a different graph")
            needs.append(True)
            live = True
        elif t.requires_grad:
            needs.append(True)
            live = True
        else:
            needs.append(False)
    if not live:
        return out
    node = Node()
    node.inputs = inputs
    node.bwd = bwd
    node.needs = tuple(needs)
    node.grad = None
    tape.nodes.append(node)
    out.node = node
    out.tape = tape
    out.requires_grad = True
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into every reachable requires_grad leaf.

    The loss must be a 0-d tensor attached to a not-yet-consumed tape;
    the tape is freed afterwards, so a second backward raises.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        raise GraphError("loss is not attached to a recorded graph")
    if tape.consumed:
        raise GraphError("graph already consumed; re-record the forward pass")
    tape.consumed = True
    loss.node.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            node.inputs = ()
            node.bwd = None
            continue
        grads = node.bwd(g, node.needs)
        for t, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            inner = t.node
            if inner is not None:
                inner.grad = gi if inner.grad is None else inner.grad + gi
            elif t.requires_grad:
                t.grad = np.array(gi) if t.grad is None else t.grad + gi
        node.inputs = ()
        node.bwd = None
        node.grad = None
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# shape checks


def _check_same_or_scalar(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalars broadcast)")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a.data, b.data, "add")
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g, needs):
        return (_fit(g, ash) if needs[0] else None,
                _fit(g, bsh) if needs[1] else None)

    return _record(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a.data, b.data, "sub")
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g, needs):
        return (_fit(g, ash) if needs[0] else None,
                _fit(-g, bsh) if needs[1] else None)

    return _record(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bwd(g, needs):
        return (_fit(g * bd, ad.shape) if needs[0] else None,
                _fit(g * ad, bd.shape) if needs[1] else None)

    return _record(ad * bd, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a.data, b.data, "div")
    ad, bd = a.data, b.data

    def bwd(g, needs):
        da = _fit(g / bd, ad.shape) if needs[0] else None
        db = _fit(-g * ad / (bd * bd), bd.shape) if needs[1] else None
        return da, db

    return _record(ad / bd, (a, b), bwd)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[..., D] + v[D]; the explicit bias-broadcast op."""
    d = x.data.shape[-1]
    if v.data.shape != (d,):
        raise ShapeError(f"add_rowvec: vector shape {v.data.shape} does not match last dim of {x.data.shape}")

    def bwd(g, needs):
        dv = None
        if needs[1]:
            dv = np.ascontiguousarray(g).reshape(-1, d).sum(axis=0)
        return (g if needs[0] else None), dv

    return _record(x.data + v.data, (x, v), bwd)


def relu(x: Tensor) -> Tensor:
    xd = x.data

    def bwd(g, needs):
        return (kern.relu_bwd(xd, np.ascontiguousarray(g)),)

    return _record(kern.relu(xd), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = kern.sigmoid(x.data)

    def bwd(g, needs):
        return (kern.sigmoid_bwd(y, np.ascontiguousarray(g)),)

    return _record(y, (x,), bwd)


def log(x: Tensor) -> Tensor:
    # log of non-positive input yields -inf/nan; downstream finite checks
    # catch it, so no warning here
    xd = x.data

    def bwd(g, needs):
        return (g / xd,)

    with np.errstate(divide="ignore", invalid="ignore"):
        return _record(np.log(xd), (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    xd = x.data

    def bwd(g, needs):
        return (g * np.sign(xd),)

    return _record(np.abs(xd), (x,), bwd)


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** c for a python constant c; d/dx = c * x**(c-1), zero for c = 0."""
    xd = x.data
    p = float(exponent)

    def bwd(g, needs):
        if p == 0.0:
            return (np.zeros_like(xd),)
        return (g * p * xd ** (p - 1.0),)

    return _record(xd ** p, (x,), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a.data, b.data, "maximum")
    ad, bd = a.data, b.data
    mask = ad >= bd  # ties route to the first operand

    def bwd(g, needs):
        da = _fit(np.where(mask, g, 0.0), ad.shape) if needs[0] else None
        db = _fit(np.where(mask, 0.0, g), bd.shape) if needs[1] else None
        return da, db

    return _record(np.maximum(ad, bd), (a, b), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a.data, b.data, "minimum")
    ad, bd = a.data, b.data
    mask = ad <= bd  # ties route to the first operand

    def bwd(g, needs):
        da = _fit(np.where(mask, g, 0.0), ad.shape) if needs[0] else None
        db = _fit(np.where(mask, 0.0, g), bd.shape) if needs[1] else None
        return da, db

    return _record(np.minimum(ad, bd), (a, b), bwd)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def bwd(g, needs):
        return (np.full(shape, float(g)),)

    return _record(np.asarray(x.data.sum()), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    n = x.data.size

    def bwd(g, needs):
        return (np.full(shape, float(g) / n),)

    return _record(np.asarray(x.data.mean()), (x,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3):
        raise ShapeError(f"matmul: operands must be 2-d or 3-d, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch dimensions disagree: {ad.shape} @ {bd.shape}")

    def bwd(g, needs):
        da = db = None
        if needs[0]:
            da = g @ bd.swapaxes(-1, -2)
            if ad.ndim == 2 and da.ndim == 3:
                da = da.sum(axis=0)
        if needs[1]:
            db = ad.swapaxes(-1, -2) @ g
            if bd.ndim == 2 and db.ndim == 3:
                db = db.sum(axis=0)
        return da, db

    return _record(ad @ bd, (a, b), bwd)


def transpose2(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose2 needs ndim >= 2, got shape {x.data.shape}")

    def bwd(g, needs):
        return (g.swapaxes(-1, -2),)

    return _record(x.data.swapaxes(-1, -2), (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")
    old = x.data.shape

    def bwd(g, needs):
        return (np.ascontiguousarray(g).reshape(old),)

    return _record(x.data.reshape(shape), (x,), bwd)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_last of zero tensors")
    lead = parts[0].data.shape[:-1]
    nd = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ShapeError(f"concat_last: rank mismatch: {parts[0].data.shape} vs {p.data.shape}")
        if p.data.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading dims differ: {parts[0].data.shape} vs {p.data.shape}")
    widths = [p.data.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g, needs):
        return tuple(np.split(g, splits, axis=-1))

    return _record(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    d = x.data.shape[-1]
    if not (0 <= start <= stop <= d):
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for last dim {d}")
    xshape = x.data.shape

    def bwd(g, needs):
        z = np.zeros(xshape)
        z[..., start:stop] = g
        return (z,)

    return _record(x.data[..., start:stop], (x,), bwd)


def broadcast_rows(x: Tensor, count: int) -> Tensor:
    """Tile x along a new leading axis; gradient sums the copies."""
    if count < 1:
        raise ShapeError(f"broadcast_rows: count must be >= 1, got {count}")

    def bwd(g, needs):
        return (np.ascontiguousarray(g).sum(axis=0),)

    tiled = np.broadcast_to(x.data, (count,) + x.data.shape)
    return _record(np.ascontiguousarray(tiled), (x,), bwd)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows along the first axis; duplicate indices allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for first dim {x.data.shape[0]}")
    xshape = x.data.shape

    def bwd(g, needs):
        z = np.zeros(xshape)
        np.add.at(z, idx, g)
        return (z,)

    return _record(x.data[idx], (x,), bwd)


# ---------------------------------------------------------------------------
# normalizations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    nd = x.data.ndim
    ax = axis if axis >= 0 else nd + axis
    if not 0 <= ax < nd:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.data.shape}")
    if ax == nd - 1:
        xshape = x.data.shape
        flat = x.data.reshape(-1, xshape[-1])
        y2 = kern.softmax_rows(flat)

        def bwd(g, needs):
            g2 = np.ascontiguousarray(g).reshape(y2.shape)
            return (kern.softmax_rows_bwd(y2, g2).reshape(xshape),)

        return _record(y2.reshape(xshape), (x,), bwd)

    moved = np.moveaxis(x.data, ax, -1)
    mshape = moved.shape
    flat = np.ascontiguousarray(moved).reshape(-1, mshape[-1])
    y2 = kern.softmax_rows(flat)

    def bwd_moved(g, needs):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(y2.shape)
        dx = kern.softmax_rows_bwd(y2, gm).reshape(mshape)
        return (np.moveaxis(dx, -1, ax),)

    return _record(np.moveaxis(y2.reshape(mshape), -1, ax), (x,), bwd_moved)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis to zero mean / unit
    variance (biased, + eps), then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.data.shape} / bias {bias.data.shape} do not match last dim of {x.data.shape}")
    xshape = x.data.shape
    flat = x.data.reshape(-1, d)
    y2, xhat, inv_std = kern.layer_norm_rows(flat, gain.data, bias.data, eps)
    gd = gain.data

    def bwd(g, needs):
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        dx, dgain, dbias = kern.layer_norm_rows_bwd(g2, xhat, inv_std, gd)
        return dx.reshape(xshape), dgain, dbias

    return _record(y2.reshape(xshape), (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-tensor relative gradient errors from one finite-difference sweep."""

    errors: dict[str, float]
    worst: float
    tolerance: float
    passed: bool

    def format(self) -> str:
        lines = [f"{name}: rel_err={err:.3e}" for name, err in sorted(self.errors.items())]
        lines.append(f"worst={self.worst:.3e} tolerance={self.tolerance:.1e} -> "
                     + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def grad_check(f: Callable[[dict], Tensor], tensors: dict[str, Tensor],
               step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar f against central differences.

    Tensors with requires_grad=False are skipped. The comparison for
    each tensor is max|analytic - numeric| / max(|analytic|_inf,
    |numeric|_inf, 1).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in tensors.values():
        t.grad = None
    with Tape():
        out = f(tensors)
        if out.data.shape != ():
            raise ShapeError(f"grad_check requires a scalar function, got shape {out.data.shape}")
        if not np.isfinite(out.data):
            raise NumericsError("grad_check: non-finite function value")
        backward(out)
    errors: dict[str, float] = {}
    for name in sorted(tensors):
        t = tensors[name]
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.empty_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(tensors).data)
            flat[i] = orig - step
            fm = float(f(tensors).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericsError(f"grad_check: non-finite value while perturbing {name}")
            nflat[i] = (fp - fm) / (2.0 * step)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1.0)
        errors[name] = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
    worst = max(errors.values(), default=0.0)
    return GradCheckReport(errors=errors, worst=worst, tolerance=tolerance,
                           passed=worst <= tolerance)

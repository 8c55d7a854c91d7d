"""Dense float64 tensors with a reverse-mode gradient tape.

Everything in the network is built from the operations in this module plus
a handful of fused ops registered elsewhere through :func:`from_op`. Storage
is a row-major float64 ndarray; there is no broadcasting beyond bias-add and
constant masks, which keeps every backward rule short enough to audit.

A :class:`Tape` is active only inside its ``with`` block, is single-use, and
is discarded after :meth:`Tape.backward`. Distinct tapes may run on distinct
threads; the active tape is thread-local.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Row-major float64 array with optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_tls = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of operations for one forward pass.

    Records are appended in execution order, so inputs always precede the
    operations consuming them; backward traverses the list in reverse.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        if getattr(_tls, "tape", None) is not None:
            raise RuntimeError("a Tape is already active on this thread")
        if self._used:
            raise RuntimeError("Tape instances are single-use")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``output`` into ``.grad`` of the leaves."""
        if self._used:
            raise RuntimeError("Tape.backward may run only once")
        self._used = True
        if seed is None:
            if output.size != 1:
                raise ShapeError(
                    f"backward without a seed needs a scalar output, got shape {output.shape}"
                )
            seed = np.ones_like(output.data)
        adjoints: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=np.float64)}
        produced = {id(rec[0]) for rec in self._records}
        for out, inputs, backward in reversed(self._records):
            g = adjoints.pop(id(out), None)
            if g is None:
                continue
            grads = backward(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                acc = adjoints.get(id(t))
                adjoints[id(t)] = gi if acc is None else acc + gi
        # whatever is left belongs to leaves
        leaves: dict[int, Tensor] = {}
        for _, inputs, _ in self._records:
            for t in inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        leaves.setdefault(id(output), output)
        for tid, g in adjoints.items():
            leaf = leaves.get(tid)
            if leaf is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def from_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap ``data`` as the output of an op, recording it on the active tape.

    ``backward(grad_out)`` must return one gradient array (or None) per input.
    This is the extension point used by the fused ops in other modules.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append((out, tuple(inputs), backward))
    return out


# --------------------------------------------------------------------------
# Elementwise and shape ops
# --------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return from_op(a.data * s, (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a constant array broadcastable within a's shape (no gradient into it)."""
    const = np.asarray(const, dtype=np.float64)
    if np.broadcast_shapes(a.shape, const.shape) != a.shape:
        raise ShapeError(f"add_const: const {const.shape} must broadcast inside {a.shape}")
    return from_op(a.data + const, (a,), lambda g: (g,))


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant mask broadcastable within a's shape."""
    mask = np.asarray(mask, dtype=np.float64)
    if np.broadcast_shapes(a.shape, mask.shape) != a.shape:
        raise ShapeError(f"mask_mul: mask {mask.shape} must broadcast inside {a.shape}")
    return from_op(a.data * mask, (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def flip(a: Tensor, axis: int) -> Tensor:
    return from_op(np.ascontiguousarray(np.flip(a.data, axis)), (a,), lambda g: (np.flip(g, axis),))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return from_op(a.data[idx], (a,), backward)


def pad_rows(a: Tensor, total: int) -> Tensor:
    """Append zero rows along axis 0 until the row count reaches ``total``."""
    n = a.shape[0]
    if total < n:
        raise ShapeError(f"pad_rows: total {total} < current rows {n}")
    out = np.zeros((total,) + a.shape[1:])
    out[:n] = a.data
    return from_op(out, (a,), lambda g: (g[:n].copy(),))


def slice_rows(a: Tensor, n: int) -> Tensor:
    """Keep the first ``n`` rows along axis 0."""
    total = a.shape[0]
    if n > total:
        raise ShapeError(f"slice_rows: n {n} > rows {total}")

    def backward(g):
        da = np.zeros_like(a.data)
        da[:n] = g
        return (da,)

    return from_op(a.data[:n].copy(), (a,), backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    """Slice along the last axis."""
    def backward(g):
        da = np.zeros_like(a.data)
        da[..., lo:hi] = g
        return (da,)

    return from_op(np.ascontiguousarray(a.data[..., lo:hi]), (a,), backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_cols: leading dims differ, {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    return from_op(
        np.concatenate([a.data, b.data], axis=-1),
        (a, b),
        lambda g: (np.ascontiguousarray(g[..., :ca]), np.ascontiguousarray(g[..., ca:])),
    )


def repeat_cols(a: Tensor, n: int) -> Tensor:
    """Tile a trailing axis of width 1 out to width ``n``."""
    if a.shape[-1] != 1:
        raise ShapeError(f"repeat_cols expects trailing width 1, got {a.shape}")
    return from_op(np.repeat(a.data, n, axis=-1), (a,), lambda g: (g.sum(axis=-1, keepdims=True),))


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``b`` is either 2D (shared) or batched like ``a``."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if bd.ndim == 2:
        def backward(g):
            da = g @ bd.T
            db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return (da, db)
    else:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

        def backward(g):
            da = g @ np.swapaxes(bd, -1, -2)
            db = np.swapaxes(ad, -1, -2) @ g
            return (da, db)

    return from_op(ad @ bd, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match features of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias with x (N, Cin), weight (Cin, Cout), bias (Cout,)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data
    axes = tuple(range(x.ndim - 1))

    def backward(g):
        dx = g @ wd.T
        dw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return (dx, dw, g.sum(axis=axes))

    return from_op(out, (x, weight, bias), backward)


# --------------------------------------------------------------------------
# Nonlinearities and normalization
# --------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return from_op(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} for features {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return (dx, dgamma, dbeta)

    return from_op(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return from_op(out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    return from_op(x.data * s, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return from_op(out, (x,), lambda g: (g * expit(x.data),))


# --------------------------------------------------------------------------
# Reductions and segment ops
# --------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return from_op(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g.reshape(-1)[0]),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.size
    return from_op(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g.reshape(-1)[0] / n),))


def segment_mean(x: Tensor, seg_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean of the rows of ``x`` grouped by ``seg_ids`` (every segment non-empty)."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    counts = np.bincount(seg_ids, minlength=num_segments).astype(np.float64)
    if (counts == 0).any():
        raise ShapeError("segment_mean: every segment must receive at least one row")
    acc = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(acc, seg_ids, x.data)
    out = acc / counts.reshape((-1,) + (1,) * (x.ndim - 1))

    def backward(g):
        return ((g / counts.reshape((-1,) + (1,) * (x.ndim - 1)))[seg_ids],)

    return from_op(out, (x,), backward)


def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise causal convolution over the second-to-last axis.

    x is (..., S, E), kernel (W, E); output position t sees x[t-W+1 .. t],
    with implicit zeros before the sequence start.
    """
    w = kernel.shape[0]
    xd, kd = x.data, kernel.data
    if x.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"causal_conv1d: channels differ, x {x.shape} kernel {kernel.shape}")
    s = x.shape[-2]
    out = np.zeros_like(xd)
    for j in range(w):
        shift = w - 1 - j  # tap j reads x[t - shift]
        if shift == 0:
            out += kd[j] * xd
        elif shift < s:
            out[..., shift:, :] += kd[j] * xd[..., : s - shift, :]

    def backward(g):
        dx = np.zeros_like(xd)
        dk = np.zeros_like(kd)
        lead = tuple(range(g.ndim - 2))
        for j in range(w):
            shift = w - 1 - j
            if shift == 0:
                dx += kd[j] * g
                dk[j] = (g * xd).sum(axis=lead + (-2,))
            elif shift < s:
                dx[..., : s - shift, :] += kd[j] * g[..., shift:, :]
                dk[j] = (g[..., shift:, :] * xd[..., : s - shift, :]).sum(axis=lead + (-2,))
        return (dx, dk)

    return from_op(out, (x, kernel), backward)


# --------------------------------------------------------------------------
# Finite-difference gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-6,
    rel_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    The relative error per element uses max(|analytic|, |numeric|, rel_floor)
    as denominator so that near-zero gradients are judged on absolute terms.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    tape = Tape()
    with tape:
        y = f(probe)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise NumericError("grad_check: f(x) is not finite")
    tape.backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    work = flat.copy()
    for i in range(flat.size):
        orig = work[i]
        work[i] = orig + h
        fp = f(Tensor(work.reshape(x.shape))).item()
        work[i] = orig - h
        fm = f(Tensor(work.reshape(x.shape))).item()
        work[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("grad_check: perturbed evaluation is not finite")
        numeric[i] = (fp - fm) / (2.0 * h)

    a = analytic.reshape(-1)
    abs_err = np.abs(a - numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), rel_floor)
    rel_err = abs_err / denom
    return GradCheckReport(
        max_rel_error=float(rel_err.max(initial=0.0)),
        max_abs_error=float(abs_err.max(initial=0.0)),
        tol=tol,
        checked=int(flat.size),
    )

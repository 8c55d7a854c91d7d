"""Bidirectional selective state-space sub-layer over large serialized groups.

The scan follows the standard selective-SSM discretization: per step t,
Abar_t = exp(delta_t * A) (zero-order hold) and Bbar_t = delta_t * B_t
(Euler), with hidden update h_t = Abar_t * h_{t-1} + Bbar_t * x_t and
readout y_t = C_t . h_t + D * x_t. A compiled single-pass kernel does the
work; a plain-Python reference loop stays available as the oracle.

Sequences run once forward and once time-reversed with separate scan
parameters per direction and shared input/output projections, capturing
dependencies both ways at linear cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError
from .serialization import GroupedFeatures, SerializedOrder, partition, restore

from . import tensor as T


# --------------------------------------------------------------------------
# Reference recurrence (oracle; no gradient, no compilation)
# --------------------------------------------------------------------------


def selective_scan_reference(
    x: np.ndarray,  # (T, E)
    a: np.ndarray,  # (E, D), strictly negative
    deltas: np.ndarray,  # (T, E), positive step sizes
    b_seq: np.ndarray,  # (T, D)
    c_seq: np.ndarray,  # (T, D)
    d_skip: np.ndarray,  # (E,)
) -> np.ndarray:
    """Explicit per-step evaluation of the recurrence, h_0 = 0."""
    t_len, e = x.shape
    d = a.shape[1]
    h = np.zeros((e, d))
    out = np.empty((t_len, e))
    for t in range(t_len):
        abar = np.exp(deltas[t][:, None] * a)
        bbar = deltas[t][:, None] * b_seq[t][None, :]
        h = abar * h + bbar * x[t][:, None]
        out[t] = h @ c_seq[t] + d_skip * x[t]
    return out


# --------------------------------------------------------------------------
# Compiled single-pass kernels
# --------------------------------------------------------------------------


@njit(cache=True)
def _scan_fwd(x, deltas, a, b_seq, c_seq, d_skip):
    bsz, s, e = x.shape
    d = a.shape[1]
    y = np.empty((bsz, s, e))
    hs = np.empty((bsz, s, e, d))
    for bi in range(bsz):
        h = np.zeros((e, d))
        for t in range(s):
            for ei in range(e):
                acc = 0.0
                dt = deltas[bi, t, ei]
                xv = x[bi, t, ei]
                for n in range(d):
                    abar = math.exp(dt * a[ei, n])
                    hv = abar * h[ei, n] + dt * b_seq[bi, t, n] * xv
                    h[ei, n] = hv
                    hs[bi, t, ei, n] = hv
                    acc += c_seq[bi, t, n] * hv
                y[bi, t, ei] = acc + d_skip[ei] * xv
    return y, hs


@njit(cache=True)
def _scan_bwd(gy, hs, x, deltas, a, b_seq, c_seq, d_skip):
    bsz, s, e = x.shape
    d = a.shape[1]
    dx = np.zeros((bsz, s, e))
    ddelta = np.zeros((bsz, s, e))
    da = np.zeros((e, d))
    db = np.zeros((bsz, s, d))
    dc = np.zeros((bsz, s, d))
    dd = np.zeros(e)
    for bi in range(bsz):
        g = np.zeros((e, d))  # adjoint of h_t, carried backwards
        for t in range(s - 1, -1, -1):
            for ei in range(e):
                gyv = gy[bi, t, ei]
                dt = deltas[bi, t, ei]
                xv = x[bi, t, ei]
                dd[ei] += gyv * xv
                dxv = gyv * d_skip[ei]
                ddt = 0.0
                for n in range(d):
                    gh = g[ei, n] + gyv * c_seq[bi, t, n]
                    dc[bi, t, n] += gyv * hs[bi, t, ei, n]
                    abar = math.exp(dt * a[ei, n])
                    hprev = hs[bi, t - 1, ei, n] if t > 0 else 0.0
                    ddt += gh * (hprev * a[ei, n] * abar + b_seq[bi, t, n] * xv)
                    da[ei, n] += gh * hprev * dt * abar
                    db[bi, t, n] += gh * dt * xv
                    dxv += gh * dt * b_seq[bi, t, n]
                    g[ei, n] = gh * abar
                dx[bi, t, ei] = dxv
                ddelta[bi, t, ei] = ddt
    return dx, ddelta, da, db, dc, dd


def _scan_op(x: T.Tensor, deltas: T.Tensor, a: T.Tensor, b_seq: T.Tensor, c_seq: T.Tensor, d_skip: T.Tensor) -> T.Tensor:
    """Batched (B, S, E) selective scan as one taped operation."""
    xd, dd_, ad = x.data, deltas.data, a.data
    bd, cd, dsk = b_seq.data, c_seq.data, d_skip.data
    y, hs = _scan_fwd(xd, dd_, ad, bd, cd, dsk)

    def backward(g):
        return _scan_bwd(np.ascontiguousarray(g), hs, xd, dd_, ad, bd, cd, dsk)

    return T.from_op(y, (x, deltas, a, b_seq, c_seq, d_skip), backward)


def selective_scan(
    x: T.Tensor,  # (T, E)
    a: T.Tensor,  # (E, D)
    deltas: T.Tensor,  # (T, E)
    b_seq: T.Tensor,  # (T, D)
    c_seq: T.Tensor,  # (T, D)
    d_skip: T.Tensor,  # (E,)
) -> T.Tensor:
    """Single-sequence scan; matches the reference loop to ~1e-15."""
    t_len, e = x.shape
    d = a.shape[1]
    if deltas.shape != (t_len, e) or b_seq.shape != (t_len, d) or c_seq.shape != (t_len, d):
        raise ConfigError(
            f"scan shapes inconsistent: x {x.shape}, deltas {deltas.shape}, "
            f"B {b_seq.shape}, C {c_seq.shape}"
        )
    batched = _scan_op(
        T.reshape(x, (1, t_len, e)),
        T.reshape(deltas, (1, t_len, e)),
        a,
        T.reshape(b_seq, (1, t_len, d)),
        T.reshape(c_seq, (1, t_len, d)),
        d_skip,
    )
    return T.reshape(batched, (t_len, e))


# --------------------------------------------------------------------------
# Bidirectional block
# --------------------------------------------------------------------------


@dataclass
class DirectionParams:
    """Scan parameters for one direction."""

    a_log: T.Tensor  # (E, D); A = -exp(a_log)
    w_b: T.Tensor  # (E, D)
    w_c: T.Tensor  # (E, D)
    w_delta: T.Tensor  # (E, 1)
    delta_bias: T.Tensor  # (1,)
    d_skip: T.Tensor  # (E,)
    conv_kernel: T.Tensor  # (W, E), depthwise causal, bias-free


@dataclass
class SsmParams:
    """One bidirectional Mamba sub-layer: shared projections, two scans."""

    w_in: T.Tensor  # (C, 2E): value and gate halves
    w_out: T.Tensor  # (E, C)
    fwd: DirectionParams
    bwd: DirectionParams
    norm_gamma: T.Tensor  # (C,)
    norm_beta: T.Tensor

    @property
    def channels(self) -> int:
        return self.w_in.shape[0]

    @property
    def inner_dim(self) -> int:
        return self.w_out.shape[0]


def init_direction_params(
    rng: np.random.Generator, inner_dim: int, state_dim: int, conv_width: int
) -> DirectionParams:
    e, d = inner_dim, state_dim
    # -A spans 1..state_dim per channel; delta starts in [1e-3, 0.1]
    a_log = np.tile(np.log(np.arange(1, d + 1, dtype=np.float64)), (e, 1))
    dt = math.exp(rng.uniform(math.log(1e-3), math.log(0.1)))
    delta_bias = math.log(math.expm1(dt))
    std = 1.0 / math.sqrt(e)
    return DirectionParams(
        a_log=T.Tensor(a_log, requires_grad=True),
        w_b=T.Tensor(rng.normal(0.0, std, size=(e, d)), requires_grad=True),
        w_c=T.Tensor(rng.normal(0.0, std, size=(e, d)), requires_grad=True),
        w_delta=T.Tensor(rng.normal(0.0, std, size=(e, 1)), requires_grad=True),
        delta_bias=T.Tensor(np.array([delta_bias]), requires_grad=True),
        d_skip=T.Tensor(np.ones(e), requires_grad=True),
        conv_kernel=T.Tensor(
            rng.uniform(-1.0, 1.0, size=(conv_width, e)) / math.sqrt(conv_width),
            requires_grad=True,
        ),
    )


def init_ssm_params(
    rng: np.random.Generator,
    channels: int,
    state_dim: int = 16,
    expand: int = 2,
    conv_width: int = 4,
) -> SsmParams:
    e = expand * channels
    std_in = 1.0 / math.sqrt(channels)
    std_out = 1.0 / math.sqrt(e)
    return SsmParams(
        w_in=T.Tensor(rng.normal(0.0, std_in, size=(channels, 2 * e)), requires_grad=True),
        w_out=T.Tensor(rng.normal(0.0, std_out, size=(e, channels)), requires_grad=True),
        fwd=init_direction_params(rng, e, state_dim, conv_width),
        bwd=init_direction_params(rng, e, state_dim, conv_width),
        norm_gamma=T.Tensor(np.ones(channels), requires_grad=True),
        norm_beta=T.Tensor(np.zeros(channels), requires_grad=True),
    )


def _direction_branch(seq: T.Tensor, p: DirectionParams) -> T.Tensor:
    """Conv, activation, and scan for one direction on (G, S, E) input."""
    e = seq.shape[-1]
    act = T.silu(T.causal_conv1d(seq, p.conv_kernel))
    deltas = T.repeat_cols(T.softplus(T.add_bias(T.matmul(act, p.w_delta), p.delta_bias)), e)
    b_seq = T.matmul(act, p.w_b)
    c_seq = T.matmul(act, p.w_c)
    a = T.neg(T.exp(p.a_log))
    return _scan_op(act, deltas, a, b_seq, c_seq, p.d_skip)


def bidirectional_mamba(grouped: GroupedFeatures, params: SsmParams) -> GroupedFeatures:
    """Gated bidirectional scan per group; padded slots stay zero throughout.

    Padded inputs are exact zeros and every projection here is bias-free, so
    a padded tail behaves identically to the implicit zeros beyond a shorter
    sequence; outputs at padded slots are zeroed explicitly as well.
    """
    g, s, c = grouped.groups.shape
    if c != params.channels:
        raise ConfigError(f"features have {c} channels, params expect {params.channels}")
    e = params.inner_dim
    u = T.matmul(grouped.groups, params.w_in)  # (G, S, 2E)
    value = T.slice_cols(u, 0, e)
    gate = T.slice_cols(u, e, 2 * e)

    fwd = _direction_branch(value, params.fwd)
    bwd = T.flip(_direction_branch(T.flip(value, 1), params.bwd), 1)

    mixed = T.mul(T.add(fwd, bwd), T.silu(gate))
    out = T.matmul(mixed, params.w_out)
    out = T.mask_mul(out, grouped.valid_mask[:, :, None].astype(np.float64))
    return GroupedFeatures(
        groups=out,
        valid_mask=grouped.valid_mask,
        group_size=grouped.group_size,
        original_count=grouped.original_count,
    )


def mamba_sublayer(
    features: T.Tensor,
    order: SerializedOrder,
    group_size: int,
    params: SsmParams,
) -> T.Tensor:
    """Pre-norm residual scan: F + Restore(BiMamba(Partition(LN(F), K)), K)."""
    normed = T.layer_norm(features, params.norm_gamma, params.norm_beta)
    grouped = partition(normed, order, group_size)
    scanned = bidirectional_mamba(grouped, params)
    return T.add(features, restore(scanned, order))

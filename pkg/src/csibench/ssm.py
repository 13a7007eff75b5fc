"""Discrete-time linear state-space sequence layer.

A continuous system d/dt h = A h + B x, y = C h with per-state step
sizes is mapped to a discrete recurrence h_t = Abar h_{t-1} + Bbar x_t,
y_t = Cbar h_t by the bilinear (trapezoidal) rule:

    Abar = (I - D/2 A)^-1 (I + D/2 A)
    Bbar = (I - D/2 A)^-1 D B
    Cbar = C

The state matrix is parameterized diagonal with entries -exp(a_f), so
the continuous system is Hurwitz, the resolvent is a per-entry division
and every reachable discretization satisfies |eig(Abar)| < 1. In the
time-invariant case the layer can equivalently run as a causal
convolution with the kernel (Cbar Bbar, Cbar Abar Bbar, ...). An
optional learned diagonal skip term adds s * x_t to each output. A
feature-flagged selective variant derives the step size and the
input/output maps from the current input; it forfeits the convolution
form because the system is no longer time-invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit
from .numkit import (
    ConfigurationError,
    NumericError,
    ShapeError,
    Tensor,
    concat_rows,
    matmul,
    reshape,
    softplus,
    transpose,
)

__all__ = [
    "SsmParams",
    "SelectiveMaps",
    "SsmDiscrete",
    "SsmKernel",
    "ssm_init",
    "bilinear_discretize",
    "ssm_discretize",
    "ssm_scan",
    "ssm_kernel",
    "ssm_conv",
    "ssm_flops",
    "ssm_forward",
    "ssm_predict",
]


@dataclass
class SelectiveMaps:
    """Input-dependent parameter maps of the selective variant."""

    w_delta: Tensor  # (feat, state)
    b_delta: Tensor  # (state,)
    w_b: Tensor      # (feat, state * feat)
    w_c: Tensor      # (feat, feat * state)

    def tensors(self):
        return [self.w_delta, self.b_delta, self.w_b, self.w_c]


@dataclass
class SsmParams:
    """Learnable parameters of the layer.

    The state-matrix diagonal is -exp(log_neg_a); step sizes are
    exp(log_delta), one per state.
    """

    log_neg_a: Tensor        # (state,)
    b_in: Tensor             # (state, feat)
    c_out: Tensor            # (feat, state)
    log_delta: Tensor        # (state,)
    skip: Tensor | None      # (feat,) diagonal feedthrough, None when disabled
    state_dim: int
    feat_dim: int
    selective: SelectiveMaps | None = None

    def tensors(self):
        out = [self.log_neg_a, self.b_in, self.c_out, self.log_delta]
        if self.skip is not None:
            out.append(self.skip)
        if self.selective is not None:
            out.extend(self.selective.tensors())
        return out


@dataclass
class SsmDiscrete:
    """Discretized system matrices (plain arrays)."""

    a_bar: np.ndarray  # (state, state)
    b_bar: np.ndarray  # (state, feat)
    c_bar: np.ndarray  # (feat, state)


@dataclass
class SsmKernel:
    """Convolution kernel; mats[t] = Cbar Abar^t Bbar, each (feat, feat)."""

    mats: np.ndarray  # (length, feat, feat)

    def __len__(self):
        return self.mats.shape[0]


def _inv_softplus(y):
    # exact inverse of log1p(exp(x)) for positive y
    return np.log(np.expm1(y))


def ssm_init(state_dim, feat_dim, seed=0, skip=True, selective=False):
    """Initialize a stable layer; deterministic per seed.

    Continuous eigenvalues are log-spaced in [-4, -0.25]; step sizes are
    log-uniform in [1e-3, 1e-1]; B and C are zero-mean uniform with
    variance one over their fan-in; the skip starts at zero.
    """
    if state_dim < 1 or feat_dim < 1:
        raise ConfigurationError("state and feature dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    if state_dim == 1:
        log_neg_a = np.zeros(1)
    else:
        log_neg_a = np.linspace(math.log(0.25), math.log(4.0), state_dim)
    log_delta = rng.uniform(math.log(1e-3), math.log(1e-1), size=state_dim)
    b_bound = math.sqrt(3.0 / feat_dim)
    c_bound = math.sqrt(3.0 / state_dim)
    b_in = rng.uniform(-b_bound, b_bound, size=(state_dim, feat_dim))
    c_out = rng.uniform(-c_bound, c_bound, size=(feat_dim, state_dim))
    maps = None
    if selective:
        scale = 0.1 * b_bound
        maps = SelectiveMaps(
            w_delta=Tensor(rng.uniform(-scale, scale, size=(feat_dim, state_dim))),
            b_delta=Tensor(_inv_softplus(np.exp(log_delta))),
            w_b=Tensor(rng.uniform(-scale, scale, size=(feat_dim, state_dim * feat_dim))),
            w_c=Tensor(rng.uniform(-scale, scale, size=(feat_dim, feat_dim * state_dim))),
        )
    return SsmParams(
        log_neg_a=Tensor(log_neg_a),
        b_in=Tensor(b_in),
        c_out=Tensor(c_out),
        log_delta=Tensor(log_delta),
        skip=Tensor(np.zeros(feat_dim)) if skip else None,
        state_dim=state_dim,
        feat_dim=feat_dim,
        selective=maps,
    )


def bilinear_discretize(a_mat, b_mat, c_mat, delta):
    """Bilinear rule for a general dense state matrix.

    ``delta`` is a positive scalar or per-state vector. Raises
    NumericError when the resolvent I - delta/2 A is singular, which the
    diagonal parameterization rules out by construction.
    """
    a = np.asarray(a_mat, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"state matrix must be square, got shape {a.shape}")
    n = a.shape[0]
    d = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,))
    if np.any(d <= 0):
        raise ConfigurationError("step sizes must be positive")
    b = np.asarray(b_mat, dtype=np.float64)
    half = 0.5 * d[:, None] * a
    lhs = np.eye(n) - half
    try:
        a_bar = np.linalg.solve(lhs, np.eye(n) + half)
        b_bar = np.linalg.solve(lhs, d[:, None] * b)
    except np.linalg.LinAlgError as err:
        raise NumericError(f"bilinear resolvent is singular: {err}") from None
    if not (np.isfinite(a_bar).all() and np.isfinite(b_bar).all()):
        raise NumericError("bilinear discretization produced non-finite values")
    return SsmDiscrete(a_bar, b_bar, np.array(c_mat, dtype=np.float64))


def ssm_discretize(p):
    """Closed-form bilinear discretization of the diagonal parameterization."""
    lam = -np.exp(p.log_neg_a.data)
    delta = np.exp(p.log_delta.data)
    u = 0.5 * delta * lam
    a_diag = (1.0 + u) / (1.0 - u)
    b_scale = delta / (1.0 - u)
    return SsmDiscrete(
        np.diag(a_diag),
        b_scale[:, None] * p.b_in.data,
        p.c_out.data.copy(),
    )


def ssm_scan(d, xs, h0=None, skip=None):
    """Run the recurrence over an (T, feat) input; returns (T, feat).

    ``h0`` is the initial state (zeros by default); ``skip`` optionally
    adds the diagonal feedthrough skip * x_t to each output.
    """
    xs = np.asarray(xs, dtype=np.float64)
    state_dim, feat_dim = d.b_bar.shape
    if xs.ndim != 2 or xs.shape[1] != feat_dim:
        raise ShapeError(f"input shape {xs.shape} does not match feature dim {feat_dim}")
    if h0 is None:
        h = np.zeros((state_dim, 1))
    else:
        h0 = np.asarray(h0, dtype=np.float64).reshape(-1)
        if h0.shape[0] != state_dim:
            raise ShapeError(f"initial state has dim {h0.shape[0]}, expected {state_dim}")
        h = h0[:, None].copy()
    ys = np.empty_like(xs)
    for t in range(xs.shape[0]):
        x_col = xs[t][:, None]
        h = matmul(d.a_bar, h) + matmul(d.b_bar, x_col)
        ys[t] = matmul(d.c_bar, h)[:, 0]
        if skip is not None:
            ys[t] += skip * xs[t]
    return ys


def ssm_kernel(d, length):
    """Materialize the convolution kernel by repeated state propagation."""
    if length < 1:
        raise ConfigurationError("kernel length must be >= 1")
    state_dim, feat_dim = d.b_bar.shape
    mats = np.empty((length, feat_dim, feat_dim))
    prop = d.b_bar.copy()
    for t in range(length):
        mats[t] = d.c_bar @ prop
        if t + 1 < length:
            prop = d.a_bar @ prop
    return SsmKernel(mats)


def ssm_conv(kernel, xs):
    """Causal convolution y_t = sum_{s<=t} K[s] x_{t-s} with zero initial state."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2:
        raise ShapeError(f"input must be (steps, feat), got shape {xs.shape}")
    n_steps, feat_dim = xs.shape
    if len(kernel) < n_steps:
        raise ConfigurationError(
            f"kernel length {len(kernel)} is shorter than the input sequence {n_steps}"
        )
    if kernel.mats.shape[2] != feat_dim:
        raise ShapeError(
            f"kernel feature dim {kernel.mats.shape[2]} does not match input {feat_dim}"
        )
    ys = np.zeros_like(xs)
    for t in range(n_steps):
        for s in range(t + 1):
            ys[t] += kernel.mats[s] @ xs[t - s]
    return ys


def ssm_flops(n_steps, feat_dim, state_dim):
    """MACs of one recurrent pass: per step a dense state update (F^2)
    plus the input and output maps (2 F E). Linear in the step count."""
    if n_steps < 1 or feat_dim < 1 or state_dim < 1:
        raise ConfigurationError("all dimensions must be >= 1")
    return n_steps * (state_dim * state_dim + 2 * state_dim * feat_dim)


def _lti_scan_tensors(p, steps):
    """Differentiable scan over a list of (batch, feat) constant arrays."""
    lam = -numkit.exp(p.log_neg_a)
    delta = numkit.exp(p.log_delta)
    u = 0.5 * (delta * lam)
    a_diag = (1.0 + u) / (1.0 - u)                       # (state,)
    b_scale = reshape(delta / (1.0 - u), (p.state_dim, 1))
    b_bar_t = transpose(p.b_in * b_scale)                # (feat, state)
    c_t = transpose(p.c_out)                             # (state, feat)
    batch = steps[0].shape[0]
    h = Tensor(np.zeros((batch, p.state_dim)))
    ys = []
    for x_np in steps:
        xt = Tensor(x_np)
        h = h * a_diag + matmul(xt, b_bar_t)
        y = matmul(h, c_t)
        if p.skip is not None:
            y = y + xt * p.skip
        ys.append(y)
    return concat_rows(ys)


def _selective_scan_tensors(p, steps):
    """Differentiable selective scan; single sample, steps are (1, feat)."""
    maps = p.selective
    lam = -numkit.exp(p.log_neg_a)
    b_flat = reshape(p.b_in, (1, p.state_dim * p.feat_dim))
    c_flat = reshape(p.c_out, (1, p.feat_dim * p.state_dim))
    h = Tensor(np.zeros((1, p.state_dim)))
    ys = []
    for x_np in steps:
        xt = Tensor(x_np)
        delta_t = softplus(matmul(xt, maps.w_delta) + maps.b_delta)  # (1, state)
        u = 0.5 * (delta_t * lam)
        a_t = (1.0 + u) / (1.0 - u)
        b_scale = reshape(delta_t / (1.0 - u), (p.state_dim, 1))
        b_t = reshape(b_flat + matmul(xt, maps.w_b), (p.state_dim, p.feat_dim))
        c_t = reshape(c_flat + matmul(xt, maps.w_c), (p.feat_dim, p.state_dim))
        h = h * a_t + matmul(xt, transpose(b_t * b_scale))
        y = matmul(h, transpose(c_t))
        if p.skip is not None:
            y = y + xt * p.skip
        ys.append(y)
    return concat_rows(ys)


def ssm_forward(p, xs, mode="scan"):
    """Differentiable forward pass over one (T, feat) sample; returns a Tensor.

    Only the recurrent mode is differentiable; requesting the
    convolution mode is refused for selective parameters because the
    system is input-dependent and has no time-invariant kernel.
    """
    if mode not in ("scan", "conv"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    if mode == "conv" and p.selective is not None:
        raise ConfigurationError("convolution mode is unavailable for the selective variant")
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != p.feat_dim:
        raise ShapeError(f"input shape {xs.shape} does not match feature dim {p.feat_dim}")
    if mode == "conv":
        return Tensor(ssm_predict(p, xs, mode="conv"))
    steps = [xs[t:t + 1] for t in range(xs.shape[0])]
    if p.selective is not None:
        return _selective_scan_tensors(p, steps)
    return _lti_scan_tensors(p, steps)


def ssm_forward_batch(p, batch):
    """Differentiable scan over a (B, T, feat) stack.

    Returns a Tensor of shape (T*B, feat) in step-major order, i.e. row
    t*B + b holds step t of sample b. Selective parameters fall back to
    per-sample scans concatenated in the same layout.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[2] != p.feat_dim:
        raise ShapeError(f"batch shape {batch.shape} does not match feature dim {p.feat_dim}")
    if p.selective is not None:
        outs = [ssm_forward(p, batch[b]) for b in range(batch.shape[0])]
        rows = []
        n_steps = batch.shape[1]
        for t in range(n_steps):
            for out in outs:
                rows.append(numkit.row_slice(out, t, t + 1))
        return concat_rows(rows)
    steps = [np.ascontiguousarray(batch[:, t, :]) for t in range(batch.shape[1])]
    return _lti_scan_tensors(p, steps)


def ssm_predict(p, xs, mode="scan", h0=None):
    """Plain-array forward pass (no gradient recording)."""
    if mode not in ("scan", "conv"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    if p.selective is not None:
        if mode == "conv":
            raise ConfigurationError("convolution mode is unavailable for the selective variant")
        return ssm_forward(p, xs).data
    d = ssm_discretize(p)
    skip = p.skip.data if p.skip is not None else None
    xs = np.asarray(xs, dtype=np.float64)
    if mode == "scan":
        return ssm_scan(d, xs, h0=h0, skip=skip)
    ys = ssm_conv(ssm_kernel(d, xs.shape[0]), xs)
    if skip is not None:
        ys = ys + xs * skip
    return ys

"""Single multi-head self-attention layer with instrumented complexity.

The layer maps an (N, D) sequence to an (N, D) output. Per head, a
fused (D, 3*Dh) projection produces queries, keys and values; the
attention map is the row softmax of Q K^T / sqrt(Dh); head outputs are
concatenated in head order and passed through a final (D, D)
projection. There is no positional encoding, bias, masking, residual
path or normalization, so the layer is permutation-equivariant over
sequence positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import (
    ConfigurationError,
    ShapeError,
    Tensor,
    col_slice,
    concat_cols,
    matmul,
    softmax_rows,
    transpose,
)

__all__ = ["MsaParams", "MsaActivations", "msa_init", "msa_forward", "msa_flops"]


@dataclass
class MsaParams:
    """Learnable parameters: one fused qkv projection per head plus the output map."""

    w_qkv: list           # heads tensors of shape (dim, 3 * head_dim)
    w_proj: Tensor        # (dim, dim)
    n_seq: int
    dim: int
    heads: int
    head_dim: int

    def tensors(self):
        return [*self.w_qkv, self.w_proj]


@dataclass
class MsaActivations:
    """Per-head intermediates of one forward pass (plain arrays)."""

    q: list       # heads arrays (n_seq, head_dim)
    k: list
    v: list
    maps: list    # heads arrays (n_seq, n_seq), rows sum to 1
    outs: list    # heads arrays (n_seq, head_dim)
    y: np.ndarray  # (n_seq, dim)


def msa_init(n_seq, dim, heads, seed=0):
    """Draw parameters from a zero-mean uniform with variance 1/dim."""
    if n_seq < 1 or dim < 1 or heads < 1:
        raise ConfigurationError("all attention dimensions must be >= 1")
    if dim % heads != 0:
        raise ConfigurationError(f"head count {heads} must divide embedding dim {dim}")
    head_dim = dim // heads
    rng = np.random.default_rng(seed)
    bound = math.sqrt(3.0 / dim)
    w_qkv = [Tensor(rng.uniform(-bound, bound, size=(dim, 3 * head_dim))) for _ in range(heads)]
    w_proj = Tensor(rng.uniform(-bound, bound, size=(dim, dim)))
    return MsaParams(w_qkv, w_proj, n_seq, dim, heads, head_dim)


def msa_forward(p, x):
    """Run the layer on an (n_seq, dim) input; returns (y, activations).

    Differentiable in the parameters when called under an active
    GradTape. ``x`` may be a plain array or a Tensor.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.data.shape != (p.n_seq, p.dim):
        raise ShapeError(
            f"attention input shape {xt.data.shape} does not match layer ({p.n_seq}, {p.dim})"
        )
    scale = 1.0 / math.sqrt(p.head_dim)
    dh = p.head_dim
    qs, ks, vs, maps, outs = [], [], [], [], []
    for w in p.w_qkv:
        qkv = matmul(xt, w)
        q = col_slice(qkv, 0, dh)
        k = col_slice(qkv, dh, 2 * dh)
        v = col_slice(qkv, 2 * dh, 3 * dh)
        m = softmax_rows(matmul(q, transpose(k)) * scale)
        o = matmul(m, v)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        maps.append(m)
        outs.append(o)
    y = matmul(concat_cols(outs), p.w_proj)
    acts = MsaActivations(
        q=[t.data for t in qs],
        k=[t.data for t in ks],
        v=[t.data for t in vs],
        maps=[t.data for t in maps],
        outs=[t.data for t in outs],
        y=y.data,
    )
    return y, acts


def msa_flops(n_seq, dim, heads=1):
    """Multiply-accumulate count of one forward pass.

    Sums the four matrix-product steps (qkv projections, attention map,
    weighted values, output projection): 3*N*D^2 + N^2*D + N^2*D + N*D^2.
    The softmax itself is not counted. Independent of the head count.
    """
    if n_seq < 1 or dim < 1 or heads < 1:
        raise ConfigurationError("all attention dimensions must be >= 1")
    return 4 * n_seq * dim * dim + 2 * n_seq * n_seq * dim

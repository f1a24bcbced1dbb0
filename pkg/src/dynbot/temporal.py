"""Temporal encoder: position embeddings and causal multi-head self-attention.

Each node's per-snapshot vectors form a ``(T, F)`` sequence.  Three embeddings
are added to it: one row per snapshot index, and one row per bucket of the
node's clustering coefficient and bidirectional-links ratio at that snapshot.
Attention is restricted to the current and earlier snapshots, and snapshots at
which the node did not yet exist are hidden as keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor
from .dyngraph import SnapshotMetrics

DEFAULT_BUCKETS = 20


@dataclass(frozen=True)
class TemporalConfig:
    model_dim: int = 64
    num_heads: int = 4
    bucket_count: int = DEFAULT_BUCKETS

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.bucket_count < 2:
            raise ValueError("bucket_count must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def param_names(config: TemporalConfig, num_snapshots: int) -> list[tuple[str, tuple[int, ...]]]:
    F, B = config.model_dim, config.bucket_count
    return [
        ("temporal.E_AT", (num_snapshots, F)),
        ("temporal.E_LCC", (B, F)),
        ("temporal.E_BLR", (B, F)),
        ("temporal.W_q", (F, F)),
        ("temporal.W_k", (F, F)),
        ("temporal.W_v", (F, F)),
    ]


def bucketize(value: float, bucket_count: int = DEFAULT_BUCKETS) -> int:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"value {value} outside [0, 1]")
    return min(int(math.floor(value * bucket_count)), bucket_count - 1)


def bucketize_array(values: np.ndarray, bucket_count: int = DEFAULT_BUCKETS) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError("values outside [0, 1]")
    return np.minimum(np.floor(values * bucket_count).astype(np.int64), bucket_count - 1)


def position_embeddings(
    metrics: SnapshotMetrics, params: dict[str, Tensor], node: int, k: int, bucket_count: int = DEFAULT_BUCKETS
) -> tuple[Tensor, Tensor, Tensor]:
    """``(p_AT, p_LCC, p_BLR)`` for one node at snapshot ``k``."""
    E_AT = params["temporal.E_AT"]
    if not 0 <= k < E_AT.shape[0]:
        raise IndexError(f"snapshot index {k} out of range")
    p_at = ad.embedding_lookup(E_AT, k)
    p_lcc = ad.embedding_lookup(params["temporal.E_LCC"], bucketize(float(metrics.lcc[k, node]), bucket_count))
    p_blr = ad.embedding_lookup(params["temporal.E_BLR"], bucketize(float(metrics.blr[k, node]), bucket_count))
    return p_at, p_lcc, p_blr


def embedding_sum(
    params: dict[str, Tensor],
    lcc_buckets: np.ndarray,
    blr_buckets: np.ndarray,
    use_at: bool = True,
    use_lcc: bool = True,
    use_blr: bool = True,
) -> Tensor | None:
    """Sum of the enabled embeddings for every (node, snapshot): shape ``(n, T, F)``.

    ``lcc_buckets``/``blr_buckets`` are ``(n, T)`` integer arrays.
    """
    n, T = lcc_buckets.shape
    parts = []
    if use_at:
        parts.append(ad.embedding_lookup(params["temporal.E_AT"], np.broadcast_to(np.arange(T), (n, T))))
    if use_lcc:
        parts.append(ad.embedding_lookup(params["temporal.E_LCC"], lcc_buckets))
    if use_blr:
        parts.append(ad.embedding_lookup(params["temporal.E_BLR"], blr_buckets))
    if not parts:
        return None
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def fuse_inputs(s: Tensor, p_at=None, p_lcc=None, p_blr=None) -> Tensor:
    """``s + p_AT + p_LCC + p_BLR``; missing embeddings count as zero."""
    out = s
    for p in (p_at, p_lcc, p_blr):
        if p is None:
            continue
        if p.shape[-1] != s.shape[-1]:
            raise ValueError(f"embedding width {p.shape[-1]} does not match structural width {s.shape[-1]}")
        out = out + p
    return out


def causal_mask(T: int, active=None) -> np.ndarray:
    """Additive ``(T, T)`` mask: 0 where query ``a`` may see key ``b`` (``a >= b``), else ``-inf``.

    Columns of inactive snapshots are fully hidden.  A batch of activity rows
    ``(n, T)`` gives a ``(n, T, T)`` mask.
    """
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    base = np.where(np.tril(np.ones((T, T), dtype=bool)), 0.0, NEG_INF)
    if active is None:
        return base
    active = np.asarray(active, dtype=bool)
    return np.where(active[..., None, :], base, NEG_INF)


def temporal_attention(
    S_hat: Tensor,
    params: dict[str, Tensor],
    config: TemporalConfig,
    mask=None,
    keep_attention: bool = False,
) -> tuple[Tensor, np.ndarray | None]:
    """Masked multi-head self-attention over ``(T, F)`` or ``(n, T, F)`` sequences.

    Scores are scaled by ``sqrt(F)``, the full model width.  Returns the
    output sequence and, if requested, weights shaped ``(..., D, T, T)``.
    """
    squeeze = S_hat.ndim == 2
    if squeeze:
        S_hat = ad.reshape(S_hat, (1,) + S_hat.shape)
    n, T, F = S_hat.shape
    D, hd = config.num_heads, config.head_dim
    if F != config.model_dim:
        raise ValueError(f"sequence width {F} does not match model_dim {config.model_dim}")

    def split(x):
        return ad.transpose(ad.reshape(x, (n, T, D, hd)), (0, 2, 1, 3))

    Q = split(ad.matmul(S_hat, params["temporal.W_q"]))
    K = split(ad.matmul(S_hat, params["temporal.W_k"]))
    V = split(ad.matmul(S_hat, params["temporal.W_v"]))
    scores = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(F))
    if mask is None:
        mask = causal_mask(T)
    mask = np.asarray(mask, dtype=float)
    if mask.ndim == 3:
        mask = mask[:, None, :, :]
    A = ad.softmax_rows(scores, mask)
    Z = ad.reshape(ad.transpose(ad.matmul(A, V), (0, 2, 1, 3)), (n, T, F))
    if squeeze:
        Z = ad.reshape(Z, (T, F))
    weights = None
    if keep_attention:
        weights = A.data[0] if squeeze else A.data
    return Z, weights

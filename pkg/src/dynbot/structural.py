"""Per-snapshot structural encoder.

Input projection followed by ``L`` layers of multi-head neighbor attention.
Attention inside a neighborhood is ``exp(q_i . k_j / sqrt(d))`` normalized over
the neighborhood, which is exactly a softmax grouped by destination node.

Several snapshots can be encoded in one pass by stacking them block-diagonally
(see :func:`message_edges` with ``offset``); node ``i`` of snapshot ``k`` then
lives at row ``k * num_nodes + i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dyngraph import Snapshot


@dataclass(frozen=True)
class StructuralConfig:
    input_dim: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    slope: float = ad.DEFAULT_SLOPE
    self_loops: bool = True
    residual: bool = False
    layer_norm: bool = False

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1:
            raise ValueError("num_layers and num_heads must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class StructuralOutput:
    s: Tensor
    attention: list[list[np.ndarray]] | None = None
    edges: tuple[np.ndarray, np.ndarray] | None = None


def param_names(config: StructuralConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in canonical order."""
    d, hd = config.hidden_dim, config.head_dim
    out = [("structural.W_I", (d, config.input_dim)), ("structural.b_I", (d,))]
    for layer in range(config.num_layers):
        for c in range(config.num_heads):
            pre = f"structural.l{layer}.h{c}"
            for kind in "qkv":
                out.append((f"{pre}.W_{kind}", (hd, d)))
                out.append((f"{pre}.b_{kind}", (hd,)))
    return out


def message_edges(snapshot: Snapshot, self_loops: bool = True, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``(src, dst)`` arrays for message passing, sorted by ``(dst, src)``.

    Neighborhoods are direction-collapsed and deduplicated.  With
    ``self_loops`` every node also receives from itself, so no group is empty.
    """
    e = snapshot.edges
    s, t = e[:, 0], e[:, 1]
    keep = s != t
    src = np.concatenate([s[keep], t[keep]])
    dst = np.concatenate([t[keep], s[keep]])
    if self_loops:
        ids = np.arange(snapshot.num_nodes, dtype=np.int64)
        src = np.concatenate([src, ids])
        dst = np.concatenate([dst, ids])
    if len(src):
        pairs = np.unique(np.stack([dst, src], axis=1), axis=0)
        dst, src = pairs[:, 0], pairs[:, 1]
    return src + offset, dst + offset


def encode_input(features: Tensor, params: dict[str, Tensor], config: StructuralConfig) -> Tensor:
    W, b = params["structural.W_I"], params["structural.b_I"]
    if features.shape[-1] != W.shape[1]:
        raise ValueError(f"feature width {features.shape[-1]} does not match W_I {W.shape}")
    return ad.leaky_relu(ad.matmul(features, ad.transpose(W)) + b, config.slope)


def _project(h: Tensor, params: dict[str, Tensor], layer: int, head: int, kind: str) -> Tensor:
    pre = f"structural.l{layer}.h{head}"
    return ad.matmul(h, ad.transpose(params[f"{pre}.W_{kind}"])) + params[f"{pre}.b_{kind}"]


def attention_weights(
    h: Tensor, edges: tuple[np.ndarray, np.ndarray], params: dict[str, Tensor], layer: int, head: int
) -> Tensor:
    """Per-edge weights alpha for one head; they sum to one per destination."""
    src, dst = edges
    q = _project(h, params, layer, head, "q")
    k = _project(h, params, layer, head, "k")
    scores = ad.sum(ad.gather_rows(q, dst) * ad.gather_rows(k, src), axis=1)
    scores = ad.scale(scores, 1.0 / math.sqrt(h.shape[1]))
    return ad.neighbor_softmax(scores, dst, h.shape[0])


def _layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - ad.mean(x, axis=-1, keepdims=True)
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    return centered * ad.power(var + eps, -0.5)


def edge_plans(edges, num_rows: int) -> tuple[ad.Segments, ad.Segments]:
    """Grouping plans for ``(src, dst)``; build once and reuse across passes."""
    src, dst = edges
    if isinstance(src, ad.Segments):
        return src, dst
    return ad.Segments(src, num_rows), ad.Segments(dst, num_rows)


def _stacked(params: dict[str, Tensor], config: StructuralConfig, layer: int, kind: str) -> tuple[Tensor, Tensor]:
    # heads keep separate parameters; stacking them only batches the products
    pre = [f"structural.l{layer}.h{c}" for c in range(config.num_heads)]
    W = ad.concat([params[f"{p}.W_{kind}"] for p in pre], axis=0)
    b = ad.concat([params[f"{p}.b_{kind}"] for p in pre], axis=0)
    return W, b


def aggregate_layer(
    h: Tensor,
    edges,
    params: dict[str, Tensor],
    config: StructuralConfig,
    layer: int,
    keep_attention: list | None = None,
) -> Tensor:
    """One attention layer, all heads at once; output columns are head-major."""
    n = h.shape[0]
    src, dst = edge_plans(edges, n)
    C, hd = config.num_heads, config.head_dim

    def project(kind):
        W, b = _stacked(params, config, layer, kind)
        return ad.reshape(ad.matmul(h, ad.transpose(W)) + b, (n, C, hd))

    q, k, v = project("q"), project("k"), project("v")
    scores = ad.sum(ad.gather_rows(q, dst) * ad.gather_rows(k, src), axis=2)
    alpha = ad.neighbor_softmax(ad.scale(scores, 1.0 / math.sqrt(h.shape[1])), dst)
    if keep_attention is not None:
        keep_attention.extend(alpha.data[:, c].copy() for c in range(C))
    msg = ad.gather_rows(v, src) * ad.reshape(alpha, (-1, C, 1))
    out = ad.reshape(ad.leaky_relu(ad.segment_sum(msg, dst), config.slope), (n, C * hd))
    if config.residual:
        out = out + h
    if config.layer_norm:
        out = _layer_norm(out)
    return out


def forward(
    features: Tensor,
    edges: tuple[np.ndarray, np.ndarray],
    params: dict[str, Tensor],
    config: StructuralConfig,
    keep_attention: bool = False,
) -> StructuralOutput:
    """Encode ``features`` rows over a (possibly block-stacked) edge set."""
    h = encode_input(features, params, config)
    plans = edge_plans(edges, h.shape[0])
    attention = [] if keep_attention else None
    for layer in range(config.num_layers):
        layer_att = [] if keep_attention else None
        h = aggregate_layer(h, plans, params, config, layer, layer_att)
        if keep_attention:
            attention.append(layer_att)
    return StructuralOutput(h, attention, edges)


def forward_snapshot(
    features: Tensor, snapshot: Snapshot, params: dict[str, Tensor], config: StructuralConfig,
    keep_attention: bool = False,
) -> StructuralOutput:
    """Encode one snapshot; rows of inactive nodes are zeroed."""
    edges = message_edges(snapshot, config.self_loops)
    out = forward(features, edges, params, config, keep_attention)
    out.s = out.s * snapshot.node_active.astype(float)[:, None]
    return out

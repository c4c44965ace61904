"""Modality encoders mapping each input channel into the shared t x d space.

The indicator and document encoders are per-row affine maps, so the same
function serves a single window or a whole stacked calendar. The graph
encoder runs multi-head attention over all stocks at one timestamp; the
model stacks it across timestamps with shared weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import RelationalGraph
from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
NEG_MASK = -1e30


@dataclass
class IndicatorEncoderParams:
    """Per-indicator lifts plus the 3d -> d fusion projection."""

    w_close: Parameter  # 1 x d
    b_close: Parameter
    w_open: Parameter
    b_open: Parameter
    w_high: Parameter
    b_high: Parameter
    w_mix: Parameter  # 3d x d
    b_mix: Parameter

    def all(self):
        return [
            self.w_close, self.b_close, self.w_open, self.b_open,
            self.w_high, self.b_high, self.w_mix, self.b_mix,
        ]


@dataclass
class DocEncoderParams:
    w: Parameter  # dim x d
    b: Parameter  # 1 x d

    def all(self):
        return [self.w, self.b]


@dataclass
class GatParams:
    """Per-layer, per-head projection W (d x d) and score vector a (2d x 1)."""

    layers: list  # [[(w, a), ...heads], ...layers]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return len(self.layers[0])

    def all(self):
        return [p for layer in self.layers for head in layer for p in head]


def encode_indicators(x: Tensor, params: IndicatorEncoderParams) -> Tensor:
    """Lift each indicator column to width d, concat, and project to d."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.cols != 3:
        raise ShapeError(f"indicator input must be t x 3, got {x.shape}")
    if not np.all(np.isfinite(x.values)):
        raise DataError("indicator input contains non-finite values")
    lifted = []
    for col, (w, b) in enumerate(
        [
            (params.w_close, params.b_close),
            (params.w_open, params.b_open),
            (params.w_high, params.b_high),
        ]
    ):
        s = ad.slice_cols(x, col, col + 1)
        lifted.append(ad.add(ad.matmul(s, w.tensor), b.tensor))
    stacked = ad.concat_cols(lifted)
    return ad.add(ad.matmul(stacked, params.w_mix.tensor), params.b_mix.tensor)


def encode_documents(doc: Tensor, mask, params: DocEncoderParams) -> Tensor:
    """Project document vectors to width d; masked days stay exactly zero.

    The bias is suppressed on masked rows so absence keeps its zero-vector
    meaning downstream.
    """
    doc = doc if isinstance(doc, Tensor) else Tensor(doc)
    mask = np.asarray(mask, dtype=doc.values.dtype).reshape(-1, 1)
    if mask.shape[0] != doc.rows:
        raise ShapeError(f"mask length {mask.shape[0]} != doc rows {doc.rows}")
    projected = ad.add(ad.matmul(doc, params.w.tensor), params.b.tensor)
    return ad.mul(projected, Tensor(mask))


def gat_encode_graph(
    features: Tensor,
    graph,
    params: GatParams,
    symbols: list[str] | None = None,
) -> Tensor:
    """One timestamp of multi-head graph attention over all stock nodes.

    `graph` is either a RelationalGraph (requires `symbols` for row order)
    or a precomputed boolean neighbor mask. Scores use the additive
    leaky-relu form; heads are averaged and passed through an ELU.
    """
    features = features if isinstance(features, Tensor) else Tensor(features)
    if isinstance(graph, RelationalGraph):
        if symbols is None:
            raise ShapeError("symbols required when passing a RelationalGraph")
        neighbors = graph.neighbor_mask(symbols)
    else:
        neighbors = np.asarray(graph, dtype=bool)
    n = features.rows
    if neighbors.shape != (n, n):
        raise ShapeError(f"neighbor mask {neighbors.shape} != ({n}, {n})")
    mask_bias = Tensor(np.where(neighbors, 0.0, NEG_MASK).astype(features.values.dtype))
    ones_row = Tensor(np.ones((1, n), dtype=features.values.dtype))
    ones_col = Tensor(np.ones((n, 1), dtype=features.values.dtype))
    h = features
    for layer in params.layers:
        head_outs = []
        for w, a in layer:
            d = w.values.shape[0]
            hw = ad.matmul(h, w.tensor)
            a_src = ad.slice_rows(a.tensor, 0, d)
            a_dst = ad.slice_rows(a.tensor, d, 2 * d)
            left = ad.matmul(ad.matmul(hw, a_src), ones_row)
            right = ad.matmul(ones_col, ad.transpose(ad.matmul(hw, a_dst)))
            scores = ad.leaky_relu(ad.add(left, right), LEAKY_SLOPE)
            alpha = ad.softmax_rows(ad.add(scores, mask_bias))
            head_outs.append(ad.matmul(alpha, hw))
        total = head_outs[0]
        for extra in head_outs[1:]:
            total = ad.add(total, extra)
        h = ad.elu(ad.scale(total, 1.0 / len(layer)))
    return h


def block_gat_encode(features_st: Tensor, neighbors: np.ndarray, params: GatParams) -> Tensor:
    """gat_encode_graph applied per block of n stacked node sets.

    Input is T timestamps' node features stacked as (T*n) x d; each layer is
    one tape node doing all timestamps' attention with batched matmuls.
    Numerically identical to looping gat_encode_graph per timestamp.
    """
    neighbors = np.asarray(neighbors, dtype=bool)
    n = neighbors.shape[0]
    if features_st.rows % n:
        raise ShapeError(f"{features_st.rows} rows not divisible by {n} nodes")
    n_blocks = features_st.rows // n
    mask_bias = np.where(neighbors, 0.0, NEG_MASK).astype(features_st.values.dtype)
    h = features_st
    for layer in params.layers:
        h = _block_gat_layer(h, layer, mask_bias, n_blocks, n)
    return h


def _block_gat_layer(x_st: Tensor, layer, mask_bias: np.ndarray, n_blocks: int, n: int) -> Tensor:
    k_heads = len(layer)
    d = x_st.cols
    x3 = x_st.values.reshape(n_blocks, n, d)
    w_all = np.stack([w.values for w, _ in layer])  # K x d x d
    a_src = np.stack([a.values[:d] for _, a in layer])  # K x d x 1
    a_dst = np.stack([a.values[d:] for _, a in layer])
    hw = x3[None] @ w_all[:, None]  # K x T x n x d
    left = hw @ a_src[:, None]  # K x T x n x 1
    right = hw @ a_dst[:, None]
    s_raw = left + right.transpose(0, 1, 3, 2)  # K x T x n x n
    s_leaky = np.where(s_raw > 0, s_raw, LEAKY_SLOPE * s_raw) + mask_bias[None, None]
    shifted = s_leaky - s_leaky.max(axis=3, keepdims=True)
    ex = np.exp(shifted)
    attn = ex / ex.sum(axis=3, keepdims=True)
    pre = (attn @ hw).mean(axis=0)  # T x n x d
    out = np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0.0)))

    param_tensors = [p.tensor for pair in layer for p in pair]

    def backward(g):
        g3 = g.reshape(n_blocks, n, d) * np.where(pre > 0, 1.0, out + 1.0)
        gh = (g3 / k_heads)[None]  # 1 x T x n x d, broadcast over heads
        d_attn = gh @ hw.transpose(0, 1, 3, 2)
        d_hw = attn.transpose(0, 1, 3, 2) @ np.broadcast_to(gh, hw.shape)
        dot = (d_attn * attn).sum(axis=3, keepdims=True)
        d_s = attn * (d_attn - dot)
        d_s = d_s * np.where(s_raw > 0, 1.0, LEAKY_SLOPE)
        d_left = d_s.sum(axis=3, keepdims=True)  # K x T x n x 1
        d_right = d_s.sum(axis=2)[..., None]
        d_hw += d_left @ a_src.transpose(0, 2, 1)[:, None]
        d_hw += d_right @ a_dst.transpose(0, 2, 1)[:, None]
        if x_st.requires_grad:
            x_st._ensure_grad()
            x_st.grad += (d_hw @ w_all.transpose(0, 2, 1)[:, None]).sum(axis=0).reshape(-1, d)
        for i, (w, a) in enumerate(layer):
            if w.tensor.requires_grad:
                w.tensor._ensure_grad()
                w.tensor.grad += np.tensordot(x3, d_hw[i], axes=([0, 1], [0, 1]))
            if a.tensor.requires_grad:
                a.tensor._ensure_grad()
                a.tensor.grad[:d] += np.tensordot(hw[i], d_left[i], axes=([0, 1], [0, 1]))
                a.tensor.grad[d:] += np.tensordot(hw[i], d_right[i], axes=([0, 1], [0, 1]))

    return ad.node(out.reshape(-1, d), (x_st, *param_tensors), backward)


def gat_attention_coefficients(
    features: Tensor, neighbors: np.ndarray, params: GatParams
) -> list[np.ndarray]:
    """First-layer attention matrices per head (diagnostic / invariants)."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    out = []
    for w, a in params.layers[0]:
        d = w.values.shape[0]
        hw = features.values @ w.values
        left = hw @ a.values[:d]
        right = hw @ a.values[d:]
        scores = left + right.T
        scores = np.where(scores > 0, scores, LEAKY_SLOPE * scores)
        scores = np.where(neighbors, scores, NEG_MASK)
        shifted = scores - scores.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        out.append(ex / ex.sum(axis=1, keepdims=True))
    return out

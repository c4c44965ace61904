"""Gated cross-attention fusion.

Each stage fuses a guide modality with a key/value modality in two steps:
multi-head cross-attention produces a wide "unstable" feature (head score
matrices are averaged, one shared row-softmax is applied, and the shared
attention matrix hits every head's values), then a sigmoid gate computed
from the guide selects what survives. Stage 1 fuses indicators with
documents; stage 2 fuses that result with the graph features. The design
chains: any stage's stable output is t x d and can guide another stage.

`block_cross_attention` is the batched equivalent operating on row-stacked
windows ((B*t) x d with block size t); it is one tape node with a
hand-derived backward and is property-tested against the per-window path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError


@dataclass
class CrossAttnParams:
    """Per-head query/key/value projections, each d x head_dim."""

    heads: list  # [(wq, wk, wv), ...]

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def head_dim(self) -> int:
        return self.heads[0][0].values.shape[1]

    @property
    def out_dim(self) -> int:
        """Concatenated width d' = M * head_dim; also the score scale."""
        return self.n_heads * self.head_dim

    def all(self):
        return [p for head in self.heads for p in head]


@dataclass
class GateParams:
    w_a: Parameter  # d' x d
    b_a: Parameter  # 1 x d
    w_b: Parameter  # d x d
    b_b: Parameter  # 1 x d

    def all(self):
        return [self.w_a, self.b_a, self.w_b, self.b_b]


@dataclass
class FusionStageParams:
    attn: CrossAttnParams
    gate: GateParams
    glu: Parameter | None = None  # d x d', used only by the glu_fusion variant

    def all(self, variant: str = "full"):
        params = list(self.gate.all())
        if variant == "glu_fusion":
            params.append(self.glu)
        else:
            params.extend(self.attn.all())
        return params


@dataclass
class FusionStageOutput:
    unstable: Tensor  # t x d'
    stable: Tensor  # t x d
    gate_values: Tensor  # t x d, strictly inside (0, 1)


@dataclass
class TrimodalOutput:
    fused_docs: Tensor  # stage-1 stable, t x d
    fused_all: Tensor  # stage-2 stable, t x d
    stages: list = field(default_factory=list)  # FusionStageOutput per stage


def cross_attention(query_src: Tensor, kv_src: Tensor, params: CrossAttnParams) -> Tensor:
    """Shared-softmax multi-head cross-attention, output t x d'."""
    if query_src.cols != kv_src.cols:
        raise ShapeError(f"query {query_src.shape} and kv {kv_src.shape} widths differ")
    if query_src.rows != kv_src.rows:
        raise ShapeError(f"query {query_src.shape} and kv {kv_src.shape} lengths differ")
    inv_scale = 1.0 / math.sqrt(params.out_dim)
    score_sum = None
    values = []
    for wq, wk, wv in params.heads:
        q = ad.matmul(query_src, wq.tensor)
        k = ad.matmul(kv_src, wk.tensor)
        values.append(ad.matmul(kv_src, wv.tensor))
        s = ad.scale(ad.matmul(q, ad.transpose(k)), inv_scale)
        score_sum = s if score_sum is None else ad.add(score_sum, s)
    attn = ad.softmax_rows(ad.scale(score_sum, 1.0 / params.n_heads))
    return ad.concat_cols([ad.matmul(attn, v) for v in values])


def attention_matrix(query_src: Tensor, kv_src: Tensor, params: CrossAttnParams) -> np.ndarray:
    """The shared attention matrix alone (for invariant checks)."""
    inv_scale = 1.0 / math.sqrt(params.out_dim)
    total = np.zeros((query_src.rows, kv_src.rows))
    for wq, wk, _ in params.heads:
        q = query_src.values @ wq.values
        k = kv_src.values @ wk.values
        total += (q @ k.T) * inv_scale
    total /= params.n_heads
    shifted = total - total.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def gated_selection(unstable: Tensor, guide: Tensor, params: GateParams) -> Tensor:
    """Sigmoid gate from the guide, applied to a projection of the unstable."""
    h_a = ad.add(ad.matmul(unstable, params.w_a.tensor), params.b_a.tensor)
    h_b = ad.sigmoid(ad.add(ad.matmul(guide, params.w_b.tensor), params.b_b.tensor))
    return ad.mul(h_a, h_b)


def fuse_stage(
    query: Tensor,
    kv: Tensor,
    guide: Tensor,
    params: FusionStageParams,
    variant: str = "full",
    n_layers: int = 1,
) -> FusionStageOutput:
    """One gated cross-attention block, optionally stacked n_layers deep."""
    out = None
    for _ in range(max(1, n_layers)):
        if variant == "glu_fusion":
            unstable = ad.matmul(kv, params.glu.tensor)
        else:
            unstable = cross_attention(query, kv, params.attn)
        h_a = ad.add(ad.matmul(unstable, params.gate.w_a.tensor), params.gate.b_a.tensor)
        gate = ad.sigmoid(
            ad.add(ad.matmul(guide, params.gate.w_b.tensor), params.gate.b_b.tensor)
        )
        stable = h_a if variant == "ca_fusion" else ad.mul(h_a, gate)
        out = FusionStageOutput(unstable=unstable, stable=stable, gate_values=gate)
        query = guide = stable
    return out


def fuse_trimodal(
    v_i: Tensor,
    v_d: Tensor,
    v_g: Tensor,
    stage1: FusionStageParams,
    stage2: FusionStageParams,
    variant: str = "full",
    n_layers: int = 1,
) -> TrimodalOutput:
    """Indicators guide the document fusion; its output guides the graph fusion."""
    stages = []
    if variant == "drop_docs":
        fused_docs = v_i
    else:
        query = guide = v_d if variant == "drop_indicators" else v_i
        s1 = fuse_stage(query, v_d, guide, stage1, variant=variant, n_layers=n_layers)
        stages.append(s1)
        fused_docs = s1.stable
    if variant == "drop_graph":
        fused_all = fused_docs
    else:
        s2 = fuse_stage(fused_docs, v_g, fused_docs, stage2, variant=variant, n_layers=n_layers)
        stages.append(s2)
        fused_all = s2.stable
    return TrimodalOutput(fused_docs=fused_docs, fused_all=fused_all, stages=stages)


# ---------------------------------------------------------------------------
# fused batched attention over row-stacked windows


def block_cross_attention(
    query_st: Tensor, kv_st: Tensor, params: CrossAttnParams, block: int
) -> Tensor:
    """cross_attention applied independently to each block of `block` rows.

    Input rows are B windows stacked as (B*block) x d; output is
    (B*block) x d'. Numerically identical to slicing, running
    cross_attention per window, and re-stacking.
    """
    if query_st.rows != kv_st.rows or query_st.rows % block:
        raise ShapeError(
            f"stacked inputs {query_st.shape}/{kv_st.shape} not divisible into blocks of {block}"
        )
    n_blocks = query_st.rows // block
    d = query_st.cols
    m = params.n_heads
    k = params.head_dim
    inv_scale = 1.0 / math.sqrt(params.out_dim)
    x3 = query_st.values.reshape(n_blocks, block, d)
    y3 = kv_st.values.reshape(n_blocks, block, d)
    wq = np.stack([h[0].values for h in params.heads])  # m x d x k
    wk = np.stack([h[1].values for h in params.heads])
    wv = np.stack([h[2].values for h in params.heads])
    # all contractions phrased as (batched) matmul / tensordot so BLAS runs them
    q4 = x3[None] @ wq[:, None]  # m x b x t x k
    k4 = y3[None] @ wk[:, None]
    v4 = y3[None] @ wv[:, None]
    scores = (q4 @ k4.transpose(0, 1, 3, 2)).sum(axis=0) * (inv_scale / m)  # b x t x s
    shifted = scores - scores.max(axis=2, keepdims=True)
    ex = np.exp(shifted)
    attn = ex / ex.sum(axis=2, keepdims=True)  # b x t x s
    out4 = attn[None] @ v4
    out_vals = np.ascontiguousarray(out4.transpose(1, 2, 0, 3)).reshape(
        n_blocks * block, m * k
    )

    head_params = [p.tensor for trio in params.heads for p in trio]

    def backward(g):
        g4 = np.ascontiguousarray(g.reshape(n_blocks, block, m, k).transpose(2, 0, 1, 3))
        d_attn = (g4 @ v4.transpose(0, 1, 3, 2)).sum(axis=0)
        d_v4 = attn.transpose(0, 2, 1)[None] @ g4
        dot = (d_attn * attn).sum(axis=2, keepdims=True)
        d_scores = attn * (d_attn - dot) * (inv_scale / m)
        d_q4 = d_scores[None] @ k4
        d_k4 = d_scores.transpose(0, 2, 1)[None] @ q4
        if query_st.requires_grad:
            query_st._ensure_grad()
            query_st.grad += (d_q4 @ wq.transpose(0, 2, 1)[:, None]).sum(axis=0).reshape(-1, d)
        if kv_st.requires_grad:
            kv_st._ensure_grad()
            d_y3 = (d_k4 @ wk.transpose(0, 2, 1)[:, None]).sum(axis=0)
            d_y3 += (d_v4 @ wv.transpose(0, 2, 1)[:, None]).sum(axis=0)
            kv_st.grad += d_y3.reshape(-1, d)
        for i, (h_wq, h_wk, h_wv) in enumerate(params.heads):
            for p, dp4, src in ((h_wq, d_q4, x3), (h_wk, d_k4, y3), (h_wv, d_v4, y3)):
                if p.tensor.requires_grad:
                    p.tensor._ensure_grad()
                    p.tensor.grad += np.tensordot(src, dp4[i], axes=([0, 1], [0, 1]))

    return ad.node(out_vals, (query_st, kv_st, *head_params), backward)

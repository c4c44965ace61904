"""Prediction head: time-axis reduction, feature-axis reduction, and loss.

The time MLP reduces t -> ceil(t/2) -> ceil(t/4) -> 1 along the window axis
with a ReLU after every layer and is applied with shared weights to both the
fused features and the raw indicator features; concatenating the two
d-vectors lets the classifier fall back on the primary modality alone. The
feature MLP reduces 2d -> d -> ceil(d/2) -> 3 with ReLUs after the first two
layers only, leaving unbounded logits for the softmax cross-entropy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError

log = logging.getLogger(__name__)


def time_mlp_widths(t: int) -> tuple[int, int, int]:
    widths = (max(1, -(-t // 2)), max(1, -(-t // 4)), 1)
    if t < 4:
        log.warning("window length %d < 4: time-MLP widths clamp to %s", t, widths)
    return widths


def feature_mlp_widths(d: int) -> tuple[int, int, int]:
    return (max(1, d), max(1, -(-d // 2)), 3)


@dataclass
class PredictorParams:
    """Shared time-reduction stack plus the feature-reduction stack."""

    time_layers: list  # [(w: t_in x t_out, b: 1 x t_out), ...] x 3
    feat_layers: list  # [(w, b), ...] x 3

    def all(self):
        return [p for pair in self.time_layers + self.feat_layers for p in pair]


def _reduce_time(x: Tensor, params: PredictorParams) -> Tensor:
    """t x d -> 1 x d through the shared time stack (ReLU after each layer)."""
    h = ad.transpose(x)  # d x t
    for w, b in params.time_layers:
        h = ad.relu(ad.add(ad.matmul(h, w.tensor), b.tensor))
    return ad.transpose(h)  # 1 x d


def aggregate_time(fused: Tensor, indicators: Tensor, params: PredictorParams) -> Tensor:
    """Collapse the window axis of both branches and concatenate to 1 x 2d."""
    if fused.shape != indicators.shape:
        raise ShapeError(f"branch shapes differ: {fused.shape} vs {indicators.shape}")
    expect = params.time_layers[0][0].values.shape[0]
    if fused.rows != expect:
        raise ShapeError(f"window length {fused.rows} != time-MLP input {expect}")
    return ad.concat_cols([_reduce_time(fused, params), _reduce_time(indicators, params)])


def aggregate_features(h: Tensor, params: PredictorParams) -> Tensor:
    """2d feature vector(s) -> 3 raw logits per row."""
    out = h
    for i, (w, b) in enumerate(params.feat_layers):
        out = ad.add(ad.matmul(out, w.tensor), b.tensor)
        if i < len(params.feat_layers) - 1:
            out = ad.relu(out)
    return out


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Batch-mean softmax cross-entropy over class indices in {0, 1, 2}."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.rows:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.rows} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.cols):
        raise ShapeError(f"labels outside [0, {logits.cols})")
    onehot = np.zeros(logits.shape, dtype=logits.values.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    logp = ad.log_softmax_rows(logits)
    return ad.scale(ad.sum_all(ad.mul(logp, Tensor(onehot))), -1.0 / max(1, labels.size))


def predict_classes(logits: Tensor | np.ndarray) -> np.ndarray:
    vals = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    return vals.argmax(axis=1)


# ---------------------------------------------------------------------------
# fused batched equivalents over row-stacked windows


def block_time_matmul(x_st: Tensor, w: Parameter, block: int) -> Tensor:
    """Right-multiply each (block x d) block along its time axis by w.

    (B*block) x d with weight block x u -> (B*u) x d; identical to
    transposing each window, multiplying, and transposing back.
    """
    if x_st.rows % block:
        raise ShapeError(f"{x_st.rows} rows not divisible into blocks of {block}")
    t_in, t_out = w.values.shape
    if t_in != block:
        raise ShapeError(f"weight rows {t_in} != block {block}")
    n_blocks = x_st.rows // block
    d = x_st.cols
    x3 = x_st.values.reshape(n_blocks, block, d)
    out3 = (x3.transpose(0, 2, 1) @ w.values).transpose(0, 2, 1)

    def backward(g):
        g3 = g.reshape(n_blocks, t_out, d)
        if x_st.requires_grad:
            x_st._ensure_grad()
            x_st.grad += (g3.transpose(0, 2, 1) @ w.values.T).transpose(0, 2, 1).reshape(-1, d)
        if w.tensor.requires_grad:
            w.tensor._ensure_grad()
            w.tensor.grad += np.tensordot(x3, g3, axes=([0, 2], [0, 2]))

    return ad.node(np.ascontiguousarray(out3).reshape(n_blocks * t_out, d), (x_st, w.tensor), backward)


def block_reduce_time(x_st: Tensor, params: PredictorParams, block: int) -> Tensor:
    """Batched _reduce_time over stacked windows: (B*block) x d -> B x d.

    Time-layer biases are stored 1 x u; they broadcast per block here via
    their (u x 1) view, matching the per-window transpose layout.
    """
    h = x_st
    cur = block
    for w, b in params.time_layers:
        u = w.values.shape[1]
        h = block_time_matmul(h, w, cur)
        h = _add_block_bias_row(h, b, u)
        h = ad.relu(h)
        cur = u
    return h  # cur == 1, so (B*1) x d


def _add_block_bias_row(x_st: Tensor, b: Parameter, block: int) -> Tensor:
    n_blocks = x_st.rows // block
    d = x_st.cols
    bcol = b.values.reshape(block, 1)
    out = x_st.values.reshape(n_blocks, block, d) + bcol[None, :, :]

    def backward(g):
        if x_st.requires_grad:
            x_st._ensure_grad()
            x_st.grad += g
        if b.tensor.requires_grad:
            b.tensor._ensure_grad()
            b.tensor.grad += (
                g.reshape(n_blocks, block, d).sum(axis=(0, 2)).reshape(b.values.shape)
            )

    return ad.node(out.reshape(-1, d), (x_st, b.tensor), backward)

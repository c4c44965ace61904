"""Full trimodal model: parameters, batched forward pass, variant wiring.

The batched forward works on a date-major packing of the panel: all stocks'
feature rows for one calendar date sit together, so the indicator encoder
runs once over the whole calendar, the graph encoder runs once per date, and
every window is just a row-gather. Windows are then processed as row-stacked
blocks through the fused attention/time-reduction ops. A slow per-sample
reference path (`forward_sample`) composes the public per-window functions
and is used to pin the batched path in tests.

Variant wiring:
  glu_fusion       attention replaced by a linear map of the kv modality
  ca_fusion        gate forced to 1 (pure cross-attention)
  drop_docs        document features zeroed; stage 1 skipped
  drop_graph       graph features zeroed; stage 2 skipped
  drop_indicators  indicator features zeroed (which also silences the graph
                   encoder's input); documents serve as stage-1 query/guide
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import VARIANTS, TrainConfig
from .data import DatasetSplit, Panel, RelationalGraph, WindowSample
from .encoders import (
    DocEncoderParams,
    GatParams,
    IndicatorEncoderParams,
    block_gat_encode,
    encode_documents,
    encode_indicators,
    gat_encode_graph,
)
from .errors import ConfigError, ShapeError
from .fusion import (
    CrossAttnParams,
    FusionStageParams,
    GateParams,
    TrimodalOutput,
    block_cross_attention,
    fuse_trimodal,
)
from .predictor import (
    PredictorParams,
    aggregate_features,
    aggregate_time,
    block_reduce_time,
    cross_entropy_loss,
    feature_mlp_widths,
    time_mlp_widths,
)


class ParamStore:
    """All learnable weights, addressable by stable names in creation order."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, values: np.ndarray) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name=name, tensor=Tensor(values, requires_grad=True))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def n_entries(self) -> int:
        return sum(p.values.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self._params.items():
            out[f"param/{name}"] = p.values
            out[f"adam_m/{name}"] = p.adam_m
            out[f"adam_v/{name}"] = p.adam_v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            for prefix, target in (("param", "values"), ("adam_m", None), ("adam_v", None)):
                key = f"{prefix}/{name}"
                if key not in arrays:
                    raise ConfigError(f"checkpoint missing array {key!r}")
                arr = arrays[key].astype(p.values.dtype)
                if arr.shape != p.values.shape:
                    raise ShapeError(
                        f"checkpoint array {key} has shape {arr.shape}, expected {p.values.shape}"
                    )
                if prefix == "param":
                    p.tensor.values = arr
                elif prefix == "adam_m":
                    p.adam_m = arr
                else:
                    p.adam_v = arr

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            p.tensor.values = snap[name].copy()


def glorot(rng: np.random.Generator, shape: tuple[int, int], dtype) -> np.ndarray:
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class PackedPanel:
    """Date-major constants the batched forward consumes.

    Row (date, stock) lives at index date * n_stocks + stock.
    """

    symbols: list[str]
    n_stocks: int
    n_dates: int
    ind: np.ndarray  # (T*n) x 3
    doc: np.ndarray  # (T*n) x dim
    mask: np.ndarray  # (T*n) x 1
    neighbors: np.ndarray  # n x n bool
    close: np.ndarray  # n x T (diagnostics)
    calendar: list[str]

    @classmethod
    def from_panel(cls, panel: Panel, graph: RelationalGraph, dtype=np.float64) -> "PackedPanel":
        n, T = panel.n_stocks, panel.n_dates
        ind = panel.features.transpose(1, 0, 2).reshape(T * n, 3).astype(dtype)
        doc = panel.doc_emb.transpose(1, 0, 2).reshape(T * n, panel.dim).astype(dtype)
        mask = panel.doc_mask.T.reshape(T * n, 1).astype(dtype)
        return cls(
            symbols=panel.symbols,
            n_stocks=n,
            n_dates=T,
            ind=ind,
            doc=doc,
            mask=mask,
            neighbors=graph.neighbor_mask(panel.symbols),
            close=panel.close,
            calendar=panel.calendar,
        )


def sample_refs(samples: list[WindowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    stock_idx = np.array([s.stock_index for s in samples], dtype=np.intp)
    start = np.array([s.start for s in samples], dtype=np.intp)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return stock_idx, start, labels


class TrimodalModel:
    """Parameter container plus forward passes for every variant."""

    def __init__(self, cfg: TrainConfig, doc_dim: int, variant: str = "full"):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        cfg.validate()
        self.cfg = cfg
        self.variant = variant
        self.doc_dim = doc_dim
        self.params = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        d, dt = cfg.d, cfg.dtype
        store = self.params

        def weight(name, shape):
            return store.add(name, glorot(rng, shape, dt))

        def bias(name, width, rows=1):
            return store.add(name, np.zeros((rows, width), dtype=dt))

        self.ind = IndicatorEncoderParams(
            w_close=weight("ind.close.w", (1, d)), b_close=bias("ind.close.b", d),
            w_open=weight("ind.open.w", (1, d)), b_open=bias("ind.open.b", d),
            w_high=weight("ind.high.w", (1, d)), b_high=bias("ind.high.b", d),
            w_mix=weight("ind.mix.w", (3 * d, d)), b_mix=bias("ind.mix.b", d),
        )
        self.doc = DocEncoderParams(w=weight("doc.w", (doc_dim, d)), b=bias("doc.b", d))
        self.gat = GatParams(
            layers=[
                [
                    (
                        weight(f"gat.l{li}.h{k}.w", (d, d)),
                        weight(f"gat.l{li}.h{k}.a", (2 * d, 1)),
                    )
                    for k in range(cfg.gat_heads)
                ]
                for li in range(cfg.gat_layers)
            ]
        )
        dh = cfg.effective_head_dim
        d_prime = cfg.heads * dh
        self.stages = []
        for si in (1, 2):
            attn = CrossAttnParams(
                heads=[
                    (
                        weight(f"fuse{si}.h{m}.wq", (d, dh)),
                        weight(f"fuse{si}.h{m}.wk", (d, dh)),
                        weight(f"fuse{si}.h{m}.wv", (d, dh)),
                    )
                    for m in range(cfg.heads)
                ]
            )
            gate = GateParams(
                w_a=weight(f"fuse{si}.gate.wa", (d_prime, d)),
                b_a=bias(f"fuse{si}.gate.ba", d),
                w_b=weight(f"fuse{si}.gate.wb", (d, d)),
                b_b=bias(f"fuse{si}.gate.bb", d),
            )
            glu = weight(f"fuse{si}.glu.w", (d, d_prime)) if variant == "glu_fusion" else None
            self.stages.append(FusionStageParams(attn=attn, gate=gate, glu=glu))
        t_widths = time_mlp_widths(cfg.ws)
        f_widths = feature_mlp_widths(d)
        time_layers, feat_layers = [], []
        t_in = cfg.ws
        for i, t_out in enumerate(t_widths):
            time_layers.append(
                (weight(f"pred.time.l{i}.w", (t_in, t_out)), bias(f"pred.time.l{i}.b", t_out))
            )
            t_in = t_out
        f_in = 2 * d
        for i, f_out in enumerate(f_widths):
            feat_layers.append(
                (weight(f"pred.feat.l{i}.w", (f_in, f_out)), bias(f"pred.feat.l{i}.b", f_out))
            )
            f_in = f_out
        self.pred = PredictorParams(time_layers=time_layers, feat_layers=feat_layers)

    # -- batched path --------------------------------------------------

    def _calendar_features(self, packed: PackedPanel, r_lo: int, r_hi: int, lo: int, hi: int):
        """Encoded per-(date, stock) features for calendar range [lo, hi)."""
        n = packed.n_stocks
        dt = self.cfg.dtype
        rows = r_hi - r_lo
        zeros = None
        if self.variant == "drop_indicators":
            vi_cal = Tensor(np.zeros((rows, self.cfg.d), dtype=dt))
            zeros = vi_cal
        else:
            vi_cal = encode_indicators(Tensor(packed.ind[r_lo:r_hi]), self.ind)
        if self.variant == "drop_docs":
            vd_cal = zeros if zeros is not None else Tensor(np.zeros((rows, self.cfg.d), dtype=dt))
        else:
            vd_cal = encode_documents(
                Tensor(packed.doc[r_lo:r_hi]), packed.mask[r_lo:r_hi], self.doc
            )
        if self.variant in ("drop_graph", "drop_indicators"):
            # an all-zero node field attends to zeros, so the encoder output
            # is exactly zero; skip the computation
            vg_cal = Tensor(np.zeros((rows, self.cfg.d), dtype=dt))
        else:
            vg_cal = block_gat_encode(vi_cal, packed.neighbors, self.gat)
        return vi_cal, vd_cal, vg_cal

    def _fuse_blocks(self, query, kv, guide, stage: FusionStageParams, block: int):
        out = None
        for _ in range(max(1, self.cfg.fusion_layers)):
            if self.variant == "glu_fusion":
                unstable = ad.matmul(kv, stage.glu.tensor)
            else:
                unstable = block_cross_attention(query, kv, stage.attn, block)
            h_a = ad.add(ad.matmul(unstable, stage.gate.w_a.tensor), stage.gate.b_a.tensor)
            gate = ad.sigmoid(
                ad.add(ad.matmul(guide, stage.gate.w_b.tensor), stage.gate.b_b.tensor)
            )
            stable = h_a if self.variant == "ca_fusion" else ad.mul(h_a, gate)
            out = (unstable, stable, gate)
            query = guide = stable
        return out

    def forward_batch(
        self,
        packed: PackedPanel,
        stock_idx: np.ndarray,
        start: np.ndarray,
        diagnostics: bool = False,
    ):
        """Logits (B x 3) for B windows; optionally per-stage fusion tensors."""
        t = self.cfg.ws
        n = packed.n_stocks
        stock_idx = np.asarray(stock_idx, dtype=np.intp)
        start = np.asarray(start, dtype=np.intp)
        lo = int(start.min())
        hi = int(start.max()) + t
        vi_cal, vd_cal, vg_cal = self._calendar_features(packed, lo * n, hi * n, lo, hi)
        idx = ((start[:, None] - lo + np.arange(t)[None, :]) * n + stock_idx[:, None]).reshape(-1)
        q_i = ad.gather_rows(vi_cal, idx)
        d_w = ad.gather_rows(vd_cal, idx)
        g_w = ad.gather_rows(vg_cal, idx)
        diag = {}
        if self.variant == "drop_docs":
            fused_docs = q_i
        else:
            query = guide = d_w if self.variant == "drop_indicators" else q_i
            u1, fused_docs, gate1 = self._fuse_blocks(query, d_w, guide, self.stages[0], t)
            diag["stage1"] = (u1, fused_docs, gate1)
        if self.variant == "drop_graph":
            fused_all = fused_docs
        else:
            u2, fused_all, gate2 = self._fuse_blocks(fused_docs, g_w, fused_docs, self.stages[1], t)
            diag["stage2"] = (u2, fused_all, gate2)
        h_fused = block_reduce_time(fused_all, self.pred, t)
        h_ind = block_reduce_time(q_i, self.pred, t)
        logits = aggregate_features(ad.concat_cols([h_fused, h_ind]), self.pred)
        if diagnostics:
            return logits, diag
        return logits

    def loss_batch(self, packed: PackedPanel, samples: list[WindowSample]):
        stock_idx, start, labels = sample_refs(samples)
        logits = self.forward_batch(packed, stock_idx, start)
        return cross_entropy_loss(logits, labels), logits

    def predict_part(
        self, packed: PackedPanel, samples: list[WindowSample], batch_size: int = 4096
    ) -> np.ndarray:
        """Predicted classes for a sample list, in list order (no tape)."""
        stock_idx, start, _ = sample_refs(samples)
        out = np.empty(len(samples), dtype=np.int64)
        with ad.no_grad():
            for b in range(0, len(samples), batch_size):
                sl = slice(b, min(b + batch_size, len(samples)))
                logits = self.forward_batch(packed, stock_idx[sl], start[sl])
                out[sl] = logits.values.argmax(axis=1)
        return out

    # -- per-sample reference path --------------------------------------

    def forward_sample(self, packed: PackedPanel, stock: int, start: int) -> Tensor:
        """Reference forward for one window, composing the public ops."""
        t = self.cfg.ws
        n = packed.n_stocks
        dt = self.cfg.dtype
        rows = [(start + j) * n + stock for j in range(t)]
        if self.variant == "drop_indicators":
            v_i = Tensor(np.zeros((t, self.cfg.d), dtype=dt))
        else:
            v_i = encode_indicators(Tensor(packed.ind[rows]), self.ind)
        if self.variant == "drop_docs":
            v_d = Tensor(np.zeros((t, self.cfg.d), dtype=dt))
        else:
            v_d = encode_documents(Tensor(packed.doc[rows]), packed.mask[rows], self.doc)
        if self.variant in ("drop_graph", "drop_indicators"):
            v_g = Tensor(np.zeros((t, self.cfg.d), dtype=dt))
        else:
            per_date = []
            for j in range(t):
                tau = start + j
                all_feats = encode_indicators(
                    Tensor(packed.ind[tau * n : (tau + 1) * n]), self.ind
                )
                g_all = gat_encode_graph(all_feats, packed.neighbors, self.gat)
                per_date.append(ad.slice_rows(g_all, stock, stock + 1))
            v_g = ad.concat_rows(per_date)
        fused: TrimodalOutput = fuse_trimodal(
            v_i, v_d, v_g, self.stages[0], self.stages[1],
            variant=self.variant, n_layers=self.cfg.fusion_layers,
        )
        h = aggregate_time(fused.fused_all, v_i, self.pred)
        return aggregate_features(h, self.pred)

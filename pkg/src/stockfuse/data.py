"""Dataset ingestion and assembly.

Raw inputs are a prices CSV, a documents JSONL, an embeddings JSONL, and a
relational-graph TSV. Assembly aligns everything on a global trading
calendar, computes 3-class trend labels from close-to-close returns, builds
sliding windows, and splits them chronologically by label date.

Class indices are fixed everywhere: down=0, flat=1, up=2.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import load_bundle, save_bundle
from .errors import ConfigError, DataError, FormatError, MissingEmbeddingError

log = logging.getLogger(__name__)

CLASS_NAMES = ("down", "flat", "up")
DOWN, FLAT, UP = 0, 1, 2
NO_LABEL = -1


@dataclass
class PriceSeries:
    """Daily open/high/close rows for one symbol, sorted by date."""

    symbol: str
    dates: list[str]
    open: np.ndarray
    high: np.ndarray
    close: np.ndarray

    def __len__(self) -> int:
        return len(self.dates)


@dataclass
class DocumentDay:
    symbol: str
    date: str
    texts: list[str]


@dataclass
class EmbeddingTable:
    """Pooled per-(symbol, date) document vectors of a fixed width."""

    dim: int
    entries: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def get(self, symbol: str, date: str):
        return self.entries.get((symbol, date))

    def put(self, symbol: str, date: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DataError(
                f"embedding for ({symbol}, {date}) has width {vec.shape}, expected ({self.dim},)"
            )
        if not np.all(np.isfinite(vec)):
            raise DataError(f"embedding for ({symbol}, {date}) contains non-finite values")
        self.entries[(symbol, date)] = vec


@dataclass
class RelationalGraph:
    """Stock-sector structure collapsed to per-stock neighbor lists.

    `adjacency` maps each stock to a sorted neighbor list that always
    includes the stock itself; co-membership in any sector makes two stocks
    mutual neighbors, as does a direct stock-stock edge.
    """

    nodes: set[str]
    edges: list[tuple[str, str, str]]
    adjacency: dict[str, list[str]]

    def neighbor_mask(self, symbols: list[str]) -> np.ndarray:
        """Boolean n x n mask over `symbols` order; missing stocks isolate."""
        index = {s: i for i, s in enumerate(symbols)}
        mask = np.zeros((len(symbols), len(symbols)), dtype=bool)
        missing = [s for s in symbols if s not in self.adjacency]
        if missing:
            log.warning("stocks absent from graph treated as isolates: %s", ", ".join(missing))
        for s, i in index.items():
            mask[i, i] = True
            for nb in self.adjacency.get(s, ()):
                j = index.get(nb)
                if j is not None:
                    mask[i, j] = True
        return mask


@dataclass
class WindowSample:
    """One training instance: aligned window plus next-day label."""

    symbol: str
    dates: list[str]
    indicators: np.ndarray  # ws x 3, columns (close, open, high), raw prices
    doc_embeddings: np.ndarray  # ws x dim
    doc_mask: np.ndarray  # ws
    label: int
    stock_index: int = 0
    start: int = 0  # window start position on the panel calendar
    label_date: str = ""


@dataclass
class Panel:
    """All modalities aligned on (stock, global calendar date).

    `features` holds the model-side indicator rows: close/open/high divided
    by the previous day's close (day 0 uses its own close), which keeps the
    inputs scale-free and lets one row serve every window that covers the
    date. `observed` is False where a price row was forward-filled to keep
    the calendar rectangular.
    """

    symbols: list[str]
    calendar: list[str]
    close: np.ndarray  # n x T
    open: np.ndarray
    high: np.ndarray
    features: np.ndarray  # n x T x 3
    doc_emb: np.ndarray  # n x T x dim
    doc_mask: np.ndarray  # n x T
    observed: np.ndarray  # n x T bool
    labels: np.ndarray  # n x T int, NO_LABEL where undefined

    @property
    def n_stocks(self) -> int:
        return len(self.symbols)

    @property
    def n_dates(self) -> int:
        return len(self.calendar)

    @property
    def dim(self) -> int:
        return self.doc_emb.shape[2]


@dataclass
class DatasetSplit:
    train: list[WindowSample]
    valid: list[WindowSample]
    test: list[WindowSample]
    label_spec: tuple[float, float]
    calendar: list[str]
    panel: Panel | None = None

    def part(self, name: str) -> list[WindowSample]:
        try:
            return getattr(self, name)
        except AttributeError:
            raise ConfigError(f"unknown split part {name!r}") from None


# ---------------------------------------------------------------------------
# file loading


def load_prices(path) -> list[PriceSeries]:
    """Parse a prices CSV with header date,symbol,open,high,close."""
    path = Path(path)
    required = {"date", "symbol", "open", "high", "close"}
    rows_by_symbol: dict[str, dict[str, tuple]] = {}
    bad_rows: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = sorted(required - set(reader.fieldnames or ()))
            raise FormatError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                date = row["date"].strip()
                symbol = row["symbol"].strip()
                o, h, c = (float(row[k]) for k in ("open", "high", "close"))
                if not date or not symbol:
                    raise ValueError("empty date or symbol")
            except (TypeError, ValueError):
                bad_rows.append(lineno)
                continue
            if not (np.isfinite(o) and np.isfinite(h) and np.isfinite(c)):
                bad_rows.append(lineno)
                continue
            if o <= 0 or h <= 0 or c <= 0:
                raise DataError(f"{path}:{lineno}: non-positive price for {symbol} on {date}")
            per_symbol = rows_by_symbol.setdefault(symbol, {})
            if date in per_symbol:
                raise DataError(f"{path}:{lineno}: duplicate row for ({symbol}, {date})")
            per_symbol[date] = (o, h, c)
    if bad_rows:
        log.warning("%s: rejected %d malformed rows (lines %s)", path, len(bad_rows), bad_rows)
    series = []
    for symbol in sorted(rows_by_symbol):
        per_symbol = rows_by_symbol[symbol]
        dates = sorted(per_symbol)
        o, h, c = (np.array([per_symbol[d][k] for d in dates]) for k in range(3))
        series.append(PriceSeries(symbol=symbol, dates=dates, open=o, high=h, close=c))
    return series


def load_documents(path) -> list[DocumentDay]:
    """Parse documents JSONL: one {"symbol","date","texts":[...]} per line."""
    days = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                days.append(
                    DocumentDay(
                        symbol=str(obj["symbol"]),
                        date=str(obj["date"]),
                        texts=[str(t) for t in obj.get("texts", [])],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad document line: {exc}") from exc
    return days


def load_embeddings(path, dim: int | None = None) -> EmbeddingTable:
    """Parse embeddings JSONL: {"symbol","date","vector":[...]} per line."""
    table = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                vec = obj["vector"]
                symbol, date = str(obj["symbol"]), str(obj["date"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad embedding line: {exc}") from exc
            if table is None:
                table = EmbeddingTable(dim=dim if dim is not None else len(vec))
            table.put(symbol, date, vec)
    if table is None:
        table = EmbeddingTable(dim=dim if dim is not None else 1536)
    return table


def load_graph(path, stocks=None) -> RelationalGraph:
    """Parse the graph TSV (src<TAB>relation<TAB>dst) and collapse sectors.

    Identifiers appearing only as destinations are sector nodes; stocks
    sharing one become mutual neighbors. A destination that is itself a
    known stock makes a direct neighbor edge. With `stocks` given, edges
    whose source is not a known stock are dropped with a warning.
    """
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            edges.append((parts[0].strip(), parts[1].strip(), parts[2].strip()))
    return build_graph(edges, stocks=stocks)


def build_graph(edges, stocks=None) -> RelationalGraph:
    sources = {src for src, _, _ in edges}
    stock_set = set(stocks) if stocks is not None else set(sources)
    kept = []
    for src, rel, dst in edges:
        if src not in stock_set:
            log.warning("dropping edge (%s, %s, %s): unknown stock %r", src, rel, dst, src)
            continue
        kept.append((src, rel, dst))
    sector_members: dict[str, set[str]] = {}
    neighbors: dict[str, set[str]] = {s: {s} for s in stock_set}
    for src, _, dst in kept:
        if dst in stock_set:
            neighbors[src].add(dst)
            neighbors[dst].add(src)
        else:
            sector_members.setdefault(dst, set()).add(src)
    for members in sector_members.values():
        for a in members:
            neighbors[a].update(members)
    nodes = stock_set | set(sector_members)
    adjacency = {s: sorted(nb) for s, nb in neighbors.items()}
    return RelationalGraph(nodes=nodes, edges=kept, adjacency=adjacency)


# ---------------------------------------------------------------------------
# labeling, alignment, windows


def compute_labels(series: PriceSeries, lower: float, upper: float) -> np.ndarray:
    """Per-date trend classes from close-to-close returns.

    Entry t labels the move into date t: up if the return is >= upper, down
    if <= lower (both boundaries inclusive), flat in between. Entry 0 is
    NO_LABEL; series shorter than 2 yield all NO_LABEL.
    """
    if not lower < 0 < upper:
        raise ConfigError(f"thresholds must straddle zero, got ({lower}, {upper})")
    labels = np.full(len(series), NO_LABEL, dtype=np.int64)
    if len(series) < 2:
        return labels
    r = series.close[1:] / series.close[:-1] - 1.0
    labels[1:] = np.where(r >= upper, UP, np.where(r <= lower, DOWN, FLAT))
    return labels


def align_documents(
    series: PriceSeries, days: list[DocumentDay], table: EmbeddingTable
) -> tuple[np.ndarray, np.ndarray]:
    """Per-trading-date embedding matrix and presence mask for one symbol.

    Dates with documents take the cached (already pooled) vector; dates
    without get the zero vector and mask 0. Documents on non-trading dates
    are dropped with a warning.
    """
    date_index = {d: i for i, d in enumerate(series.dates)}
    matrix = np.zeros((len(series), table.dim), dtype=np.float64)
    mask = np.zeros(len(series), dtype=np.int64)
    missing = []
    for day in days:
        if day.symbol != series.symbol or not day.texts:
            continue
        pos = date_index.get(day.date)
        if pos is None:
            log.warning(
                "dropping documents for (%s, %s): not a trading date", day.symbol, day.date
            )
            continue
        vec = table.get(day.symbol, day.date)
        if vec is None:
            missing.append((day.symbol, day.date))
            continue
        matrix[pos] = vec
        mask[pos] = 1
    if missing:
        raise MissingEmbeddingError(missing)
    return matrix, mask


def build_windows(
    series: PriceSeries,
    doc_matrix: np.ndarray,
    doc_mask: np.ndarray,
    labels: np.ndarray,
    ws: int,
    stock_index: int = 0,
    observed: np.ndarray | None = None,
    calendar_offset: int = 0,
) -> list[WindowSample]:
    """Stride-1 sliding windows labeled by the day after the window.

    Yields len(series) - ws samples; shorter series are skipped with a
    warning. Samples whose window or label date was forward-filled (per
    `observed`) are dropped.
    """
    if ws < 2:
        raise ConfigError(f"window size must be >= 2, got {ws}")
    n = len(series)
    if n < ws + 1:
        log.warning("skipping %s: %d dates < window %d + 1", series.symbol, n, ws)
        return []
    indicators = np.stack([series.close, series.open, series.high], axis=1)
    samples = []
    for start in range(n - ws):
        label = int(labels[start + ws])
        if label == NO_LABEL:
            continue
        if observed is not None and not observed[start : start + ws + 1].all():
            continue
        samples.append(
            WindowSample(
                symbol=series.symbol,
                dates=series.dates[start : start + ws],
                indicators=indicators[start : start + ws],
                doc_embeddings=doc_matrix[start : start + ws],
                doc_mask=doc_mask[start : start + ws],
                label=label,
                stock_index=stock_index,
                start=start + calendar_offset,
                label_date=series.dates[start + ws],
            )
        )
    return samples


def chronological_split(
    samples: list[WindowSample],
    ratios: tuple[float, float, float],
    label_spec: tuple[float, float] = (0.0, 0.0),
    calendar: list[str] | None = None,
    panel: Panel | None = None,
) -> DatasetSplit:
    """Partition samples by label-date quantiles, oldest dates first."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three positives summing to 1, got {ratios}")
    if not samples:
        raise ConfigError("cannot split an empty sample list")
    label_dates = sorted({s.label_date for s in samples})
    n_dates = len(label_dates)
    b1 = int(np.floor(n_dates * ratios[0]))
    b2 = int(np.floor(n_dates * (ratios[0] + ratios[1])))
    if not 1 <= b1 < b2 < n_dates:
        raise ConfigError(
            f"cannot form three nonempty chronological splits from {n_dates} label dates"
        )
    rank = {d: i for i, d in enumerate(label_dates)}
    parts: tuple[list, list, list] = ([], [], [])
    for s in sorted(samples, key=lambda s: (s.label_date, s.symbol, s.start)):
        r = rank[s.label_date]
        parts[0 if r < b1 else 1 if r < b2 else 2].append(s)
    return DatasetSplit(
        train=parts[0],
        valid=parts[1],
        test=parts[2],
        label_spec=tuple(label_spec),
        calendar=calendar if calendar is not None else sorted({d for s in samples for d in s.dates} | {s.label_date for s in samples}),
        panel=panel,
    )


def batch_iter(samples: list, batch_size: int, seed: int, epoch: int = 0):
    """Deterministic shuffled batches; order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, int(epoch)])
    order = rng.permutation(len(samples))
    for lo in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[lo : lo + batch_size]]


# ---------------------------------------------------------------------------
# panel assembly


FEATURE_SCALE = 100.0  # percent units keep encoder inputs O(1)


def _indicator_features(close: np.ndarray, open_: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Previous-close relative changes in percent, (T, 3), (close, open, high).

    Row t is (close_t/close_{t-1} - 1, open_t/close_{t-1} - 1,
    high_t/close_{t-1} - 1) * 100; row 0 uses its own close as the base.
    Being per-date quantities, the same row serves every window covering the
    date, which the shared graph computation relies on.
    """
    prev = np.concatenate(([close[0]], close[:-1]))
    return np.stack(
        [close / prev - 1.0, open_ / prev - 1.0, high / prev - 1.0], axis=1
    ) * FEATURE_SCALE


def build_panel(
    series_list: list[PriceSeries],
    doc_days: list[DocumentDay],
    table: EmbeddingTable,
    label_spec: tuple[float, float],
) -> Panel:
    """Align all stocks on the union calendar and stack every modality.

    Stocks missing a calendar date get forward-filled prices (flat day) so
    the graph encoder always sees a full cross-section; those positions are
    marked unobserved and never produce samples.
    """
    if not series_list:
        raise DataError("no price series to assemble")
    symbols = sorted(s.symbol for s in series_list)
    by_symbol = {s.symbol: s for s in series_list}
    calendar = sorted({d for s in series_list for d in s.dates})
    n, T = len(symbols), len(calendar)
    cal_index = {d: i for i, d in enumerate(calendar)}
    close = np.zeros((n, T))
    open_ = np.zeros((n, T))
    high = np.zeros((n, T))
    observed = np.zeros((n, T), dtype=bool)
    doc_emb = np.zeros((n, T, table.dim))
    doc_mask = np.zeros((n, T), dtype=np.int64)
    labels = np.full((n, T), NO_LABEL, dtype=np.int64)
    days_by_symbol: dict[str, list[DocumentDay]] = {}
    for day in doc_days:
        days_by_symbol.setdefault(day.symbol, []).append(day)
    filled_cells = 0
    for i, sym in enumerate(symbols):
        ser = by_symbol[sym]
        pos = np.array([cal_index[d] for d in ser.dates])
        close[i, pos] = ser.close
        open_[i, pos] = ser.open
        high[i, pos] = ser.high
        observed[i, pos] = True
        if not observed[i].all():
            filled_cells += int((~observed[i]).sum())
            last = np.maximum.accumulate(np.where(observed[i], np.arange(T), -1))
            first_obs = int(pos.min())
            last = np.where(last < 0, first_obs, last)
            for arr in (close, open_, high):
                arr[i] = arr[i, last]
        lab = compute_labels(ser, *label_spec)
        labels[i, pos] = lab
        mat, msk = align_documents(ser, days_by_symbol.get(sym, []), table)
        doc_emb[i, pos] = mat
        doc_mask[i, pos] = msk
    if filled_cells:
        log.warning("forward-filled %d missing (stock, date) price cells", filled_cells)
    features = np.stack(
        [_indicator_features(close[i], open_[i], high[i]) for i in range(n)], axis=0
    )
    return Panel(
        symbols=symbols,
        calendar=calendar,
        close=close,
        open=open_,
        high=high,
        features=features,
        doc_emb=doc_emb,
        doc_mask=doc_mask,
        observed=observed,
        labels=labels,
    )


def panel_windows(panel: Panel, ws: int) -> list[WindowSample]:
    """Build every stock's windows against the shared panel calendar."""
    samples = []
    for i, sym in enumerate(panel.symbols):
        series = PriceSeries(
            symbol=sym,
            dates=panel.calendar,
            open=panel.open[i],
            high=panel.high[i],
            close=panel.close[i],
        )
        samples.extend(
            build_windows(
                series,
                panel.doc_emb[i],
                panel.doc_mask[i],
                panel.labels[i],
                ws,
                stock_index=i,
                observed=panel.observed[i],
            )
        )
    return samples


def build_dataset(
    series_list: list[PriceSeries],
    doc_days: list[DocumentDay],
    table: EmbeddingTable,
    graph: RelationalGraph,
    ws: int,
    label_spec: tuple[float, float],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> DatasetSplit:
    panel = build_panel(series_list, doc_days, table, label_spec)
    samples = panel_windows(panel, ws)
    return chronological_split(
        samples, ratios, label_spec=label_spec, calendar=panel.calendar, panel=panel
    )


# ---------------------------------------------------------------------------
# split serialization


def save_split(path, split: DatasetSplit, graph: RelationalGraph | None = None) -> None:
    if split.panel is None:
        raise ConfigError("only panel-backed splits can be serialized")
    p = split.panel
    arrays = {
        "close": p.close,
        "open": p.open,
        "high": p.high,
        "doc_emb": p.doc_emb,
        "doc_mask": p.doc_mask,
        "observed": p.observed,
        "labels": p.labels,
    }
    for name in ("train", "valid", "test"):
        part = split.part(name)
        arrays[f"{name}_refs"] = np.array(
            [[s.stock_index, s.start, s.label] for s in part], dtype=np.int64
        ).reshape(len(part), 3)
    meta = {
        "kind": "dataset_split",
        "symbols": p.symbols,
        "calendar": p.calendar,
        "label_spec": list(split.label_spec),
        "ws": len(split.train[0].dates) if split.train else 0,
        "adjacency": {s: nb for s, nb in sorted(graph.adjacency.items())} if graph else None,
        "graph_edges": [list(e) for e in graph.edges] if graph else None,
    }
    save_bundle(path, arrays, meta)


def load_split(path) -> tuple[DatasetSplit, RelationalGraph | None]:
    arrays, meta = load_bundle(path)
    if meta.get("kind") != "dataset_split":
        raise FormatError(f"{path} is not a serialized dataset split")
    symbols = list(meta["symbols"])
    calendar = list(meta["calendar"])
    ws = int(meta["ws"])
    label_spec = tuple(meta["label_spec"])
    features = np.stack(
        [
            _indicator_features(arrays["close"][i], arrays["open"][i], arrays["high"][i])
            for i in range(len(symbols))
        ],
        axis=0,
    )
    panel = Panel(
        symbols=symbols,
        calendar=calendar,
        close=arrays["close"],
        open=arrays["open"],
        high=arrays["high"],
        features=features,
        doc_emb=arrays["doc_emb"],
        doc_mask=arrays["doc_mask"],
        observed=arrays["observed"].astype(bool),
        labels=arrays["labels"],
    )
    indicators = {
        i: np.stack([panel.close[i], panel.open[i], panel.high[i]], axis=1)
        for i in range(len(symbols))
    }
    parts = {}
    for name in ("train", "valid", "test"):
        rows = []
        for stock_index, start, label in arrays[f"{name}_refs"]:
            i, t0 = int(stock_index), int(start)
            rows.append(
                WindowSample(
                    symbol=symbols[i],
                    dates=calendar[t0 : t0 + ws],
                    indicators=indicators[i][t0 : t0 + ws],
                    doc_embeddings=panel.doc_emb[i, t0 : t0 + ws],
                    doc_mask=panel.doc_mask[i, t0 : t0 + ws],
                    label=int(label),
                    stock_index=i,
                    start=t0,
                    label_date=calendar[t0 + ws],
                )
            )
        parts[name] = rows
    split = DatasetSplit(
        train=parts["train"],
        valid=parts["valid"],
        test=parts["test"],
        label_spec=label_spec,
        calendar=calendar,
        panel=panel,
    )
    graph = None
    if meta.get("adjacency") is not None:
        graph = RelationalGraph(
            nodes=set(symbols),
            edges=[tuple(e) for e in meta.get("graph_edges") or []],
            adjacency={s: list(nb) for s, nb in meta["adjacency"].items()},
        )
    return split, graph

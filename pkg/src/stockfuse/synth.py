"""Synthetic trimodal dataset with a planted, decomposable signal.

The generative story plants complementary information in each modality so
modality-drop experiments have a known answer:

* Each sector follows a persistent 3-state trend chain; stocks mostly adhere
  to their sector's state. The state at day t drives the return into day
  t+1, so recent returns (the indicator modality, shared with neighbors via
  the graph) carry most of the predictive signal.
* Each day's documents describe the stock's own latent state for that day,
  i.e. tomorrow's move, including the idiosyncratic part prices cannot see.
  A `conflict_rate` fraction of documents deliberately describe a wrong
  class, and a `doc_missing_rate` fraction of days have no documents at all.

Dropping documents therefore costs accuracy, and dropping indicators (which
also starves the graph encoder) collapses performance the hardest.
"""

from __future__ import annotations

import csv
import datetime
import json
from pathlib import Path

import numpy as np

from .data import DocumentDay, EmbeddingTable, PriceSeries, RelationalGraph, build_graph

SECTOR_STAY = 0.85
SECTOR_ADHERENCE = 0.92
DRIFT = (-0.02, 0.0, 0.02)
RET_NOISE = 0.004
DOC_NOISE = 1.0


def trading_calendar(n_days: int, start: str = "2020-01-02") -> list[str]:
    """`n_days` consecutive weekdays from `start`, ISO formatted."""
    day = datetime.date.fromisoformat(start)
    out = []
    while len(out) < n_days:
        if day.weekday() < 5:
            out.append(day.isoformat())
        day += datetime.timedelta(days=1)
    return out


def synth_dataset(
    n_stocks: int,
    n_days: int,
    dim: int,
    doc_signal: float,
    doc_missing_rate: float,
    conflict_rate: float,
    n_sectors: int,
    seed: int,
):
    """Generate (series, doc_days, table, graph, truth).

    `truth[symbol][t]` is the latent class driving the move from day t to
    day t+1 (the last entry drives a move past the calendar and is unused).
    """
    if not (0.0 <= doc_missing_rate <= 1.0 and 0.0 <= conflict_rate <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    calendar = trading_calendar(n_days)
    symbols = [f"S{i:03d}" for i in range(n_stocks)]
    sectors = [f"SEC{i % n_sectors}" for i in range(n_stocks)]

    # persistent sector trend chains
    sector_names = sorted(set(sectors))
    w = np.zeros((len(sector_names), n_days), dtype=np.int64)
    for c in range(len(sector_names)):
        w[c, 0] = rng.integers(3)
        for t in range(1, n_days):
            if rng.random() < SECTOR_STAY:
                w[c, t] = w[c, t - 1]
            else:
                w[c, t] = rng.choice([k for k in range(3) if k != w[c, t - 1]])
    sector_idx = {name: i for i, name in enumerate(sector_names)}

    z = np.zeros((n_stocks, n_days), dtype=np.int64)
    for s in range(n_stocks):
        follow = rng.random(n_days) < SECTOR_ADHERENCE
        z[s] = np.where(follow, w[sector_idx[sectors[s]]], rng.integers(3, size=n_days))

    # prices: the latent class at day t drives the return into day t+1
    drift = np.asarray(DRIFT)
    series_list = []
    for s, sym in enumerate(symbols):
        close = np.empty(n_days)
        close[0] = 100.0 * float(np.exp(rng.normal(0.0, 0.05)))
        rets = drift[z[s, :-1]] + rng.normal(0.0, RET_NOISE, size=n_days - 1)
        for t in range(1, n_days):
            close[t] = close[t - 1] * (1.0 + rets[t - 1])
        prev = np.concatenate(([close[0]], close[:-1]))
        open_ = prev * (1.0 + rng.normal(0.0, 0.002, size=n_days))
        high = np.maximum(open_, close) * (1.0 + np.abs(rng.normal(0.0, 0.0015, size=n_days)))
        series_list.append(
            PriceSeries(symbol=sym, dates=list(calendar), open=open_, high=high, close=close)
        )

    # documents: class prototypes plus noise, with conflicts and gaps
    protos = np.linalg.qr(rng.normal(size=(dim, 3)))[0].T  # 3 orthonormal rows
    table = EmbeddingTable(dim=dim)
    doc_days = []
    for s, sym in enumerate(symbols):
        for t, date in enumerate(calendar):
            if rng.random() < doc_missing_rate:
                continue
            cls = int(z[s, t])
            if rng.random() < conflict_rate:
                cls = int(rng.choice([k for k in range(3) if k != cls]))
            vec = doc_signal * protos[cls] + rng.normal(0.0, DOC_NOISE, size=dim)
            doc_days.append(
                DocumentDay(symbol=sym, date=date, texts=[f"{sym} daily brief {date}"])
            )
            table.put(sym, date, vec)

    graph = build_graph(
        [(sym, "industry_sector", sectors[i]) for i, sym in enumerate(symbols)],
        stocks=symbols,
    )
    truth = {sym: z[i].copy() for i, sym in enumerate(symbols)}
    return series_list, doc_days, table, graph, truth


def write_synth_files(outdir, series_list, doc_days, table, graph, truth) -> dict[str, Path]:
    """Write the standard input files; deterministic byte-for-byte."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "prices": outdir / "prices.csv",
        "documents": outdir / "documents.jsonl",
        "embeddings": outdir / "embeddings.jsonl",
        "graph": outdir / "graph.tsv",
        "truth": outdir / "truth.json",
    }
    with open(paths["prices"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", "symbol", "open", "high", "close"])
        for ser in series_list:
            for i, date in enumerate(ser.dates):
                writer.writerow(
                    [date, ser.symbol, repr(float(ser.open[i])),
                     repr(float(ser.high[i])), repr(float(ser.close[i]))]
                )
    with open(paths["documents"], "w") as fh:
        for day in sorted(doc_days, key=lambda d: (d.symbol, d.date)):
            fh.write(
                json.dumps(
                    {"symbol": day.symbol, "date": day.date, "texts": day.texts},
                    sort_keys=True,
                )
                + "\n"
            )
    with open(paths["embeddings"], "w") as fh:
        for (sym, date), vec in sorted(table.entries.items()):
            fh.write(
                json.dumps(
                    {"symbol": sym, "date": date, "vector": vec.tolist()}, sort_keys=True
                )
                + "\n"
            )
    with open(paths["graph"], "w") as fh:
        for src, rel, dst in graph.edges:
            fh.write(f"{src}\t{rel}\t{dst}\n")
    with open(paths["truth"], "w") as fh:
        json.dump({sym: arr.tolist() for sym, arr in sorted(truth.items())}, fh, sort_keys=True)
        fh.write("\n")
    return paths

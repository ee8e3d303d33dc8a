"""CSV ingestion and export, one row per snapshot."""

import csv

import numpy as np

from ..errors import DataError, ParseError
from .book import DEPTH, MarketSeries, book_violations

COLUMNS = (["ts_ms"]
           + [f"bid_px_{i}" for i in range(1, DEPTH + 1)]
           + [f"bid_vol_{i}" for i in range(1, DEPTH + 1)]
           + [f"ask_px_{i}" for i in range(1, DEPTH + 1)]
           + [f"ask_vol_{i}" for i in range(1, DEPTH + 1)]
           + ["trade_px", "trade_vol"])


def _num(text, line, col):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"column {col!r}: cannot parse {text!r} as a number", line) from None


def ingest_csv(path, tick_size):
    """Read and validate a snapshot CSV into a :class:`MarketSeries`.

    Raises:
        ParseError: header mismatch or malformed row (with its line number).
        DataError: empty file, invariant violations (naming the offending
            lines) or timestamps that are not strictly increasing at a
            constant cadence.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, no snapshots")
        if [h.strip() for h in header] != COLUMNS:
            raise ParseError(f"header does not match the expected schema {','.join(COLUMNS)}", 1)
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(COLUMNS):
                raise ParseError(f"expected {len(COLUMNS)} fields, got {len(row)}", line)
            ts_text = row[0].strip()
            try:
                ts = int(ts_text)
            except ValueError:
                raise ParseError(f"column 'ts_ms': cannot parse {ts_text!r} as an integer", line) from None
            vals = [_num(c, line, COLUMNS[j + 1]) for j, c in enumerate(row[1:21])]
            trade = []
            for j, c in enumerate(row[21:]):
                c = c.strip()
                trade.append(np.nan if c == "" else _num(c, line, COLUMNS[21 + j]))
            if np.isnan(trade[0]) != np.isnan(trade[1]):
                raise ParseError("trade_px and trade_vol must both be set or both empty", line)
            rows.append((line, ts, vals, trade))
    if not rows:
        raise DataError(f"{path}: empty file, no snapshots")

    lines = np.array([r[0] for r in rows])
    ts = np.array([r[1] for r in rows], dtype=np.int64)
    book = np.array([r[2] for r in rows], dtype=float)
    trade = np.array([r[3] for r in rows], dtype=float)
    bid_px, bid_vol, ask_px, ask_vol = (book[:, k * DEPTH:(k + 1) * DEPTH] for k in range(4))

    bad = book_violations(bid_px, bid_vol, ask_px, ask_vol, trade[:, 0], trade[:, 1], tick_size)
    if bad:
        detail = "; ".join(f"line {lines[r]}: {why}" for r, why in bad[:10])
        raise DataError(f"{len(bad)} invalid row(s) in {path}: {detail}", [int(lines[r]) for r, _ in bad])
    diffs = np.diff(ts)
    if np.any(diffs <= 0):
        where = [int(lines[i + 1]) for i in np.flatnonzero(diffs <= 0)]
        raise DataError(f"non-monotone timestamps at line(s) {where[:10]}", where)
    if len(ts) > 1 and np.any(diffs != diffs[0]):
        where = [int(lines[i + 1]) for i in np.flatnonzero(diffs != diffs[0])]
        raise DataError(f"irregular cadence at line(s) {where[:10]}", where)
    cadence = int(diffs[0]) if len(ts) > 1 else None
    return MarketSeries(ts, bid_px, bid_vol, ask_px, ask_vol, trade[:, 0], trade[:, 1],
                        tick_size, cadence, validate=False)


def _fmt(x):
    if not np.isfinite(x):
        return ""
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def write_csv(series, path):
    """Write ``series`` in the ingestion schema; output is byte-deterministic."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(series)):
            w.writerow([str(int(series.timestamps[i]))]
                       + [_fmt(v) for v in series.bid_px[i]] + [_fmt(v) for v in series.bid_vol[i]]
                       + [_fmt(v) for v in series.ask_px[i]] + [_fmt(v) for v in series.ask_vol[i]]
                       + [_fmt(series.trade_px[i]), _fmt(series.trade_vol[i])])
    return path

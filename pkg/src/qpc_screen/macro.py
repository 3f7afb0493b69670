"""Fred-QD-style panels: ingestion, stationarity transforms, rolling quantile forecasts."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (EmptyFilter, NonPositiveForLog, ParseError, QpcError, UnknownSeries,
                     UnknownTcode)
from .numeric import Dataset
from .quantreg import check_loss, validate_tau
from .screening import ScreenConfig, run_screen
from .simulation import _map, l1qr_select

log = logging.getLogger(__name__)

MISSING = {"", "na", "nan", "."}
# rows lost at the start of the sample by each transform code
LOST_ROWS = {1: 0, 2: 1, 3: 2, 4: 0, 5: 1, 6: 2, 7: 2}
_QUARTER = re.compile(r"^(\d{4})\s*[Qq]([1-4])$")


def quarter_label(text: str) -> str:
    """Normalize '1959Q1', '1/1/1959' or '1959-01-01' to 'YYYYQn'."""
    s = text.strip()
    m = _QUARTER.match(s)
    if m:
        return f"{m.group(1)}Q{m.group(2)}"
    for fmt in ("%m/%d/%Y", "%Y-%m-%d", "%Y-%m"):
        try:
            d = datetime.strptime(s, fmt)
        except ValueError:
            continue
        return f"{d.year}Q{(d.month - 1) // 3 + 1}"
    raise ValueError(f"unrecognized date {text!r}")


def _quarter_key(label: str) -> tuple[int, int]:
    y, q = label.split("Q")
    return int(y), int(q)


@dataclass(frozen=True)
class MacroPanel:
    dates: tuple[str, ...]  # quarterly labels, strictly increasing
    names: tuple[str, ...]
    values: np.ndarray  # (T, k); NaN marks a missing value
    tcodes: tuple[int, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.dates), len(self.names)):
            raise ValueError("values shape does not match dates x names")
        if len(self.tcodes) != len(self.names):
            raise ValueError("one tcode per series required")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate series names")
        keys = [_quarter_key(d) for d in self.dates]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise ValueError("dates must be strictly increasing")
        for c in self.tcodes:
            if c not in LOST_ROWS:
                raise UnknownTcode(f"unknown transform code {c}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownSeries(f"no series named {name!r}") from None


def _parse_float(cell: str, row: int, col: int) -> float:
    s = cell.strip()
    if s.lower() in MISSING:
        return math.nan
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"malformed number {cell!r}", row=row, column=col) from None
    if math.isinf(v):
        raise ParseError(f"infinite value {cell!r}", row=row, column=col)
    return v


def parse_panel(text: str) -> MacroPanel:
    """Parse Fred-QD layout: names header, optional 'factors' row, tcode row, dated rows."""
    rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ParseError("need a header row and a transform-code row", row=1, column=1)
    header = [c.strip() for c in rows[0]]
    names = header[1:]
    if not names:
        raise ParseError("no series columns", row=1, column=2)
    if len(set(names)) != len(names):
        dup = [k for k, c in Counter(names).items() if c > 1]
        raise ParseError(f"duplicate series names {dup}", row=1, column=1)
    i = 1
    if rows[i][0].strip().lower() == "factors":
        i += 1
    if i >= len(rows):
        raise ParseError("missing transform-code row", row=i + 1, column=1)
    tcodes = []
    for c, cell in enumerate(rows[i][1:], start=2):
        try:
            v = float(cell)
        except ValueError:
            raise ParseError(f"malformed transform code {cell!r}", row=i + 1, column=c) from None
        if v != int(v) or int(v) not in LOST_ROWS:
            raise UnknownTcode(f"unknown transform code {cell!r}", row=i + 1, column=c)
        tcodes.append(int(v))
    if len(tcodes) != len(names):
        raise ParseError("transform-code row length differs from header", row=i + 1, column=1)
    dates, data = [], []
    for r, row in enumerate(rows[i + 1:], start=i + 2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(row)}", row=r, column=1)
        try:
            dates.append(quarter_label(row[0]))
        except ValueError as exc:
            raise ParseError(str(exc), row=r, column=1) from None
        data.append([_parse_float(cell, r, c) for c, cell in enumerate(row[1:], start=2)])
    if not data:
        raise ParseError("no data rows", row=i + 2, column=1)
    try:
        return MacroPanel(tuple(dates), tuple(names), np.array(data), tuple(tcodes))
    except ValueError as exc:
        raise ParseError(str(exc), row=i + 2, column=1) from None


def load_panel(path, format: str = "fredqd") -> MacroPanel:
    if format != "fredqd":
        raise ValueError(f"unsupported panel format {format!r}")
    return parse_panel(Path(path).read_text())


def transform_series(x: np.ndarray, code: int, name: str = "") -> np.ndarray:
    """Apply one transform code; the result has the input's length with NaN in lost rows."""
    x = np.asarray(x, dtype=float)
    if code not in LOST_ROWS:
        raise UnknownTcode(f"unknown transform code {code}")
    if code in (4, 5, 6):
        obs = x[~np.isnan(x)]
        if np.any(obs <= 0.0):
            raise NonPositiveForLog(name)
        x = np.log(x)
    if code == 7:
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.concatenate([[np.nan], x[1:] / x[:-1] - 1.0])
        code = 2
    out = x.copy()
    for _ in range({1: 0, 2: 1, 3: 2, 4: 0, 5: 1, 6: 2}[code]):
        out = np.concatenate([[np.nan], np.diff(out)])
    return out


@dataclass(frozen=True)
class TransformedPanel:
    dates: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray  # (T, k) stationary series; NaN where missing


def apply_tcodes(panel: MacroPanel) -> TransformedPanel:
    """Transform every series and trim the leading rows lost to differencing."""
    lost = max(LOST_ROWS[c] for c in panel.tcodes)
    cols = [transform_series(panel.values[:, k], c, panel.names[k])
            for k, c in enumerate(panel.tcodes)]
    Z = np.column_stack(cols)[lost:]
    Z = np.where(np.isfinite(Z), Z, np.nan)
    Z.setflags(write=False)
    return TransformedPanel(panel.dates[lost:], panel.names, Z)


# ---------------------------------------------------------------- forecasting

@dataclass(frozen=True)
class ForecastRecord:
    origin: str  # date of the last predictor row used
    target_date: str  # date of the forecast quantile
    selected: tuple[str, ...]
    prediction: float
    realized: float
    loss: float
    error: str | None = None


@dataclass(frozen=True)
class ForecastRun:
    window: int
    target: str
    tau: float
    method: str
    predictors: tuple[str, ...]
    records: tuple[ForecastRecord, ...]

    def to_dict(self) -> dict:
        def f(x):
            return None if x is None or math.isnan(x) else float(f"{x:.6g}")

        return {
            "window": self.window, "target": self.target, "tau": f(self.tau),
            "method": self.method, "records": [
                {"origin": r.origin, "target_date": r.target_date, "selected": list(r.selected),
                 "prediction": f(r.prediction), "realized": f(r.realized), "loss": f(r.loss),
                 "error": r.error}
                for r in self.records
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _forecast_one(args) -> ForecastRecord:
    Z, dates, names, t_idx, preds, o, l, tau, method, screen_kw = args
    rows = slice(o - l + 1, o + 1)  # window rows of predictors
    realized = Z[o + 1, t_idx]
    base = dict(origin=dates[o], target_date=dates[o + 1])
    try:
        Xw = Z[rows][:, preds]
        ok = ~np.isnan(Xw).any(axis=0)
        cols = [preds[k] for k in np.flatnonzero(ok)]
        yw = Z[o - l + 2:o + 1, t_idx]
        if not cols:
            raise QpcError("no complete predictor in window")
        if np.isnan(yw).any() or math.isnan(realized):
            raise QpcError("target missing inside window")
        X_train = Z[o - l + 1:o][:, cols]
        x_new = Z[o, cols][None, :]
        data = Dataset(yw, X_train, tuple(names[c] for c in cols))
        if method == "L1QR":
            sel, fit = l1qr_select(data, tau, screen_kw.get("D_max"))
            pred = float(fit.predict(x_new)[0])
        else:
            trace = run_screen(data, ScreenConfig(tau=tau, algorithm=method, **screen_kw))
            if trace.final_fit is None:
                raise QpcError("final refit failed")
            sel = trace.selected
            pred = float(trace.predict(x_new)[0])
        chosen = tuple(sorted(data.names[j] for j in sel))
        return ForecastRecord(selected=chosen, prediction=pred, realized=float(realized),
                              loss=float(check_loss(realized - pred, tau)), **base)
    except (QpcError, ValueError) as exc:
        return ForecastRecord(selected=(), prediction=math.nan, realized=float(realized),
                              loss=math.nan, error=f"{type(exc).__name__}: {exc}", **base)


def rolling_forecast(panel: MacroPanel | TransformedPanel, target: str, tau: float, l: int,
                     method: str = "QPCS", screen_kw: dict | None = None,
                     jobs: int = 1) -> ForecastRun:
    """Fixed-length sliding-window one-step-ahead quantile forecasts.

    At origin o the window holds predictor rows o-l+1..o; the fit pairs X_t with
    y_{t+1} for t = o-l+1..o-1 and the forecast of y_{o+1} uses X_o. There are
    T - l origins.
    """
    tau = validate_tau(tau)
    if method not in ("QPCS", "QPCFR", "L1QR"):
        raise ValueError(f"unknown method {method!r}")
    tp = apply_tcodes(panel) if isinstance(panel, MacroPanel) else panel
    if target not in tp.names:
        raise UnknownSeries(f"no series named {target!r}")
    T = len(tp.dates)
    if not 3 <= l < T:
        raise ValueError(f"window length {l} must satisfy 3 <= l < T = {T}")
    t_idx = tp.names.index(target)
    preds = [k for k in range(len(tp.names)) if k != t_idx]
    tasks = [(tp.values, tp.dates, tp.names, t_idx, preds, o, l, tau, method, dict(screen_kw or {}))
             for o in range(l - 1, T - 1)]
    records = _map(_forecast_one, tasks, jobs)
    failed = sum(r.error is not None for r in records)
    if failed:
        log.warning("%d of %d origins failed", failed, len(records))
    return ForecastRun(l, target, tau, method, tuple(tp.names[k] for k in preds), tuple(records))


def _in_filter(date: str, start: str | None, end: str | None) -> bool:
    k = _quarter_key(date)
    if start is not None and k < _quarter_key(quarter_label(start)):
        return False
    if end is not None and k > _quarter_key(quarter_label(end)):
        return False
    return True


def filtered_records(run: ForecastRun, start: str | None = None, end: str | None = None):
    return [r for r in run.records if _in_filter(r.target_date, start, end)]


def frequency_table(run: ForecastRun, top_k: int | None = None, start: str | None = None,
                    end: str | None = None) -> list[tuple[str, float]]:
    """Share of forecast dates in [start, end] at which each series was selected."""
    recs = filtered_records(run, start, end)
    if not recs:
        raise EmptyFilter(f"no forecasts between {start} and {end}")
    counts = Counter(name for r in recs for name in r.selected)
    table = sorted(((name, c / len(recs)) for name, c in counts.items()),
                   key=lambda t: (-t[1], t[0]))
    return table if top_k is None else table[:top_k]


def selection_counts(run: ForecastRun, start: str | None = None,
                     end: str | None = None) -> tuple[Counter, int]:
    recs = filtered_records(run, start, end)
    return Counter(name for r in recs for name in r.selected), len(recs)


def frequency_csv(table: Sequence[tuple[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "name", "freq"])
    for i, (name, freq) in enumerate(table, start=1):
        w.writerow([i, name, f"{freq:.6g}"])
    return buf.getvalue()


def inclusion_check(run: ForecastRun, name: str, start: str | None = None,
                    end: str | None = None) -> tuple[int, int]:
    """(times selected, total origins), e.g. (4, 61)."""
    if name not in run.predictors:
        raise UnknownSeries(f"{name!r} is not a predictor in this run")
    recs = filtered_records(run, start, end)
    return sum(name in r.selected for r in recs), len(recs)


def synthetic_panel(T: int = 141, k: int = 20, seed: int = 0, target: str = "GDPC1",
                    start_year: int = 1985) -> MacroPanel:
    """Fred-QD-like raw panel whose transformed sample has exactly ``T`` rows.

    The target's transformed growth rate loads on the lagged transforms of the
    first two predictors.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    lost = 2
    N = T + lost
    codes = [5] + [(1, 2, 5, 6, 7)[j % 5] for j in range(k)]
    names = [target] + [f"S{j + 1:03d}" for j in range(k)]
    stationary = rng.standard_normal((N, k + 1)) * 0.01
    stationary[:, 0] *= 0.3
    stationary[1:, 0] += 0.8 * stationary[:-1, 1] - 0.6 * stationary[:-1, 2]
    raw = np.empty_like(stationary)
    for j, c in enumerate(codes):
        z = stationary[:, j]
        if c == 1:
            raw[:, j] = z
        elif c == 2:
            raw[:, j] = np.cumsum(z)
        elif c == 5:
            raw[:, j] = 100.0 * np.exp(np.cumsum(z))
        elif c == 6:
            raw[:, j] = 100.0 * np.exp(np.cumsum(np.cumsum(z) * 0.1))
        else:  # 7: cumulative growth rates
            raw[:, j] = 100.0 * np.cumprod(1.0 + 0.02 + np.cumsum(z) * 0.1)
    dates = tuple(f"{start_year + i // 4}Q{i % 4 + 1}" for i in range(N))
    return MacroPanel(dates, tuple(names), raw, tuple(codes))


def panel_to_csv(panel: MacroPanel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sasdate", *panel.names])
    w.writerow(["transform", *panel.tcodes])
    for d, row in zip(panel.dates, panel.values):
        w.writerow([d, *("" if math.isnan(v) else repr(float(v)) for v in row)])
    return buf.getvalue()

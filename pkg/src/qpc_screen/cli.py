"""Command-line entry point: ``qpc-screen {simulate,screen,forecast,bench}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigError, ParseError, QpcError, UnknownSeries
from .macro import frequency_csv, frequency_table, inclusion_check, load_panel, rolling_forecast
from .numeric import Dataset
from .screening import ScreenConfig, run_screen
from .simulation import (METHODS, DgpSpec, bench_runtime, reports_to_csv, reports_to_json,
                         run_study)

log = logging.getLogger("qpc_screen")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
JOBS_ENV = "QPC_SCREEN_JOBS"

_SCREEN_KEYS = {"d_star", "m_cap", "D_max", "literal_confounding", "standardize"}
_DGP_KEYS = {"family", "n", "p", "sigma", "burn_in", "holdout"}
ALLOWED_KEYS = {
    "simulate": _DGP_KEYS | _SCREEN_KEYS | {"seed", "tau", "phi", "rho", "methods", "replications"},
    "bench": _DGP_KEYS | _SCREEN_KEYS | {"seed", "tau", "phi", "rho", "methods", "replications"},
    "screen": _SCREEN_KEYS | {"seed", "data", "response", "tau", "algorithm"},
    "forecast": _SCREEN_KEYS | {"seed", "panel", "target", "tau", "windows", "methods",
                                "filters", "top_k", "inclusion"},
}


# ---------------------------------------------------------------- config

def load_config(path: str | None, overrides: list[str], command: str) -> dict:
    cfg: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                cfg = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            cfg[key.strip()] = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            cfg[key.strip()] = raw  # bare string
    unknown = sorted(set(cfg) - ALLOWED_KEYS[command])
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    return cfg


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _screen_kw(cfg: dict) -> dict:
    return {k: cfg[k] for k in _SCREEN_KEYS if k in cfg}


def _resolve_jobs(flag: int | None) -> int:
    if flag is not None:
        jobs = flag
    elif os.environ.get(JOBS_ENV):
        try:
            jobs = int(os.environ[JOBS_ENV])
        except ValueError:
            raise ConfigError(f"{JOBS_ENV} must be an integer") from None
    else:
        jobs = os.cpu_count() or 1
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return jobs


def _seed(args, cfg) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (--seed or config key 'seed')")
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return seed


def _specs(cfg: dict, seed: int) -> list[DgpSpec]:
    base = {k: cfg[k] for k in _DGP_KEYS if k in cfg}
    out = []
    for tau in _as_list(cfg.get("tau", 0.5)):
        for phi in _as_list(cfg.get("phi", 0.2)):
            for rho in _as_list(cfg.get("rho", 0.5)):
                try:
                    out.append(DgpSpec(tau=tau, phi=phi, rho=rho, seed=seed, **base))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid design: {exc}") from None
    return out


def _methods(cfg: dict, default=METHODS) -> list[str]:
    methods = _as_list(cfg.get("methods", list(default)))
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
    return methods


def _check_screen_kw(kw: dict, tau=0.5, algorithm="QPCS"):
    try:
        ScreenConfig(tau=tau, algorithm=algorithm, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid screening settings: {exc}") from None


# ---------------------------------------------------------------- output

def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(out: str | None, text: str):
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write(Path(out), text)


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _g(x) -> str:
    return "NA" if x is None or not np.isfinite(x) else f"{x:.6g}"


# ---------------------------------------------------------------- commands

def cmd_simulate(args, cfg) -> int:
    seed = _seed(args, cfg)
    specs = _specs(cfg, seed)
    methods = _methods(cfg)
    reps = cfg.get("replications", 50)
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError("replications must be a positive integer")
    kw = _screen_kw(cfg)
    _check_screen_kw(kw)
    reports = []
    for spec in specs:
        reports.extend(run_study(spec, methods, reps, jobs=args.jobs, screen_kw=kw).values())
    _emit(args.out, reports_to_csv(reports) if args.format == "csv" else reports_to_json(reports))
    return 0


def _read_dataset(path: str, response: str | None) -> Dataset:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ConfigError(f"cannot read data {path}: {exc}") from None
    if len(rows) < 3:
        raise ParseError("need a header and at least two data rows", row=1)
    header = [c.strip() for c in rows[0]]
    if response is None:
        response = header[0]
    if response not in header:
        raise ConfigError(f"response column {response!r} not in data header")
    data = []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells", row=r)
        try:
            data.append([float(c) for c in row])
        except ValueError:
            bad = next(c for c, cell in enumerate(row, start=1) if not _is_float(cell))
            raise ParseError(f"malformed number {row[bad - 1]!r}", row=r, column=bad) from None
    A = np.array(data)
    j = header.index(response)
    names = tuple(h for i, h in enumerate(header) if i != j)
    return Dataset(A[:, j], np.delete(A, j, axis=1), names)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_screen(args, cfg) -> int:
    if "data" not in cfg:
        raise ConfigError("screen needs config key 'data'")
    algorithm = cfg.get("algorithm", "QPCS")
    kw = _screen_kw(cfg)
    if algorithm == "QPCFR":
        kw.pop("m_cap", None)  # QPCFR has no confounding sets
    try:
        config = ScreenConfig(tau=cfg.get("tau", 0.5), algorithm=algorithm, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid screening settings: {exc}") from None
    ds = _read_dataset(cfg["data"], cfg.get("response"))
    try:
        config.resolve(ds.n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    trace = run_screen(ds, config)
    if args.format == "json":
        d = trace.to_dict()
        if algorithm == "QPCFR":
            d.pop("m_cap")
        text = json.dumps(d, indent=2, default=_json_float) + "\n"
    else:
        rows = [["step", "name", "abs_qpc", "loss", "ebic", "selected", "skipped"]]
        for d, s in enumerate(trace.steps):
            skipped = ";".join(f"{ds.names[j]}:{why}" for j, why in sorted(s.failures.items()))
            rows.append([d + 1, ds.names[s.index], _g(s.score), _g(trace.losses[d]),
                         _g(trace.ebic[d]), int(d < trace.chosen_D), skipped])
        text = _csv(rows)
    _emit(args.out, text)
    return 0


def _json_float(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x)}")


def cmd_forecast(args, cfg) -> int:
    for key in ("panel", "target"):
        if key not in cfg:
            raise ConfigError(f"forecast needs config key {key!r}")
    if args.out is None:
        raise ConfigError("forecast writes several files; --out DIR is required")
    try:
        panel = load_panel(cfg["panel"])
    except OSError as exc:
        raise ConfigError(f"cannot read panel: {exc}") from None
    target = cfg["target"]
    if target not in panel.names:
        raise ConfigError(f"unknown target series {target!r}")
    inclusion = _as_list(cfg.get("inclusion", []))
    missing = [s for s in inclusion if s not in panel.names or s == target]
    if missing:
        raise ConfigError(f"unknown inclusion series {missing}")
    filters = cfg.get("filters", [])
    for f in filters:
        if not isinstance(f, dict) or "name" not in f or set(f) - {"name", "start", "end"}:
            raise ConfigError("each filter needs 'name' and optional 'start'/'end'")
    tau = cfg.get("tau", 0.05)
    windows = _as_list(cfg.get("windows", [80, 100, 120]))
    methods = _methods(cfg, ("QPCS", "QPCFR"))
    top_k = cfg.get("top_k", 5)
    kw = _screen_kw(cfg)
    _check_screen_kw(kw, tau)

    files: dict[str, str] = {}
    summary = [["method", "window", "records", "failures", "mean_loss",
                *[f"incl_{s}" for s in inclusion]]]
    for method in methods:
        for l in windows:
            run = rolling_forecast(panel, target, tau, l, method, kw, jobs=args.jobs)
            stem = f"{method}_l{l}"
            files[f"run_{stem}.json"] = run.to_json()
            files[f"freq_{stem}_all.csv"] = frequency_csv(frequency_table(run, top_k))
            for f in filters:
                try:
                    table = frequency_table(run, top_k, f.get("start"), f.get("end"))
                except QpcError:
                    table = []
                files[f"freq_{stem}_{f['name']}.csv"] = frequency_csv(table)
            losses = [r.loss for r in run.records if r.error is None]
            incl = [f"{c}/{t}" for c, t in (inclusion_check(run, s) for s in inclusion)]
            summary.append([method, l, len(run.records), len(run.records) - len(losses),
                            _g(float(np.mean(losses))) if losses else "NA", *incl])
    if args.format == "json":
        keys = summary[0]
        files["summary.json"] = json.dumps([dict(zip(keys, r)) for r in summary[1:]], indent=2) + "\n"
    else:
        files["summary.csv"] = _csv(summary)
    out = Path(args.out)
    for name in sorted(files):
        atomic_write(out / name, files[name])
    return 0


def cmd_bench(args, cfg) -> int:
    seed = _seed(args, cfg)
    specs = _specs(cfg, seed)
    methods = _methods(cfg)
    reps = cfg.get("replications", 1)
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError("replications must be a positive integer")
    kw = _screen_kw(cfg)
    _check_screen_kw(kw)
    rows = []
    for spec in specs:
        times = bench_runtime(spec, methods, reps, screen_kw=kw)
        for m in methods:
            rows.append({"n": spec.n, "p": spec.p, "tau": spec.tau, "replications": reps,
                         "method": m, "avg_seconds": float(f"{times[m]:.6g}")})
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        cols = ["n", "p", "tau", "replications", "method", "avg_seconds"]
        text = _csv([cols] + [[r[c] for c in cols] for r in rows])
    _emit(args.out, text)
    return 0


COMMANDS = {"simulate": cmd_simulate, "screen": cmd_screen, "forecast": cmd_forecast,
            "bench": cmd_bench}

HELP = {
    "simulate": "replicated Monte Carlo study over a grid of tau, phi, rho",
    "screen": "run QPCS or QPCFR on a CSV dataset",
    "forecast": "rolling-window quantile forecasts on a Fred-QD-style panel",
    "bench": "average runtime per replication for each method",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpc-screen", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in HELP.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML file of settings")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (TOML value syntax); repeatable")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--out", help="output file (directory for forecast); stdout if omitted")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--jobs", type=int, help=f"worker processes (fallback: ${JOBS_ENV})")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.jobs = _resolve_jobs(args.jobs)
        cfg = load_config(args.config, args.set, args.command)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UnknownSeries) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QpcError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from qpc_screen.cli import main
from qpc_screen.macro import panel_to_csv, synthetic_panel


def _toy_csv(path, n=20, p=5, seed=0, constant=None):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    if constant is not None:
        X[:, constant] = 3.0
    y = X[:, 0] - X[:, 1] + 0.5 * rng.standard_normal(n)
    with open(path, "w") as fh:
        fh.write(",".join(["y"] + [f"v{k}" for k in range(p)]) + "\n")
        for t in range(n):
            fh.write(",".join(repr(float(v)) for v in [y[t], *X[t]]) + "\n")
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("cmd", ["simulate", "screen", "forecast", "bench"])
def test_help(cmd):
    res = subprocess.run([sys.executable, "-m", "qpc_screen.cli", cmd, "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "--jobs" in res.stdout


class TestExitCodes:
    def test_unknown_key(self, tmp_path):
        assert main(["simulate", "--seed", "1", "--set", "bogus=1"]) == 2

    def test_unknown_key_in_file(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("seed = 1\nnope = true\n")
        assert main(["bench", "--config", str(cfg)]) == 2

    def test_missing_seed(self):
        assert main(["simulate", "--set", "n=50", "--set", "p=10"]) == 2

    def test_bad_toml(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("seed = [\n")
        assert main(["simulate", "--config", str(cfg)]) == 2

    def test_malformed_data(self, tmp_path):
        f = _toy_csv(tmp_path / "d.csv")
        text = f.read_text().splitlines()
        text[3] = text[3].replace(",", ",abc", 1)
        f.write_text("\n".join(text) + "\n")
        out = tmp_path / "o.csv"
        assert main(["screen", "--set", f'data="{f}"', "--out", str(out)]) == 3
        assert not out.exists()

    def test_unknown_target(self, tmp_path):
        panel = tmp_path / "p.csv"
        panel.write_text(panel_to_csv(synthetic_panel(T=30, k=4)))
        assert main(["forecast", "--set", f'panel="{panel}"', "--set", 'target="NOPE"',
                     "--out", str(tmp_path / "o")]) == 2
        assert not (tmp_path / "o").exists()


class TestScreen:
    def test_trace_length_and_columns(self, tmp_path):
        f = _toy_csv(tmp_path / "d.csv")
        out = tmp_path / "o.csv"
        assert main(["screen", "--set", f'data="{f}"', "--out", str(out)]) == 0
        rows = _rows(out)
        # n=20: D_max = floor(20 / ln 20) = 6 > p = 5
        assert len(rows) == 5
        assert list(rows[0]) == ["step", "name", "abs_qpc", "loss", "ebic", "selected", "skipped"]
        assert {r["name"] for r in rows} == {f"v{k}" for k in range(5)}

    def test_constant_column_reported(self, tmp_path):
        f = _toy_csv(tmp_path / "d.csv", constant=3)
        out = tmp_path / "o.csv"
        assert main(["screen", "--set", f'data="{f}"', "--out", str(out)]) == 0
        rows = _rows(out)
        assert "v3:DegeneratePredictor" in rows[0]["skipped"]
        assert "v3" not in {r["name"] for r in rows}

    def test_response_key(self, tmp_path):
        f = _toy_csv(tmp_path / "d.csv")
        out = tmp_path / "o.json"
        assert main(["screen", "--set", f'data="{f}"', "--set", 'response="v0"',
                     "--format", "json", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        names = {s["name"] for s in doc["steps"]}
        assert "v0" not in names and "y" in names

    def test_qpcfr_ignores_m_cap(self, tmp_path):
        f = _toy_csv(tmp_path / "d.csv", n=40, p=8)
        outs = []
        for extra in ([], ["--set", "m_cap=3"]):
            for fmt in ("csv", "json"):
                out = tmp_path / f"o{len(outs)}.{fmt}"
                assert main(["screen", "--set", f'data="{f}"', "--set", 'algorithm="QPCFR"',
                             "--format", fmt, "--out", str(out), *extra]) == 0
                outs.append(out.read_bytes())
        assert outs[0] == outs[2] and outs[1] == outs[3]


SIM = ["--seed", "5", "--set", "n=60", "--set", "p=20", "--set", "replications=2",
       "--set", "tau=[0.3, 0.7]"]


class TestSimulate:
    def test_one_row_per_method_and_design(self, tmp_path):
        out = tmp_path / "s.csv"
        assert main(["simulate", *SIM, "--out", str(out), "--jobs", "1"]) == 0
        rows = _rows(out)
        assert len(rows) == 6
        assert [r["method"] for r in rows[:3]] == ["QPCS", "QPCFR", "L1QR"]

    def test_deterministic_across_jobs(self, tmp_path):
        outs = []
        for jobs in ("1", "1", "3"):
            out = tmp_path / f"s{len(outs)}.json"
            assert main(["simulate", *SIM, "--format", "json", "--out", str(out),
                         "--jobs", jobs]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_jobs_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QPC_SCREEN_JOBS", "2")
        a = tmp_path / "a.csv"
        assert main(["simulate", *SIM, "--set", 'methods=["QPCFR"]', "--out", str(a)]) == 0
        monkeypatch.setenv("QPC_SCREEN_JOBS", "zero")
        assert main(["simulate", *SIM, "--out", str(tmp_path / "b.csv")]) == 2


class TestBench:
    def test_single_method(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["bench", "--seed", "1", "--set", "n=60", "--set", "p=20",
                     "--set", 'methods=["QPCS"]', "--out", str(out)]) == 0
        rows = _rows(out)
        assert len(rows) == 1 and rows[0]["method"] == "QPCS"
        assert float(rows[0]["avg_seconds"]) > 0


@pytest.fixture(scope="module")
def panel(tmp_path_factory):
    path = tmp_path_factory.mktemp("panel") / "p.csv"
    path.write_text(panel_to_csv(synthetic_panel(T=141, k=10, seed=2)))
    return path


class TestForecast:
    def _cfg(self, tmp_path, panel):
        cfg = tmp_path / "f.toml"
        cfg.write_text(f'''panel = "{panel}"
target = "GDPC1"
tau = 0.25
windows = [80]
methods = ["QPCFR"]
top_k = 20
inclusion = ["S001"]
[[filters]]
name = "early"
end = "2010Q4"
[[filters]]
name = "late"
start = "2011Q1"
''')
        return cfg

    def test_outputs(self, tmp_path, panel):
        out = tmp_path / "o"
        assert main(["forecast", "--config", str(self._cfg(tmp_path, panel)),
                     "--out", str(out)]) == 0
        names = sorted(os.listdir(out))
        assert names == ["freq_QPCFR_l80_all.csv", "freq_QPCFR_l80_early.csv",
                         "freq_QPCFR_l80_late.csv", "run_QPCFR_l80.json", "summary.csv"]
        run = json.loads((out / "run_QPCFR_l80.json").read_text())
        assert len(run["records"]) == 61
        summary = _rows(out / "summary.csv")[0]
        assert summary["records"] == "61" and summary["incl_S001"].endswith("/61")
        # the two filters partition the origins, so counts recombine
        n_early = sum(r["target_date"] <= "2010Q4" for r in run["records"])
        whole = {r["name"]: float(r["freq"]) * 61 for r in _rows(out / "freq_QPCFR_l80_all.csv")}
        early = {r["name"]: float(r["freq"]) * n_early
                 for r in _rows(out / "freq_QPCFR_l80_early.csv")}
        late = {r["name"]: float(r["freq"]) * (61 - n_early)
                for r in _rows(out / "freq_QPCFR_l80_late.csv")}
        for name, c in whole.items():
            assert early.get(name, 0) + late.get(name, 0) == pytest.approx(c, abs=1e-3)

    def test_requires_out_dir(self, tmp_path, panel):
        assert main(["forecast", "--config", str(self._cfg(tmp_path, panel))]) == 2

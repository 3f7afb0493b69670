import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from qpc_screen.errors import CovarianceNotPD
from qpc_screen.simulation import (DgpSpec, MethodResult, _cholesky, beta_vector, bench_runtime,
                                   draw_epsilon, gen_dgp_a, gen_dgp_b, replication_rng,
                                   reports_to_csv, reports_to_json, run_study, sigma_eta,
                                   simulate_panel, spec_grid, summarize)


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(phi=1.0), dict(rho=1.0), dict(p=4), dict(tau=0.0),
                                    dict(family="C"), dict(seed=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DgpSpec(**kw)

    def test_beta(self):
        assert beta_vector(DgpSpec(tau=0.5, p=6))[:3] == pytest.approx([2.5] * 3)
        assert beta_vector(DgpSpec(tau=0.2, p=6))[0] == pytest.approx(3.25)
        b = beta_vector(DgpSpec(tau=0.5, rho=0.5, p=6))
        assert b[3] == pytest.approx(-3 * math.sqrt(0.5) * 2.5)
        assert np.all(b[4:] == 0)
        assert beta_vector(DgpSpec(rho=0.0, p=6))[3] == 0.0
        assert list(beta_vector(DgpSpec(family="B", p=7))) == [1, 1, 1, 1, 0, 0, 0]

    def test_sigma_eta_a(self):
        S = sigma_eta(DgpSpec(p=6, rho=0.5, phi=0.2))
        assert np.all(np.diag(S) == 1)
        assert S[0, 1] == pytest.approx(0.5 * 0.96)
        assert S[3, 0] == S[0, 3] == pytest.approx(math.sqrt(0.5) * 0.96)
        assert np.array_equal(sigma_eta(DgpSpec(p=6, rho=0.0)), np.eye(6))

    def test_sigma_eta_b(self):
        S = sigma_eta(DgpSpec(family="B", p=5, rho=0.5))
        assert S[0, 2] == pytest.approx(0.25)
        assert np.array_equal(sigma_eta(DgpSpec(family="B", p=5, rho=0.0)), np.eye(5))

    def test_not_pd(self):
        with pytest.raises(CovarianceNotPD):
            _cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_grid(self):
        g = spec_grid(DgpSpec(), taus=[0.2, 0.5, 0.8], phis=[0.2, 0.5, 0.8])
        assert len(g) == 9 and {s.tau for s in g} == {0.2, 0.5, 0.8}


class TestGeneration:
    def test_shapes_and_family_check(self):
        spec = DgpSpec(n=50, p=8, seed=3)
        sim = gen_dgp_a(spec)
        assert sim.train.X.shape == (50, 8) and sim.X_holdout.shape == (10, 8)
        with pytest.raises(ValueError):
            gen_dgp_b(spec)

    def test_reproducible_streams(self):
        spec = DgpSpec(n=40, p=6, seed=11)
        a, b = gen_dgp_a(spec, 2), gen_dgp_a(spec, 2)
        assert np.array_equal(a.train.X, b.train.X) and np.array_equal(a.y_holdout, b.y_holdout)
        assert not np.array_equal(a.train.X, gen_dgp_a(spec, 3).train.X)

    def test_holdout_continues_the_path(self):
        spec = DgpSpec(n=30, p=6, seed=5)
        X, y, _ = simulate_panel(spec, 0)
        sim = gen_dgp_a(spec, 0)
        assert np.array_equal(np.vstack([sim.train.X, sim.X_holdout]), X)

    def test_response_equation(self):
        spec = DgpSpec(n=30, p=6, seed=5, tau=0.2)
        X, y, eps = simulate_panel(spec, 0)
        assert np.allclose(y, X @ beta_vector(spec) + eps, atol=1e-12)

    def test_var1_recursion(self):
        spec = DgpSpec(n=30, p=5, seed=6, phi=0.7, burn_in=0)
        X, _, _ = simulate_panel(spec, 0)
        L = np.linalg.cholesky(sigma_eta(spec))
        rng = replication_rng(spec.seed, 0)
        eta = rng.standard_normal((40, 5)) @ L.T
        ref = np.zeros((40, 5))
        prev = np.zeros(5)
        for t in range(40):
            prev = spec.phi * prev + eta[t]
            ref[t] = prev
        assert np.allclose(X, ref, atol=1e-12)

    @pytest.mark.parametrize("tau", [0.2, 0.5, 0.8])
    def test_epsilon_quantile(self, tau):
        eps = draw_epsilon(tau, 200_000, replication_rng(1, 0))
        assert abs(np.quantile(eps, tau)) < 0.02
        assert np.mean(eps) == pytest.approx(-norm.ppf(tau), abs=0.01)

    def test_no_drift(self):
        X, _, _ = simulate_panel(DgpSpec(n=40_000, p=5, phi=0.8, seed=2), 0)
        a, b = X[:20_000], X[20_000:]
        # long-run sd of an AR(1) mean inflates by sqrt((1 + phi) / (1 - phi)) = 3
        se = np.sqrt((a.var(axis=0) + b.var(axis=0)) / 20_000) * 3.0
        assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < 3 * se)


def _rec(sel, rep, method="QPCS", mqe=0.5, error=None):
    return MethodResult(method, rep, tuple(sel), mqe, 0.0, error)


class TestMetrics:
    def test_perfect_selection(self):
        recs = [_rec([0, 1, 2, 3], r) for r in range(5)]
        rep = summarize("QPCS", DgpSpec(), recs)
        assert (rep.crate, rep.tp, rep.fp) == (5, 4, 0)
        assert rep.ranks == (1.0, 2.0, 3.0, 4.0)

    def test_ranks_na_and_counts(self):
        recs = [_rec([3, 0, 9, 1, 2], 0), _rec([0, 1, 2], 1), _rec([0, 1, 2, 3], 2)]
        rep = summarize("QPCFR", DgpSpec(), recs)
        assert rep.crate == 1
        assert rep.tp == pytest.approx(11 / 3)
        assert rep.fp == pytest.approx(1 / 3)
        assert rep.ranks[0] == pytest.approx((2 + 1 + 1) / 3)
        assert rep.ranks[3] is None
        assert rep.row()["R4"] == "NA"
        sizes = np.mean([len(r.selected) for r in recs])
        assert rep.tp + rep.fp == pytest.approx(sizes)

    def test_failures_excluded(self):
        recs = [_rec([0, 1, 2, 3], 0, mqe=1.0), _rec([], 1, mqe=math.nan, error="NotConverged")]
        rep = summarize("QPCS", DgpSpec(), recs)
        assert rep.failures == 1 and rep.mqe == 1.0 and rep.crate == 1

    def test_l1_ranks_not_applicable(self):
        rep = summarize("L1QR", DgpSpec(), [_rec([0, 1], 0, "L1QR")])
        assert rep.ranks == ("-",) * 4 and rep.row()["R1"] == "-"


class TestStudy:
    SPEC = DgpSpec(n=80, p=30, seed=21)

    def test_worker_count_invariance(self):
        a = run_study(self.SPEC, ("QPCS", "QPCFR", "L1QR"), 3, jobs=1)
        b = run_study(self.SPEC, ("QPCS", "QPCFR", "L1QR"), 3, jobs=2)
        assert reports_to_csv(a.values()) == reports_to_csv(b.values())
        assert reports_to_json(a.values()) == reports_to_json(b.values())

    def test_serialization(self):
        reps = run_study(self.SPEC, ("QPCFR",), 2)
        lines = reports_to_csv(reps.values()).splitlines()
        assert lines[0].split(",")[6:16] == ["method", "replications", "MQE", "Crate", "TP", "FP",
                                             "R1", "R2", "R3", "R4"]
        assert len(lines) == 2
        doc = json.loads(reports_to_json(reps.values()))
        assert len(doc[0]["records"]) == 2

    def test_bench_single_replication(self):
        t = bench_runtime(self.SPEC, ("QPCFR",), 1)
        assert set(t) == {"QPCFR"} and t["QPCFR"] > 0

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            run_study(self.SPEC, ("SIS",), 1)
        with pytest.raises(ValueError):
            run_study(self.SPEC, ("QPCS",), 0)

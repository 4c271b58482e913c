"""
Tests for the acceptance-suite runner
"""

import numpy as np
import pytest

from src.services.inference import fit
from src.services.oracle import cox_partial_fit
from src.services.verification import (
    PBC2_ENV,
    CheckResult,
    all_passed,
    available_suites,
    competing_risk_dataset,
    COX_RW_JITTER,
    FLAT_LOG_PREC,
    cox_dataset,
    cox_flat_omega,
    cox_model,
    load_pbc2,
    render,
    run_suite,
)


class TestCheckResult:
    def test_status(self):
        assert CheckResult("s", "c", True).status == "PASS"
        assert CheckResult("s", "c", False).status == "FAIL"
        assert CheckResult("s", "c", False, skipped=True).status == "SKIP"

    def test_all_passed_ignores_skips(self):
        rows = [CheckResult("s", "a", True), CheckResult("s", "b", False, skipped=True)]
        assert all_passed(rows)
        assert not all_passed(rows + [CheckResult("s", "c", False)])

    def test_render(self):
        text = render([CheckResult("lmm-exactness", "latent means equal GLS", True, 1e-12, 1e-8)])
        assert "lmm-exactness" in text
        assert "PASS" in text


class TestRunSuite:
    """Suite dispatch"""

    def test_available(self):
        suites = available_suites()
        assert suites[-1] == "all"
        assert {"cox-equivalence", "lmm-exactness", "quadrature-equivalence", "mcmc-equivalence",
                "parameter-recovery", "properties", "scalability", "pbc2"} <= set(suites)

    def test_unknown(self):
        with pytest.raises(KeyError):
            run_suite("nope")

    def test_lmm_exactness(self):
        results = run_suite("lmm-exactness", threads=1)
        assert [r.status for r in results] == ["PASS", "PASS"]

    def test_pbc2_skips_without_data(self, monkeypatch):
        monkeypatch.delenv(PBC2_ENV, raising=False)
        results = run_suite("pbc2")
        assert [r.status for r in results] == ["SKIP"]
        assert all_passed(results)

    @pytest.mark.slow
    def test_cox_equivalence(self):
        results = run_suite("cox-equivalence", threads=1)
        assert all_passed(results), render(results)
        assert results[0].value < 1e-3

    @pytest.mark.slow
    def test_quadrature_equivalence(self):
        results = run_suite("quadrature-equivalence", threads=1)
        assert all_passed(results), render(results)


class TestBuilders:
    """Shared data builders"""

    def test_cox_dataset(self):
        data = cox_dataset(n=50)
        assert len(data) == 50
        assert set(data["event"]) <= {0, 1}
        assert (data["stime"] > 0).all()

    def test_competing_risks(self):
        long, surv = competing_risk_dataset(n_subjects=20)
        assert surv["id"].nunique() == 20
        assert set(long["id"]) <= set(surv["id"])

    def test_load_pbc2(self, tmp_path):
        """Indicator columns are derived from the labelled factors"""
        (tmp_path / "pbc2.csv").write_text("id,year,drug,serBilir\n1,0,D-penicil,1.2\n2,0,placebo,0.8\n")
        (tmp_path / "pbc2.id.csv").write_text(
            "id,years,status,drug,sex\n1,5.1,dead,D-penicil,female\n2,8.0,alive,placebo,male\n"
        )
        long, surv = load_pbc2(tmp_path)
        assert long["drugDpenicil"].tolist() == [1.0, 0.0]
        assert surv["death"].tolist() == [1, 0]
        assert surv["status2"].tolist() == [1, 0]
        assert surv["sexfemale"].tolist() == [1.0, 0.0]
        assert np.isfinite(surv["years"]).all()


class TestCoxModel:
    """Augmented-Poisson model used for the Cox comparison"""

    @pytest.fixture(scope="class")
    def small(self):
        surv = cox_dataset(n=60, seed=4)
        return surv, cox_model(surv)

    def test_interval_per_exit_time(self, small):
        """Censoring times cut the follow-up as well as event times"""
        surv, model = small
        cuts = model.cutpoints["S1"].values
        assert set(surv["stime"]) <= set(cuts)
        assert cuts.size == surv["stime"].nunique() + 1

    def test_baseline_unsmoothed(self, small):
        _, model = small
        assert model.hyper.names == ["rw_logprec_S1"]
        assert cox_flat_omega(model).tolist() == [FLAT_LOG_PREC]
        assert model.controls.rw_jitter == COX_RW_JITTER

    def test_matches_breslow(self, small):
        surv, model = small
        result = fit(model, fixed_omega=cox_flat_omega(model), threads=1)
        beta = result.marginals.mean()[model.layout.fixed_slice("S1").start + 1]
        oracle = cox_partial_fit(surv["stime"], surv["event"], surv["x"])
        assert beta == pytest.approx(oracle.beta[0], abs=1e-3)

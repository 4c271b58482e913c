"""
Tests for posterior prediction of trajectories and survival curves
"""

import numpy as np
import pandas as pd
import pytest

from src.services.errors import PredictionError
from src.services.predict import STAT_NAMES, PredictRequest, impute_missing, predict


@pytest.fixture
def new_subject():
    """One subject observed at times 0 and 1"""
    return pd.DataFrame({"id": [101, 101], "time": [0.0, 1.0], "x": [1.0, 1.0], "y": [1.2, 1.6]})


def request(data, **kwargs):
    options = dict(horizon=5.0, n_time_points=11, n_sample=20, n_sample_re=10, seed=2)
    options.update(kwargs)
    return PredictRequest(new_data=data, **options)


class TestPredictRequest:
    """Request validation"""

    def test_defaults(self, new_subject):
        req = PredictRequest(new_data=new_subject, horizon=3.0)
        assert req.n_time_points >= 1
        assert req.grid()[0] == 0.0
        assert req.grid()[-1] == pytest.approx(3.0)

    def test_bad_horizon(self, new_subject):
        with pytest.raises(PredictionError):
            PredictRequest(new_data=new_subject, horizon=0.0)

    def test_bad_counts(self, new_subject):
        with pytest.raises(PredictionError):
            PredictRequest(new_data=new_subject, horizon=3.0, n_sample=-1)

    def test_explicit_time_points(self, new_subject):
        req = PredictRequest(new_data=new_subject, horizon=3.0, time_points=[2.0, 0.5])
        assert req.grid().tolist() == [0.5, 2.0]


class TestJointPrediction:
    """Predictions from the RW1 joint fit"""

    def test_longitudinal_frame(self, rw_fit, new_subject):
        result = predict(rw_fit, request(new_subject))
        frame = result.longitudinal
        assert list(frame.columns) == ["id", "time", "Outcome"] + STAT_NAMES
        assert len(frame) == 11
        assert (frame["quant0.025"] <= frame["quant0.975"]).all()

    def test_survival_starts_at_one(self, rw_fit, new_subject):
        """Survival is conditional on being event-free at the last observation"""
        result = predict(rw_fit, request(new_subject))
        surv = result.survival
        assert surv["time"].iloc[0] == pytest.approx(1.0)
        assert result.csurv[101] == pytest.approx(1.0)
        assert surv["Surv_Mean"].iloc[0] == pytest.approx(1.0)
        assert (np.diff(surv["Surv_Mean"].to_numpy()) <= 1e-12).all()
        assert (surv["Haz_Mean"] > 0).all()

    def test_single_cause_incidence(self, rw_fit, new_subject):
        """With one survival outcome CIF is one minus survival"""
        surv = predict(rw_fit, request(new_subject, cif=True)).survival
        assert surv["CIF_Mean"].iloc[0] == pytest.approx(0.0)
        assert surv["CIF_Mean"].to_numpy() == pytest.approx(1.0 - surv["Surv_Mean"].to_numpy(), abs=1e-10)

    def test_seeded(self, rw_fit, new_subject):
        a = predict(rw_fit, request(new_subject))
        b = predict(rw_fit, request(new_subject))
        pd.testing.assert_frame_equal(a.longitudinal, b.longitudinal)
        pd.testing.assert_frame_equal(a.survival, b.survival)

    def test_conditioning_on_observations(self, rw_fit):
        """Higher observed values pull the subject trajectory up"""
        data = pd.DataFrame({
            "id": [1001, 1001, 1002, 1002], "time": [0.0, 1.0, 0.0, 1.0],
            "x": [0.0] * 4, "y": [4.0, 4.3, -2.0, -1.7],
        })
        frame = predict(rw_fit, request(data, survival=False)).longitudinal
        high = frame[frame["id"] == 1001]["Mean"].iloc[0]
        low = frame[frame["id"] == 1002]["Mean"].iloc[0]
        assert high > low + 1.0

    def test_no_survival(self, rw_fit, new_subject):
        result = predict(rw_fit, request(new_subject, survival=False))
        assert result.survival.empty
        assert not result.longitudinal.empty

    def test_identity_inverse_link(self, rw_fit, new_subject):
        """The gaussian family's response scale is the predictor scale"""
        eta = predict(rw_fit, request(new_subject, survival=False)).longitudinal
        mu = predict(rw_fit, request(new_subject, survival=False, inv_link=True)).longitudinal
        assert mu["Mean"].to_numpy() == pytest.approx(eta["Mean"].to_numpy())

    def test_return_samples(self, rw_fit, new_subject):
        result = predict(rw_fit, request(new_subject, n_sample=4, n_sample_re=3, return_samples=True))
        samples = result.samples
        assert set(samples["quantity"]) == {"eta", "Haz", "Surv"}
        eta = samples[samples["quantity"] == "eta"]
        assert len(eta) == 4 * 3 * 11

    def test_explicit_csurv(self, rw_fit, new_subject):
        surv = predict(rw_fit, request(new_subject, csurv=2.0)).survival
        assert surv["time"].iloc[0] == pytest.approx(2.0)
        assert surv["time"].iloc[1] > 2.0


class TestPredictionErrors:
    """Invalid prediction inputs"""

    def test_horizon_before_last_observation(self, rw_fit, new_subject):
        with pytest.raises(PredictionError) as exc:
            predict(rw_fit, request(new_subject, horizon=0.5, time_points=[0.0, 0.5]))
        assert "last observation" in str(exc.value)

    def test_missing_covariate(self, rw_fit, new_subject):
        with pytest.raises(PredictionError) as exc:
            predict(rw_fit, request(new_subject.drop(columns="x")))
        assert "'x'" in str(exc.value)

    def test_missing_id_column(self, rw_fit, new_subject):
        with pytest.raises(PredictionError):
            predict(rw_fit, request(new_subject.drop(columns="id")))

    def test_csurv_beyond_horizon(self, rw_fit, new_subject):
        with pytest.raises(PredictionError):
            predict(rw_fit, request(new_subject, csurv=6.0))

    def test_time_points_beyond_horizon(self, rw_fit, new_subject):
        with pytest.raises(PredictionError):
            predict(rw_fit, request(new_subject, time_points=[0.0, 7.0]))


class TestSurvivalOnly:
    """Predictions from the Weibull fit"""

    def test_weibull_curve(self, weibull_fit):
        data = pd.DataFrame({"id": [1], "time": [0.0], "x": [1.0]})
        result = predict(weibull_fit, request(data))
        surv = result.survival["Surv_Mean"].to_numpy()
        assert result.longitudinal.empty
        assert surv[0] == pytest.approx(1.0)
        assert surv[-1] < 1.0
        assert (np.diff(surv) <= 1e-12).all()


class TestImputeMissing:
    """Filling missing responses of fitted subjects"""

    def test_fills_only_missing(self, rw_fit):
        rows = rw_fit.model.spec.long_data.copy()
        original = rows["y"].copy()
        rows.loc[rows.index[:3], "y"] = np.nan
        filled = impute_missing(rw_fit, rows)
        assert not filled["y"].isna().any()
        assert filled["y"].iloc[3:].tolist() == original.iloc[3:].tolist()

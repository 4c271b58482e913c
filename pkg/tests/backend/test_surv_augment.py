"""
Tests for survival augmentation and random-walk structures
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.services.errors import LikelihoodDomainError, ModelSpecError
from src.services.likelihoods import Family, FamilyKind, loglik
from src.services.surv_augment import (
    Cutpoints,
    decompose,
    decompose_table,
    make_cutpoints,
    parametric_baseline_loglik,
    rw_precision,
    single_row_table,
)


class TestCutpoints:
    """Interval bounds"""

    def test_equidistant(self):
        """n intervals over [0, max_time]"""
        cuts = make_cutpoints(4, 2.0)
        assert cuts.values.tolist() == pytest.approx([0.0, 0.5, 1.0, 1.5, 2.0])
        assert cuts.n_intervals == 4
        assert cuts.midpoints.tolist() == pytest.approx([0.25, 0.75, 1.25, 1.75])

    def test_explicit_prepends_zero_and_covers(self):
        """Explicit cutpoints start at zero and reach the last exit"""
        cuts = Cutpoints.from_explicit([1.0, 3.0], max_time=4.5)
        assert cuts.values.tolist() == [0.0, 1.0, 4.5]

    @pytest.mark.parametrize("values", [[0.0], [0.5, 1.0], [0.0, 2.0, 1.0]])
    def test_invalid(self, values):
        """Too short, not starting at zero or not increasing"""
        with pytest.raises(ModelSpecError):
            Cutpoints(np.asarray(values))

    def test_invalid_count(self):
        """At least one interval"""
        with pytest.raises(ModelSpecError):
            make_cutpoints(0, 1.0)


class TestDecompose:
    """Poisson pseudo rows"""

    @pytest.fixture
    def cuts(self):
        return Cutpoints(np.array([0.0, 1.0, 2.0, 3.0]))

    def test_single_interval(self, cuts):
        """An exit inside the first interval gives one row"""
        rows = decompose(0.0, 0.4, 1, cuts, subject="a")
        assert len(rows) == 1
        assert rows[0].y == 1
        assert rows[0].exposure == pytest.approx(0.4)
        assert rows[0].offset == pytest.approx(np.log(0.4))
        assert rows[0].eval_time == pytest.approx(0.2)

    def test_spanning(self, cuts):
        """The event sits on the last interval only"""
        rows = decompose(0.0, 2.5, 1, cuts)
        assert [r.interval for r in rows] == [1, 2, 3]
        assert [r.y for r in rows] == [0, 0, 1]
        assert [r.exposure for r in rows] == pytest.approx([1.0, 1.0, 0.5])

    def test_exit_on_cutpoint(self, cuts):
        """An exit exactly at a cutpoint closes that interval"""
        rows = decompose(0.0, 2.0, 0, cuts)
        assert [r.interval for r in rows] == [1, 2]
        assert rows[-1].exposure == pytest.approx(1.0)

    def test_left_truncation(self, cuts):
        """Entry inside an interval starts the exposure there"""
        rows = decompose(1.5, 2.2, 1, cuts)
        assert [r.interval for r in rows] == [2, 3]
        assert [r.exposure for r in rows] == pytest.approx([0.5, 0.2])

    def test_entry_on_cutpoint(self, cuts):
        """Entry at a cutpoint starts in the next interval"""
        rows = decompose(1.0, 1.5, 0, cuts)
        assert [r.interval for r in rows] == [2]

    def test_exit_not_after_entry(self, cuts):
        """exit <= entry is a model error"""
        with pytest.raises(ModelSpecError):
            decompose(1.0, 1.0, 0, cuts)

    def test_exit_beyond_last_cutpoint(self, cuts):
        """Cutpoints must cover every exit"""
        with pytest.raises(ModelSpecError):
            decompose(0.0, 3.5, 0, cuts)

    def test_table_order(self, cuts):
        """Rows follow subject order then interval order"""
        table = decompose_table(["a", "b"], [0.0, 0.0], [1.5, 0.5], [0, 1], cuts)
        assert table.subject.tolist() == ["a", "a", "b"]
        assert table.interval.tolist() == [1, 2, 1]
        assert table.source_row.tolist() == [0, 0, 1]
        assert table.y.tolist() == [0.0, 0.0, 1.0]

    @settings(max_examples=100, deadline=None)
    @given(
        entry=st.floats(0.0, 2.5),
        length=st.floats(0.01, 3.0),
        event=st.integers(0, 1),
    )
    def test_exposure_conserved(self, entry, length, event):
        """Exposures add up to exit - entry and one event is carried"""
        cuts = make_cutpoints(7, 6.0)
        exit = min(entry + length, 6.0)
        if exit <= entry:
            return
        table = decompose_table([1], [entry], [exit], [event], cuts)
        assert table.exposure.sum() == pytest.approx(exit - entry, rel=1e-9, abs=1e-12)
        assert table.y.sum() == event
        assert np.all(table.exposure > 0)

    def test_single_row_table(self):
        """Parametric baselines keep one row per subject"""
        table = single_row_table([1, 2], [0.0, 0.5], [2.0, 1.0], [1, 0], "S1")
        assert len(table) == 2
        assert table.exposure.tolist() == pytest.approx([2.0, 0.5])


class TestRandomWalk:
    """Structure matrices"""

    def test_rw1(self):
        """First differences over four values"""
        R = rw_precision(1, 4).toarray()
        expected = np.array([[1, -1, 0, 0], [-1, 2, -1, 0], [0, -1, 2, -1], [0, 0, -1, 1]], dtype=float)
        assert R == pytest.approx(expected)

    def test_rw2_null_space(self):
        """Constants and linear trends are in the RW2 null space"""
        R = rw_precision(2, 6).toarray()
        assert R @ np.ones(6) == pytest.approx(np.zeros(6), abs=1e-12)
        assert R @ np.arange(6.0) == pytest.approx(np.zeros(6), abs=1e-12)
        assert np.linalg.matrix_rank(R) == 4

    @pytest.mark.parametrize("order", [1, 2])
    @pytest.mark.parametrize("m", [3, 8, 25])
    def test_rank(self, order, m):
        """Symmetric with exactly m - order eigenvalues above 1e-10"""
        R = rw_precision(order, m).toarray()
        assert R == pytest.approx(R.T)
        eigenvalues = np.linalg.eigvalsh(R)
        assert int(np.sum(eigenvalues > 1e-10)) == m - order
        assert eigenvalues.min() > -1e-10

    def test_too_few_values(self):
        """RW2 needs at least three values"""
        with pytest.raises(ModelSpecError):
            rw_precision(2, 2)

    def test_unknown_order(self):
        with pytest.raises(ModelSpecError):
            rw_precision(3, 10)


class TestParametricBaseline:
    """Exact parametric survival likelihoods"""

    def test_weibull_shape_one_is_exponential(self):
        """Weibull with shape 1 reduces to the exponential"""
        t, event, eta = np.array([0.5, 2.0]), np.array([1.0, 0.0]), np.array([0.2, -0.1])
        weibull = parametric_baseline_loglik("weibull", t, 0.0, event, eta, shape=1.0)
        exponential = parametric_baseline_loglik("exponential", t, 0.0, event, eta)
        assert weibull == pytest.approx(exponential)

    def test_invalid_shape(self):
        with pytest.raises(LikelihoodDomainError):
            parametric_baseline_loglik("weibull", np.array([1.0]), 0.0, np.array([1.0]), np.array([0.0]), shape=0.0)

    def test_unknown_kind(self):
        with pytest.raises(ModelSpecError):
            parametric_baseline_loglik("gompertz", np.array([1.0]), 0.0, np.array([1.0]), np.array([0.0]))


def piecewise_loglik(table, log_hazard) -> float:
    """event * log h(exit) - H over the pseudo rows, log_hazard[k] on interval k + 1"""
    eta = np.asarray(log_hazard, dtype=float)[table.interval - 1]
    poisson = loglik(Family(FamilyKind.POISSON_SURV), table.y, eta, offset=table.offset)[0]
    return float(np.sum(poisson - table.y * table.offset))


class TestRefinement:
    """Splitting an interval under a constant hazard leaves the likelihood unchanged"""

    @settings(max_examples=50, deadline=None)
    @given(
        exits=st.lists(st.floats(0.05, 9.9), min_size=1, max_size=15),
        split=st.floats(0.01, 0.99),
        interval=st.integers(0, 4),
        log_hazard=st.lists(st.floats(-3.0, 1.0), min_size=5, max_size=5),
    )
    def test_split_interval(self, exits, split, interval, log_hazard):
        exits = np.asarray(exits)
        entry = exits * 0.3
        event = (np.arange(exits.size) % 2).astype(int)
        coarse = make_cutpoints(5, 10.0)
        lo, hi = coarse.values[interval], coarse.values[interval + 1]
        fine = Cutpoints(np.insert(coarse.values, interval + 1, lo + split * (hi - lo)))
        fine_hazard = np.insert(np.asarray(log_hazard), interval, log_hazard[interval])

        subjects = np.arange(exits.size)
        before = piecewise_loglik(decompose_table(subjects, entry, exits, event, coarse), log_hazard)
        after = piecewise_loglik(decompose_table(subjects, entry, exits, event, fine), fine_hazard)
        assert after == pytest.approx(before, rel=1e-10, abs=1e-10)

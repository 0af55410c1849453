import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gembed import backend, metrics
from gembed.corpus import read_trials
from gembed.errors import EvaluationError, InputError
from gembed.metrics import DcfParams

from oracles import brute_force_counts, brute_force_eer, brute_force_min_dcf, exact_eer

DATA = Path(__file__).parent / "data"


def load_fixture():
    trials = read_trials(DATA / "fixture_trials")
    scores = [s for _, _, s in backend.read_scores(DATA / "fixture_scores")]
    labels = [t.is_target for t in trials]
    return scores, labels, json.loads((DATA / "fixture_oracle.json").read_text())


def random_increasing(rng):
    """A strictly increasing map built from a random positive-slope piecewise-linear part."""
    knots = np.sort(rng.uniform(-5, 5, size=6))
    slopes = rng.uniform(0.1, 5.0, size=7)
    shift, kind = rng.uniform(-3, 3), rng.integers(0, 3)

    def f(x):
        x = np.asarray(x, dtype=np.float64)
        y = slopes[0] * x + sum((slopes[i + 1] - slopes[i]) * np.maximum(x - k, 0)
                                for i, k in enumerate(knots))
        if kind == 1:
            y = np.exp(y / 20.0)
        elif kind == 2:
            y = y ** 3 + y
        return y + shift

    return f


class TestDetCurve:
    def test_separable(self):
        curve = metrics.det_curve([1.0, 0.0], [True, False])
        assert any(m == 0 and f == 0 for m, f in zip(curve.n_miss, curve.n_fa))

    def test_all_equal_endpoints(self):
        pts = metrics.det_curve([0.5] * 4, [True, False, True, False]).points()
        pairs = {(m, f) for _, m, f in pts}
        assert (0.0, 1.0) in pairs and (1.0, 0.0) in pairs

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        scores = np.round(rng.normal(size=20), 1)
        labels = rng.random(20) < 0.4
        curve = metrics.det_curve(scores, labels)
        expected = brute_force_counts(scores.tolist(), labels.tolist())
        assert [(t, int(m), int(f)) for t, m, f in zip(curve.thresholds, curve.n_miss, curve.n_fa)] \
            == expected

    def test_monotone(self):
        rng = np.random.default_rng(1)
        curve = metrics.det_curve(rng.normal(size=50), rng.random(50) < 0.5)
        assert np.all(np.diff(curve.p_miss) >= 0) and np.all(np.diff(curve.p_fa) <= 0)

    def test_missing_class(self):
        with pytest.raises(EvaluationError):
            metrics.det_curve([1.0, 2.0], [True, True])

    def test_non_finite_score(self):
        with pytest.raises(EvaluationError):
            metrics.det_curve([np.nan, 2.0], [True, False])


class TestEer:
    def test_separated(self):
        assert metrics.eer(metrics.det_curve([2.0, 3.0, 0.0, 1.0], [1, 1, 0, 0])) == 0.0

    def test_hand_example(self):
        curve = metrics.det_curve([0.9, 0.8, 0.4, 0.7, 0.3, 0.2], [1, 1, 1, 0, 0, 0])
        assert metrics.eer(curve) == pytest.approx(1 / 3, abs=1e-15)

    def test_chance_level(self):
        rng = np.random.default_rng(2)
        n = 20000
        value = metrics.eer(metrics.det_curve(rng.normal(size=n), rng.random(n) < 0.5))
        assert abs(value - 0.5) < 3 / math.sqrt(n)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=30)
           .filter(lambda xs: len({y for _, y in xs}) == 2))
    def test_oracles(self, trials):
        scores = [float(s) for s, _ in trials]
        labels = [y for _, y in trials]
        value = metrics.eer(metrics.det_curve(scores, labels))
        assert value == brute_force_eer(scores, labels)
        assert abs(Fraction(value) - exact_eer(scores, labels)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=30)
           .filter(lambda xs: len({y for _, y in xs}) == 2))
    def test_between_straddling_points(self, trials):
        scores = [float(s) for s, _ in trials]
        labels = [y for _, y in trials]
        curve = metrics.det_curve(scores, labels)
        value = metrics.eer(curve)
        i = int(np.flatnonzero(curve.p_miss >= curve.p_fa)[0])
        lo = min(curve.p_miss[max(i - 1, 0)], curve.p_fa[i])
        hi = max(curve.p_miss[i], curve.p_fa[max(i - 1, 0)])
        assert lo - 1e-15 <= value <= hi + 1e-15


class TestMinDcf:
    def test_separated(self):
        curve = metrics.det_curve([2.0, 3.0, 0.0, 1.0], [1, 1, 0, 0])
        assert metrics.min_dcf(curve, 0.01) == 0.0 and metrics.min_dcf(curve, 0.001) == 0.0

    def test_constant_scores(self):
        curve = metrics.det_curve([0.0] * 6, [1, 0, 1, 0, 0, 0])
        assert metrics.min_dcf(curve, 0.01) == 1.0

    def test_ten_trial_hand_set(self):
        scores = [0.3, 1.2, -0.4, 0.8, 0.1, 2.0, -1.0, 0.5, 0.9, -0.2]
        labels = [0, 1, 0, 1, 0, 1, 0, 0, 1, 0]
        value = metrics.min_dcf(metrics.det_curve(scores, labels), 0.01)
        assert value == brute_force_min_dcf(scores, labels, 0.01)

    def test_custom_costs(self):
        scores = [0.3, 1.2, -0.4, 0.8, 0.1, 2.0, -1.0, 0.5]
        labels = [0, 1, 1, 1, 0, 0, 0, 1]
        value = metrics.min_dcf(metrics.det_curve(scores, labels), DcfParams(0.1, 10.0, 2.0))
        assert value == pytest.approx(brute_force_min_dcf(scores, labels, 0.1, 10.0, 2.0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-3, 3), st.booleans()), min_size=2, max_size=40)
           .filter(lambda xs: len({y for _, y in xs}) == 2))
    def test_at_most_one(self, trials):
        curve = metrics.det_curve([s for s, _ in trials], [y for _, y in trials])
        for p in metrics.DEFAULT_P_TARGETS:
            assert 0.0 <= metrics.min_dcf(curve, p) <= 1.0

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.5])
    def test_bad_prior(self, p):
        with pytest.raises(InputError):
            DcfParams(p)


class TestFixture:
    def test_matches_sweep_oracle_exactly(self):
        scores, labels, oracle = load_fixture()
        report = metrics.evaluate(scores, labels)
        assert report.eer == oracle["eer"]
        assert Fraction(oracle["eer_exact"]) == exact_eer(scores, labels)
        assert report.dcf_1e2 == oracle["min_dcf"]["0.01"]
        assert report.dcf_1e3 == oracle["min_dcf"]["0.001"]
        assert (report.n_target, report.n_nontarget) == (oracle["n_target"],
                                                          oracle["n_nontarget"])

    def test_monotone_transform_invariance(self):
        scores, labels, _ = load_fixture()
        base = metrics.evaluate(scores, labels)
        rng = np.random.default_rng(3)
        for _ in range(20):
            f = random_increasing(rng)
            out = metrics.evaluate(f(scores), labels)
            assert out.eer == base.eer and out.dcf == base.dcf

    def test_positive_affine_invariance(self):
        scores, labels, _ = load_fixture()
        base = metrics.evaluate(scores, labels)
        out = metrics.evaluate(3.0 * np.array(scores) - 7.0, labels)
        assert out.eer == base.eer and out.dcf == base.dcf

    def test_duplication_invariance(self):
        scores, labels, _ = load_fixture()
        base = metrics.evaluate(scores, labels)
        out = metrics.evaluate(scores * 2, labels * 2)
        assert out.eer == base.eer and out.dcf == base.dcf


class TestReport:
    def test_column_order(self):
        report = metrics.evaluate([0.2, 0.9, 0.1, 0.4], [0, 1, 0, 1])
        assert [c for c, _ in report.columns()] == ["DCF(10^-2)", "DCF(10^-3)", "EER(%)"]
        assert report.to_csv().splitlines()[0] == \
            "DCF(10^-2),DCF(10^-3),EER(%),targets,nontargets"

    def test_percent(self):
        report = metrics.evaluate([0.9, 0.8, 0.4, 0.7, 0.3, 0.2], [1, 1, 1, 0, 0, 0])
        assert report.eer_percent == pytest.approx(100 / 3)

    def test_empty_nontargets(self):
        with pytest.raises(EvaluationError):
            metrics.evaluate([0.1, 0.2], [1, 1])

    def test_write_report(self, tmp_path):
        report = metrics.evaluate([0.9, 0.8, 0.4, 0.7, 0.3, 0.2], [1, 1, 1, 0, 0, 0])
        metrics.write_report(tmp_path / "r.csv", report, name="xvector")
        assert (tmp_path / "r.csv").read_text() == report.to_csv()
        text = (tmp_path / "r.csv.txt").read_text()
        assert "xvector" in text and "EER(%)" in text

    def test_label(self):
        assert metrics.dcf_label(0.01) == "DCF(10^-2)"
        assert metrics.dcf_label(0.05) == "DCF(0.05)"

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asdlora.metrics import (EvalReport, LabeledScore, MachineReport, auc, domain_auc, evaluate,
                             hmean, official_score, partial_area, pauc)

scores = st.lists(st.integers(0, 6).map(float), min_size=1, max_size=15)


def _pairwise_auc(normals, anomalies):
    credit = 0.0
    for a, n in itertools.product(anomalies, normals):
        credit += 1.0 if a > n else 0.5 if a == n else 0.0
    return credit / (len(normals) * len(anomalies))


def _trapezoid_pauc(normals, anomalies, p):
    """Dense float oracle: sample the tie-aware ROC finely and integrate."""
    thr = sorted(set(normals) | set(anomalies), reverse=True)
    fpr, tpr = [0.0], [0.0]
    for t in thr:
        fpr.append(np.mean(np.asarray(normals) >= t))
        tpr.append(np.mean(np.asarray(anomalies) >= t))
    xs = np.linspace(0, p, 20001)
    ys = np.interp(xs, fpr, tpr)
    return np.trapezoid(ys, xs) / p


class TestAuc:
    def test_perfect_and_inverted(self):
        assert auc([0, 1, 2], [3, 4]) == 1.0
        assert auc([3, 4], [0, 1, 2]) == 0.0

    def test_all_tied(self):
        assert auc([1, 1], [1, 1, 1]) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            auc([], [1.0])

    def test_nan(self):
        with pytest.raises(ValueError):
            auc([np.nan], [1.0])

    @given(scores, scores)
    def test_matches_pairwise(self, n, a):
        assert auc(n, a) == pytest.approx(_pairwise_auc(n, a), abs=1e-12)

    @given(scores, scores)
    def test_flip_symmetry(self, n, a):
        assert auc(n, a) + auc(a, n) == pytest.approx(1.0, abs=1e-12)

    @given(scores, scores, st.floats(-10, 10), st.floats(0.1, 10))
    def test_monotone_invariance(self, n, a, shift, scale):
        f = lambda xs: [scale * x + shift for x in xs]  # noqa: E731
        assert auc(f(n), f(a)) == auc(n, a)


class TestPauc:
    def test_perfect(self):
        assert pauc([0, 1, 2], [5, 6], 0.1) == 1.0

    def test_worst(self):
        assert pauc([5, 6], [0, 1, 2], 0.1) == 0.0

    def test_p_one_equals_auc_exactly(self):
        rng = np.random.default_rng(0)
        n, a = rng.integers(0, 20, 37), rng.integers(0, 20, 23)
        assert pauc(n, a, 1.0) == auc(n, a)

    def test_random_scores_near_p_over_2(self):
        rng = np.random.default_rng(1)
        n, a = rng.random(4000), rng.random(4000)
        assert pauc(n, a, 0.1) == pytest.approx(0.05, abs=0.02)

    def test_mcclish(self):
        rng = np.random.default_rng(2)
        n, a = rng.random(4000), rng.random(4000)
        assert pauc(n, a, 0.1, mcclish=True) == pytest.approx(0.5, abs=0.03)
        assert pauc([0, 1], [5, 6], 0.1, mcclish=True) == 1.0

    def test_bad_p(self):
        with pytest.raises(ValueError):
            pauc([0], [1], 0.0)

    @settings(max_examples=60, deadline=None)
    @given(scores, scores, st.sampled_from([0.05, 0.1, 0.25, 0.5, 1.0]))
    def test_matches_dense_oracle(self, n, a, p):
        assert pauc(n, a, p) == pytest.approx(_trapezoid_pauc(n, a, p), abs=2e-3)

    @given(scores, scores, st.floats(0.01, 0.99))
    def test_bounded_by_auc_shape(self, n, a, p):
        v = pauc(n, a, p)
        assert 0.0 <= v <= 1.0
        assert float(partial_area(n, a, p)) <= auc(n, a) + 1e-12


class TestHmean:
    def test_values(self):
        assert hmean([1, 1, 1]) == 1.0
        assert hmean([0.5, 1.0]) == pytest.approx(2 / 3)

    def test_non_positive(self):
        with pytest.raises(ValueError):
            hmean([0.5, 0.0])

    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=12))
    def test_between_min_and_mean(self, vs):
        h = hmean(vs)
        assert min(vs) - 1e-12 <= h <= float(np.mean(vs)) + 1e-12


def _scores(rng, machine, shift):
    out = []
    for dom in ("source", "target"):
        for i in range(20):
            out.append(LabeledScore(float(rng.normal()), "normal", dom, machine, f"{machine}{dom}n{i}"))
            out.append(LabeledScore(float(rng.normal() + shift), "anomaly", dom, machine,
                                    f"{machine}{dom}a{i}"))
    return out


class TestReports:
    def test_domain_auc_uses_all_anomalies(self):
        s = [LabeledScore(0.0, "normal", "source", "m"), LabeledScore(5.0, "normal", "target", "m"),
             LabeledScore(1.0, "anomaly", "source", "m"), LabeledScore(6.0, "anomaly", "target", "m")]
        assert domain_auc(s, "source") == 1.0
        assert domain_auc(s, "target") == 0.5

    def test_official_is_flat_hmean(self):
        reps = [MachineReport("a", 0.9, 0.8, 0.6), MachineReport("b", 1.0, 0.7, 0.5)]
        assert official_score(reps) == pytest.approx(hmean([0.9, 0.8, 0.6, 1.0, 0.7, 0.5]))

    def test_zero_metric_gives_zero(self):
        assert official_score([MachineReport("a", 0.9, 0.8, 0.0)]) == 0.0

    def test_evaluate_and_formats(self):
        rng = np.random.default_rng(3)
        rep = evaluate(_scores(rng, "fan", 2.0) + _scores(rng, "pump", 1.0))
        assert [m.machine for m in rep.machines] == ["fan", "pump"]
        assert 0 < rep.official <= 1
        assert rep.subset(["fan"]).official == pytest.approx(rep.machines[0].hmean)
        csv_lines = rep.to_csv().strip().splitlines()
        assert csv_lines[0] == "machine,auc_source,auc_target,pauc,hmean"
        assert csv_lines[-1].startswith("ALL,,,,")
        assert len(rep.to_jsonl().strip().splitlines()) == 3
        assert "ALL" in rep.to_text()

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        s = _scores(rng, "fan", 1.0)
        a = evaluate(s).official
        rng.shuffle(s)
        assert evaluate(s).official == a

    def test_unlabeled(self):
        with pytest.raises(ValueError, match="label"):
            evaluate([LabeledScore(0.0, "unknown", "source", "m", "c")])

    def test_missing_domain(self):
        s = [LabeledScore(0.0, "normal", "source", "m"), LabeledScore(1.0, "anomaly", "source", "m")]
        with pytest.raises(ValueError, match="target"):
            evaluate(s)

    def test_empty_report(self):
        with pytest.raises(ValueError):
            EvalReport([]).official

import numpy as np
import pytest

from cinegru import eval_stats as E
from cinegru.rng import stream


def preds(scores, labels, prefix="s", patients=None):
    n = len(scores)
    ids = [f"{prefix}{i:03d}" for i in range(n)]
    pids = patients if patients is not None else [f"p{i:03d}" for i in range(n)]
    return E.PredictionSet(ids, pids, labels, scores)


def random_instance(seed, n_max=50, ties=True):
    rng = stream(seed, "auc-instance")
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.random(n)
    if ties:
        scores = np.round(scores * rng.integers(2, 8)) / 8
    return scores, labels


class TestGroupKFold:
    def test_clinical_patient_count(self):
        plan = E.group_kfold([f"P{i}" for i in range(63)], 5, seed=0)
        assert sorted(plan.fold_sizes(), reverse=True) == [13, 13, 13, 12, 12]

    def test_leave_one_patient_out(self):
        plan = E.group_kfold(["a", "b", "c", "d"], 4, seed=1)
        assert plan.fold_sizes() == [1, 1, 1, 1]

    def test_deterministic_hash(self):
        ids = [f"P{i}" for i in range(20)]
        assert E.group_kfold(ids, 5, 3).hash == E.group_kfold(ids, 5, 3).hash
        assert E.group_kfold(ids, 5, 3).hash != E.group_kfold(ids, 5, 4).hash

    @pytest.mark.parametrize("n,k", [(10, 3), (41, 5), (7, 7)])
    def test_partition(self, n, k):
        ids = [f"P{i}" for i in range(n)] * 2  # repeated series of one patient
        plan = E.group_kfold(ids, k, seed=n)
        folds = [plan.fold_patients(f) for f in range(k)]
        assert set().union(*folds) == set(ids)
        for i in range(k):
            for j in range(i + 1, k):
                assert not folds[i] & folds[j]
        sizes = plan.fold_sizes()
        assert max(sizes) - min(sizes) <= 1

    def test_errors(self):
        with pytest.raises(ValueError):
            E.group_kfold(["a", "b"], 1)
        with pytest.raises(ValueError):
            E.group_kfold(["a", "b"], 3)

    def test_json_round_trip(self):
        plan = E.group_kfold([f"P{i}" for i in range(9)], 3, 2)
        back = E.SplitPlan.from_json(plan.to_json())
        assert back.assignment == plan.assignment and back.hash == plan.hash


class TestAUROC:
    def test_four_row_example(self):
        # brute force: pairs (0.35>0.1, 0.35<0.4, 0.8>0.1, 0.8>0.4) -> 3/4
        assert E.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect(self):
        assert E.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_tie_is_half(self):
        assert E.auroc([0.5, 0.5], [0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(E.UndefinedAUROC):
            E.auroc([0.1, 0.2], [1, 1])

    def test_equals_bruteforce_with_ties(self):
        for seed in range(200):
            s, y = random_instance(seed)
            assert E.auroc(s, y) == E.auroc_bruteforce(s, y)

    def test_monotone_invariance(self):
        for seed in range(20):
            s, y = random_instance(seed, ties=False)
            a = E.auroc(s, y)
            assert E.auroc(s**3, y) == a
            assert E.auroc(1 / (1 + np.exp(-5 * s)), y) == a

    def test_complement_symmetry(self):
        for seed in range(20):
            s, y = random_instance(seed, ties=False)
            assert E.auroc(s, y) + E.auroc(s, 1 - y) == pytest.approx(1.0, abs=1e-12)


class TestROC:
    def test_four_row_curve(self):
        curve = E.roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert curve[0][:2] == (0.0, 0.0) and curve[-1][:2] == (1.0, 1.0)
        assert [c[:2] for c in curve[1:-1]] == [(0.0, 0.5), (0.5, 0.5), (0.5, 1.0)]
        assert E.trapezoid_area(curve) == 0.75

    def test_perfect_passes_corner(self):
        curve = E.roc_curve([0.2, 0.9], [0, 1])
        assert (0.0, 1.0) in [c[:2] for c in curve]

    def test_area_equals_auroc(self):
        for seed in range(200):
            s, y = random_instance(seed)
            assert abs(E.trapezoid_area(E.roc_curve(s, y)) - E.auroc(s, y)) < 1e-12

    def test_single_class(self):
        with pytest.raises(E.UndefinedAUROC):
            E.roc_curve([0.3], [0])


class TestBootstrap:
    def test_perfect_classifier(self):
        s = np.r_[np.linspace(0, 0.4, 10), np.linspace(0.6, 1, 10)]
        y = np.r_[np.zeros(10), np.ones(10)]
        assert E.bootstrap_ci(preds(s, y), B=200, seed=0) == (1.0, 1.0)

    def test_single_resample(self):
        s, y = random_instance(3)
        p = preds(s, y)
        lo, hi = E.bootstrap_ci(p, B=1, seed=5)
        assert lo == hi

    def test_deterministic_and_ordered(self):
        s, y = random_instance(4)
        p = preds(s, y)
        a = E.bootstrap_ci(p, B=100, seed=1)
        assert a == E.bootstrap_ci(p, B=100, seed=1)
        assert a[0] <= a[1]

    def test_patient_unit(self):
        rng = stream(0, "boot-patient")
        y = np.repeat([0, 1] * 10, 2)
        s = y * 0.3 + rng.random(40)
        p = preds(s, y, patients=[f"p{i // 2}" for i in range(40)])
        lo, hi = E.bootstrap_ci(p, B=200, seed=0, unit="patient")
        assert lo <= E.auroc(p) <= hi

    def test_retry_exhaustion(self):
        p = preds([0.1, 0.9], [0, 1])
        with pytest.raises(RuntimeError):
            E.bootstrap_ci(p, B=50, seed=0, max_retries=1)

    def test_coverage_of_point_estimate(self):
        hits = 0
        trials = 50
        for t in range(trials):
            rng = stream(t, "coverage")
            y = np.r_[np.zeros(25), np.ones(25)].astype(int)
            s = rng.standard_normal(50) + y
            p = preds(s, y)
            lo, hi = E.bootstrap_ci(p, B=200, seed=t)
            hits += lo <= E.auroc(p) <= hi
        assert hits / trials >= 0.9

    def test_clinical_scale_interval_width(self):
        # 104 binormal scores tuned to AUROC ~0.83: the 95% interval spans roughly 0.2
        rng = stream(0, "clinical-scale")
        y = np.r_[np.zeros(52), np.ones(52)].astype(int)
        s = rng.standard_normal(104) + 1.35 * y
        p = preds(s, y)
        assert 0.78 <= E.auroc(p) <= 0.88
        lo, hi = E.bootstrap_ci(p, B=1000, seed=0)
        assert 0.1 <= hi - lo <= 0.3


class TestPermutation:
    def test_identical_models(self):
        s, y = random_instance(5)
        a = preds(s, y)
        delta, p = E.perm_test_delta_auroc(a, a, n_perm=500, seed=0)
        assert delta == 0.0 and p == 1.0

    def test_perfect_vs_antiperfect(self):
        y = np.r_[np.zeros(20), np.ones(20)].astype(int)
        a = preds(y * 0.5 + np.linspace(0, 0.4, 40), y)
        b = preds(1 - a.scores, y)
        delta, p = E.perm_test_delta_auroc(a, b, n_perm=2000, seed=0)
        assert delta == 1.0 and p < 0.01

    def test_single_permutation_p_values(self):
        s, y = random_instance(6, ties=False)
        a = preds(s, y)
        b = preds(stream(6, "b").random(len(s)), y)
        _, p = E.perm_test_delta_auroc(a, b, n_perm=1, seed=0)
        assert p in (0.5, 1.0)

    def test_mismatched_series(self):
        a = preds([0.1, 0.9], [0, 1])
        b = preds([0.1, 0.9], [0, 1], prefix="t")
        with pytest.raises(ValueError, match="series id"):
            E.perm_test_delta_auroc(a, b)

    def test_mismatched_labels(self):
        with pytest.raises(ValueError, match="labels"):
            E.perm_test_delta_auroc(preds([0.1, 0.9, 0.5], [0, 1, 1]), preds([0.1, 0.9, 0.5], [0, 1, 0]))

    def test_order_independent(self):
        s, y = random_instance(8, ties=False)
        a = preds(s, y)
        b = preds(stream(8, "b").random(len(s)), y)
        rev = E.PredictionSet(a.series_ids[::-1], a.patient_ids[::-1], a.labels[::-1], a.scores[::-1])
        assert E.perm_test_delta_auroc(a, b, 300, 1) == E.perm_test_delta_auroc(rev, b, 300, 1)

    def test_null_rejection_rate(self):
        rejections = 0
        trials = 200
        for t in range(trials):
            rng = stream(t, "null")
            y = np.r_[np.zeros(30), np.ones(30)].astype(int)
            a = preds(rng.standard_normal(60) + 0.8 * y, y)
            b = preds(rng.standard_normal(60) + 0.8 * y, y)
            _, p = E.perm_test_delta_auroc(a, b, n_perm=200, seed=t)
            rejections += p < 0.05
        assert 0.01 <= rejections / trials <= 0.10


class TestArtifacts:
    def test_val_scores_round_trip(self, tmp_path):
        rows = [("s1", "p1", 0, 0.125), ("s2", "p1", 1, 1 / 3)]
        E.write_val_scores(tmp_path / "v.csv", rows)
        p = E.read_val_scores([tmp_path / "v.csv"])
        assert p.series_ids == ["s1", "s2"] and p.scores[1] == 1 / 3

    def test_roc_csv_round_trip(self, tmp_path):
        curve = E.roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        E.write_roc_csv(tmp_path / "roc.csv", curve)
        assert E.read_roc_csv(tmp_path / "roc.csv") == curve

    def test_svg_contents(self):
        curve = E.roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        svg = E.roc_svg({"hybrid": (curve, 0.75)})
        assert svg.startswith("<svg") and 'class="roc"' in svg and 'class="diagonal"' in svg
        assert "AUROC = 0.750" in svg

import numpy as np
import pytest

from poisonadapt.data import Dataset, ShiftSpec, generate_benchmark, split_train_test
from poisonadapt.errors import UsageError
from poisonadapt.poisoning import (
    AuxLabeler,
    PoisonPlan,
    build_poisoned_dataset,
    load_plan,
    save_plan,
    select_ground_truth,
    select_pseudo_label,
)
from poisonadapt.triggers import make_blended_trigger


@pytest.fixture(scope="module")
def train_split():
    _, target = generate_benchmark(2, 5, 12, 12, 500, 500, ShiftSpec())
    train, _ = split_train_test(target, 0.8, seed=0)
    return train


class TestGroundTruthSelection:
    def test_balanced_400_gives_80(self, train_split):
        plan = select_ground_truth(train_split, 0)
        assert plan.base_indices.size == 80
        assert plan.supp_indices.size == 0

    def test_matches_linear_scan(self, train_split):
        plan = select_ground_truth(train_split, 3)
        scan = [i for i in range(len(train_split)) if train_split.labels[i] == 3]
        np.testing.assert_array_equal(np.sort(plan.base_indices), scan)

    def test_missing_class_rejected(self, train_split):
        sub = train_split.subset(np.flatnonzero(train_split.labels != 1))
        with pytest.raises(UsageError):
            select_ground_truth(sub, 1)

    def test_unlabeled_view_rejected(self, train_split):
        with pytest.raises(UsageError):
            select_ground_truth(train_split.unlabeled_view(), 0)


class TestAuxLabeler:
    def test_rows_are_distributions(self, train_split):
        labeler = AuxLabeler(corruption_rate=0.1, seed=3)
        probs = labeler.probabilities(train_split)
        assert probs.shape == (400, 5)
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_corruption_argmax_is_truth(self, train_split):
        labeler = AuxLabeler(corruption_rate=0.0, seed=3)
        probs = labeler.probabilities(train_split)
        np.testing.assert_array_equal(probs.argmax(axis=1), train_split.labels)

    def test_corruption_rate_roughly_respected(self, train_split):
        labeler = AuxLabeler(corruption_rate=0.3, seed=5)
        pred = labeler.probabilities(train_split).argmax(axis=1)
        rate = float((pred != train_split.labels).mean())
        assert 0.2 < rate < 0.4

    def test_deterministic(self, train_split):
        a = AuxLabeler(corruption_rate=0.2, seed=7).probabilities(train_split)
        b = AuxLabeler(corruption_rate=0.2, seed=7).probabilities(train_split)
        np.testing.assert_array_equal(a, b)

    def test_bad_arguments(self):
        with pytest.raises(UsageError):
            AuxLabeler(mode="clip")
        with pytest.raises(UsageError):
            AuxLabeler(corruption_rate=1.0)
        with pytest.raises(UsageError):
            AuxLabeler(mode="probe_model")


class TestPseudoLabelSelection:
    def test_perfect_labeler_matches_ground_truth(self, train_split):
        labeler = AuxLabeler(corruption_rate=0.0, seed=1)
        plan = select_pseudo_label(train_split, labeler, 0,
                                   supp_threshold=0.99, supp_cap=0)
        gt = select_ground_truth(train_split, 0)
        np.testing.assert_array_equal(np.sort(plan.base_indices),
                                      np.sort(gt.base_indices))
        assert plan.supp_indices.size == 0

    def test_threshold_above_everything_empties_supp(self, train_split):
        labeler = AuxLabeler(corruption_rate=0.1, seed=1)
        plan = select_pseudo_label(train_split, labeler, 0,
                                   supp_threshold=0.999999, supp_cap=50)
        assert plan.supp_indices.size == 0

    def test_supp_matches_sort_and_filter_oracle(self):
        # synthetic probability table exercised through a stub labeler
        probs = np.array([
            [0.50, 0.30, 0.20],
            [0.95, 0.03, 0.02],
            [0.40, 0.55, 0.05],
            [0.92, 0.05, 0.03],
            [0.10, 0.80, 0.10],
            [0.92, 0.04, 0.04],
            [0.30, 0.60, 0.10],
        ])

        class Stub(AuxLabeler):
            def probabilities(self, ds):
                return probs

        ds = Dataset(np.zeros((7, 12, 12)), np.zeros(7, dtype=int), 3,
                     "target", "train", 0)
        plan = select_pseudo_label(ds, Stub(), 0, supp_threshold=0.3, supp_cap=3)
        base_oracle = [i for i in range(7) if probs[i].argmax() == 0]
        np.testing.assert_array_equal(np.sort(plan.base_indices), base_oracle)
        outside = [(i, probs[i, 0]) for i in range(7) if i not in base_oracle]
        qualified = sorted([iv for iv in outside if iv[1] >= 0.3],
                           key=lambda iv: (-iv[1], iv[0]))[:3]
        np.testing.assert_array_equal(plan.supp_indices, [i for i, _ in qualified])
        # tie between index 2 and 6 at p=0.40 vs 0.30: descending prob first
        assert plan.supp_indices.tolist() == [2, 6]

    def test_caps_and_thresholds_validated(self, train_split):
        labeler = AuxLabeler(seed=0)
        with pytest.raises(UsageError):
            select_pseudo_label(train_split, labeler, 0, supp_threshold=0.0, supp_cap=1)
        with pytest.raises(UsageError):
            select_pseudo_label(train_split, labeler, 0, supp_threshold=0.5, supp_cap=-1)
        with pytest.raises(UsageError):
            select_pseudo_label(train_split, labeler, 9, supp_threshold=0.5, supp_cap=0)


class TestBuildPoisonedDataset:
    def trigger(self):
        return make_blended_trigger(12, 12, alpha=0.4, seed=0)

    def test_rate_zero_changes_nothing_but_strips_labels(self, train_split):
        plan = select_ground_truth(train_split, 0)
        plan.trigger = self.trigger()
        plan.poison_rate = 0.0
        out = build_poisoned_dataset(train_split, plan, seed=1)
        assert out.labels is None
        np.testing.assert_array_equal(out.images, train_split.images)

    def test_rate_one_triggers_every_planned_index(self, train_split):
        plan = select_ground_truth(train_split, 0)
        plan.trigger = self.trigger()
        out = build_poisoned_dataset(train_split, plan, seed=1)
        planned = set(plan.planned_indices.tolist())
        expected = self.trigger().apply_to_images(train_split.images[plan.base_indices])
        np.testing.assert_array_equal(out.images[plan.base_indices], expected)
        for i in range(len(train_split)):
            if i not in planned:
                np.testing.assert_array_equal(out.images[i], train_split.images[i])

    def test_half_rate_counts_and_reproducibility(self, train_split):
        plan = select_ground_truth(train_split, 0)
        plan.trigger = self.trigger()
        plan.poison_rate = 0.5
        out1 = build_poisoned_dataset(train_split, plan, seed=9)
        out2 = build_poisoned_dataset(train_split, plan, seed=9)
        np.testing.assert_array_equal(out1.images, out2.images)
        changed = [i for i in range(len(train_split))
                   if np.any(out1.images[i] != train_split.images[i])]
        assert len(changed) == 40  # ceil(0.5 * 80)
        assert set(changed) <= set(plan.planned_indices.tolist())
        out3 = build_poisoned_dataset(train_split, plan, seed=10)
        changed3 = [i for i in range(len(train_split))
                    if np.any(out3.images[i] != train_split.images[i])]
        assert changed3 != changed

    def test_metadata_reports_both_rate_conventions(self, train_split):
        plan = select_ground_truth(train_split, 0)
        plan.trigger = self.trigger()
        out = build_poisoned_dataset(train_split, plan, seed=1)
        assert out.meta["poison_rate_of_plan"] == repr(1.0)
        assert out.meta["poison_rate_of_dataset"] == repr(80 / 400)

    def test_plan_validation(self, train_split):
        trigger = self.trigger()
        with pytest.raises(UsageError):
            PoisonPlan(0, np.array([1, 2]), np.array([2, 3]), trigger)  # overlap
        plan = PoisonPlan(0, np.array([100000]), np.empty(0, dtype=int), trigger)
        with pytest.raises(UsageError):
            build_poisoned_dataset(train_split, plan, seed=0)
        plan2 = select_ground_truth(train_split, 0)
        with pytest.raises(UsageError):
            build_poisoned_dataset(train_split, plan2, seed=0)  # no trigger


class TestPlanPersistence:
    def test_roundtrip(self, tmp_path, train_split):
        labeler = AuxLabeler(corruption_rate=0.2, seed=3)
        plan = select_pseudo_label(train_split, labeler, 0,
                                   supp_threshold=0.3, supp_cap=5)
        plan.poison_rate = 0.75
        plan.trigger_ref = "trigger_dir"
        path = str(tmp_path / "plan.txt")
        save_plan(plan, path, seed=4)
        back = load_plan(path)
        assert back.target_class == plan.target_class
        assert back.poison_rate == plan.poison_rate
        assert back.trigger_ref == "trigger_dir"
        np.testing.assert_array_equal(back.base_indices, plan.base_indices)
        np.testing.assert_array_equal(back.supp_indices, plan.supp_indices)

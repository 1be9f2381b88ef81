import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridwatch import attacks as at
from gridwatch.events import ALL_MASKS, CLASSES, events_from_capture, feature_fields
from gridwatch.netsim.sim import build_topology
from gridwatch.process import build_feeder
from gridwatch.report import (
    EmptyInput, LengthMismatch, bootstrap_ci, compare_masks, f1_for, score, stratified_split, write_reports,
)

labels = st.sampled_from(["a", "b", "c"])


@pytest.fixture(scope="module")
def scenario():
    topo = build_topology(6)
    capture = at.run_script(at.paper_scenario(topo), topo, build_feeder(6, 4), 150.0, 4)
    return events_from_capture(capture)


@pytest.fixture(scope="module")
def comparison(scenario):
    return compare_masks(scenario, ALL_MASKS, seed=3, n_resamples=100)


class TestScore:
    def test_perfect(self):
        r = score(["a", "b", "c"], ["a", "b", "c"], ("a", "b", "c"))
        assert all((m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0) for m in r.per_class.values())

    def test_hand_case(self):
        r = score(["a", "a"], ["a", "b"], ("a", "b"))
        m = r.per_class["a"]
        assert (m.precision, m.recall) == (0.5, 1.0)
        assert m.f1 == pytest.approx(2 / 3)

    def test_no_support(self):
        r = score(["a"], ["a"], ("a", "b"))
        m = r.per_class["b"]
        assert (m.precision, m.recall, m.f1, m.no_support) == (0.0, 0.0, 0.0, True)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            score(["a"], ["a", "b"], ("a", "b"))

    @given(st.lists(st.tuples(labels, labels), min_size=1, max_size=80))
    def test_invariants(self, pairs):
        pred, truth = zip(*pairs)
        r = score(pred, truth, ("a", "b", "c"))
        assert r.confusion.sum() == len(truth)
        for i, c in enumerate(r.classes):
            m = r.per_class[c]
            assert r.confusion[i].sum() == truth.count(c)
            assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1 and 0 <= m.f1 <= 1
            if m.precision + m.recall:
                assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
        micro_recall = np.trace(r.confusion) / r.confusion.sum()
        assert micro_recall == pytest.approx(r.accuracy)


class TestBootstrap:
    def test_all_correct(self):
        y = ["a", "b"] * 5
        assert bootstrap_ci(y, y, "a", 200, 0) == (1.0, 1.0)

    def test_deterministic_and_brackets(self):
        truth = ["a", "a", "a", "b", "b", "a", "b", "a", "b", "b"]
        pred = ["a", "b", "a", "b", "a", "a", "b", "a", "b", "a"]
        ci = bootstrap_ci(pred, truth, "a", 1000, 7)
        assert ci == bootstrap_ci(pred, truth, "a", 1000, 7)
        assert ci[0] <= f1_for(pred, truth, "a") <= ci[1]

    def test_errors(self):
        with pytest.raises(EmptyInput):
            bootstrap_ci([], [], "a", 100, 0)
        with pytest.raises(ValueError):
            bootstrap_ci(["a"], ["a"], "a", 99, 0)


class TestSplit:
    @settings(max_examples=30)
    @given(st.lists(labels, min_size=2, max_size=100), st.integers(0, 100))
    def test_partition(self, ys, seed):
        train, test = stratified_split(ys, 0.7, seed)
        assert sorted(np.concatenate([train, test]).tolist()) == list(range(len(ys)))

    def test_stratified(self):
        ys = ["a"] * 100 + ["b"] * 50
        train, test = stratified_split(ys, 0.7, 1)
        assert sum(ys[i] == "a" for i in train) == 70 and sum(ys[i] == "b" for i in train) == 35

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            stratified_split(["a", "b"], 1.0, 0)


class TestCompareMasks:
    def test_seven_reports(self, comparison):
        assert len(comparison.results) == 7
        assert set(comparison.results) == {"IT", "OT", "ET", "IT+OT", "IT+ET", "OT+ET", "IT+OT+ET"}

    def test_columns_follow_mask(self, comparison):
        for r in comparison.results.values():
            assert [c for c in r.model.columns if not c.endswith("__present")] == feature_fields(r.mask)

    def test_deterministic(self, scenario, comparison):
        again = compare_masks(scenario, ALL_MASKS, seed=3, n_resamples=100)
        assert json.dumps(again.to_dict(), sort_keys=True) == json.dumps(comparison.to_dict(), sort_keys=True)

    def test_value_manipulation_direction(self, comparison):
        assert comparison.f1("IT+OT+ET", "ValueManipulation") >= comparison.f1("IT", "ValueManipulation")

    def test_confusion_totals(self, comparison):
        for r in comparison.results.values():
            assert r.report.confusion.sum() == len(r.test)

    def test_write_reports(self, comparison, tmp_path):
        files = write_reports(comparison, tmp_path)
        names = {p.name for p in files}
        assert {"comparison.csv", "report.json", "confusion_IT.csv", "confusion_IT+OT+ET.csv"} <= names
        rows = (tmp_path / "comparison.csv").read_text().splitlines()
        assert len(rows) == 1 + 7 * len(CLASSES)
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["highlight"] == {"it_only": "IT", "process_aware": "IT+OT+ET"}

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridwatch import attacks as at
from gridwatch.events import CATEGORY, events_from_capture
from gridwatch.explain import (
    AttributionVector, TooManyFeatures, attributions_csv, background_reference, class_importance,
    explain_class, fusion_shapley, importance_csv, instance_impact, shapley_exact, shapley_sampled,
)
from gridwatch.ids import BinaryClassifier, train_ova
from gridwatch.netsim.sim import build_topology
from gridwatch.pipeline import EvaluationSettings, evaluate
from gridwatch.process import build_feeder

from oracles import shapley_by_subsets


def standard_model(m=8, seed=0):
    """Nonlinear test model: logistic of a linear term plus pairwise products."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=m)
    pairs = rng.normal(scale=0.5, size=(m, m))

    def f(X):
        X = np.atleast_2d(X)
        inter = np.einsum("ni,ij,nj->n", X, np.triu(pairs, 1), X)
        return 1 / (1 + np.exp(-(X @ w + inter)))
    return f


def linear(w, b):
    w = np.asarray(w, float)
    return lambda X: np.atleast_2d(X) @ w + b


class TestExact:
    def test_constant_model(self):
        att = shapley_exact(lambda X: np.full(len(np.atleast_2d(X)), 3.0), np.ones(4), np.zeros(4))
        assert np.all(att.phi == 0)

    def test_linear_closed_form(self):
        w, x, bg = np.array([1.5, -2.0, 0.5]), np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.0, -1.0])
        att = shapley_exact(linear(w, 0.7), x, bg)
        assert att.phi == pytest.approx(w * (x - bg), abs=1e-9)

    def test_matches_subset_oracle(self):
        f = standard_model(5, 3)
        rng = np.random.default_rng(3)
        x, bg = rng.normal(size=5), rng.normal(size=5)
        expected = shapley_by_subsets(lambda row: float(f(np.array(row))[0]), x.tolist(), bg.tolist())
        assert shapley_exact(f, x, bg).phi == pytest.approx(expected, abs=1e-12)

    def test_symmetry(self):
        f = lambda X: np.atleast_2d(X)[:, 0] * np.atleast_2d(X)[:, 1] + np.atleast_2d(X)[:, 2]
        att = shapley_exact(f, np.array([2.0, 2.0, 1.0]), np.zeros(3))
        assert att.phi[0] == pytest.approx(att.phi[1], abs=1e-12)

    def test_null_player(self):
        clf = BinaryClassifier(np.array([1.0, 0.0, -2.0]), 0.1, np.zeros(3), np.array([1.0, 0.0, 2.0]))
        att = shapley_exact(clf.raw, np.array([1.0, 9.0, 3.0]), np.array([0.0, 4.0, 1.0]))
        assert abs(att.phi[1]) <= 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_efficiency(self, m, seed):
        rng = np.random.default_rng(seed)
        att = shapley_exact(standard_model(m, seed), rng.normal(size=m), rng.normal(size=m))
        assert abs(att.phi.sum() - (att.fx - att.base_value)) <= 1e-9

    def test_too_many_features(self):
        with pytest.raises(TooManyFeatures):
            shapley_exact(linear(np.ones(13), 0), np.ones(13), np.zeros(13))

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            shapley_exact(linear(np.ones(3), 0), np.ones(3), np.zeros(2))


class TestSampled:
    def test_deterministic(self):
        f = standard_model()
        x, bg = np.ones(8), np.zeros(8)
        a = shapley_sampled(f, x, bg, 300, seed=4)
        b = shapley_sampled(f, x, bg, 300, seed=4)
        assert np.array_equal(a.phi, b.phi)

    def test_close_to_exact(self):
        f = standard_model(8, 1)
        rng = np.random.default_rng(1)
        x, bg = rng.normal(size=8), rng.normal(size=8)
        exact = shapley_exact(f, x, bg).phi
        approx = shapley_sampled(f, x, bg, 2000, seed=0).phi
        assert np.max(np.abs(approx - exact)) <= 0.05

    def test_all_permutations_exact(self):
        f = standard_model(4, 2)
        x, bg = np.arange(4.0), -np.ones(4)
        att = shapley_sampled(f, x, bg, math.factorial(4))
        assert att.phi == pytest.approx(shapley_exact(f, x, bg).phi, abs=1e-12)

    def test_efficiency_enforced(self):
        f = standard_model(10, 5)
        att = shapley_sampled(f, np.ones(10), np.zeros(10), 20, seed=2)
        assert att.phi.sum() == pytest.approx(att.fx - att.base_value, abs=1e-9)

    def test_consistency(self):
        f = standard_model(8, 6)
        rng = np.random.default_rng(6)
        x, bg = rng.normal(size=8), rng.normal(size=8)
        exact = shapley_exact(f, x, bg).phi

        def rmse(n):
            errs = [np.sqrt(np.mean((shapley_sampled(f, x, bg, n, seed=s).phi - exact) ** 2)) for s in range(20)]
            return float(np.mean(errs))
        # four times the permutations roughly halves the error
        assert rmse(400) < 0.7 * rmse(100)

    def test_needs_permutations(self):
        with pytest.raises(ValueError):
            shapley_sampled(linear([1.0], 0), np.ones(1), np.zeros(1), 0)


class TestAggregation:
    def test_single_instance(self):
        att = AttributionVector(np.array([0.5, -2.0, 0.0]), 0.0, -1.5)
        imp = class_importance({"DoS": [att]}, ["a", "b", "c"])
        assert imp["DoS"] == [("b", 2.0), ("a", 0.5), ("c", 0.0)]

    def test_all_zero(self):
        imp = class_importance({"X": [np.zeros(2), np.zeros(2)]}, ["a", "b"])
        assert [v for _, v in imp["X"]] == [0.0, 0.0]

    def test_instance_impact(self):
        assert instance_impact([1.0, -2.0, 0.5]) == 3.5

    def test_background_reference(self):
        X = np.arange(20.0).reshape(10, 2)
        assert background_reference(X, 100, 0) == pytest.approx(X.mean(axis=0))
        assert background_reference(X, 5, 1).shape == (2,)

    def test_csv_exports(self):
        att = AttributionVector(np.array([0.25, -0.5]), 0.1, -0.15)
        text = attributions_csv([(7, "DoS", ["a", "b"], att)])
        lines = text.splitlines()
        assert lines[0].startswith("instance_id,class,feature,phi")
        assert lines[1].startswith("7,DoS,a,0.25")
        imp = importance_csv({"DoS": [("b", 0.5), ("a", 0.25)]})
        assert imp.splitlines()[1] == "DoS,1,b,0.5"


class TestModels:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.X = rng.normal(size=(90, 4))
        self.y = np.array(["a", "b", "c"] * 30, dtype=object)
        self.X[self.y == "b", 0] += 3
        self.model = train_ova(self.X, self.y, ("a", "b", "c"))

    def test_logit_closed_form(self):
        clf = self.model.classifiers[1]
        bg = self.X.mean(axis=0)
        (att,) = explain_class(self.model, self.X[:1], "b", bg)
        expected = clf.weights * (clf.standardize(self.X[0]) - clf.standardize(bg))
        assert att.phi == pytest.approx(expected, abs=1e-9)

    def test_fusion_efficiency(self):
        target, att = fusion_shapley(self.model, self.X[3], self.X)
        assert 0 <= target < 3
        assert att.phi.sum() == pytest.approx(att.fx - att.base_value, abs=1e-9)
        assert att.fx == pytest.approx(self.model.predict_proba(self.X[3:4])[0, target])


class TestScenario:
    def test_dos_ranks_it_feature_in_top_three(self):
        topo = build_topology(6)
        events = events_from_capture(at.run_script(at.paper_scenario(topo), topo, build_feeder(6, 4), 150.0, 4))
        settings = EvaluationSettings(seed=4, masks=[frozenset({"IT", "OT", "ET"})], bootstrap_resamples=100,
                                      explain=("DoS",))
        top = [name.removesuffix("__present") for name, _ in evaluate(events, settings).importance["DoS"][:3]]
        assert any(CATEGORY[name] == "IT" for name in top), top

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gridwatch import ids
from gridwatch.attacks import Phase
from gridwatch.ids import (
    ClassScores, DegenerateLabels, DimensionMismatch, Hyper, OvaEnsemble, SequenceDetector, WindowConfig,
    WindowDecision, detect_sequence, fuse, meta_decide, predict, softmax, train_binary, train_ova,
    vote_windows, window_scan, window_starts,
)

from oracles import naive_decide, naive_train

finite = st.floats(-30, 30, allow_nan=False)


def random_dataset(seed, n_max=200, m_max=6, k=3):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3 * k, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    centers = rng.normal(0, 2, size=(k, m))
    y = np.arange(n) % k
    rng.shuffle(y)
    X = centers[y] + rng.normal(0, 1.5, size=(n, m))
    if m > 1 and seed % 4 == 0:
        X[:, -1] = 3.0  # constant column
    classes = tuple(f"c{i}" for i in range(k))
    return X, np.array([classes[i] for i in y], dtype=object), classes


class TestSoftmax:
    def test_equal_scores(self):
        assert softmax([0.3] * 4) == pytest.approx([0.25] * 4)

    def test_hand_example(self):
        assert softmax(np.log([1.0, 2.0, 3.0])) == pytest.approx([1 / 6, 2 / 6, 3 / 6], abs=1e-12)

    @given(st.lists(finite, min_size=1, max_size=8), finite)
    def test_properties(self, raw, c):
        p = softmax(raw)
        assert (p > 0).all()
        assert abs(p.sum() - 1) <= 1e-9
        assert softmax(np.array(raw) + c) == pytest.approx(p, abs=1e-12)
        assert p[int(np.argmax(raw))] == p.max()

    def test_large_scores_stable(self):
        assert np.isfinite(softmax([1000.0, 1001.0])).all()


class TestMetaDecide:
    def test_argmax(self):
        d = meta_decide(ClassScores(np.zeros(3), np.array([0.2, 0.5, 0.3])))
        assert (d.index, d.confidence) == (1, 0.5)

    def test_tie_lowest_index(self):
        assert meta_decide(ClassScores(np.zeros(2), np.array([0.5, 0.5]))).index == 0

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=7))
    def test_confidence_bounds(self, raw):
        d = meta_decide(fuse(raw))
        assert 1 / len(raw) - 1e-12 <= d.confidence < 1

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=6, unique=True), st.randoms())
    def test_permutation_consistent(self, raw, rnd):
        order = list(range(len(raw)))
        rnd.shuffle(order)
        a = meta_decide(fuse(raw)).index
        b = meta_decide(fuse([raw[i] for i in order])).index
        assert order[b] == a


class TestTrainBinary:
    def test_one_dimensional(self):
        clf = train_binary([[-1.0], [1.0]], [0, 1])
        assert clf.score([[1.0]])[0] > 0.5 > clf.score([[-1.0]])[0]

    def test_degenerate(self):
        with pytest.raises(DegenerateLabels):
            train_binary([[1.0], [2.0]], [1, 1])

    def test_deterministic(self):
        X, y, _ = random_dataset(1)
        a = train_binary(X, y == "c0")
        b = train_binary(X, y == "c0")
        assert np.array_equal(a.weights, b.weights) and a.bias == b.bias

    def test_constant_column_ignored(self):
        X = np.array([[0.0, 5.0], [1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        clf = train_binary(X, [0, 0, 1, 1])
        assert clf.stds[1] == 0 and clf.weights[1] == 0

    @settings(max_examples=25, deadline=None)
    @given(arrays(float, (12, 3), elements=st.floats(-5, 5)), st.lists(st.integers(0, 1), min_size=12, max_size=12))
    def test_loss_non_increasing(self, X, y):
        if len(set(y)) < 2:
            return
        losses = train_binary(X, y, Hyper(iterations=100)).losses
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_matches_naive_oracle(self):
        X, y, _ = random_dataset(7, n_max=40, m_max=3)
        clf = train_binary(X, (y == "c1").astype(float))
        w, b, *_ = naive_train(X.tolist(), (y == "c1").astype(float).tolist())
        assert clf.weights == pytest.approx(w, abs=1e-9)
        assert clf.bias == pytest.approx(b, abs=1e-9)


class TestEnsemble:
    def test_oracle_decisions(self):
        for seed in range(5):
            X, y, classes = random_dataset(100 + seed, n_max=60, m_max=4)
            model = train_ova(X, y, classes)
            naive = [naive_train(X.tolist(), (y == c).astype(float).tolist()) for c in classes]
            idx, _ = model.decide(X)
            assert idx.tolist() == [naive_decide(naive, row)[0] for row in X.tolist()]

    def test_predict_and_dimension(self):
        X, y, classes = random_dataset(3)
        model = train_ova(X, y, classes)
        s = predict(model, X[0])
        assert s.probs.sum() == pytest.approx(1.0)
        assert s.probs == pytest.approx(model.predict_proba(X[:1])[0])
        with pytest.raises(DimensionMismatch):
            predict(model, np.zeros(X.shape[1] + 1))

    def test_json_roundtrip(self):
        X, y, classes = random_dataset(5)
        model = train_ova(X, y, classes, columns=[f"f{i}" for i in range(X.shape[1])])
        back = OvaEnsemble.from_json(model.to_json())
        assert np.array_equal(back.predict_proba(X), model.predict_proba(X))
        assert back.schema_hash() == model.schema_hash()


def decisions(labels, start=0.0):
    return [WindowDecision(start + i, start + i + 5, lab, 0.9, 5) for i, lab in enumerate(labels)]


class TestWindows:
    def test_count(self):
        assert len(window_starts(0.0, 100.0, WindowConfig(5, 1, 3))) == 96

    def test_config_checked(self):
        with pytest.raises(ValueError):
            WindowConfig(5, 6, 3)
        with pytest.raises(ValueError):
            WindowConfig(5, 0, 3)

    def test_no_events(self):
        X, y, classes = random_dataset(2)
        assert window_scan([], np.empty((0, X.shape[1])), train_ova(X, y, classes)) == []

    def test_min_events(self):
        ts = [0.0, 0.5, 10.0, 10.2, 10.4, 10.6]
        out = vote_windows(ts, [0] * 6, [0.9] * 6, ("Normal", "DoS"), WindowConfig(2, 1, 3), 0.0, 12.0)
        assert [w.start for w in out] == [9.0, 10.0]

    def test_all_normal(self):
        ts = np.linspace(0, 20, 200)
        out = vote_windows(ts, np.zeros(200, int), np.full(200, 0.8), ("Normal", "DoS"), WindowConfig())
        assert out and not any(w.anomalous for w in out)

    def test_majority_and_tie(self):
        classes = ("Normal", "DoS", "Replay")
        cfg = WindowConfig(10, 10, 1)
        out = vote_windows([0, 1, 2], [1, 1, 2], [0.4, 0.4, 0.9], classes, cfg, 0, 10)
        assert out[0].label == "DoS"
        tie = vote_windows([0, 1, 2, 3], [1, 1, 2, 2], [0.4, 0.4, 0.9, 0.8], classes, cfg, 0, 10)
        assert tie[0].label == "Replay"

    def test_unordered_rejected(self):
        X, y, classes = random_dataset(2)
        with pytest.raises(ValueError):
            window_scan([1.0, 0.0], X[:2], train_ova(X, y, classes))


class TestSequence:
    def test_ordered(self):
        (alarm,) = detect_sequence(decisions(["Discovery", "SshBruteforce", "DoS"]))
        assert alarm.ordered
        assert set(alarm.phases) == {Phase.Discovery, Phase.CredentialAccess, Phase.Impact}

    def test_reverse(self):
        (alarm,) = detect_sequence(decisions(["DoS", "Discovery"]))
        assert not alarm.ordered

    def test_single_phase(self):
        assert detect_sequence(decisions(["DoS", "ValueManipulation", "Normal"])) == []

    def test_normal_windows_ignored(self):
        (alarm,) = detect_sequence(decisions(["Normal", "ArpSpoofing", "Normal", "DoS"]))
        assert alarm.ordered and alarm.phases == (Phase.LateralMovement, Phase.Impact)

    def test_min_phases(self):
        det = SequenceDetector(min_phases=3)
        assert detect_sequence(decisions(["Discovery", "DoS"]), det) == []
        with pytest.raises(ValueError):
            SequenceDetector(min_phases=1)

    @given(st.lists(st.sampled_from(list(ids.CLASS_PHASE)), min_size=1, max_size=12))
    def test_sorted_stream_is_ordered(self, labels):
        rank = {p: i for i, p in enumerate(SequenceDetector().canonical_order)}
        labels = sorted(labels, key=lambda c: rank[ids.CLASS_PHASE[c]])
        alarms = detect_sequence(decisions(labels))
        distinct = {ids.CLASS_PHASE[c] for c in labels}
        assert (alarms != []) == (len(distinct) >= 2)
        assert all(a.ordered for a in alarms)

    def test_reversed_canonical_is_atypical(self):
        labels = ["DoS", "ArpSpoofing", "Discovery", "SshBruteforce", "Replay"]
        (alarm,) = detect_sequence(decisions(labels))
        assert not alarm.ordered and len(alarm.phases) == 5

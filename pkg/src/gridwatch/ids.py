"""One-vs-all logistic ensemble, softmax fusion, windowing and sequence alarms."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import PHASE_ORDER, Phase

NORMAL = "Normal"

CLASS_PHASE = {
    "DoS": Phase.Impact,
    "ValueManipulation": Phase.Impact,
    "Replay": Phase.DefenseEvasion,
    "SshBruteforce": Phase.CredentialAccess,
    "Discovery": Phase.Discovery,
    "ArpSpoofing": Phase.LateralMovement,
}


class DegenerateLabels(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Hyper:
    learning_rate: float = 0.1
    iterations: int = 500
    l2: float = 1e-3


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(raw):
    raw = np.asarray(raw, dtype=float)
    shifted = raw - raw.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def regularized_loss(Z: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, l2: float) -> float:
    """Mean cross-entropy plus (l2/2)|w|^2, on already standardized features."""
    logits = Z @ w + b
    # log(1+e^x) computed stably; cross-entropy = softplus(x) - y*x
    ce = np.logaddexp(0.0, logits) - y * logits
    return float(ce.mean() + 0.5 * l2 * np.dot(w, w))


@dataclass
class BinaryClassifier:
    weights: np.ndarray
    bias: float
    means: np.ndarray
    stds: np.ndarray  # 0 marks a constant column, standardized to 0
    target: str = ""
    losses: list[float] = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        safe = np.where(self.stds > 0, self.stds, 1.0)
        return np.where(self.stds > 0, (X - self.means) / safe, 0.0)

    def raw(self, X) -> np.ndarray:
        """Logit w . standardize(x) + b."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[-1]}")
        return self.standardize(X) @ self.weights + self.bias

    def score(self, X) -> np.ndarray:
        return sigmoid(self.raw(X))


def train_binary(X, y, hyper: Hyper = Hyper(), target: str = "") -> BinaryClassifier:
    """L2-regularised logistic regression by full-batch gradient descent from zero."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be 2-D with one row per label")
    if y.min() == y.max():
        raise DegenerateLabels("training needs both positive and negative examples")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds = np.where(stds > 1e-12 * np.maximum(1.0, np.abs(means)), stds, 0.0)
    clf = BinaryClassifier(np.zeros(X.shape[1]), 0.0, means, stds, target)
    Z = clf.standardize(X)
    n = len(y)
    w = np.zeros(X.shape[1])
    b = 0.0
    losses = [regularized_loss(Z, y, w, b, hyper.l2)]
    for _ in range(hyper.iterations):
        p = sigmoid(Z @ w + b)
        err = p - y
        grad_w = Z.T @ err / n + hyper.l2 * w
        grad_b = err.mean()
        w = w - hyper.learning_rate * grad_w
        b = b - hyper.learning_rate * grad_b
        losses.append(regularized_loss(Z, y, w, b, hyper.l2))
    clf.weights = w
    clf.bias = float(b)
    clf.losses = losses
    return clf


@dataclass(frozen=True)
class ClassScores:
    raw: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class MetaDecision:
    index: int
    label: str
    confidence: float


@dataclass
class OvaEnsemble:
    classifiers: list[BinaryClassifier]
    classes: tuple[str, ...]
    columns: tuple[str, ...] = ()
    hyper: Hyper = Hyper()

    @property
    def n_features(self) -> int:
        return self.classifiers[0].n_features

    def raw_matrix(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([sigmoid(c.raw(X)) for c in self.classifiers], axis=1)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.raw_matrix(X))

    def decide(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised meta decision: (class indices, confidences)."""
        probs = self.predict_proba(X)
        idx = probs.argmax(axis=1)  # first maximum = lowest class index on ties
        return idx, probs[np.arange(len(idx)), idx]

    def schema_hash(self) -> str:
        return hashlib.sha256("\x1f".join(self.columns).encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps({
            "classes": list(self.classes),
            "columns": list(self.columns),
            "schema_hash": self.schema_hash(),
            "hyper": {"learning_rate": self.hyper.learning_rate, "iterations": self.hyper.iterations,
                      "l2": self.hyper.l2},
            "classifiers": [{"target": c.target, "weights": c.weights.tolist(), "bias": c.bias,
                             "means": c.means.tolist(), "stds": c.stds.tolist()} for c in self.classifiers],
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> OvaEnsemble:
        obj = json.loads(text)
        clfs = [BinaryClassifier(np.array(c["weights"]), c["bias"], np.array(c["means"]), np.array(c["stds"]),
                                 c["target"]) for c in obj["classifiers"]]
        model = cls(clfs, tuple(obj["classes"]), tuple(obj["columns"]), Hyper(**obj["hyper"]))
        if model.schema_hash() != obj["schema_hash"]:
            raise ValueError("schema hash does not match the stored feature columns")
        return model


def train_ova(X, labels, classes: Sequence[str], hyper: Hyper = Hyper(),
              columns: Sequence[str] = ()) -> OvaEnsemble:
    labels = np.asarray(labels)
    clfs = [train_binary(X, (labels == c).astype(float), hyper, c) for c in classes]
    return OvaEnsemble(clfs, tuple(classes), tuple(columns), hyper)


def predict(ensemble: OvaEnsemble, x) -> ClassScores:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) != ensemble.n_features:
        raise DimensionMismatch(f"expected a vector of {ensemble.n_features} features")
    raw = ensemble.raw_matrix(x)[0]
    return ClassScores(raw, softmax(raw))


def fuse(raw) -> ClassScores:
    raw = np.asarray(raw, dtype=float)
    return ClassScores(raw, softmax(raw))


def meta_decide(scores: ClassScores, classes: Sequence[str] | None = None) -> MetaDecision:
    probs = np.asarray(scores.probs)
    i = int(np.argmax(probs))
    label = classes[i] if classes is not None else str(i)
    return MetaDecision(i, label, float(probs[i]))


# -- windows -----------------------------------------------------------------


@dataclass(frozen=True)
class WindowConfig:
    length: float = 5.0
    stride: float = 1.0
    min_events: int = 3

    def __post_init__(self):
        if not 0 < self.stride <= self.length:
            raise ValueError("window config needs 0 < stride <= length")
        if self.min_events < 1:
            raise ValueError("min_events must be at least 1")


@dataclass(frozen=True)
class WindowDecision:
    start: float
    end: float
    label: str
    confidence: float
    n_events: int

    @property
    def anomalous(self) -> bool:
        return self.label != NORMAL


def window_starts(t0: float, t1: float, config: WindowConfig) -> np.ndarray:
    span = t1 - t0
    if span < config.length:
        return np.empty(0)
    count = int(np.floor((span - config.length) / config.stride + 1e-9)) + 1
    return t0 + config.stride * np.arange(count)


def vote_windows(timestamps, indices, confidences, classes: Sequence[str], config: WindowConfig,
                 start: float | None = None, end: float | None = None) -> list[WindowDecision]:
    """Majority vote of per-event meta decisions inside each window."""
    ts = np.asarray(timestamps, dtype=float)
    if len(ts) == 0:
        return []
    idx = np.asarray(indices, dtype=int)
    conf = np.asarray(confidences, dtype=float)
    t0 = ts[0] if start is None else start
    t1 = ts[-1] if end is None else end
    k = len(classes)
    out = []
    for ws in window_starts(t0, t1, config):
        we = ws + config.length
        lo, hi = np.searchsorted(ts, [ws, we], side="left")
        n = hi - lo
        if n < config.min_events:
            continue
        votes = np.bincount(idx[lo:hi], minlength=k)
        sums = np.bincount(idx[lo:hi], weights=conf[lo:hi], minlength=k)
        top = np.flatnonzero(votes == votes.max())
        means = sums[top] / votes[top]
        winner = int(top[int(np.argmax(means))])
        out.append(WindowDecision(float(ws), float(we), classes[winner], float(sums[winner] / votes[winner]), int(n)))
    return out


def window_scan(timestamps, X, ensemble: OvaEnsemble, config: WindowConfig = WindowConfig(),
                start: float | None = None, end: float | None = None) -> list[WindowDecision]:
    ts = np.asarray(timestamps, dtype=float)
    if len(ts) == 0:
        return []
    if np.any(np.diff(ts) < 0):
        raise ValueError("events must be time-ordered")
    idx, conf = ensemble.decide(X)
    return vote_windows(ts, idx, conf, ensemble.classes, config, start, end)


# -- sequences ---------------------------------------------------------------


@dataclass(frozen=True)
class SequenceDetector:
    canonical_order: tuple[Phase, ...] = PHASE_ORDER
    min_phases: int = 2

    def __post_init__(self):
        if len(set(self.canonical_order)) != len(self.canonical_order):
            raise ValueError("canonical order must not repeat phases")
        if self.min_phases < 2:
            raise ValueError("a multi-stage alarm needs min_phases >= 2")


@dataclass(frozen=True)
class SequenceAlarm:
    ordered: bool
    phases: tuple[Phase, ...]  # distinct phases by first appearance
    ordered_phases: tuple[Phase, ...]  # longest run consistent with the canonical order
    start: float
    end: float


def _longest_increasing(ranks: list[int]) -> list[int]:
    """Positions of one longest strictly increasing subsequence (O(n^2), n <= 12)."""
    n = len(ranks)
    best = [1] * n
    prev = [-1] * n
    for i in range(n):
        for j in range(i):
            if ranks[j] < ranks[i] and best[j] + 1 > best[i]:
                best[i], prev[i] = best[j] + 1, j
    if not n:
        return []
    i = max(range(n), key=lambda k: (best[k], -k))
    out = []
    while i >= 0:
        out.append(i)
        i = prev[i]
    return out[::-1]


def detect_sequence(decisions: Sequence[WindowDecision],
                    detector: SequenceDetector = SequenceDetector()) -> list[SequenceAlarm]:
    first_seen: dict[Phase, float] = {}
    last = None
    for d in decisions:
        if not d.anomalous or d.label not in CLASS_PHASE:
            continue
        phase = CLASS_PHASE[d.label]
        if phase in detector.canonical_order and phase not in first_seen:
            first_seen[phase] = d.start
        last = d.end
    phases = list(first_seen)
    if len(phases) < detector.min_phases:
        return []
    rank = {p: i for i, p in enumerate(detector.canonical_order)}
    chain = [phases[i] for i in _longest_increasing([rank[p] for p in phases])]
    start = min(first_seen.values())
    if len(chain) >= detector.min_phases:
        return [SequenceAlarm(True, tuple(phases), tuple(chain), start, last)]
    return [SequenceAlarm(False, tuple(phases), tuple(chain), start, last)]

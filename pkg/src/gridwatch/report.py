"""Scoring, the seven-mask comparison harness and report files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .events import ALL_MASKS, CLASSES, IT, OT, ET, LabeledDataset, apply_mask, balance_sample, mask_name
from .ids import Hyper, OvaEnsemble, train_ova


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    no_support: bool = False
    ci: tuple[float, float] | None = None


@dataclass
class MetricsReport:
    classes: tuple[str, ...]
    per_class: dict[str, ClassMetrics]
    confusion: np.ndarray  # rows truth, columns prediction
    accuracy: float
    mask: str = ""
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mask": self.mask,
            "accuracy": self.accuracy,
            "classes": list(self.classes),
            "per_class": {c: {"precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support,
                              "no_support": m.no_support, "ci": list(m.ci) if m.ci else None}
                          for c, m in self.per_class.items()},
            "confusion": self.confusion.tolist(),
            "metadata": self.metadata,
        }


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def f1_for(predictions, truth, cls) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    tp = int(np.sum((predictions == cls) & (truth == cls)))
    fp = int(np.sum((predictions == cls) & (truth != cls)))
    fn = int(np.sum((predictions != cls) & (truth == cls)))
    return _prf(tp, fp, fn)[2]


def score(predictions: Sequence, truth: Sequence, classes: Sequence[str] = CLASSES) -> MetricsReport:
    """Per-class one-vs-rest precision, recall and F1 plus the confusion matrix."""
    predictions = np.asarray(predictions, dtype=object)
    truth = np.asarray(truth, dtype=object)
    if len(predictions) != len(truth):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(truth)} labels")
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    confusion = np.zeros((k, k), dtype=int)
    for p, t in zip(predictions, truth):
        if p not in index or t not in index:
            raise ValueError(f"label outside the class vocabulary: {p if p not in index else t}")
        confusion[index[t], index[p]] += 1
    per_class = {}
    for c, i in index.items():
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum() - tp)
        fn = int(confusion[i, :].sum() - tp)
        p, r, f = _prf(tp, fp, fn)
        per_class[c] = ClassMetrics(p, r, f, tp + fn, no_support=(tp + fn + fp == 0))
    accuracy = float(np.trace(confusion) / len(truth)) if len(truth) else 0.0
    return MetricsReport(classes, per_class, confusion, accuracy)


def bootstrap_ci(predictions: Sequence, truth: Sequence, cls: str, n_resamples: int = 1000,
                 seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval of the class F1 over resamples with replacement."""
    predictions = np.asarray(predictions, dtype=object)
    truth = np.asarray(truth, dtype=object)
    if len(truth) == 0:
        raise EmptyInput("bootstrap needs at least one instance")
    if len(predictions) != len(truth):
        raise LengthMismatch("predictions and truth differ in length")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    rng = np.random.default_rng(seed)
    pred_pos = predictions == cls
    true_pos = truth == cls
    n = len(truth)
    draws = rng.integers(0, n, size=(n_resamples, n))
    pp = pred_pos[draws]
    tt = true_pos[draws]
    tp = np.sum(pp & tt, axis=1)
    fp = np.sum(pp & ~tt, axis=1)
    fn = np.sum(~pp & tt, axis=1)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    alpha = (1 - level) / 2
    low, high = np.quantile(f1, [alpha, 1 - alpha])
    return float(low), float(high)


def stratified_split(labels: Sequence, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < train_fraction < 1:
        raise ValueError("split must lie in (0, 1)")
    labels = np.asarray(labels, dtype=object)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(train_fraction * len(idx)))
        if len(idx) > 1:
            cut = min(max(cut, 1), len(idx) - 1)
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass
class MaskResult:
    mask: frozenset[str]
    report: MetricsReport
    model: OvaEnsemble
    test: LabeledDataset
    predictions: np.ndarray


@dataclass
class ComparisonReport:
    results: dict[str, MaskResult]
    metadata: dict = field(default_factory=dict)

    def f1(self, mask: str, cls: str) -> float:
        return self.results[mask].report.per_class[cls].f1

    def to_dict(self) -> dict:
        return {"metadata": self.metadata,
                "masks": {name: r.report.to_dict() for name, r in self.results.items()},
                "highlight": {"it_only": mask_name({IT}), "process_aware": mask_name({IT, OT, ET})}}


def evaluate_mask(events, mask, *, seed: int = 0, split: float = 0.7, hyper: Hyper = Hyper(),
                  vocabulary=None, n_resamples: int = 1000, classes=CLASSES) -> MaskResult:
    dataset = apply_mask(events, mask, vocabulary, classes)
    balanced = balance_sample(dataset, seed)
    train_idx, test_idx = stratified_split(balanced.y, split, seed)
    train, test = balanced.subset(train_idx), balanced.subset(test_idx)
    model = train_ova(train.X, train.y, classes, hyper, dataset.columns)
    idx, _ = model.decide(test.X)
    predictions = np.array([classes[i] for i in idx], dtype=object)
    report = score(predictions, test.y, classes)
    report.mask = mask_name(mask)
    if n_resamples:
        for c in classes:
            report.per_class[c].ci = bootstrap_ci(predictions, test.y, c, n_resamples, seed)
    report.metadata = {"train_rows": len(train), "test_rows": len(test), "balanced_per_class": len(balanced) // len(classes)}
    return MaskResult(frozenset(mask), report, model, test, predictions)


def compare_masks(events, masks: Iterable[frozenset[str]] = ALL_MASKS, *, seed: int = 0, split: float = 0.7,
                  hyper: Hyper = Hyper(), n_resamples: int = 1000, classes=CLASSES,
                  metadata: dict | None = None) -> ComparisonReport:
    """Balance, split, train and score the ensemble once per category mask."""
    from .events import build_vocabulary

    vocabulary = build_vocabulary(events)
    results = {}
    for mask in masks:
        r = evaluate_mask(events, mask, seed=seed, split=split, hyper=hyper, vocabulary=vocabulary,
                          n_resamples=n_resamples, classes=classes)
        results[mask_name(mask)] = r
    meta = {"seed": seed, "split": split, "event_count": len(events), "bootstrap_resamples": n_resamples}
    meta.update(metadata or {})
    return ComparisonReport(results, meta)


def comparison_csv(comparison: ComparisonReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["mask", "class", "precision", "recall", "f1", "f1_ci_low", "f1_ci_high", "support", "no_support"])
    for name, r in comparison.results.items():
        for c, m in r.report.per_class.items():
            low, high = m.ci if m.ci else ("", "")
            w.writerow([name, c, repr(m.precision), repr(m.recall), repr(m.f1), repr(low) if m.ci else "",
                        repr(high) if m.ci else "", m.support, int(m.no_support)])
    return out.getvalue()


def confusion_csv(report: MetricsReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["truth\\predicted"] + list(report.classes))
    for c, row in zip(report.classes, report.confusion):
        w.writerow([c] + [int(v) for v in row])
    return out.getvalue()


def write_reports(comparison: ComparisonReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "comparison.csv", out / "report.json"]
    written[0].write_text(comparison_csv(comparison), encoding="utf-8")
    written[1].write_text(json.dumps(comparison.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, r in comparison.results.items():
        path = out / f"confusion_{name}.csv"
        path.write_text(confusion_csv(r.report), encoding="utf-8")
        written.append(path)
    return written

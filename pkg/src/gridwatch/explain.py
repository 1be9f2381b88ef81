"""Shapley feature attribution: exact enumeration and permutation sampling.

Features outside a coalition are replaced by a single background reference
(the mean of a background sample). Base classifiers are attributed on their
raw logit, so a linear model's attributions have the closed form
w_i * (x_i - background_i) after standardization.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .ids import BinaryClassifier, OvaEnsemble, softmax

MAX_EXACT_FEATURES = 12

Model = Callable[[np.ndarray], np.ndarray]  # (n, M) -> (n,)


class TooManyFeatures(ValueError):
    pass


@dataclass(frozen=True)
class AttributionVector:
    phi: np.ndarray
    base_value: float
    fx: float

    @property
    def instance_impact(self) -> float:
        return instance_impact(self.phi)


def background_reference(X: np.ndarray, size: int = 100, seed: int = 0) -> np.ndarray:
    """Mean of ``size`` rows drawn without replacement (all rows if fewer)."""
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ValueError("background needs at least one row")
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(X), size=min(size, len(X)), replace=False)
    return X[np.sort(rows)].mean(axis=0)


def _prepare(x, background) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    background = np.asarray(background, dtype=float)
    if x.shape != background.shape or x.ndim != 1:
        raise ValueError("x and background must be vectors of equal length")
    return x, background


def shapley_exact(model: Model, x, background) -> AttributionVector:
    """Exact Shapley values by enumerating all 2^M coalitions."""
    x, background = _prepare(x, background)
    m = len(x)
    if m > MAX_EXACT_FEATURES:
        raise TooManyFeatures(f"{m} features exceed the exact limit of {MAX_EXACT_FEATURES}")
    n = 1 << m
    masks = np.arange(n)
    bits = (masks[:, None] >> np.arange(m)) & 1
    inputs = np.where(bits == 1, x, background)
    v = np.asarray(model(inputs), dtype=float).reshape(n)
    sizes = bits.sum(axis=1)
    fact = [math.factorial(k) for k in range(m + 1)]
    weight = np.array([fact[s] * fact[m - s - 1] / fact[m] if s < m else 0.0 for s in range(m + 1)])
    phi = np.empty(m)
    for i in range(m):
        without = masks[bits[:, i] == 0]
        phi[i] = float(np.sum(weight[sizes[without]] * (v[without | (1 << i)] - v[without])))
    return AttributionVector(phi, float(v[0]), float(v[n - 1]))


def shapley_sampled(model: Model, x, background, n_permutations: int, seed: int = 0) -> AttributionVector:
    """Mean marginal contribution over random feature orderings.

    When ``n_permutations`` reaches M! every ordering is used exactly once,
    which makes the estimate exact. The remaining gap to fx - base is spread
    over the features in proportion to |phi|.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    x, background = _prepare(x, background)
    m = len(x)
    if m == 0:
        v = float(np.asarray(model(background[None, :]))[0])
        return AttributionVector(np.zeros(0), v, v)
    if m <= 10 and n_permutations >= math.factorial(m):
        perms = np.array(list(itertools.permutations(range(m))), dtype=int)
    else:
        rng = np.random.default_rng(seed)
        perms = np.array([rng.permutation(m) for _ in range(n_permutations)], dtype=int)
    p = len(perms)
    # chain[k, j] = input with the first j features of permutation k switched to x
    rank = np.empty_like(perms)
    rank[np.arange(p)[:, None], perms] = np.arange(m)
    steps = np.arange(m + 1)
    included = rank[:, None, :] < steps[None, :, None]  # (p, m+1, m)
    chain = np.where(included, x, background).reshape(-1, m)
    values = np.asarray(model(chain), dtype=float).reshape(p, m + 1)
    deltas = np.diff(values, axis=1)  # contribution of perms[k, j]
    phi = np.zeros(m)
    np.add.at(phi, perms.ravel(), deltas.ravel())
    phi /= p
    base, fx = float(values[0, 0]), float(values[0, -1])
    residual = (fx - base) - phi.sum()
    weights = np.abs(phi)
    total = weights.sum()
    phi = phi + (residual * weights / total if total > 0 else residual / m)
    return AttributionVector(phi, base, fx)


def logit_model(clf: BinaryClassifier) -> Model:
    return clf.raw


def fusion_model(ensemble: OvaEnsemble, target: int) -> Model:
    """Winning-class probability as a function of the per-class sigmoid scores."""
    def f(raw: np.ndarray) -> np.ndarray:
        return softmax(raw)[:, target]
    return f


def fusion_shapley(ensemble: OvaEnsemble, x, background_X) -> tuple[int, AttributionVector]:
    """Attribute the meta decision to the base classifiers (exact; k <= 12)."""
    raw = ensemble.raw_matrix(np.atleast_2d(x))[0]
    reference = ensemble.raw_matrix(background_X).mean(axis=0)
    target = int(np.argmax(softmax(raw)))
    return target, shapley_exact(fusion_model(ensemble, target), raw, reference)


def instance_impact(phi) -> float:
    """Overall impact of one instance: the sum of absolute attributions."""
    return float(np.sum(np.abs(phi)))


def class_importance(attributions: Mapping[str, Sequence], features: Sequence[str]) -> dict[str, list[tuple[str, float]]]:
    """Mean |phi| per feature for each class, sorted descending (stable on ties)."""
    out = {}
    for cls, rows in attributions.items():
        phis = np.array([r.phi if isinstance(r, AttributionVector) else r for r in rows], dtype=float)
        if phis.size == 0:
            raise ValueError(f"class {cls} has no attributions")
        means = np.abs(phis).mean(axis=0)
        order = sorted(range(len(features)), key=lambda i: (-means[i], i))
        out[cls] = [(features[i], float(means[i])) for i in order]
    return out


def explain_class(ensemble: OvaEnsemble, X_class: np.ndarray, cls: str, background: np.ndarray, *,
                  n_permutations: int = 200, seed: int = 0, max_instances: int = 50) -> list[AttributionVector]:
    """Attributions of the ``cls`` classifier's logit for up to ``max_instances`` rows."""
    clf = ensemble.classifiers[ensemble.classes.index(cls)]
    model = logit_model(clf)
    rows = np.asarray(X_class, dtype=float)[:max_instances]
    out = []
    for k, x in enumerate(rows):
        if len(x) <= MAX_EXACT_FEATURES:
            out.append(shapley_exact(model, x, background))
        else:
            out.append(shapley_sampled(model, x, background, n_permutations, seed + k))
    return out


def attributions_csv(rows: Sequence[tuple[int, str, Sequence[str], AttributionVector]]) -> str:
    """Long format: one line per (instance, class, feature)."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["instance_id", "class", "feature", "phi", "instance_impact", "base_value", "fx", "output"])
    for instance, cls, features, att in rows:
        impact = att.instance_impact
        for name, value in zip(features, att.phi):
            w.writerow([instance, cls, name, repr(float(value)), repr(impact), repr(att.base_value),
                        repr(att.fx), "logit"])
    return out.getvalue()


def importance_csv(importance: Mapping[str, list[tuple[str, float]]]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["class", "rank", "feature", "mean_abs_phi"])
    for cls, ranked in importance.items():
        for rank, (name, value) in enumerate(ranked, 1):
            w.writerow([cls, rank, name, repr(value)])
    return out.getvalue()


__all__ = [
    "AttributionVector", "TooManyFeatures", "attributions_csv", "background_reference", "class_importance",
    "explain_class", "fusion_shapley", "importance_csv", "instance_impact", "logit_model", "shapley_exact",
    "shapley_sampled",
]

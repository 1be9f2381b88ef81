"""Execute and evaluate stages shared by the CLI and the test-suite."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attacks as at
from .config import Scenario
from .events import (
    ALL_MASKS, CLASSES, IT, OT, ET, Event, apply_mask, build_vocabulary, events_from_capture, mask_name,
    to_jsonl,
)
from .explain import (
    attributions_csv, background_reference, class_importance, explain_class, importance_csv,
)
from .ids import Hyper, SequenceAlarm, SequenceDetector, WindowConfig, detect_sequence, window_scan
from .netsim.capture import Capture
from .netsim.sim import Simulation, default_commands
from .report import ComparisonReport, compare_masks, write_reports


@dataclass
class ExecuteResult:
    sim: Simulation
    engine: at.AttackEngine
    capture: Capture
    events: list[Event]

    def label_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in CLASSES}
        for ev in self.events:
            counts[ev.label] += 1
        return counts


def execute(scenario: Scenario) -> ExecuteResult:
    commands = default_commands(scenario.model, scenario.duration, scenario.seed) if scenario.commands else ()
    sim, engine = at.prepare(scenario.topology, scenario.model, scenario.duration, scenario.seed,
                             scenario.script, cyclic_period=scenario.cyclic_period,
                             link_failures=scenario.link_failures, commands=commands)
    capture = sim.run()
    return ExecuteResult(sim, engine, capture, events_from_capture(capture))


@dataclass
class EvaluationSettings:
    seed: int = 0
    split: float = 0.7
    masks: Sequence[frozenset[str]] = ALL_MASKS
    bootstrap_resamples: int = 1000
    hyper: Hyper = Hyper()
    window: WindowConfig = WindowConfig()
    detector: SequenceDetector = SequenceDetector()
    explain: Sequence[str] = ()
    explain_permutations: int = 200
    explain_instances: int = 50


@dataclass
class EvaluationResult:
    comparison: ComparisonReport
    alarms: list[SequenceAlarm]
    sequence_mask: str
    importance: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)


def scenario_hash(events: Sequence[Event]) -> str:
    return hashlib.sha256(to_jsonl(events).encode()).hexdigest()


def _sequence_mask(masks: Sequence[frozenset[str]]) -> frozenset[str]:
    full = frozenset({IT, OT, ET})
    return full if full in masks else max(masks, key=len)


def evaluate(events: Sequence[Event], settings: EvaluationSettings,
             out_dir: str | Path | None = None) -> EvaluationResult:
    """Mask comparison, windowed sequence detection and optional attributions."""
    counts = {c: 0 for c in CLASSES}
    for ev in events:
        counts[ev.label] += 1
    meta = {"scenario_hash": scenario_hash(events), "class_counts": counts,
            "hyper": asdict(settings.hyper),
            "attribution_output": "logit of each binary classifier"}
    comparison = compare_masks(events, settings.masks, seed=settings.seed, split=settings.split,
                               hyper=settings.hyper, n_resamples=settings.bootstrap_resamples, metadata=meta)

    seq_mask = _sequence_mask(list(settings.masks))
    name = mask_name(seq_mask)
    model = comparison.results[name].model
    full = apply_mask(events, seq_mask, build_vocabulary(events))
    decisions = window_scan(full.timestamps, full.X, model, settings.window)
    alarms = detect_sequence(decisions, settings.detector)
    comparison.metadata["sequence"] = {
        "mask": name,
        "windows": len(decisions),
        "anomalous_windows": sum(d.anomalous for d in decisions),
        "alarms": [{"ordered": a.ordered, "phases": [p.value for p in a.phases],
                    "ordered_phases": [p.value for p in a.ordered_phases], "start": a.start, "end": a.end}
                   for a in alarms],
    }

    result = EvaluationResult(comparison, alarms, name)
    if settings.explain:
        test = comparison.results[name].test
        background = background_reference(test.X, 100, settings.seed)
        rows = []
        attributions = {}
        for cls in settings.explain:
            sel = np.flatnonzero(test.y == cls)
            atts = explain_class(model, test.X[sel], cls, background, n_permutations=settings.explain_permutations,
                                 seed=settings.seed, max_instances=settings.explain_instances)
            if not atts:
                continue
            attributions[cls] = atts
            rows.extend((int(test.ids[i]), cls, model.columns, a) for i, a in zip(sel, atts))
        result.importance = class_importance(attributions, model.columns) if attributions else {}
        if out_dir is not None:
            shap_dir = Path(out_dir) / "shap"
            shap_dir.mkdir(parents=True, exist_ok=True)
            for cls in attributions:
                (shap_dir / f"importance_{cls}.csv").write_text(
                    importance_csv({cls: result.importance[cls]}), encoding="utf-8")
                (shap_dir / f"attributions_{cls}.csv").write_text(
                    attributions_csv([r for r in rows if r[1] == cls]), encoding="utf-8")
                result.files += [shap_dir / f"importance_{cls}.csv", shap_dir / f"attributions_{cls}.csv"]
    if out_dir is not None:
        result.files = write_reports(comparison, Path(out_dir) / "reports") + result.files
    return result

"""gridwatch command line: deploy -> execute -> evaluate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from . import config as cfgmod
from .attacks import AttackError
from .events import CLASSES, EmptyClass, SchemaError, parse_mask, read_jsonl, to_jsonl
from .ids import Hyper, SequenceDetector, WindowConfig
from .netsim.capture import export_pcap
from .pipeline import EvaluationSettings, evaluate, execute

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SIMULATION = 3
EXIT_DEGENERATE = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_INPUT, message)


def _write(path: Path, data: str | bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write {path}: {exc.strerror}") from None


def cmd_deploy(args) -> int:
    seed = args.seed if args.seed is not None else cfgmod.env_seed()
    cfg = cfgmod.default_config(stations=args.stations, duration=args.duration,
                                seed=0 if seed is None else seed, normal_ops=args.normal_ops)
    try:
        cfgmod.validate(cfg)
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    _write(Path(args.out), cfgmod.dumps(cfg))
    print(f"wrote {args.out}: {args.stations} stations, {args.duration:g} s, "
          f"attack {cfg['attack']['preset']}")
    return EXIT_OK


def cmd_execute(args) -> int:
    try:
        cfg = cfgmod.apply_seed_override(cfgmod.load(args.config), cfgmod.env_seed())
        scenario = cfgmod.build(cfg)
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    try:
        result = execute(scenario)
    except (AttackError, ValueError, RuntimeError) as exc:
        raise CliError(EXIT_SIMULATION, f"simulation failed: {exc}") from None
    out = Path(args.out_dir)
    _write(out / "events.jsonl", to_jsonl(result.events))
    try:
        out.mkdir(parents=True, exist_ok=True)
        export_pcap(result.capture, out / "capture.pcap")
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write {out / 'capture.pcap'}: {exc.strerror}") from None
    _write(out / "config.json", cfgmod.dumps(cfg))
    print(f"frames: {len(result.capture)}")
    for name, count in result.label_counts().items():
        print(f"  {name}: {count}")
    return EXIT_OK


def _settings_from(args, events_path: Path) -> EvaluationSettings:
    cfg = None
    sidecar = events_path.parent / "config.json"
    if sidecar.exists():
        try:
            cfg = cfgmod.load(sidecar)
        except cfgmod.ConfigError as exc:
            raise CliError(EXIT_INPUT, f"config.json next to events: {exc}") from None
    evaluation = (cfg or {}).get("evaluation", {})
    ids = (cfg or {}).get("ids", {})
    env = cfgmod.env_seed()
    seed = args.seed if args.seed is not None else env if env is not None else evaluation.get("seed", 0)
    if args.masks:
        try:
            masks = [parse_mask(m) for m in args.masks.split(",")]
        except ValueError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from None
    else:
        masks = [parse_mask(m) for m in evaluation.get("masks", ["IT", "OT", "ET", "IT+OT", "IT+ET", "OT+ET",
                                                                   "IT+OT+ET"])]
    masks = list(dict.fromkeys(masks))
    for cls in args.explain:
        if cls not in CLASSES:
            raise CliError(EXIT_INPUT, f"unknown class {cls!r} for --explain (choose from {', '.join(CLASSES)})")
    return EvaluationSettings(
        seed=seed, split=evaluation.get("split", 0.7), masks=masks,
        bootstrap_resamples=evaluation.get("bootstrap_resamples", 1000),
        hyper=Hyper(**ids.get("hyper", {})), window=WindowConfig(**ids.get("window", {})),
        detector=SequenceDetector(min_phases=ids.get("min_phases", 2)), explain=tuple(args.explain),
        explain_permutations=evaluation.get("explain_permutations", 200),
        explain_instances=evaluation.get("explain_instances", 50),
    )


def cmd_evaluate(args) -> int:
    path = Path(args.events)
    try:
        events = read_jsonl(path)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc.strerror}") from None
    except (SchemaError, TypeError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None
    if not events:
        raise CliError(EXIT_DEGENERATE, "no events to evaluate: class Normal has no instances")
    try:
        for ev in events:
            ev.label  # noqa: B018 - validates phase/ttp
    except (AttackError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None
    settings = _settings_from(args, path)
    try:
        result = evaluate(events, settings, args.out_dir)
    except EmptyClass as exc:
        raise CliError(EXIT_DEGENERATE, f"degenerate dataset: class {exc.name} has no instances") from None
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write reports: {exc.strerror}") from None
    comparison = result.comparison
    for name, r in comparison.results.items():
        f1 = " ".join(f"{c}={m.f1:.3f}" for c, m in r.report.per_class.items())
        print(f"{name}: accuracy={r.report.accuracy:.3f} {f1}")
    for alarm in result.alarms:
        kind = "ordered" if alarm.ordered else "atypical"
        print(f"multi-stage alarm ({kind}): {' -> '.join(p.value for p in alarm.phases)}")
    print(f"reports written to {Path(args.out_dir) / 'reports'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridwatch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gridwatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("deploy", help="write a scenario config")
    p.add_argument("--out", default="scenario.json")
    p.add_argument("--stations", type=int, default=26)
    p.add_argument("--duration", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--normal-ops", action="store_true", help="no attack, two seeded link failures")
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("execute", help="simulate and write capture.pcap and events.jsonl")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="run")
    p.set_defaults(func=cmd_execute)

    p = sub.add_parser("evaluate", help="compare category masks and write reports")
    p.add_argument("--events", required=True)
    p.add_argument("--out-dir", default="evaluation")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--masks", default=None, help="comma-separated, e.g. IT,IT+OT+ET")
    p.add_argument("--explain", nargs="+", default=[], metavar="CLASS")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except cfgmod.ConfigError as exc:
        code, message = EXIT_INPUT, str(exc)
    except CliError as exc:
        code, message = exc.code, str(exc)
    print(f"error: {code}: {' '.join(message.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

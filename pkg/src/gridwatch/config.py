"""Scenario configuration: schema, defaults and conversion to runtime objects."""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from . import attacks as at
from .events import ALL_MASKS, mask_name, parse_mask
from .ids import Hyper, SequenceDetector, WindowConfig
from .netsim.sim import LinkFailure, Topology, build_topology
from .process import GridModel, build_feeder

SCHEMA_VERSION = 1
SEED_ENV = "GRIDWATCH_SEED"


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer"}
_FRACTION_PAIR = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                  "minItems": 2, "maxItems": 2}


def _obj(props: dict, required: tuple[str, ...] = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_TECHNIQUE = {"oneOf": [
    _obj({"type": {"const": "arp_spoof"},
          "victims": {"type": "array", "items": {"type": "array", "items": {"type": "string"},
                                                 "minItems": 2, "maxItems": 2}},
          "interval": _POS}, ("type", "victims")),
    _obj({"type": {"const": "mitm_mutate"},
          "rules": {"type": "array", "items": _obj({
              "action": {"enum": ["set_cot", "static_value"]},
              "cot": _INT, "value": _NUM,
              "direction": {"enum": ["to_mtu", "to_rtu"]},
              "coa": {"type": ["integer", "null"]}, "ioa": {"type": ["integer", "null"]},
          }, ("action",))}}, ("type", "rules")),
    _obj({"type": {"const": "rst_injection"},
          "targets": {"type": ["array", "null"], "items": {"type": "string"}}}, ("type",)),
    _obj({"type": {"const": "syn_flood"}, "target": {"type": "string"}, "port": _INT, "rate": _POS}, ("type",)),
    _obj({"type": {"const": "replay"}, "record_window": _FRACTION_PAIR}, ("type", "record_window")),
    _obj({"type": {"const": "enumerate_network"}, "subnet": {"type": "string"},
          "ports": {"type": "array", "items": _INT}, "rate": _POS}, ("type",)),
    _obj({"type": {"const": "ssh_bruteforce"}, "target": {"type": "string"},
          "attempts": {"type": "integer", "minimum": 0}, "rate": _POS}, ("type", "target")),
]}

SCHEMA = _obj({
    "schema": {"const": SCHEMA_VERSION},
    "grid": _obj({
        "n_stations": {"type": "integer", "minimum": 1, "maximum": 180},
        "seed": _INT,
        "noise_fraction": {"type": "number", "minimum": 0},
        "der_share": {"type": "number", "minimum": 0, "maximum": 1},
        "start_hour": {"type": "number", "minimum": 0, "maximum": 24},
    }, ("n_stations", "seed")),
    "network": _obj({
        "latency_ms": _POS,
        "jitter_ms": {"type": "number", "minimum": 0},
        "firewall": {"type": "boolean"},
    }),
    "simulation": _obj({
        "duration": _POS,
        "cyclic_period": _POS,
        "seed": _INT,
        "commands": {"type": "boolean"},
        "link_failures": {"type": "array", "items": _obj(
            {"link": {"type": "string"}, "t0": {"type": "number", "minimum": 0},
             "t1": {"type": "number", "minimum": 0}}, ("link", "t0", "t1"))},
    }, ("duration", "seed")),
    "attack": _obj({
        "preset": {"type": "string"},
        "attacker": {"type": "string"},
        "stages": {"type": "array", "items": _obj({
            "phase": {"enum": [p.value for p in at.Phase]},
            "ttp": {"type": "string"},
            "window": _FRACTION_PAIR,
            "technique": _TECHNIQUE,
        }, ("phase", "ttp", "window", "technique"))},
    }),
    "ids": _obj({
        "window": _obj({"length": _POS, "stride": _POS, "min_events": {"type": "integer", "minimum": 1}}),
        "hyper": _obj({"learning_rate": _POS, "iterations": {"type": "integer", "minimum": 1},
                       "l2": {"type": "number", "minimum": 0}}),
        "min_phases": {"type": "integer", "minimum": 2},
    }),
    "evaluation": _obj({
        "split": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "masks": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "bootstrap_resamples": {"type": "integer", "minimum": 100},
        "seed": _INT,
        "explain_permutations": {"type": "integer", "minimum": 1},
        "explain_instances": {"type": "integer", "minimum": 1},
    }),
}, ("schema", "grid", "simulation", "attack"))


def default_config(*, stations: int = 26, duration: float = 1000.0, seed: int = 0,
                   normal_ops: bool = False) -> dict:
    cfg: dict[str, Any] = {
        "schema": SCHEMA_VERSION,
        "grid": {"n_stations": stations, "seed": seed, "noise_fraction": 0.02, "der_share": 0.3,
                 "start_hour": 12.0},
        "network": {"latency_ms": 2.0, "jitter_ms": 0.5, "firewall": True},
        "simulation": {"duration": duration, "cyclic_period": 1.0, "seed": seed, "commands": True,
                       "link_failures": []},
        "attack": {"preset": "paper-scenario"},
        "ids": {"window": {"length": 5.0, "stride": 1.0, "min_events": 3},
                "hyper": {"learning_rate": 0.1, "iterations": 500, "l2": 1e-3}, "min_phases": 2},
        "evaluation": {"split": 0.7, "masks": [mask_name(m) for m in ALL_MASKS], "bootstrap_resamples": 1000,
                       "seed": seed, "explain_permutations": 200, "explain_instances": 50},
    }
    if normal_ops:
        cfg["attack"] = {"preset": "none"}
        rng = random.Random(seed * 104729 + 11)
        failures = []
        for link in rng.sample(range(1, stations + 1), min(2, stations)):
            t0 = round(rng.uniform(0.1, 0.8) * duration, 3)
            t1 = round(min(duration, t0 + rng.uniform(5.0, 30.0)), 3)
            failures.append({"link": f"rtu{link}", "t0": t0, "t1": t1})
        cfg["simulation"]["link_failures"] = failures
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def validate(cfg: Any) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    attack = cfg["attack"]
    if ("preset" in attack) == ("stages" in attack):
        raise ConfigError("attack: give exactly one of 'preset' or 'stages'")
    if "preset" in attack and attack["preset"] not in (*at.PRESETS, "none"):
        raise ConfigError(f"attack/preset: unknown preset {attack['preset']!r}")
    for name in cfg.get("evaluation", {}).get("masks", []):
        try:
            parse_mask(name)
        except ValueError as exc:
            raise ConfigError(f"evaluation/masks: {exc}") from None
    sim = cfg["simulation"]
    for f in sim.get("link_failures", []):
        if not f["t0"] <= f["t1"] <= sim["duration"]:
            raise ConfigError(f"simulation/link_failures: need t0 <= t1 <= duration for {f['link']}")
    net = cfg.get("network", {})
    if net.get("jitter_ms", 0.5) >= net.get("latency_ms", 2.0):
        raise ConfigError("network: jitter_ms must be smaller than latency_ms")
    return cfg


def load(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return validate(cfg)


def env_seed() -> int | None:
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def apply_seed_override(cfg: dict, seed: int | None) -> dict:
    """Replace every seed in the config (flag > env > config precedence is the caller's)."""
    if seed is None:
        return cfg
    cfg = json.loads(json.dumps(cfg))
    cfg["grid"]["seed"] = seed
    cfg["simulation"]["seed"] = seed
    cfg.setdefault("evaluation", {})["seed"] = seed
    return cfg


# -- runtime objects -----------------------------------------------------------


def _technique(spec: dict) -> at.Technique:
    kind = spec["type"]
    args = {k: v for k, v in spec.items() if k != "type"}
    if kind == "arp_spoof":
        return at.ArpSpoof(tuple(tuple(p) for p in args["victims"]), args.get("interval", 2.0))
    if kind == "mitm_mutate":
        rules = []
        for r in args["rules"]:
            if r["action"] == "set_cot":
                if "cot" not in r:
                    raise ConfigError("set_cot rule needs 'cot'")
                action = at.SetCot(r["cot"])
            else:
                if "value" not in r:
                    raise ConfigError("static_value rule needs 'value'")
                action = at.StaticValue(float(r["value"]))
            rules.append(at.MutationRule(action, r.get("direction", "to_mtu"), r.get("coa"), r.get("ioa")))
        return at.MitmMutate(tuple(rules))
    if kind == "rst_injection":
        targets = args.get("targets")
        return at.RstInjection(None if targets is None else tuple(targets))
    if kind == "syn_flood":
        return at.SynFlood(**args)
    if kind == "replay":
        return at.Replay(tuple(args["record_window"]))
    if kind == "enumerate_network":
        if "ports" in args:
            args["ports"] = tuple(args["ports"])
        return at.EnumerateNetwork(**args)
    return at.SshBruteforce(**args)


@dataclass
class Scenario:
    config: dict
    model: GridModel
    topology: Topology
    script: at.AttackScript
    duration: float
    seed: int
    cyclic_period: float
    link_failures: list[LinkFailure]
    commands: bool
    window: WindowConfig
    hyper: Hyper
    detector: SequenceDetector


def build(cfg: dict) -> Scenario:
    grid, sim, net = cfg["grid"], cfg["simulation"], cfg.get("network", {})
    model = build_feeder(grid["n_stations"], grid["seed"], noise_fraction=grid.get("noise_fraction", 0.02),
                         der_share=grid.get("der_share", 0.3), start_hour=grid.get("start_hour", 12.0))
    topology = build_topology(grid["n_stations"], firewall=net.get("firewall", True),
                              latency_us=int(round(net.get("latency_ms", 2.0) * 1000)),
                              jitter_us=int(round(net.get("jitter_ms", 0.5) * 1000)))
    attack = cfg["attack"]
    try:
        if attack.get("preset") == "none":
            script = at.AttackScript()
        elif "preset" in attack:
            script = at.PRESETS[attack["preset"]](topology)
        else:
            stages = tuple(at.AttackStage(at.Phase(s["phase"]), s["ttp"], tuple(s["window"]),
                                          _technique(s["technique"])) for s in attack["stages"])
            script = at.AttackScript(stages, attack.get("attacker", "attacker"))
        at.validate_script(script, topology)
    except at.AttackError as exc:
        raise ConfigError(f"attack: {exc}") from None
    ids = cfg.get("ids", {})
    try:
        window = WindowConfig(**ids.get("window", {}))
    except ValueError as exc:
        raise ConfigError(f"ids/window: {exc}") from None
    failures = [LinkFailure(f["link"], f["t0"], f["t1"]) for f in sim.get("link_failures", [])]
    known = set(topology.links)
    for f in failures:
        if f.link not in known:
            raise ConfigError(f"simulation/link_failures: unknown link {f.link}")
    return Scenario(cfg, model, topology, script, float(sim["duration"]), sim["seed"],
                    sim.get("cyclic_period", 1.0), failures, sim.get("commands", True), window,
                    Hyper(**ids.get("hyper", {})), SequenceDetector(min_phases=ids.get("min_phases", 2)))

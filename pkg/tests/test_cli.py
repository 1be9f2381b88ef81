import json
import re

import pytest

from gridwatch import attacks as at
from gridwatch import cli
from gridwatch import config as cfgmod
from gridwatch.events import read_jsonl

ERROR_LINE = re.compile(r"^error: (\d): \S.*$")


def small(tmp_path, name="s.json", *extra):
    path = tmp_path / name
    assert cli.main(["deploy", "--out", str(path), "--stations", "6", "--duration", "120", "--seed", "3",
                     *extra]) == 0
    cfg = json.loads(path.read_text())
    cfg["evaluation"]["bootstrap_resamples"] = 100
    path.write_text(cfgmod.dumps(cfg))
    return path


def error_of(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and ERROR_LINE.match(err[0]), err
    return err[0]


class TestConfig:
    def test_defaults(self):
        cfg = cfgmod.validate(cfgmod.default_config())
        assert cfg["grid"]["n_stations"] == 26
        assert cfg["simulation"]["duration"] == 1000.0
        assert cfg["attack"] == {"preset": "paper-scenario"}
        assert cfg["schema"] == 1

    def test_normal_ops(self):
        cfg = cfgmod.default_config(normal_ops=True, seed=4)
        assert cfg["attack"] == {"preset": "none"}
        assert len(cfg["simulation"]["link_failures"]) == 2
        cfgmod.validate(cfg)

    def test_unknown_key_rejected(self):
        cfg = cfgmod.default_config()
        cfg["grid"]["colour"] = "blue"
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.validate(cfg)

    def test_unknown_preset(self):
        cfg = cfgmod.default_config()
        cfg["attack"] = {"preset": "nope"}
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.validate(cfg)

    def test_explicit_stages(self):
        cfg = cfgmod.default_config(stations=4, duration=50)
        cfg["attack"] = {"stages": [
            {"phase": "LateralMovement", "ttp": "T0830 AitM", "window": [0, 1],
             "technique": {"type": "arp_spoof", "victims": [["rtu1", "mtu"]]}},
            {"phase": "Impact", "ttp": "T0832 Manipulation of View", "window": [0.2, 0.6],
             "technique": {"type": "mitm_mutate", "rules": [{"action": "static_value", "value": 0.0, "coa": 1}]}},
            {"phase": "CredentialAccess", "ttp": "T0822/T1110", "window": [0.8, 1.0],
             "technique": {"type": "ssh_bruteforce", "target": "rtu3", "attempts": 5}},
        ]}
        scenario = cfgmod.build(cfgmod.validate(cfg))
        kinds = [type(s.technique) for s in scenario.script.stages]
        assert kinds == [at.ArpSpoof, at.MitmMutate, at.SshBruteforce]
        assert scenario.script.stages[1].technique.rules[0].action == at.StaticValue(0.0)

    def test_spoofed_bruteforce_target(self):
        cfg = cfgmod.default_config(stations=4, duration=50)
        cfg["attack"] = {"stages": [
            {"phase": "LateralMovement", "ttp": "T0830 AitM", "window": [0, 1],
             "technique": {"type": "arp_spoof", "victims": [["rtu1", "mtu"]]}},
            {"phase": "CredentialAccess", "ttp": "T0822/T1110", "window": [0.8, 1.0],
             "technique": {"type": "ssh_bruteforce", "target": "rtu1"}},
        ]}
        with pytest.raises(cfgmod.ConfigError, match="rtu1"):
            cfgmod.build(cfgmod.validate(cfg))

    def test_seed_precedence(self, monkeypatch):
        monkeypatch.setenv("GRIDWATCH_SEED", "11")
        cfg = cfgmod.apply_seed_override(cfgmod.default_config(seed=2), cfgmod.env_seed())
        assert cfg["simulation"]["seed"] == cfg["grid"]["seed"] == 11
        monkeypatch.setenv("GRIDWATCH_SEED", "x")
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.env_seed()


class TestDeploy:
    def test_same_flags_same_file(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert cli.main(["deploy", "--out", str(a), "--seed", "5"]) == 0
        assert cli.main(["deploy", "--out", str(b), "--seed", "5"]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert json.loads(a.read_text())["grid"]["n_stations"] == 26

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert cli.main(["deploy", "--out", str(blocker / "x.json")]) == 2
        error_of(capsys)


class TestLifecycle:
    def test_full_cycle(self, tmp_path, capsys):
        cfg = small(tmp_path)
        capsys.readouterr()
        assert cli.main(["execute", "--config", str(cfg), "--out-dir", str(tmp_path / "run")]) == 0
        out = capsys.readouterr().out
        assert out.startswith("frames: ") and "ValueManipulation:" in out
        for name in ("capture.pcap", "events.jsonl", "config.json"):
            assert (tmp_path / "run" / name).exists()
        events = tmp_path / "run" / "events.jsonl"
        assert cli.main(["evaluate", "--events", str(events), "--out-dir", str(tmp_path / "ev"),
                         "--explain", "ValueManipulation"]) == 0
        reports = sorted(p.name for p in (tmp_path / "ev" / "reports").glob("confusion_*.csv"))
        assert len(reports) == 7
        assert (tmp_path / "ev" / "shap" / "importance_ValueManipulation.csv").exists()

        # determinism: a second run reproduces every artifact byte for byte
        assert cli.main(["execute", "--config", str(cfg), "--out-dir", str(tmp_path / "run2")]) == 0
        assert cli.main(["evaluate", "--events", str(tmp_path / "run2" / "events.jsonl"),
                         "--out-dir", str(tmp_path / "ev2"), "--explain", "ValueManipulation"]) == 0
        assert events.read_bytes() == (tmp_path / "run2" / "events.jsonl").read_bytes()
        for rel in ("reports/report.json", "reports/comparison.csv", "shap/importance_ValueManipulation.csv"):
            assert (tmp_path / "ev" / rel).read_bytes() == (tmp_path / "ev2" / rel).read_bytes()

        assert cli.main(["evaluate", "--events", str(events), "--out-dir", str(tmp_path / "it"),
                         "--masks", "IT"]) == 0
        assert [p.name for p in (tmp_path / "it" / "reports").glob("confusion_*.csv")] == ["confusion_IT.csv"]

    def test_normal_ops(self, tmp_path, capsys):
        cfg = small(tmp_path, "n.json", "--normal-ops")
        assert cli.main(["execute", "--config", str(cfg), "--out-dir", str(tmp_path / "run")]) == 0
        events = read_jsonl(tmp_path / "run" / "events.jsonl")
        assert events and all(e.label == "Normal" for e in events)
        capsys.readouterr()
        code = cli.main(["evaluate", "--events", str(tmp_path / "run" / "events.jsonl"),
                         "--out-dir", str(tmp_path / "ev")])
        assert code == 4
        assert "ArpSpoofing" in error_of(capsys)


class TestErrors:
    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["execute", "--config", str(tmp_path / "none.json")]) == 2
        assert error_of(capsys).startswith("error: 2: ")

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"schema": 1, "extra": true}')
        assert cli.main(["execute", "--config", str(path)]) == 2
        error_of(capsys)

    def test_bad_arguments(self, capsys):
        assert cli.main(["evaluate"]) == 2
        error_of(capsys)
        assert cli.main(["bogus"]) == 2
        error_of(capsys)

    def test_bad_events(self, tmp_path, capsys):
        path = tmp_path / "events.jsonl"
        path.write_text('{"nope": 1}\n')
        assert cli.main(["evaluate", "--events", str(path)]) == 2
        error_of(capsys)

    def test_bad_mask_and_class(self, tmp_path, capsys):
        cfg = small(tmp_path)
        cli.main(["execute", "--config", str(cfg), "--out-dir", str(tmp_path / "run")])
        capsys.readouterr()
        events = str(tmp_path / "run" / "events.jsonl")
        assert cli.main(["evaluate", "--events", events, "--masks", "IT+XX"]) == 2
        error_of(capsys)
        assert cli.main(["evaluate", "--events", events, "--explain", "Foo"]) == 2
        error_of(capsys)

    def test_simulation_error(self, tmp_path, capsys, monkeypatch):
        cfg = small(tmp_path)

        def boom(scenario):
            raise at.NothingRecorded("replay window recorded nothing")
        monkeypatch.setattr(cli, "execute", boom)
        assert cli.main(["execute", "--config", str(cfg), "--out-dir", str(tmp_path / "run")]) == 3
        assert error_of(capsys).startswith("error: 3: ")

import json
import subprocess
import sys

import numpy as np
import pytest

from wflab.cli import ConfigError, main, parse_config
from wflab.estimation import mle_riemann, mle_score
from wflab.model import WFParams
from wflab.simulate import SamplePath, SimConfig, simulate_path


def run(tmp_path, doc, *extra, name="cfg.json"):
    cfg = tmp_path / name
    cfg.write_text(json.dumps(doc) if isinstance(doc, dict) else doc)
    return main(["--config", str(cfg), "--out", str(tmp_path), *extra])


class TestParseConfig:
    def test_experiment_defaults(self):
        cfg = parse_config('{"cmd":"experiment","s":4,"theta1":2,"theta2":2,"T":[1,2,10,50],'
                           '"replicates":10000,"seed":42}')
        assert cfg.cmd == "experiment" and cfg.seed == 42
        assert cfg.payload["dt"] == 1e-3 and cfg.payload["start"] == 0.25
        assert cfg.payload["estimator"] == "mle_riemann"

    @pytest.mark.parametrize("text, key", [
        ('{"theta1":-1}', "theta1"),
        ('{"cmd":"simulate","s":1,"theta1":0,"theta2":1,"T":1}', "theta1"),
        ('{"cmd":"simulate","s":1,"theta1":1,"theta2":1,"T":1,"bogus":3}', "bogus"),
        ('{"cmd":"simulate","s":1,"theta1":1,"theta2":1}', "T"),
        ('{"cmd":"fly"}', "cmd"),
        ('{"cmd":"experiment","s":4,"theta1":2,"theta2":2,"T":[1],"replicates":1}', "replicates"),
        ('{"cmd":"hitting","s":0,"theta1":1,"theta2":1,"x":0.25,"b":1.5}', "b"),
    ])
    def test_errors_name_the_key(self, text, key):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert key in str(info.value)

    @pytest.mark.parametrize("text", ["", "   ", "[1, 2]", "{not json"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


class TestCommands:
    def test_simulate_is_byte_identical(self, tmp_path):
        doc = {"cmd": "simulate", "s": 4, "theta1": 2, "theta2": 2, "T": 1, "seed": 42}
        assert run(tmp_path, dict(doc, output="a.csv")) == 0
        assert run(tmp_path, dict(doc, output="b.csv")) == 0
        a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
        assert a == b
        assert a.decode().splitlines()[0] == "t,x" and len(a.decode().splitlines()) == 1002

    def test_seed_flag_overrides(self, tmp_path):
        doc = {"cmd": "simulate", "s": 4, "theta1": 2, "theta2": 2, "T": 0.1, "seed": 1}
        run(tmp_path, dict(doc, output="a.csv"), "--seed", "2")
        run(tmp_path, dict(doc, seed=2, output="b.csv"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_estimate_two_point_demo(self, tmp_path):
        (tmp_path / "demo.csv").write_text(SamplePath(values=[0.5, 0.6], dt=1.0).to_csv())
        doc = {"cmd": "estimate", "input": str(tmp_path / "demo.csv"), "theta1": 1, "theta2": 1}
        assert run(tmp_path, doc) == 0
        res = json.loads((tmp_path / "estimate.json").read_text())
        assert res["method"] == "mle_riemann"
        assert res["estimate"] == pytest.approx(1.25, rel=1e-12)

    @pytest.mark.parametrize("method, fn", [("mle_riemann", mle_riemann), ("mle_score", mle_score)])
    def test_round_trip(self, tmp_path, method, fn):
        sim = {"cmd": "simulate", "s": 4, "theta1": 2, "theta2": 2, "T": 5, "seed": 9, "output": "p.csv"}
        assert run(tmp_path, sim) == 0
        est = {"cmd": "estimate", "input": str(tmp_path / "p.csv"), "theta1": 2, "theta2": 2, "method": method}
        assert run(tmp_path, est) == 0
        got = json.loads((tmp_path / "estimate.json").read_text())["estimate"]
        ref = fn(simulate_path(WFParams(4, 2, 2), SimConfig(T=5, seed=9)), 2, 2).estimate
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)

    def test_estimate_bayes(self, tmp_path):
        (tmp_path / "demo.csv").write_text(SamplePath(values=[0.5, 0.6], dt=1.0).to_csv())
        doc = {"cmd": "estimate", "input": str(tmp_path / "demo.csv"), "theta1": 1, "theta2": 1,
               "method": "bayes", "prior": {"type": "uniform", "lo": -100, "hi": 100}}
        assert run(tmp_path, doc) == 0
        res = json.loads((tmp_path / "estimate.json").read_text())
        assert res["method"] == "bayes" and res["estimate"] == pytest.approx(0.1 / 0.06, abs=1e-6)

    def test_estimate_missing_input(self, tmp_path):
        doc = {"cmd": "estimate", "input": str(tmp_path / "nope.csv"), "theta1": 1, "theta2": 1}
        assert run(tmp_path, doc) == 1

    def test_experiment_is_deterministic_across_threads(self, tmp_path):
        doc = {"cmd": "experiment", "s": 4, "theta1": 2, "theta2": 2, "T": [0.5, 1], "replicates": [20, 10],
               "seed": 5}
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(doc))
        assert main(["--config", str(cfg), "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
        assert main(["--config", str(cfg), "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert "report.json" in names and "errors_T0.5.csv" in names and "kde_T1.csv" in names
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_fisher(self, tmp_path):
        assert run(tmp_path, {"cmd": "fisher", "s": 0, "theta1": 1, "theta2": 2}) == 0
        doc = json.loads((tmp_path / "fisher.json").read_text())
        assert doc["matrix"][1][1] == "infinite"
        assert doc["lan_regime"] is True and doc["finite_information"] is False

    def test_check_conditions_pass(self, tmp_path):
        doc = {"cmd": "check-conditions", "grid": {"s": [-1, 1], "theta1": [1.5, 2], "theta2": [1.5, 2]},
               "h": "(1-x)/x"}
        assert run(tmp_path, doc) == 0
        assert json.loads((tmp_path / "conditions.json").read_text())["pass"] is True

    def test_check_conditions_failure_exit_2(self, tmp_path):
        doc = {"cmd": "check-conditions", "grid": {"s": [0], "theta1": [1, 2], "theta2": [2]}, "h": "(1-x)/x"}
        assert run(tmp_path, doc) == 2
        rep = json.loads((tmp_path / "conditions.json").read_text())
        assert rep["pass"] is False
        assert rep["unbounded_conditions"]["pass"] is False

    def test_empty_grid(self, tmp_path):
        doc = {"cmd": "check-conditions", "grid": {"s": [], "theta1": [1], "theta2": [1]}}
        assert run(tmp_path, doc) == 1

    def test_ergodic_moment_infinite(self, tmp_path):
        doc = {"cmd": "ergodic-check", "s": 0, "theta1": 0.5, "theta2": 2, "h": "(1-x)/x", "T": 1}
        assert run(tmp_path, doc) == 2

    def test_ergodic_short(self, tmp_path):
        doc = {"cmd": "ergodic-check", "s": 4, "theta1": 2, "theta2": 2, "h": "one", "T": 1, "n_paths": 2}
        assert run(tmp_path, doc) == 0
        assert json.loads((tmp_path / "ergodic.json").read_text())["abs_deviation"] == 0.0

    def test_hitting_short(self, tmp_path):
        doc = {"cmd": "hitting", "s": 0, "theta1": 1, "theta2": 1, "x": 0.25, "b": 0.5, "dt": 1e-3,
               "replicates": 50}
        assert run(tmp_path, doc) == 0
        res = json.loads((tmp_path / "hitting.json").read_text())
        assert res["quadrature_mean"] == pytest.approx(2 * np.log(1.5), rel=1e-8)

    def test_stationary_sample(self, tmp_path):
        doc = {"cmd": "stationary-sample", "s": 4, "theta1": 2, "theta2": 2, "n": 100, "seed": 3}
        assert run(tmp_path, doc) == 0
        lines = (tmp_path / "samples.csv").read_text().splitlines()
        assert lines[0] == "x" and len(lines) == 101
        assert all(0 < float(v) < 1 for v in lines[1:])

    def test_config_error_exit_1(self, tmp_path, capsys):
        assert run(tmp_path, '{"theta1":-1}') == 1
        assert "theta1" in capsys.readouterr().err

    def test_unreadable_config(self, tmp_path):
        assert main(["--config", str(tmp_path / "missing.json")]) == 1

    def test_module_entry_point(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"cmd": "fisher", "s": 4, "theta1": 2, "theta2": 2}))
        proc = subprocess.run([sys.executable, "-m", "wflab", "--config", str(cfg), "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "fisher.json").exists()

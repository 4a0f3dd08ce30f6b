"""Command-line entry point: ``wflab --config cfg.json --out results/``.

The config is a JSON object whose ``cmd`` key selects the subcommand.  Exit
codes: 0 success, 1 configuration or parameter error, 2 numerical failure
(divergent integral, failed condition check).
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import diffusion, estimation, model, montecarlo, simulate
from .errors import NumericalError, ParameterError, WFLabError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

_POS = {"type": "number", "exclusiveMinimum": 0}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_OPEN_UNIT = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_START = {"oneOf": [_UNIT, {"const": "stationary"}]}
_COUNT = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}
_H_NAMES = ["one", "x", "x(1-x)", "(1-x)/x", "x/(1-x)"]
_PRIOR = {
    "type": "object",
    "properties": {"type": {"const": "uniform"}, "lo": {"type": "number"}, "hi": {"type": "number"}},
    "required": ["type", "lo", "hi"],
    "additionalProperties": False,
}
_LOSS = {"enum": ["quadratic", "absolute"]}

_COMMON = {"cmd": {"type": "string"}, "seed": _SEED, "threads": {"type": "integer", "minimum": 0}}
_PARAMS = {"s": {"type": "number"}, "theta1": _POS, "theta2": _POS}


def _schema(props, required=(), defaults=None):
    return {
        "type": "object",
        "properties": {**_COMMON, **props},
        "required": ["cmd", *required],
        "additionalProperties": False,
    }, defaults or {}


SCHEMAS = {
    "simulate": _schema(
        {**_PARAMS, "T": _POS, "dt": _POS, "start": _START, "output": {"type": "string"}},
        ["s", "theta1", "theta2", "T"],
        {"dt": 1e-3, "start": 0.25, "output": "path.csv"},
    ),
    "estimate": _schema(
        {"input": {"type": "string"}, "theta1": _POS, "theta2": _POS,
         "method": {"enum": list(montecarlo.ESTIMATORS)}, "rule": {"enum": ["left", "right"]},
         "start_mode": {"enum": ["fixed", "stationary"]}, "prior": _PRIOR, "loss": _LOSS,
         "output": {"type": "string"}},
        ["input", "theta1", "theta2"],
        {"method": "mle_riemann", "rule": "right", "start_mode": "fixed", "loss": "quadratic",
         "output": "estimate.json"},
    ),
    "experiment": _schema(
        {**_PARAMS, "T": {"type": "array", "items": _POS, "minItems": 1},
         "replicates": {"oneOf": [{"type": "integer", "minimum": 2},
                                  {"type": "array", "items": {"type": "integer", "minimum": 2}}]},
         "dt": _POS, "start": _START, "estimator": {"enum": list(montecarlo.ESTIMATORS)},
         "p_list": {"type": "array", "items": _POS}, "rule": {"enum": ["left", "right"]},
         "prior": _PRIOR, "loss": _LOSS},
        ["s", "theta1", "theta2", "T"],
        {"dt": 1e-3, "start": 0.25, "estimator": "mle_riemann", "p_list": [1, 2], "rule": "right"},
    ),
    "ergodic-check": _schema(
        {**_PARAMS, "h": {"enum": _H_NAMES}, "T": _POS, "dt": _POS, "n_paths": _COUNT, "start": _START,
         "output": {"type": "string"}},
        ["s", "theta1", "theta2", "h"],
        {"T": 500.0, "dt": 1e-3, "n_paths": 10, "start": 0.25, "output": "ergodic.json"},
    ),
    "hitting": _schema(
        {**_PARAMS, "x": _OPEN_UNIT, "b": _OPEN_UNIT, "dt": _POS, "replicates": _COUNT, "t_max": _POS,
         "output": {"type": "string"}},
        ["s", "theta1", "theta2", "x", "b"],
        {"dt": 1e-4, "replicates": 10_000, "t_max": 200.0, "output": "hitting.json"},
    ),
    "fisher": _schema(
        {**_PARAMS, "output": {"type": "string"}},
        ["s", "theta1", "theta2"],
        {"output": "fisher.json"},
    ),
    "check-conditions": _schema(
        {"grid": {
            "type": "object",
            "properties": {k: {"type": "array", "items": v, "minItems": 0} for k, v in _PARAMS.items()},
            "required": ["s", "theta1", "theta2"],
            "additionalProperties": False,
        },
         "a": _OPEN_UNIT, "b": _OPEN_UNIT, "h": {"enum": _H_NAMES}, "x": _OPEN_UNIT,
         "nu": {"oneOf": [_OPEN_UNIT, {"const": "stationary"}]}, "output": {"type": "string"}},
        ["grid"],
        {"a": 0.25, "b": 0.75, "x": 0.25, "nu": "stationary", "output": "conditions.json"},
    ),
    "stationary-sample": _schema(
        {**_PARAMS, "n": _COUNT, "output": {"type": "string"}},
        ["s", "theta1", "theta2", "n"],
        {"output": "samples.csv"},
    ),
}

H_FUNCTIONS = {
    "one": lambda x: np.ones_like(np.asarray(x, dtype=float)),
    "x": lambda x: np.asarray(x, dtype=float),
    "x(1-x)": lambda x: np.asarray(x, dtype=float) * (1 - np.asarray(x, dtype=float)),
    "(1-x)/x": lambda x: (1 - np.asarray(x, dtype=float)) / np.asarray(x, dtype=float),
    "x/(1-x)": lambda x: np.asarray(x, dtype=float) / (1 - np.asarray(x, dtype=float)),
}


class ConfigError(WFLabError, ValueError):
    code = "config-error"


@dataclass
class CliConfig:
    cmd: str
    payload: dict
    seed: int = 0
    threads: int = 1
    extra: dict = field(default_factory=dict)


def _describe(err: jsonschema.ValidationError):
    if err.validator == "additionalProperties":
        return f"config error: {err.message}"
    if err.validator == "required":
        return f"config error: {err.message}"
    where = ".".join(str(p) for p in err.absolute_path) or "<root>"
    return f"config error at '{where}': {err.message}"


def parse_config(text: str) -> CliConfig:
    """Parse and validate a JSON config; defaults are filled in."""
    if not text or not text.strip():
        raise ConfigError(message="config error: empty document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(message=f"config error: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(message="config error: top level must be a JSON object")
    if "cmd" not in doc:
        # Report domain errors in recognisable keys before the missing command.
        loose = {"type": "object", "properties": {**_COMMON, **_PARAMS}}
        err = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(loose).iter_errors(doc))
        if err is not None:
            raise ConfigError(message=_describe(err))
        raise ConfigError(message="config error: missing required key 'cmd'")
    cmd = doc["cmd"]
    if cmd not in SCHEMAS:
        raise ConfigError(message=f"config error at 'cmd': unknown command {cmd!r}; "
                                  f"choose from {', '.join(SCHEMAS)}")
    schema, defaults = SCHEMAS[cmd]
    validator = jsonschema.Draft202012Validator(schema)
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise ConfigError(message=_describe(err))
    payload = {**defaults, **{k: v for k, v in doc.items() if k not in _COMMON}}
    return CliConfig(cmd=cmd, payload=payload, seed=int(doc.get("seed", 0)), threads=int(doc.get("threads", 1)))


def _params(p):
    return model.WFParams(p["s"], p["theta1"], p["theta2"])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "infinite" if v > 0 else "-infinite"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prior(p):
    pr = p.get("prior") or {"type": "uniform", "lo": -20.0, "hi": 20.0}
    if not pr["lo"] < pr["hi"]:
        raise ConfigError(message="config error at 'prior': need lo < hi")
    return estimation.uniform_prior(pr["lo"], pr["hi"])


def _loss(p):
    return estimation.QUADRATIC_LOSS if p.get("loss", "quadratic") == "quadratic" else estimation.ABSOLUTE_LOSS


def _cmd_simulate(cfg, out):
    p = cfg.payload
    sc = simulate.SimConfig(T=p["T"], dt=p["dt"], start=p["start"], seed=cfg.seed)
    if p["dt"] > p["T"]:
        raise ConfigError(message="config error at 'dt': dt must not exceed T")
    path = simulate.simulate_path(_params(p), sc)
    with open(os.path.join(out, p["output"]), "w") as fh:
        path.to_csv(fh)
    return EXIT_OK


def _cmd_estimate(cfg, out):
    p = cfg.payload
    try:
        with open(p["input"]) as fh:
            path = simulate.SamplePath.from_csv(fh, start_mode=p["start_mode"])
    except OSError as exc:
        raise ConfigError(message=f"config error at 'input': cannot read {p['input']!r} ({exc.strerror})") from exc
    t1, t2 = p["theta1"], p["theta2"]
    method = p["method"]
    if method == "mle_riemann":
        res = estimation.mle_riemann(path, t1, t2, p["rule"])
    elif method == "mle_score":
        res = estimation.mle_score(path, t1, t2, p["rule"])
    else:
        st = estimation.sufficient_stats(path, t1, t2, p["rule"])
        res = estimation.bayes_estimator(st, _prior(p), _loss(p), path.T)
    _write_json(os.path.join(out, p["output"]), res.to_dict())
    return EXIT_OK


def _cmd_experiment(cfg, out):
    p = cfg.payload
    T = p["T"]
    reps = p.get("replicates")
    if isinstance(reps, list) and len(reps) != len(T):
        raise ConfigError(message="config error at 'replicates': length must match 'T'")
    prior = loss = None
    if p["estimator"] == "bayes":
        prior, loss = _prior(p), _loss(p)
    ec = montecarlo.ExperimentConfig(
        params=_params(p), T_list=T, dt=p["dt"], replicates=reps, master_seed=cfg.seed,
        estimator=p["estimator"], start=p["start"], prior=prior, loss=loss,
        p_list=p["p_list"], rule=p["rule"])
    report = montecarlo.run_normality_experiment(ec, threads=cfg.threads)
    montecarlo.write_report(report, out)
    return EXIT_OK


def _cmd_ergodic(cfg, out):
    p = cfg.payload
    params = _params(p)
    h_name = p["h"]
    if h_name in ("(1-x)/x", "x/(1-x)") and not params.finite_information:
        theta = params.theta1 if h_name == "(1-x)/x" else params.theta2
        if theta <= 1:
            _write_json(os.path.join(out, p["output"]),
                        {"h": h_name, "status": "moment-infinite",
                         "message": "stationary expectation of h is infinite for theta <= 1"})
            return EXIT_NUMERIC
    res = montecarlo.run_ergodic_check(params, H_FUNCTIONS[h_name], p["T"], p["dt"], p["n_paths"],
                                       p["start"], cfg.seed, threads=cfg.threads)
    res["h"] = h_name
    _write_json(os.path.join(out, p["output"]), res)
    return EXIT_OK


def _cmd_hitting(cfg, out):
    p = cfg.payload
    if p["x"] == p["b"]:
        raise ConfigError(message="config error at 'x': x must differ from b")
    res = montecarlo.run_hitting_check(_params(p), p["x"], p["b"], p["dt"], p["replicates"], p["t_max"],
                                       cfg.seed, threads=cfg.threads)
    _write_json(os.path.join(out, p["output"]), res)
    return EXIT_OK


def _cmd_fisher(cfg, out):
    p = cfg.payload
    params = _params(p)
    fm = model.fisher_matrix(params)
    _write_json(os.path.join(out, p["output"]), {
        "params": params.as_tuple(), "order": ["s", "theta1", "theta2"],
        "matrix": fm.to_json(), "selection_information": fm.selection,
        "lan_regime": params.lan_regime, "finite_information": params.finite_information,
    })
    return EXIT_OK


def _cmd_conditions(cfg, out):
    p = cfg.payload
    g = p["grid"]
    grid = [model.WFParams(*pt) for pt in itertools.product(g["s"], g["theta1"], g["theta2"])]
    if not grid:
        raise ParameterError("empty-parameter-grid", "parameter grid is empty")
    base = diffusion.check_uniform_ergodicity(model.WF_SPEC, grid, p["a"], p["b"])
    result = {"uniform_ergodicity": base.to_dict()}
    passed = base.passed
    if "h" in p:
        rep = diffusion.check_unbounded_conditions(model.WF_SPEC, grid, H_FUNCTIONS[p["h"]], p["b"], p["x"],
                                                   p["nu"])
        d = rep.to_dict()
        d["h"] = p["h"]
        d["condition_flags"] = list(rep.condition_flags)
        result["unbounded_conditions"] = d
        passed = passed and rep.passed
    result["pass"] = passed
    _write_json(os.path.join(out, p["output"]), result)
    return EXIT_OK if passed else EXIT_NUMERIC


def _cmd_sample(cfg, out):
    p = cfg.payload
    draws = model.sample_stationary(_params(p), simulate.make_rng(cfg.seed), size=p["n"])
    with open(os.path.join(out, p["output"]), "w") as fh:
        fh.write("x\n")
        for v in draws:
            fh.write(f"{v:.17g}\n")
    return EXIT_OK


COMMANDS = {
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "experiment": _cmd_experiment,
    "ergodic-check": _cmd_ergodic,
    "hitting": _cmd_hitting,
    "fisher": _cmd_fisher,
    "check-conditions": _cmd_conditions,
    "stationary-sample": _cmd_sample,
}


def dispatch(config: CliConfig, out_dir=".") -> int:
    os.makedirs(out_dir, exist_ok=True)
    return COMMANDS[config.cmd](config, out_dir)


def build_parser():
    ap = argparse.ArgumentParser(prog="wflab", description="Wright-Fisher diffusion laboratory")
    ap.add_argument("--config", required=True, help="JSON config file ('-' for stdin)")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    ap.add_argument("--threads", type=int, default=None, help="worker threads, 0 = auto")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config == "-":
            text = sys.stdin.read()
        else:
            with open(args.config) as fh:
                text = fh.read()
    except OSError as exc:
        print(f"config error: cannot read {args.config!r} ({exc.strerror})", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError(message="config error at 'seed': must be a 64-bit unsigned integer")
            cfg.seed = args.seed
        if args.threads is not None:
            if args.threads < 0:
                raise ConfigError(message="config error at 'threads': must be >= 0")
            cfg.threads = args.threads
        return dispatch(cfg, args.out)
    except (ConfigError, ParameterError) as exc:
        print(str(exc) if isinstance(exc, ConfigError) else f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

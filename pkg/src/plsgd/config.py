"""Experiment configuration: TOML parsing with strict validation, default
filling, and a round-trippable serializer.

One experiment per file. Unknown keys are rejected; every constraint
violation names the offending key.
"""

from __future__ import annotations

import math

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .envelopes import DEFAULT_DELTAS, DELTA_MAX
from .errors import ConfigError, PlsgdError
from .experiments import RiskDistribution
from .optimizer import StepSchedule
from .oracles import MODES, make_oracle
from .problems import CounterexampleSpec, make_logistic, make_quadratic

KINDS = ("ensemble", "coupled", "risk", "counterexample", "landscape")

_TOP_KEYS = {"kind", "seed", "T", "trials", "deltas", "C1", "C2", "out",
             "save_trajectories", "problem", "oracle", "schedule",
             "coupling", "risk"}
_PROBLEM_KEYS = {
    "quadratic": {"kind", "spectrum", "x0_offset"},
    "logistic": {"kind", "n", "d", "seed", "lambda_r", "label_noise"},
    "counterexample": {"kind", "a", "b", "c", "d0", "epsilon", "q", "radius",
                       "eta", "T"},
}
_ORACLE_KEYS = {"mode", "sigma", "batch"}
_SCHEDULE_KEYS = {"kind", "c", "eta"}
_COUPLING_KEYS = {"i_star", "replicates", "fresh"}
_RISK_KEYS = {"n", "b", "multipliers", "replicates", "delta", "heldout",
              "label_noise", "lambda_r", "d", "w_seed"}


def _reject_unknown(table: dict, allowed: set, where: str):
    for k in table:
        if k not in allowed:
            raise ConfigError(f"{where}.{k}" if where else k, "unknown key")


def _need(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"{where}.{key}" if where else key, "missing required key")
    return table[key]


def _typed(table, key, types, where, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"{where}.{key}" if where else key, "missing required key")
        return default
    v = table[key]
    if isinstance(v, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{where}.{key}" if where else key, f"expected {types}, got bool")
    if not isinstance(v, types):
        raise ConfigError(f"{where}.{key}" if where else key,
                          f"expected {types}, got {type(v).__name__}")
    return v


@dataclass
class ExperimentConfig:
    """Validated experiment description plus its normalized raw form."""

    kind: str
    seed: int
    T: int
    trials: int
    deltas: tuple
    C1: float
    C2: float
    out: Optional[str]
    save_trajectories: bool
    problem_spec: dict
    oracle_spec: Optional[dict]
    schedule_spec: Optional[dict]
    coupling: Optional[dict]
    risk: Optional[dict]
    _problem: object = field(default=None, repr=False)

    def normalized(self) -> dict:
        out = {
            "kind": self.kind, "seed": self.seed, "T": self.T,
            "trials": self.trials, "deltas": list(self.deltas),
            "C1": self.C1, "C2": self.C2,
            "save_trajectories": self.save_trajectories,
            "problem": dict(self.problem_spec),
        }
        if self.out is not None:
            out["out"] = self.out
        if self.oracle_spec is not None:
            out["oracle"] = dict(self.oracle_spec)
        if self.schedule_spec is not None:
            out["schedule"] = dict(self.schedule_spec)
        if self.coupling is not None:
            out["coupling"] = dict(self.coupling)
        if self.risk is not None:
            out["risk"] = dict(self.risk)
        return out

    # --- builders ------------------------------------------------------
    def build_problem(self):
        if self._problem is None:
            self._problem = _build_problem(self.problem_spec)
        return self._problem

    def build_counterexample(self) -> CounterexampleSpec:
        ps = self.problem_spec
        kwargs = {k: ps[k] for k in ("a", "b", "c", "d0", "epsilon", "q")}
        kwargs["q"] = int(kwargs["q"])
        if ps.get("radius") is not None:
            kwargs["radius"] = ps["radius"]
        try:
            return CounterexampleSpec(**kwargs)
        except PlsgdError as e:
            raise ConfigError("problem", str(e)) from e

    def build_oracle(self):
        spec = self.oracle_spec
        return make_oracle(spec["mode"], spec["sigma"], spec["batch"], self.seed)

    def build_schedule(self, problem) -> StepSchedule:
        spec = self.schedule_spec
        kind = spec["kind"]
        try:
            if kind == "theta":
                return StepSchedule.theta_kind(problem.L, problem.mu)
            if kind == "slow":
                return StepSchedule.slow_kind(spec["c"], problem.L)
            if kind == "stability":
                c = spec["c"]
                return StepSchedule.stability_kind(1.0 / problem.L if c == "1/L" else c)
            return StepSchedule.constant_kind(spec["eta"])
        except PlsgdError as e:
            key = "c" if kind in ("slow", "stability") else "eta"
            raise ConfigError(f"schedule.{key}", str(e)) from e

    def build_risk_distribution(self) -> RiskDistribution:
        r = self.risk
        return RiskDistribution(kind="logistic", d=int(r["d"]),
                                lambda_r=float(r["lambda_r"]),
                                label_noise=float(r["label_noise"]),
                                w_seed=int(r["w_seed"]))


def _build_problem(spec: dict):
    try:
        if spec["kind"] == "quadratic":
            import numpy as np
            spectrum = np.asarray(spec["spectrum"], dtype=float)
            return make_quadratic(len(spectrum), spectrum,
                                  x0_offset=spec.get("x0_offset", 1.0))
        if spec["kind"] == "logistic":
            return make_logistic(int(spec["n"]), int(spec["d"]), int(spec["seed"]),
                                 float(spec.get("lambda_r", 0.0)),
                                 label_noise=float(spec.get("label_noise", 0.0)))
    except PlsgdError as e:
        raise ConfigError("problem", str(e)) from e
    raise ConfigError("problem.kind", f"cannot build problem of kind {spec['kind']!r}")


def parse_config(path) -> ExperimentConfig:
    """Parse and fully validate one experiment file.

    Every key is checked for type and range; defaults (C1 = C2 = 2, the
    standard confidence grid, trajectory saving off) are filled in so the
    normalized form round-trips.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "no such config file")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(str(path), f"not valid TOML: {e}") from e
    return validate_config(raw)


def validate_config(raw: dict) -> ExperimentConfig:
    _reject_unknown(raw, _TOP_KEYS, "")
    kind = _typed(raw, "kind", str, "", required=True)
    if kind not in KINDS:
        raise ConfigError("kind", f"must be one of {KINDS}")
    seed = _typed(raw, "seed", int, "", required=True)
    if not (0 <= seed < 2**64):
        raise ConfigError("seed", "must be a 64-bit nonnegative integer")

    problem = _typed(raw, "problem", dict, "",
                     required=kind != "risk", default={})
    if kind == "risk" and problem:
        raise ConfigError("problem", "risk experiments configure data via [risk]")
    if problem:
        pkind = _typed(problem, "kind", str, "problem", required=True)
        if pkind not in _PROBLEM_KEYS:
            raise ConfigError("problem.kind", f"must be one of {sorted(_PROBLEM_KEYS)}")
        _reject_unknown(problem, _PROBLEM_KEYS[pkind], "problem")
        problem = _normalize_problem(problem, pkind)
    if kind == "counterexample" and problem.get("kind") != "counterexample":
        raise ConfigError("problem.kind", "counterexample experiment needs a counterexample problem")
    if kind in ("ensemble", "coupled", "landscape") and problem.get("kind") == "counterexample":
        raise ConfigError("problem.kind", f"{kind} experiment cannot use the counterexample problem")

    T = _typed(raw, "T", int, "", default=1000)
    if T < 1:
        raise ConfigError("T", "must be >= 1")
    trials = _typed(raw, "trials", int, "", default=1000)
    if trials < 1:
        raise ConfigError("trials", "must be >= 1")
    deltas = tuple(_typed(raw, "deltas", list, "", default=list(DEFAULT_DELTAS)))
    for d in deltas:
        if not isinstance(d, (int, float)) or not (0.0 < float(d) < 1.0):
            raise ConfigError("deltas", "entries must lie in (0, 1)")
    if kind == "ensemble":
        for d in deltas:
            if not float(d) < DELTA_MAX:
                raise ConfigError("deltas", f"ensemble levels must lie in (0, 1/e); got {d}")
    C1 = float(_typed(raw, "C1", (int, float), "", default=2.0))
    C2 = float(_typed(raw, "C2", (int, float), "", default=2.0))
    if C1 <= 0 or C2 <= 0:
        raise ConfigError("C1" if C1 <= 0 else "C2", "must be positive")
    out = _typed(raw, "out", str, "", default=None)
    save_traj = _typed(raw, "save_trajectories", bool, "", default=False)

    oracle = _typed(raw, "oracle", dict, "", default=None)
    if oracle is not None and kind not in ("ensemble", "coupled"):
        raise ConfigError("oracle", f"not used by {kind} experiments")
    if oracle is not None:
        _reject_unknown(oracle, _ORACLE_KEYS, "oracle")
        mode = _typed(oracle, "mode", str, "oracle", required=True)
        if mode not in MODES:
            raise ConfigError("oracle.mode", f"must be one of {MODES}")
        sigma = float(_typed(oracle, "sigma", (int, float), "oracle", default=0.0))
        if sigma < 0:
            raise ConfigError("oracle.sigma", "must be nonnegative")
        batch = _typed(oracle, "batch", int, "oracle", default=1)
        if batch < 1:
            raise ConfigError("oracle.batch", "must be >= 1")
        if mode == "finite_sum_subsample" and problem.get("kind") == "logistic" \
                and batch > problem["n"]:
            raise ConfigError("oracle.batch", "exceeds the dataset size")
        oracle = {"mode": mode, "sigma": sigma, "batch": batch}
    elif kind in ("ensemble", "coupled"):
        raise ConfigError("oracle", "missing required table")

    schedule = _typed(raw, "schedule", dict, "", default=None)
    if schedule is not None and kind not in ("ensemble", "coupled"):
        raise ConfigError("schedule", f"not used by {kind} experiments")
    if schedule is not None:
        _reject_unknown(schedule, _SCHEDULE_KEYS, "schedule")
        skind = _typed(schedule, "kind", str, "schedule", required=True)
        if skind not in ("theta", "slow", "stability", "constant"):
            raise ConfigError("schedule.kind", "unknown schedule kind")
        norm = {"kind": skind}
        if skind in ("slow", "stability"):
            c = _need(schedule, "c", "schedule")
            if not (c == "1/L" and skind == "stability"):
                if not isinstance(c, (int, float)) or isinstance(c, bool) or c <= 0:
                    raise ConfigError("schedule.c", "must be a positive number")
                c = float(c)
            norm["c"] = c
        elif skind == "constant":
            eta = _typed(schedule, "eta", (int, float), "schedule", required=True)
            if eta < 0:
                raise ConfigError("schedule.eta", "must be nonnegative")
            norm["eta"] = float(eta)
        schedule = norm
    elif kind in ("ensemble", "coupled"):
        raise ConfigError("schedule", "missing required table")

    coupling = _typed(raw, "coupling", dict, "", default=None)
    if kind == "coupled":
        coupling = coupling or {}
        _reject_unknown(coupling, _COUPLING_KEYS, "coupling")
        i_star = coupling.get("i_star", "random")
        if i_star != "random" and (not isinstance(i_star, int) or isinstance(i_star, bool)):
            raise ConfigError("coupling.i_star", 'must be an index or "random"')
        coupling = {"i_star": i_star,
                    "replicates": _typed(coupling, "replicates", int, "coupling", default=1000),
                    "fresh": _typed(coupling, "fresh", int, "coupling", default=1000)}
        if coupling["replicates"] < 1:
            raise ConfigError("coupling.replicates", "must be >= 1")
    elif coupling is not None:
        raise ConfigError("coupling", "only valid for coupled experiments")

    risk = _typed(raw, "risk", dict, "", default=None)
    if kind == "risk":
        risk = risk or {}
        _reject_unknown(risk, _RISK_KEYS, "risk")
        risk = {
            "n": _typed(risk, "n", int, "risk", default=100),
            "b": _typed(risk, "b", int, "risk", default=1),
            "d": _typed(risk, "d", int, "risk", default=5),
            "multipliers": _typed(risk, "multipliers", list, "risk", default=[1.0]),
            "replicates": _typed(risk, "replicates", int, "risk", default=200),
            "delta": float(_typed(risk, "delta", (int, float), "risk", default=0.1)),
            "heldout": _typed(risk, "heldout", int, "risk", default=100_000),
            "label_noise": float(_typed(risk, "label_noise", (int, float), "risk", default=0.1)),
            "lambda_r": float(_typed(risk, "lambda_r", (int, float), "risk", default=0.1)),
            "w_seed": _typed(risk, "w_seed", int, "risk", default=0),
        }
        if risk["n"] < 2:
            raise ConfigError("risk.n", "must be >= 2")
        if not (1 <= risk["b"] <= risk["n"]):
            raise ConfigError("risk.b", "must satisfy 1 <= b <= n")
        if not (0.0 < risk["delta"] < 1.0):
            raise ConfigError("risk.delta", "must lie in (0, 1)")
        if risk["heldout"] < 10_000:
            raise ConfigError("risk.heldout", "held-out set too small (< 1e4)")
        for m in risk["multipliers"]:
            if not isinstance(m, (int, float)) or isinstance(m, bool) or m < 0:
                raise ConfigError("risk.multipliers", "entries must be nonnegative numbers")
    elif risk is not None:
        raise ConfigError("risk", "only valid for risk experiments")

    cfg = ExperimentConfig(kind=kind, seed=seed, T=T, trials=trials,
                           deltas=tuple(float(d) for d in deltas), C1=C1, C2=C2,
                           out=out, save_trajectories=save_traj,
                           problem_spec=problem, oracle_spec=oracle,
                           schedule_spec=schedule, coupling=coupling, risk=risk)
    _cross_validate(cfg)
    return cfg


def _normalize_problem(problem: dict, pkind: str) -> dict:
    where = "problem"
    if pkind == "quadratic":
        spectrum = _typed(problem, "spectrum", list, where, required=True)
        if not spectrum or any(not isinstance(v, (int, float)) or isinstance(v, bool)
                               or v < 0 for v in spectrum):
            raise ConfigError("problem.spectrum", "must be a nonempty list of nonnegative numbers")
        return {"kind": pkind, "spectrum": [float(v) for v in spectrum],
                "x0_offset": float(_typed(problem, "x0_offset", (int, float), where, default=1.0))}
    if pkind == "logistic":
        out = {"kind": pkind,
               "n": _typed(problem, "n", int, where, required=True),
               "d": _typed(problem, "d", int, where, required=True),
               "seed": _typed(problem, "seed", int, where, default=0),
               "lambda_r": float(_typed(problem, "lambda_r", (int, float), where, default=0.0)),
               "label_noise": float(_typed(problem, "label_noise", (int, float), where, default=0.0))}
        if out["n"] < 2:
            raise ConfigError("problem.n", "must be >= 2")
        if out["lambda_r"] < 0:
            raise ConfigError("problem.lambda_r", "must be nonnegative")
        return out
    out = {"kind": pkind,
           "a": float(_typed(problem, "a", (int, float), where, default=1.0)),
           "b": float(_typed(problem, "b", (int, float), where, default=1.0)),
           "c": float(_typed(problem, "c", (int, float), where, default=1.0)),
           "d0": float(_typed(problem, "d0", (int, float), where, default=2.0)),
           "epsilon": float(_typed(problem, "epsilon", (int, float), where, default=0.25)),
           "q": _typed(problem, "q", int, where, default=32),
           "eta": float(_typed(problem, "eta", (int, float), where, default=0.4)),
           "T": _typed(problem, "T", int, where, default=100_000)}
    if problem.get("radius") is not None:
        out["radius"] = float(problem["radius"])
    else:
        out["radius"] = None
    if not out["epsilon"] < out["c"]:
        raise ConfigError("problem.epsilon", "must satisfy epsilon < c")
    if out["q"] < 8:
        raise ConfigError("problem.q", "must be >= 8")
    return out


def _cross_validate(cfg: ExperimentConfig):
    """Constraints that couple tables (schedule bounds need the problem)."""
    if cfg.kind in ("ensemble", "coupled"):
        problem = cfg.build_problem()
        try:
            cfg.build_schedule(problem)
        except ConfigError:
            raise
        if cfg.kind == "coupled":
            if cfg.problem_spec["kind"] != "logistic":
                raise ConfigError("problem.kind", "coupled experiments need a logistic problem")
            if cfg.oracle_spec["mode"] != "finite_sum_subsample":
                raise ConfigError("oracle.mode", "coupled experiments need finite_sum_subsample")
            if cfg.schedule_spec["kind"] != "stability":
                raise ConfigError("schedule.kind", "coupled experiments use the stability schedule")
            i_star = cfg.coupling["i_star"]
            if i_star != "random" and not (0 <= i_star < cfg.problem_spec["n"]):
                raise ConfigError("coupling.i_star", "index out of range")
    if cfg.kind == "counterexample":
        spec = cfg.build_counterexample()
        eta = cfg.problem_spec["eta"]
        if eta > 1.0 / (2.0 * spec.a) + 1e-12:
            raise ConfigError("problem.eta", "must satisfy eta <= 1/(2a)")


# ---------------------------------------------------------------------------
# serialization (round-trip partner of parse_config)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if v != v or v in (math.inf, -math.inf):
            raise ConfigError("serialize", "non-finite float in config")
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError("serialize", f"cannot serialize {type(v).__name__}")


def serialize_config(cfg: ExperimentConfig) -> str:
    """Normalized TOML text; parse(serialize(cfg)) equals cfg."""
    doc = cfg.normalized()
    lines = []
    for k, v in doc.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {_toml_value(v)}")
    for k, v in doc.items():
        if isinstance(v, dict):
            lines.append("")
            lines.append(f"[{k}]")
            for kk, vv in v.items():
                if vv is None:
                    continue
                lines.append(f"{kk} = {_toml_value(vv)}")
    return "\n".join(lines) + "\n"

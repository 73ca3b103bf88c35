"""Experiment configuration: YAML in, validated dataclass out, YAML back.

Layout (every key optional; see ``DEFAULTS``)::

    problem:     {family: synthetic, n: 10, p: 20, q: 10, ...}
    topology:    {kind: ring}                       # shared by all levels
    # or         {x: {kind: ring}, y: {kind: complete}, z: {kind: ring}}
    strategy:    ed                                 # or {x: atc-gt, y: ed, z: ed}
    hyperparams: {alpha: 0.003, beta: 0.001, gamma: 0.001, theta: 1.0,
                  iterations: 3000, batch_size: 10, mode: stochastic,
                  pd_shift: true}
    run:         {master_seed: 0, replicates: 1, metrics_stride: 10,
                  output: out, name: run, engine: generic, threads: 1,
                  wall_clock: false}

A step size is a number or ``{c0, c1, c2}`` meaning ``c0 / (c1 + c2 k)``.
Problem keys other than ``family`` go straight to the family's builder.
"""

from __future__ import annotations

import copy
import inspect
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import problems
from .engine import LEVELS, STEPPERS, Hyperparams, LevelSetup, StepSize, make_levels
from .strategy import Strategy
from .topology import TOPOLOGY_KINDS, MixingMatrix, build_topology

DEFAULTS: dict = {
    "problem": {"family": "synthetic", "n": 10},
    "topology": {"kind": "ring"},
    "strategy": "ed",
    "hyperparams": {
        "alpha": 0.003,
        "beta": 0.001,
        "gamma": 0.001,
        "theta": 1.0,
        "iterations": 3000,
        "batch_size": 10,
        "mode": "stochastic",
        "pd_shift": True,
    },
    "run": {
        "master_seed": 0,
        "replicates": 1,
        "metrics_stride": 10,
        "output": "out",
        "name": "run",
        "engine": "generic",
        "threads": 1,
        "wall_clock": False,
    },
}

BUILDERS = {
    "synthetic": problems.make_synthetic_bilevel,
    "policy_eval": problems.make_policy_eval,
    "single_level": problems.make_single_level,
}
TOPOLOGY_PARAMS = {"a", "rho", "rows", "cols", "path"}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _section(raw: Mapping, name: str) -> dict:
    value = raw.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(name, "expected a mapping")
    return dict(value)


def _merge(defaults: dict, given: Mapping, where: str) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}", "unknown key")
    out = dict(defaults)
    out.update(given)
    return out


def _is_per_level(value) -> bool:
    return isinstance(value, Mapping) and value.keys() == set(LEVELS)


def _normalize_topology(raw, key: str) -> dict:
    if not isinstance(raw, Mapping) or "kind" not in raw:
        raise ConfigError(key, "expected a mapping with a 'kind' key")
    topo = dict(raw)
    kind = str(topo["kind"]).replace("-", "_")
    if kind not in TOPOLOGY_KINDS:
        raise ConfigError(f"{key}.kind", f"unknown topology {topo['kind']!r}; expected one of {', '.join(TOPOLOGY_KINDS)}")
    topo["kind"] = kind
    unknown = sorted(set(topo) - TOPOLOGY_PARAMS - {"kind"})
    if unknown:
        raise ConfigError(f"{key}.{unknown[0]}", "unknown topology parameter")
    return topo


def _normalize_strategy(raw, key: str) -> str:
    try:
        return Strategy.parse(raw).value
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def _step_to_config(value, key: str):
    try:
        return StepSize.coerce(value).to_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"bad step size ({exc})") from None


def _coerce(section: dict, where: str, types: dict) -> None:
    for key, kind in types.items():
        value = section[key]
        if kind is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key}", f"expected true or false, got {value!r}")
            continue
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where}.{key}", f"expected an integer, got {value!r}")
        try:
            section[key] = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}.{key}", f"expected {kind.__name__}, got {value!r}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict
    topology: dict
    strategy: dict
    hyperparams: dict
    run: dict

    # ------------------------------------------------------------ parsing

    @classmethod
    def from_dict(cls, raw: Mapping | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(unknown[0], "unknown section")

        prob = _section(raw, "problem")
        prob = {**DEFAULTS["problem"], **prob}
        family = str(prob["family"]).replace("-", "_")
        if family not in BUILDERS:
            raise ConfigError("problem.family", f"unknown family {prob['family']!r}; expected one of {', '.join(BUILDERS)}")
        prob["family"] = family
        accepted = set(inspect.signature(BUILDERS[family]).parameters) - {"mode", "inner_problem"}
        for key in prob:
            if key != "family" and key not in accepted:
                raise ConfigError(f"problem.{key}", f"not a parameter of family {family!r}")
        try:
            prob["n"] = int(prob["n"])
        except (TypeError, ValueError):
            raise ConfigError("problem.n", "must be an integer") from None
        if prob["n"] < 1:
            raise ConfigError("problem.n", "must be >= 1")

        topo_raw = raw.get("topology", DEFAULTS["topology"])
        if _is_per_level(topo_raw):
            topo = {lvl: _normalize_topology(topo_raw[lvl], f"topology.{lvl}") for lvl in LEVELS}
        else:
            shared = _normalize_topology(topo_raw, "topology")
            topo = {lvl: dict(shared) for lvl in LEVELS}

        strat_raw = raw.get("strategy", DEFAULTS["strategy"])
        if isinstance(strat_raw, Mapping):
            if set(strat_raw) != set(LEVELS):
                raise ConfigError("strategy", "per-level strategies need exactly the keys x, y, z")
            strat = {lvl: _normalize_strategy(strat_raw[lvl], f"strategy.{lvl}") for lvl in LEVELS}
        else:
            name = _normalize_strategy(strat_raw, "strategy")
            strat = {lvl: name for lvl in LEVELS}

        hp = _merge(DEFAULTS["hyperparams"], _section(raw, "hyperparams"), "hyperparams")
        for name in ("alpha", "beta", "gamma"):
            hp[name] = _step_to_config(hp[name], f"hyperparams.{name}")
        _coerce(hp, "hyperparams", {"theta": float, "iterations": int, "batch_size": int, "pd_shift": bool, "mode": str})

        run = _merge(DEFAULTS["run"], _section(raw, "run"), "run")
        _coerce(run, "run", {"master_seed": int, "replicates": int, "metrics_stride": int, "threads": int,
                             "output": str, "name": str, "engine": str, "wall_clock": bool})
        if run["replicates"] < 1:
            raise ConfigError("run.replicates", "must be >= 1")
        if run["metrics_stride"] < 1:
            raise ConfigError("run.metrics_stride", "must be >= 1")
        if run["threads"] < 1:
            raise ConfigError("run.threads", "must be >= 1")
        if run["engine"] not in STEPPERS:
            raise ConfigError("run.engine", f"expected one of {', '.join(STEPPERS)}")
        if run["engine"] == "recursive" and "dgd" in strat.values():
            raise ConfigError("run.engine", "the recursive engine cannot run strategy 'dgd'")

        cfg = cls(prob, topo, strat, hp, run)
        cfg.hyperparams_obj()  # range checks on steps, theta, mode
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"not valid YAML ({exc})") from None
        if raw is not None and not isinstance(raw, Mapping):
            raise ConfigError("config", "top level must be a mapping")
        return cls.from_dict(raw)

    # ------------------------------------------------------- serializing

    def to_dict(self) -> dict:
        topo = self.topology
        strat = self.strategy
        shared_topo = all(topo[lvl] == topo["x"] for lvl in LEVELS)
        shared_strat = len(set(strat.values())) == 1
        return copy.deepcopy({
            "problem": self.problem,
            "topology": topo["x"] if shared_topo else topo,
            "strategy": strat["x"] if shared_strat else strat,
            "hyperparams": self.hyperparams,
            "run": self.run,
        })

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Re-validate with dotted-path overrides, e.g. ``{"run.master_seed": 4}``."""
        raw = self.to_dict()
        for path, value in overrides.items():
            set_path(raw, path, value)
        return ExperimentConfig.from_dict(raw)

    # ---------------------------------------------------------- building

    def hyperparams_obj(self) -> Hyperparams:
        hp = self.hyperparams
        try:
            return Hyperparams(
                alpha=hp["alpha"], beta=hp["beta"], gamma=hp["gamma"], theta=hp["theta"],
                iterations=hp["iterations"], batch_size=hp["batch_size"], mode=hp["mode"],
            )
        except ValueError as exc:
            raise ConfigError("hyperparams", str(exc)) from None

    def build_problem(self):
        params = {k: v for k, v in self.problem.items() if k != "family"}
        try:
            return BUILDERS[self.problem["family"]](mode=self.hyperparams["mode"], **params)
        except (TypeError, ValueError) as exc:
            raise ConfigError("problem", str(exc)) from None

    def build_mixings(self) -> dict[str, MixingMatrix]:
        n = int(self.problem["n"])
        out = {}
        for lvl in LEVELS:
            params = dict(self.topology[lvl])
            kind = params.pop("kind")
            try:
                out[lvl] = build_topology(kind, n, **params)
            except ValueError as exc:
                raise ConfigError(f"topology.{lvl}", str(exc)) from None
        return out

    def build_levels(self) -> LevelSetup:
        try:
            return make_levels(self.strategy, self.build_mixings(), pd_shift=self.hyperparams["pd_shift"])
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("strategy", str(exc)) from None

    def validate(self) -> None:
        """Build everything once so errors surface before any compute."""
        prob = self.build_problem()
        levels = self.build_levels()
        if levels.n != prob.n:
            raise ConfigError("topology", f"has n={levels.n}, problem has n={prob.n}")


def set_path(raw: dict, path: str, value: Any) -> None:
    """Set ``raw[a][b] = value`` for ``path == "a.b"``, creating sections."""
    keys = path.split(".")
    node = raw
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


def default_config() -> ExperimentConfig:
    return ExperimentConfig.from_dict({})

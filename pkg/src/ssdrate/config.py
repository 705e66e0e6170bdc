"""Experiment configuration: a YAML file with ``problem`` and ``experiment`` sections.

Example::

    problem:            # any D2DParams field; omitted keys keep their defaults
      fading: fast
      rayleigh_scale: 20
    experiment:
      epsilons: [0.1, 0.01]
      horizon: 10000
      epochs: [1, 10, 100]
      replications: 20
      base_seed: 0
      zeta: 0.1
      lambda_max: 50
      state_law: continuous   # or: surrogate
      surrogate_atoms: 1000
      surrogate_seed: 0
      distribution: null      # optional path to an atom-list JSON file
      reference: reference.json
      compare_slots: 1000
      compare_seeds: 10
      compare_epsilon: 0.01
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .d2d import D2DParams
from .solver import ConfigurationError

STATE_LAWS = ("continuous", "surrogate")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: D2DParams = field(default_factory=D2DParams)
    epsilons: tuple[float, ...] = (0.01,)
    horizon: int = 10_000
    epochs: tuple[int, ...] = (1, 10, 100)
    replications: int = 1
    base_seed: int = 0
    zeta: float = 0.1
    lambda_max: float = 50.0
    initial_dual: float = 0.0
    state_law: str = "continuous"
    surrogate_atoms: int = 1000
    surrogate_seed: int = 0
    distribution: str | None = None
    reference: str = "reference.json"
    compare_slots: int = 1000
    compare_seeds: int = 10
    compare_epsilon: float = 0.01
    base_dir: str = "."  # directory relative paths resolve against

    def __post_init__(self):
        object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        object.__setattr__(self, "epochs", tuple(int(n) for n in self.epochs))
        errs = []
        if not self.epsilons or any(not e > 0 for e in self.epsilons):
            errs.append("every epsilon must be > 0")
        if self.horizon < 1:
            errs.append("horizon must be >= 1")
        if any(n < 1 for n in self.epochs):
            errs.append("epoch counts must be >= 1")
        if self.replications < 1:
            errs.append("replications must be >= 1")
        if not 0 < self.zeta < 0.5:
            errs.append("zeta must lie in (0, 1/2)")
        if not self.lambda_max > 0:
            errs.append("lambda_max must be > 0")
        if not 0 <= self.initial_dual <= self.lambda_max:
            errs.append("initial_dual must lie in [0, lambda_max]")
        if self.state_law not in STATE_LAWS:
            errs.append(f"state_law must be one of {STATE_LAWS}")
        if self.surrogate_atoms < 1 or self.compare_slots < 1 or self.compare_seeds < 1:
            errs.append("surrogate_atoms, compare_slots and compare_seeds must be >= 1")
        if not self.compare_epsilon > 0:
            errs.append("compare_epsilon must be > 0")
        if errs:
            raise ConfigurationError("; ".join(errs))

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def reference_path(self) -> Path:
        return self.path(self.reference)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_mapping(self) -> dict[str, Any]:
        exp = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name not in ("problem", "base_dir")}
        exp["epsilons"] = list(self.epsilons)
        exp["epochs"] = list(self.epochs)
        return {"problem": self.problem.to_mapping(), "experiment": exp}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None, base_dir: str = ".") -> "ExperimentConfig":
        data = dict(data or {})
        unknown = set(data) - {"problem", "experiment"}
        if unknown:
            raise ConfigurationError(f"unknown top-level section(s): {sorted(unknown)}")
        problem = D2DParams.from_mapping(data.get("problem") or {})
        exp = dict(data.get("experiment") or {})
        known = {f.name for f in dataclasses.fields(cls)} - {"problem", "base_dir"}
        bad = set(exp) - known
        if bad:
            raise ConfigurationError(f"unknown experiment key(s): {sorted(bad)}")
        try:
            return cls(problem=problem, base_dir=base_dir, **exp)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {p}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{p} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, Mapping):
        raise ConfigurationError(f"{p} must contain a mapping at the top level")
    return ExperimentConfig.from_mapping(data, base_dir=str(p.parent))

"""Experiment configuration: schema, presets and conversion to domain objects.

Configs are TOML files. Matrices are nested arrays; polynomial system
matrices are lists of ``{exponents, matrix}`` terms. Every table rejects
unknown keys.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .basis import BasisSet, Distribution
from .galerkin import ChaosState, UncertainSystem
from .rhc_engine import RHCSettings
from .solvers.qp import SolveSettings
from .solvers.variable_gain import NLPSettings
from .transcription import CONSTRAINT_KINDS, MODE_ALIASES, MODES, ConstraintSpec, CostSpec

Matrix = list[list[float]]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TermConfig(_Strict):
    exponents: list[int]
    matrix: Matrix


class DistributionConfig(_Strict):
    kind: Literal["normal", "uniform", "gamma", "beta"]
    alpha: float = 0.0
    beta: float = 0.0

    def build(self) -> Distribution:
        return Distribution(self.kind, alpha=self.alpha, beta=self.beta)


class SystemConfig(_Strict):
    n: int = Field(ge=1)
    m: int = Field(ge=1)
    distributions: list[DistributionConfig] = Field(min_length=1)
    A: list[TermConfig] = Field(min_length=1)
    B: list[TermConfig] = Field(min_length=1)

    @model_validator(mode="after")
    def _dims(self):
        d = len(self.distributions)
        for name, terms, cols in (("A", self.A, self.n), ("B", self.B, self.m)):
            for j, t in enumerate(terms):
                if len(t.exponents) != d:
                    raise ValueError(f"{name}[{j}].exponents needs {d} entries (one per distribution)")
                if any(e < 0 for e in t.exponents):
                    raise ValueError(f"{name}[{j}].exponents must be nonnegative")
                shape = np.shape(t.matrix)
                if shape != (self.n, cols):
                    raise ValueError(f"{name}[{j}].matrix must be {self.n}x{cols}, got {shape}")
        return self


class BasisConfig(_Strict):
    order: int = Field(default=4, ge=0)


class CostConfig(_Strict):
    Q: Matrix
    R: Matrix
    N: int = Field(default=10, ge=1)


class ConstraintConfig(_Strict):
    kind: str
    bound: float
    H: Matrix | None = None
    G: list[float] | None = None
    direction: Literal["<=", ">="] = "<="
    steps: list[int] | None = None

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {v!r}; expected one of {CONSTRAINT_KINDS}")
        return v

    def build(self) -> ConstraintSpec:
        return ConstraintSpec(
            self.kind,
            self.bound,
            H=None if self.H is None else np.array(self.H, dtype=float),
            G=None if self.G is None else np.array(self.G, dtype=float),
            direction=self.direction,
            steps=None if self.steps is None else tuple(self.steps),
        )


class SolverConfig(_Strict):
    eps_abs: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=20000, ge=1)
    nlp_max_iter: int = Field(default=100, ge=1)
    stationarity_tol: float = Field(default=1e-6, gt=0)
    feasibility_tol: float = Field(default=1e-8, gt=0)
    n_starts: int = Field(default=3, ge=1, le=3)
    warm_start: bool = True

    def build(self, seed: int = 0) -> RHCSettings:
        qp = SolveSettings(eps_abs=self.eps_abs, max_iter=self.max_iter)
        nlp = NLPSettings(
            max_iter=self.nlp_max_iter,
            stationarity_tol=self.stationarity_tol,
            feasibility_tol=self.feasibility_tol,
            n_starts=self.n_starts,
            seed=seed,
            qp=qp,
        )
        return RHCSettings(qp=qp, nlp=nlp, warm_start=self.warm_start)


class RunConfig(_Strict):
    steps: int = Field(default=100, ge=1)
    x0: list[float]
    seed: int = Field(default=0, ge=0)
    samples: int = Field(default=100_000, ge=1)
    validate_steps: int = Field(default=5, ge=1)
    threads: int = Field(default=1, ge=1)
    decay_tolerance: float = Field(default=1e-4, gt=0)
    truth_delta: list[float] | None = None


class OutputConfig(_Strict):
    dir: str = "out"


class ExperimentConfig(_Strict):
    mode: str = "variable-gain"
    system: SystemConfig
    basis: BasisConfig = BasisConfig()
    cost: CostConfig
    constraints: list[ConstraintConfig] = []
    solver: SolverConfig = SolverConfig()
    run: RunConfig
    output: OutputConfig = OutputConfig()

    @field_validator("mode")
    @classmethod
    def _mode(cls, v):
        if v not in MODES and v not in MODE_ALIASES:
            raise ValueError(f"unknown mode {v!r}; expected one of {tuple(MODE_ALIASES)}")
        return MODE_ALIASES.get(v, v)

    @model_validator(mode="after")
    def _dims(self):
        n, m = self.system.n, self.system.m
        if np.shape(self.cost.Q) != (n, n):
            raise ValueError(f"cost.Q must be {n}x{n}")
        if np.shape(self.cost.R) != (m, m):
            raise ValueError(f"cost.R must be {m}x{m}")
        if len(self.run.x0) != n:
            raise ValueError(f"run.x0 needs {n} entries")
        if self.run.truth_delta is not None and len(self.run.truth_delta) != len(self.system.distributions):
            raise ValueError("run.truth_delta needs one entry per distribution")
        for j, c in enumerate(self.constraints):
            dim = m if c.kind == "expectation-control" else n
            if c.H is not None and np.shape(c.H) != (dim, dim):
                raise ValueError(f"constraints[{j}].H must be {dim}x{dim}")
            if c.G is not None and len(c.G) != dim:
                raise ValueError(f"constraints[{j}].G needs {dim} entries")
        return self

    # domain objects

    def uncertain_system(self) -> UncertainSystem:
        s = self.system
        return UncertainSystem(
            tuple((tuple(t.exponents), np.array(t.matrix, dtype=float)) for t in s.A),
            tuple((tuple(t.exponents), np.array(t.matrix, dtype=float)) for t in s.B),
            tuple(d.build() for d in s.distributions),
        )

    def basis_set(self) -> BasisSet:
        return BasisSet(tuple(d.build() for d in self.system.distributions), self.basis.order)

    def cost_spec(self) -> CostSpec:
        return CostSpec(np.array(self.cost.Q, dtype=float), np.array(self.cost.R, dtype=float), self.cost.N)

    def constraint_specs(self) -> list[ConstraintSpec]:
        return [c.build() for c in self.constraints]

    def initial_state(self, size: int) -> ChaosState:
        return ChaosState.deterministic(self.run.x0, size)

    def settings(self) -> RHCSettings:
        return self.solver.build(self.run.seed)


PRESETS: dict[str, dict] = {
    "paper": {
        "mode": "variable-gain",
        "system": {
            "n": 2,
            "m": 1,
            "distributions": [{"kind": "uniform"}],
            "A": [
                {"exponents": [0], "matrix": [[1.02, -0.1], [0.1, 0.98]]},
                {"exponents": [1], "matrix": [[0.04, 0.0], [0.0, 0.04]]},
            ],
            "B": [{"exponents": [0], "matrix": [[0.1], [0.05]]}],
        },
        "basis": {"order": 4},
        "cost": {"Q": [[2.0, 0.0], [0.0, 5.0]], "R": [[1.0]], "N": 10},
        "constraints": [{"kind": "expectation-state", "G": [1.0, 0.0], "direction": ">=", "bound": -1.0}],
        "run": {"steps": 100, "x0": [-0.5, 1.0], "seed": 0, "samples": 100_000, "validate_steps": 5},
    },
    "deterministic-smoke": {
        "mode": "full",
        "system": {
            "n": 2,
            "m": 1,
            "distributions": [{"kind": "uniform"}],
            "A": [{"exponents": [0], "matrix": [[1.02, -0.1], [0.1, 0.98]]}],
            "B": [{"exponents": [0], "matrix": [[0.1], [0.05]]}],
        },
        "basis": {"order": 2},
        "cost": {"Q": [[2.0, 0.0], [0.0, 5.0]], "R": [[1.0]], "N": 10},
        "run": {"steps": 100, "x0": [-0.5, 1.0], "seed": 0, "samples": 1000, "validate_steps": 5},
    },
}


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config: " + "; ".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def load_config(path) -> ExperimentConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(data)


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown example {name!r}; available: {sorted(PRESETS)}")
    return parse_config(PRESETS[name])


def schema() -> dict:
    return ExperimentConfig.model_json_schema()

"""TOML run configuration.

One file holds every knob; command-line flags only override the seed,
paths and parallelism. Unknown keys are rejected so typos cannot silently
fall back to defaults. See the README for the full grammar.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import BsdrError, DomainError
from .experiments import ROSTER, ExperimentConfig, equal_population, heterogeneous_population
from .gridworld import DEFAULT_ORACLE_CAP, GridSpec
from .inference import AppendixConfig, GridAxes, OptConfig, Prior

DEFAULT_SEED = 0

TOP_KEYS = {"seed", "oracle_cap", "data", "grid", "truth", "simulate", "posterior", "fit", "fit_appendix",
            "goal_inference", "experiment"}


def _section(d: dict, name: str, allowed: set) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise DomainError(f"[{name}] must be a table")
    extra = set(sec) - allowed
    if extra:
        raise DomainError(f"unknown keys in [{name}]: {sorted(extra)}")
    return sec


def _floats(v, what: str) -> list:
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError):
        raise DomainError(f"{what} must be a list of numbers") from None


@dataclass
class RunConfig:
    """Parsed configuration; sections are kept as validated plain tables."""

    spec: GridSpec
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)
    seed: int = DEFAULT_SEED
    oracle_cap: int = DEFAULT_ORACLE_CAP

    # -- truth ---------------------------------------------------------------

    def truth_theta_r(self) -> list:
        t = _section(self.raw, "truth", {"theta_r", "theta_b", "population"})
        if "theta_r" not in t:
            raise DomainError("[truth] needs theta_r")
        return _floats(t["theta_r"], "truth.theta_r")

    def population(self, seed: Optional[int] = None) -> Dict[str, list]:
        t = _section(self.raw, "truth", {"theta_r", "theta_b", "population"})
        if ("theta_b" in t) == ("population" in t):
            raise DomainError("[truth] needs exactly one of theta_b (per-agent table) or population")
        if "theta_b" in t:
            if not isinstance(t["theta_b"], dict) or not t["theta_b"]:
                raise DomainError("truth.theta_b must be a non-empty table of agent = [values]")
            return {str(a): _floats(v, f"truth.theta_b.{a}") for a, v in t["theta_b"].items()}
        pop = _section(t, "population", {"kind", "n_agents", "scale", "theta_b", "seed"})
        kind = pop.get("kind", "equal")
        n = int(pop.get("n_agents", 1))
        if n < 1:
            raise DomainError("population.n_agents must be >= 1")
        if kind == "equal":
            if "theta_b" not in pop:
                raise DomainError("an equal population needs theta_b")
            return equal_population(n, _floats(pop["theta_b"], "population.theta_b"))
        if kind == "heterogeneous":
            pop_seed = int(pop.get("seed", self.seed if seed is None else seed))
            return heterogeneous_population(self.spec, n, float(pop.get("scale", 4.0)), pop_seed)
        raise DomainError(f"unknown population kind {kind!r}; choose 'equal' or 'heterogeneous'")

    # -- dataset path --------------------------------------------------------

    def data_path(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        if "data" not in self.raw:
            raise DomainError("no dataset given: pass --data or set data = \"...\" in the config")
        p = Path(str(self.raw["data"]))
        return p if p.is_absolute() else self.base_dir / p

    # -- per-command sections --------------------------------------------------

    def simulate_count(self) -> int:
        s = _section(self.raw, "simulate", {"trajectories_per_agent"})
        n = int(s.get("trajectories_per_agent", 100))
        if n < 0:
            raise DomainError("simulate.trajectories_per_agent must be >= 0")
        return n

    def _prior(self, sec: dict, default_kind: str) -> Prior:
        return Prior(str(sec.get("prior", default_kind)), float(sec.get("sigma", 10.0)))

    def _axes(self, sec: dict, where: str) -> GridAxes:
        if "theta_r" not in sec or "theta_b" not in sec:
            raise DomainError(f"[{where}] needs theta_r and theta_b axes")
        tr = [_floats(v, f"{where}.theta_r") for v in sec["theta_r"]]
        if not isinstance(sec["theta_b"], dict):
            raise DomainError(f"{where}.theta_b must be a table of agent = [[values], ...]")
        tb = {str(a): [_floats(v, f"{where}.theta_b.{a}") for v in ax] for a, ax in sec["theta_b"].items()}
        return GridAxes(tr, tb)

    def posterior(self):
        s = _section(self.raw, "posterior", {"prior", "sigma", "max_points", "theta_r", "theta_b"})
        return self._axes(s, "posterior"), self._prior(s, "uniform_grid"), int(s.get("max_points", 10**6))

    def fit(self, nonneg_beta: bool = False):
        keys = {"prior", "sigma", "step_size", "max_iter", "tol", "gauge", "theta_b_mask", "init_theta_r",
                "init_theta_b", "nonneg_beta"}
        s = _section(self.raw, "fit", keys)
        opt = OptConfig(
            step_size=float(s.get("step_size", 1.0)),
            max_iter=int(s.get("max_iter", 5000)),
            tol=float(s.get("tol", 1e-6)),
            gauge=str(s.get("gauge", "unit_per_agent")),
            theta_b_mask=[bool(b) for b in s["theta_b_mask"]] if "theta_b_mask" in s else None,
            init_theta_r=_floats(s["init_theta_r"], "fit.init_theta_r") if "init_theta_r" in s else None,
            init_theta_b=_floats(s["init_theta_b"], "fit.init_theta_b") if "init_theta_b" in s else None,
            nonneg_beta=bool(s.get("nonneg_beta", False)) or nonneg_beta,
        )
        return self._prior(s, "gaussian"), opt

    def fit_appendix(self) -> AppendixConfig:
        s = _section(self.raw, "fit_appendix", {"max_iter", "tol", "rel_tol", "step_scale", "init_theta_b"})
        return AppendixConfig(
            max_iter=int(s.get("max_iter", 100_000)),
            tol=float(s.get("tol", 1e-9)),
            rel_tol=float(s.get("rel_tol", 1e-14)),
            step_scale=float(s.get("step_scale", 1.0)),
            init_theta_b=_floats(s["init_theta_b"], "fit_appendix.init_theta_b") if "init_theta_b" in s else None,
        )

    def goal_inference(self) -> dict:
        s = _section(self.raw, "goal_inference", {"candidates", "theta_r", "theta_b", "prior", "fractions"})
        cands = [tuple(int(c) for c in g) for g in s.get("candidates", [list(g) for g in self.spec.goals])]
        if not cands:
            raise DomainError("goal_inference.candidates is empty")
        theta_r = _floats(s["theta_r"], "goal_inference.theta_r") if "theta_r" in s else self.truth_theta_r()
        if "theta_b" in s:
            if not isinstance(s["theta_b"], dict):
                raise DomainError("goal_inference.theta_b must be a table of agent = [values]")
            theta_b = {str(a): _floats(v, f"goal_inference.theta_b.{a}") for a, v in s["theta_b"].items()}
        else:
            theta_b = self.population()
        prior = _floats(s["prior"], "goal_inference.prior") if "prior" in s else None
        fractions = _floats(s.get("fractions", [0.25, 0.5, 0.75, 1.0]), "goal_inference.fractions")
        for f in fractions:
            if not 0 <= f <= 1:
                raise DomainError(f"prefix fraction {f} outside [0, 1]")
        return {"candidates": cands, "theta_r": theta_r, "theta_b": theta_b, "prior": prior,
                "fractions": fractions}

    def experiment(self, name: str, seed: Optional[int] = None, workers: int = 1) -> ExperimentConfig:
        keys = {"seeds", "trajectories_per_agent", "dataset_sizes", "fractions", "goals", "fit_rationality",
                "roster", "train_fraction", "prior", "sigma", "axes", "opt", "fit_prior"}
        s = _section(self.raw, "experiment", keys)
        seeds = [int(seed)] if seed is not None else [int(x) for x in s.get("seeds", [self.seed])]
        axes = None
        if "axes" in s:
            axes = self._axes(_section(s, "axes", {"theta_r", "theta_b"}), "experiment.axes")
        elif "posterior" in self.raw and name == "recovery":
            axes = self.posterior()[0]
        o = _section(s, "opt", {"step_size", "max_iter", "tol", "gauge", "nonneg_beta"})
        opt = OptConfig(step_size=float(o.get("step_size", 1.0)), max_iter=int(o.get("max_iter", 1000)),
                        tol=float(o.get("tol", 1e-5)), gauge=str(o.get("gauge", "global")),
                        nonneg_beta=bool(o.get("nonneg_beta", False)))
        fp = _section(s, "fit_prior", {"kind", "sigma"})
        return ExperimentConfig(
            name=name,
            spec=self.spec,
            theta_r=self.truth_theta_r(),
            population=self.population(seeds[0]),
            trajectories_per_agent=int(s.get("trajectories_per_agent", 32)),
            seeds=seeds,
            axes=axes,
            prior=self._prior(s, "uniform_grid"),
            dataset_sizes=[int(n) for n in s["dataset_sizes"]] if "dataset_sizes" in s else None,
            fractions=_floats(s.get("fractions", [0.25, 0.5, 0.75, 1.0]), "experiment.fractions"),
            goals=[tuple(int(c) for c in g) for g in s.get("goals", [])],
            fit_rationality=bool(s.get("fit_rationality", True)),
            roster=[str(m) for m in s.get("roster", list(ROSTER))],
            train_fraction=float(s.get("train_fraction", 0.75)),
            opt=opt,
            fit_prior=Prior(str(fp.get("kind", "gaussian")), float(fp.get("sigma", 10.0))),
            workers=workers,
        )


def parse_config(raw: dict, base_dir=None) -> RunConfig:
    """Validate the top level and build the GridSpec."""
    extra = set(raw) - TOP_KEYS
    if extra:
        raise DomainError(f"unknown top-level config keys: {sorted(extra)}")
    if "grid" not in raw or not isinstance(raw["grid"], dict):
        raise DomainError("config needs a [grid] table")
    spec = GridSpec.from_dict(raw["grid"])
    try:
        seed = int(raw.get("seed", DEFAULT_SEED))
        cap = int(raw.get("oracle_cap", DEFAULT_ORACLE_CAP))
    except (TypeError, ValueError):
        raise DomainError("seed and oracle_cap must be integers") from None
    return RunConfig(spec, raw, Path(base_dir) if base_dir is not None else Path.cwd(), seed, cap)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise BsdrError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise DomainError(f"{path}: {e}") from None
    except OSError as e:
        raise BsdrError(f"cannot read config {path}: {e}") from None
    return parse_config(raw, path.parent)

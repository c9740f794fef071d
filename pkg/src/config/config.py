#!/usr/bin/env python3
"""
Configuration Manager for the h-PMD experiment runner
Loads experiment files over built-in defaults and validates them into typed settings
"""

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from src.algorithms.linfa import TILE_COLS, TILE_ROWS
from src.algorithms.mc_estimator import (
    EstimatorParams,
    accuracy_target,
    estimation_error_bound,
    params_for_accuracy,
)
from src.algorithms.mirror import MirrorMap, StepsizeMode, StepsizeSchedule
from src.algorithms.pmd_engine import EstimationMode, RunConfig
from src.envs.deepsea import DEFAULT_SLIP_PROB, DeepSeaSpec, build_deepsea
from src.envs.random_mdp import build_chain_mdp, build_random_mdp
from src.models.tabular import TabularMdp
from src.utils.errors import ConfigError, ConfigIssue, HpmdError, InvalidModelError

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "HPMD_OUTPUT_DIR"

ENV_KINDS = ("deepsea", "random", "chain", "file")
MODES = ("exact", "inexact", "linear_fa")
FEATURE_KINDS = ("one_hot", "tiles", "random", "file")
STORAGES = ("tabular", "on_demand")
STEPSIZE_SCOPES = ("per_state", "global")
SCHEDULES = ("per_h", "shared")
# confidence of the recorded inexact bound when the estimator is given by explicit widths
DEFAULT_BOUND_DELTA = 0.05
DEFAULT_DISCOUNT = {"deepsea": 0.99, "random": 0.9, "chain": 0.9}

# Optional settings; "environment" and "sweep.h" must come from the file
DEFAULT_CONFIG: Dict[str, Any] = {
    "algorithm": {
        "mode": "exact",
        "n_iters": 100,
        "mirror": "kl",
        "stepsize": "adaptive",
        "schedule": "per_h",
        "tol": None,
        "eps_kw": 0.01,
        "policy_storage": "tabular",
        "on_demand_stepsize": "per_state",
    },
    "sweep": {
        "seeds": [0],
    },
    "output_dir": "results",
    "threshold": 1e-3,
    "record_wall_time": False,
}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Copy of base with override applied key by key, recursing into nested objects"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class Config:
    """Experiment file merged over DEFAULT_CONFIG"""

    def __init__(self, config_file: Union[str, Path] = "config.json"):
        self.config_file = Path(config_file)
        self.config_data = self.load_config()

    def load_config(self) -> Dict[str, Any]:
        """Load configuration from file and fill missing keys from the defaults"""
        if not self.config_file.exists():
            raise ConfigError([ConfigIssue("config", f"file not found: {self.config_file}")])
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError([ConfigIssue(
                str(self.config_file), f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")]) from e
        except OSError as e:
            raise ConfigError([ConfigIssue(str(self.config_file), f"cannot read file: {e}")]) from e
        if not isinstance(data, dict):
            raise ConfigError([ConfigIssue("config", "top level must be a JSON object")])
        return deep_merge(DEFAULT_CONFIG, data)

    def set(self, key: str, value: Any) -> None:
        """Set a configuration value in memory"""
        parts = key.split(".")
        node = self.config_data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value


class _Checker:
    """Collects every problem found while reading a config tree"""

    def __init__(self):
        self.issues: List[ConfigIssue] = []

    def add(self, path: str, message: str) -> None:
        self.issues.append(ConfigIssue(path, message))

    def section(self, data: Dict[str, Any], key: str, required: bool = True) -> Dict[str, Any]:
        value = data.get(key)
        if value is None:
            if required:
                self.add(key, "missing required section")
            return {}
        if not isinstance(value, dict):
            self.add(key, "must be an object")
            return {}
        return value

    def choice(self, data: Dict[str, Any], key: str, path: str, options: Tuple[str, ...],
               default: Optional[str] = None) -> Optional[str]:
        value = data.get(key, default)
        if value is None:
            self.add(path, f"missing required field (one of {', '.join(options)})")
        elif value not in options:
            self.add(path, f"must be one of {', '.join(options)}, got {value!r}")
            return None
        return value

    def integer(self, data: Dict[str, Any], key: str, path: str, minimum: int = 0,
                default: Optional[int] = None, required: bool = True) -> Optional[int]:
        value = data.get(key, default)
        if value is None:
            if required:
                self.add(path, "missing required field")
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            self.add(path, f"must be an integer, got {value!r}")
            return None
        if value < minimum:
            self.add(path, f"must be >= {minimum}, got {value}")
            return None
        return value

    def number(self, data: Dict[str, Any], key: str, path: str, low: float, high: float,
               default: Optional[float] = None, open_low: bool = False, open_high: bool = False,
               required: bool = True) -> Optional[float]:
        value = data.get(key, default)
        if value is None:
            if required:
                self.add(path, "missing required field")
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.add(path, f"must be a number, got {value!r}")
            return None
        below = value <= low if open_low else value < low
        above = value >= high if open_high else value > high
        if below or above:
            interval = f"{'(' if open_low else '['}{low:g}, {high:g}{')' if open_high else ']'}"
            self.add(path, f"must lie in {interval}, got {value}")
            return None
        return float(value)

    def int_list(self, data: Dict[str, Any], key: str, path: str, minimum: int) -> List[int]:
        value = data.get(key)
        if value is None:
            self.add(path, "missing required field")
            return []
        if not isinstance(value, list) or not value:
            self.add(path, "must be a non-empty list")
            return []
        bad = [v for v in value if isinstance(v, bool) or not isinstance(v, int) or v < minimum]
        if bad:
            self.add(path, f"entries must be integers >= {minimum}, got {bad}")
            return []
        return list(value)


@dataclass(frozen=True)
class EnvironmentConfig:
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def discount(self) -> Optional[float]:
        return self.params.get("discount")

    def build(self) -> TabularMdp:
        """Construct the tabular MDP this environment describes"""
        p = self.params
        if self.kind == "deepsea":
            spec = DeepSeaSpec(grid_size=p["grid_size"], slip_prob=p["slip_prob"],
                               move_cost=p["move_cost"], discount=p["discount"])
            return build_deepsea(spec)
        if self.kind == "random":
            return build_random_mdp(p["n_states"], p["n_actions"], p["seed"],
                                    sparsity=p["sparsity"], discount=p["discount"])
        if self.kind == "chain":
            return build_chain_mdp(p["n_states"], slip_prob=p["slip_prob"], discount=p["discount"])
        return TabularMdp.load_json(p["path"])

    @classmethod
    def check(cls, data: Dict[str, Any], checker: _Checker, base_dir: Path) -> Optional["EnvironmentConfig"]:
        kind = checker.choice(data, "kind", "environment.kind", ENV_KINDS)
        if kind is None:
            return None
        params: Dict[str, Any] = {}
        if kind != "file":
            params["discount"] = checker.number(data, "discount", "environment.discount", 0.0, 1.0,
                                                default=DEFAULT_DISCOUNT[kind], open_low=True, open_high=True)
        if kind == "deepsea":
            params["grid_size"] = checker.integer(data, "grid_size", "environment.grid_size", minimum=1)
            params["slip_prob"] = checker.number(data, "slip_prob", "environment.slip_prob", 0.0, 0.5,
                                                 default=DEFAULT_SLIP_PROB)
            params["move_cost"] = checker.number(data, "move_cost", "environment.move_cost", 0.0, 1.0,
                                                 default=0.01)
            if None not in params.values():
                try:
                    DeepSeaSpec(grid_size=params["grid_size"], slip_prob=params["slip_prob"],
                                move_cost=params["move_cost"], discount=params["discount"])
                except InvalidModelError as e:
                    checker.add("environment", str(e))
        elif kind == "random":
            params["n_states"] = checker.integer(data, "n_states", "environment.n_states", minimum=1)
            params["n_actions"] = checker.integer(data, "n_actions", "environment.n_actions", minimum=1)
            params["seed"] = checker.integer(data, "seed", "environment.seed", default=0)
            params["sparsity"] = checker.number(data, "sparsity", "environment.sparsity", 0.0, 1.0,
                                                default=0.0, open_high=True)
        elif kind == "chain":
            params["n_states"] = checker.integer(data, "n_states", "environment.n_states", minimum=2)
            params["slip_prob"] = checker.number(data, "slip_prob", "environment.slip_prob", 0.0, 0.5,
                                                 default=0.0)
        else:
            path = data.get("path")
            if not isinstance(path, str) or not path:
                checker.add("environment.path", "missing required field")
            else:
                resolved = Path(path) if Path(path).is_absolute() else base_dir / path
                if not resolved.exists():
                    checker.add("environment.path", f"file not found: {resolved}")
                params["path"] = str(resolved)
        return cls(kind=kind, params=params)


@dataclass(frozen=True)
class EstimatorConfig:
    """Either explicit tree widths or accuracy targets resolved per depth

    `delta` is the confidence of the accuracy target, or with explicit widths
    the confidence of the recorded error bound b.
    """

    m_leaf: Optional[int] = None
    m_branch: Optional[int] = None
    horizon: Optional[int] = None
    epsilon: Optional[float] = None
    delta: Optional[float] = None

    @property
    def from_accuracy(self) -> bool:
        return self.epsilon is not None

    def params(self, h: int, gamma: float, n_actions: int, c_size: int, rng_seed: int) -> EstimatorParams:
        if self.from_accuracy:
            return params_for_accuracy(gamma, h, self.epsilon, self.delta, n_actions, c_size, rng_seed=rng_seed)
        return EstimatorParams.uniform(h=h, m=self.m_branch, m_leaf=self.m_leaf, horizon=self.horizon,
                                       rng_seed=rng_seed)

    def bias_bound(self, params: EstimatorParams, h: int, n_iters: int, mdp: TabularMdp) -> float:
        """Error b of every lookahead estimate over the run

        With accuracy targets b is the target itself. With explicit widths it is
        the high-probability bound over all pairs and iterations at confidence
        delta, capped at 1/(1-gamma) since estimates are clipped to [0, 1/(1-gamma)].
        """
        gamma = mdp.discount
        if self.from_accuracy:
            return accuracy_target(gamma, h, self.epsilon)
        b = estimation_error_bound(gamma, h, mdp.n_actions, leaf_set_size=mdp.n_states, params=params,
                                   delta=self.delta / n_iters, c_size=mdp.n_states * mdp.n_actions)
        return min(b, 1.0 / (1.0 - gamma))

    @classmethod
    def check(cls, data: Dict[str, Any], checker: _Checker) -> Optional["EstimatorConfig"]:
        path = "algorithm.estimator"
        if "epsilon" in data:
            epsilon = checker.number(data, "epsilon", f"{path}.epsilon", 0.0, float("inf"), open_low=True)
            delta = checker.number(data, "delta", f"{path}.delta", 0.0, 1.0, open_low=True, open_high=True)
            return cls(epsilon=epsilon, delta=delta)
        return cls(
            m_leaf=checker.integer(data, "m_leaf", f"{path}.m_leaf", minimum=1),
            m_branch=checker.integer(data, "m_branch", f"{path}.m_branch", minimum=1),
            horizon=checker.integer(data, "horizon", f"{path}.horizon", minimum=1),
            delta=checker.number(data, "delta", f"{path}.delta", 0.0, 1.0, default=DEFAULT_BOUND_DELTA,
                                 open_low=True, open_high=True),
        )


@dataclass(frozen=True)
class FeatureConfig:
    kind: str = "one_hot"
    dim: Optional[int] = None
    seed: int = 0
    path: Optional[str] = None


@dataclass(frozen=True)
class AlgorithmConfig:
    mode: str
    n_iters: int
    mirror: MirrorMap
    stepsize: StepsizeMode
    schedule: str
    tol: Optional[float] = None
    estimator: Optional[EstimatorConfig] = None
    features: Optional[FeatureConfig] = None
    policy_storage: str = "tabular"
    on_demand_stepsize: str = "per_state"
    eps_kw: float = 0.01

    def schedule_for(self, gamma: float, h: int) -> StepsizeSchedule:
        depth = h if self.schedule == "per_h" else 1
        if self.stepsize is StepsizeMode.INFINITE:
            return StepsizeSchedule.infinite(gamma, depth)
        return StepsizeSchedule(gamma=gamma, h=depth)


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentConfig
    algorithm: AlgorithmConfig
    h_values: List[int]
    seeds: List[int]
    output_dir: Path
    threshold: float = 1e-3
    record_wall_time: bool = False

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Union[str, Path] = ".") -> "ExperimentConfig":
        """Validate a merged config tree; every problem is reported at once"""
        checker = _Checker()
        environment = EnvironmentConfig.check(checker.section(data, "environment"), checker, Path(base_dir))
        algorithm = cls._check_algorithm(checker.section(data, "algorithm"), checker, Path(base_dir))
        sweep = checker.section(data, "sweep")
        h_values = checker.int_list(sweep, "h", "sweep.h", minimum=1)
        seeds = checker.int_list(sweep, "seeds", "sweep.seeds", minimum=0) if "seeds" in sweep else [0]
        threshold = checker.number(data, "threshold", "threshold", 0.0, float("inf"),
                                   default=1e-3, open_low=True)
        output_dir = data.get("output_dir", "results")
        if not isinstance(output_dir, str) or not output_dir:
            checker.add("output_dir", "must be a non-empty path")
        record_wall_time = data.get("record_wall_time", False)
        if not isinstance(record_wall_time, bool):
            checker.add("record_wall_time", "must be true or false")
        if environment is not None and algorithm is not None and algorithm.features is not None:
            cls._check_tiles(environment, algorithm.features, checker)

        if checker.issues:
            raise ConfigError(checker.issues)
        return cls(environment=environment, algorithm=algorithm, h_values=h_values, seeds=seeds,
                   output_dir=Path(output_dir), threshold=threshold, record_wall_time=record_wall_time)

    @staticmethod
    def _check_tiles(environment: EnvironmentConfig, features: FeatureConfig, checker: _Checker) -> None:
        if features.kind != "tiles":
            return
        if environment.kind != "deepsea":
            checker.add("algorithm.features.kind", "tiles need a deepsea environment")
            return
        grid_size = environment.params.get("grid_size")
        if grid_size is not None and (grid_size % TILE_ROWS or grid_size % TILE_COLS):
            checker.add("algorithm.features.kind",
                        f"tiles need a grid_size divisible by {TILE_ROWS} and {TILE_COLS}, got {grid_size}")

    @staticmethod
    def _check_algorithm(data: Dict[str, Any], checker: _Checker, base_dir: Path) -> Optional[AlgorithmConfig]:
        mode = checker.choice(data, "mode", "algorithm.mode", MODES, default="exact")
        n_iters = checker.integer(data, "n_iters", "algorithm.n_iters", minimum=1, default=100)
        mirror = checker.choice(data, "mirror", "algorithm.mirror", ("kl", "euclidean"), default="kl")
        stepsize = checker.choice(data, "stepsize", "algorithm.stepsize", ("adaptive", "infinite"),
                                  default="adaptive")
        schedule = checker.choice(data, "schedule", "algorithm.schedule", SCHEDULES, default="per_h")
        tol = checker.number(data, "tol", "algorithm.tol", 0.0, float("inf"), open_low=True, required=False)
        eps_kw = checker.number(data, "eps_kw", "algorithm.eps_kw", 0.0, 0.1, default=0.01, open_low=True)
        storage = checker.choice(data, "policy_storage", "algorithm.policy_storage", STORAGES,
                                 default="tabular")
        scope = checker.choice(data, "on_demand_stepsize", "algorithm.on_demand_stepsize", STEPSIZE_SCOPES,
                               default="per_state")

        estimator = None
        if mode in ("inexact", "linear_fa"):
            est = data.get("estimator")
            if not isinstance(est, dict):
                checker.add("algorithm.estimator", f"required for mode {mode!r}")
            else:
                estimator = EstimatorConfig.check(est, checker)

        features = None
        if mode == "linear_fa":
            feat = data.get("features")
            if not isinstance(feat, dict):
                checker.add("algorithm.features", "required for mode 'linear_fa'")
            else:
                kind = checker.choice(feat, "kind", "algorithm.features.kind", FEATURE_KINDS)
                dim = checker.integer(feat, "dim", "algorithm.features.dim", minimum=1,
                                      required=kind == "random")
                seed = checker.integer(feat, "seed", "algorithm.features.seed", default=0)
                path = feat.get("path")
                if kind == "file":
                    if not isinstance(path, str) or not path:
                        checker.add("algorithm.features.path", "missing required field")
                    else:
                        path = str(Path(path) if Path(path).is_absolute() else base_dir / path)
                        if not Path(path).exists():
                            checker.add("algorithm.features.path", f"file not found: {path}")
                features = FeatureConfig(kind=kind, dim=dim, seed=seed or 0, path=path)

        if None in (mode, n_iters, mirror, stepsize, schedule, eps_kw, storage, scope):
            return None
        return AlgorithmConfig(mode=mode, n_iters=n_iters, mirror=MirrorMap(mirror),
                               stepsize=StepsizeMode(stepsize), schedule=schedule, tol=tol,
                               estimator=estimator, features=features, policy_storage=storage,
                               on_demand_stepsize=scope, eps_kw=eps_kw)

    def run_config(self, h: int, seed: int, mdp: TabularMdp) -> RunConfig:
        """RunConfig for one sweep cell"""
        algorithm = self.algorithm
        params = bias_bound = None
        mode = EstimationMode.EXACT
        if algorithm.mode != "exact":
            mode = EstimationMode.INEXACT
            try:
                params = algorithm.estimator.params(h, mdp.discount, mdp.n_actions,
                                                    mdp.n_states * mdp.n_actions, seed)
            except (HpmdError, OverflowError) as e:
                raise ConfigError([ConfigIssue("algorithm.estimator", str(e))]) from e
            bias_bound = algorithm.estimator.bias_bound(params, h, algorithm.n_iters, mdp)
        return RunConfig(
            h=h,
            n_iters=algorithm.n_iters,
            mirror=algorithm.mirror,
            schedule=algorithm.schedule_for(mdp.discount, h),
            mode=mode,
            estimator=params,
            seed=seed,
            tol=algorithm.tol if mode is EstimationMode.EXACT else None,
            bias_bound=bias_bound,
            record_wall_time=self.record_wall_time,
        )


def load_experiment(path: Union[str, Path], output_dir: Optional[str] = None) -> ExperimentConfig:
    """Read, merge and validate an experiment file"""
    config = Config(path)
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        config.set("output_dir", env_dir)
    if output_dir:
        config.set("output_dir", output_dir)
    experiment = ExperimentConfig.from_dict(config.config_data, base_dir=Path(path).resolve().parent)
    logger.debug("loaded experiment from %s: kind=%s, mode=%s, h=%s, seeds=%s", path,
                 experiment.environment.kind, experiment.algorithm.mode, experiment.h_values, experiment.seeds)
    return experiment

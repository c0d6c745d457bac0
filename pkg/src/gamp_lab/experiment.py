"""Experiment configuration, estimator selection and Monte Carlo driver."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DivergenceError, EstimatorError, InvalidArgumentError
from .gamp import RunConfig, run_gamp
from .input_channels import input_estimator_for
from .model import CONVENTIONS, median_trace, sample_problem
from .output_channels import output_estimator_for
from .specs import (
    AwgnInputSpec,
    AwgnOutputSpec,
    BernoulliGaussianSpec,
    SigmoidAwgnSpec,
    input_spec_from_dict,
    output_spec_from_dict,
    spec_to_dict,
)
from .state_evolution import DEFAULT_RESOLUTION, se_gains, se_run

ESTIMATORS = ("nl_gamp", "lin_gamp", "max_sum", "custom")
MAX_FAILURE_FRACTION = 0.2


@dataclass
class ExperimentConfig:
    n: int = 1000
    m: int = 500
    convention: str = "one_over_n"
    input: dict = field(default_factory=lambda: spec_to_dict(BernoulliGaussianSpec(0.1, 1.0)))
    output: dict = field(default_factory=lambda: spec_to_dict(SigmoidAwgnSpec(6.1, 0.01)))
    variant: str = "full"
    estimators: list = field(default_factory=lambda: ["nl_gamp", "lin_gamp"])
    custom_input_method: str = "sum_product"
    custom_output_method: str = "sum_product"
    lin_center: bool = False
    trials: int = 100
    base_seed: int = 0
    max_iters: int = 20
    stop_tol: float = 1e-8
    damping: float = 1.0
    se_modifications: bool = False
    se_resolution: int = DEFAULT_RESOLUTION
    out_dir: str = "results"
    formats: list = field(default_factory=lambda: ["csv", "json"])

    def __post_init__(self):
        self.validate()

    @property
    def input_spec(self):
        return input_spec_from_dict(self.input)

    @property
    def output_spec(self):
        return output_spec_from_dict(self.output)

    def validate(self):
        for name in ("n", "m", "trials", "max_iters", "se_resolution"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}", field=name)
        if isinstance(self.base_seed, bool) or not isinstance(self.base_seed, int) or self.base_seed < 0:
            raise ConfigError(f"base_seed must be a nonnegative integer, got {self.base_seed!r}", field="base_seed")
        if self.convention not in CONVENTIONS:
            raise ConfigError(f"convention must be one of {CONVENTIONS}", field="convention")
        if self.variant not in ("full", "scalar_variance"):
            raise ConfigError("variant must be 'full' or 'scalar_variance'", field="variant")
        if not self.estimators or any(e not in ESTIMATORS for e in self.estimators):
            raise ConfigError(f"estimators must be a nonempty subset of {ESTIMATORS}", field="estimators")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping must lie in (0, 1]", field="damping")
        if self.se_modifications and self.variant != "scalar_variance":
            raise ConfigError("se_modifications requires variant 'scalar_variance'", field="se_modifications")
        in_spec, out_spec = self.input_spec, self.output_spec
        for sel in self.estimators:
            try:
                build_estimators(self, sel, in_spec, out_spec)
            except InvalidArgumentError as exc:
                raise ConfigError(f"estimator {sel!r} is incompatible with the channel specs: {exc}", field="estimators") from None

    def run_config(self) -> RunConfig:
        return RunConfig(
            max_iters=self.max_iters,
            stop_tol=self.stop_tol,
            damping=self.damping,
            variant=self.variant,
            se_modifications=self.se_modifications,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field {unknown[0]!r}", field=unknown[0])
        d = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**d)

    @classmethod
    def from_json(cls, text: str, **overrides) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config: {exc.msg}", line=exc.lineno) from None
        return cls.from_dict(d, **overrides)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read(), **overrides)


def build_estimators(config: ExperimentConfig, selection: str, in_spec=None, out_spec=None):
    """(input estimator, output estimator) for a named selection."""
    in_spec = in_spec or config.input_spec
    out_spec = out_spec or config.output_spec
    if selection == "nl_gamp":
        return input_estimator_for(in_spec), output_estimator_for(out_spec)
    if selection == "lin_gamp":
        return input_estimator_for(in_spec), output_estimator_for(out_spec, "linearized", center=config.lin_center)
    if selection == "max_sum":
        return input_estimator_for(in_spec, "max_sum"), output_estimator_for(out_spec, "max_sum")
    if selection == "custom":
        return (
            input_estimator_for(in_spec, config.custom_input_method),
            output_estimator_for(out_spec, config.custom_output_method, center=config.lin_center),
        )
    raise InvalidArgumentError(f"unknown estimator selection {selection!r}")


def sample_instance(config: ExperimentConfig, seed: int):
    return sample_problem(config.n, config.m / config.n, config.input_spec, config.output_spec, config.convention, seed, m=config.m)


def run_se(config: ExperimentConfig, selection: str):
    in_est, out_est = build_estimators(config, selection)
    c_out, c_in = se_gains(config.m, config.n, config.convention)
    trace = se_run(config.input_spec, config.output_spec, in_est, out_est, c_out, config.max_iters, config.se_resolution, c_in=c_in)
    trace.metadata.update({"base_seed": config.base_seed, "estimator": selection})
    return trace


def run_single(config: ExperimentConfig, selection: str, instance, se_trace=None):
    in_est, out_est = build_estimators(config, selection)
    if config.se_modifications and se_trace is None:
        se_trace = run_se(config, selection)
    return run_gamp(instance, in_est, out_est, config.run_config(), se_trace=se_trace)


def pad_trace(values, length):
    """Hold a converged run at its final value so every trial has ``length`` records."""
    values = list(values)
    return values + [values[-1]] * (length - len(values))


def _trial_worker(args):
    config_dict, selection, trial, se_trace = args
    config = ExperimentConfig.from_dict(config_dict)
    seed = config.base_seed + trial
    instance = sample_instance(config, seed)
    try:
        _, trace = run_single(config, selection, instance, se_trace)
    except (DivergenceError, EstimatorError) as exc:
        partial = exc.trace.nse_db if exc.trace is not None else []
        return {"trial": trial, "seed": seed, "ok": False, "error": str(exc), "nse_db": partial}
    return {"trial": trial, "seed": seed, "ok": True, "nse_db": trace.nse_db, "iterations": trace.iterations}


def worker_count(requested=None) -> int:
    env = os.environ.get("GAMP_LAB_THREADS")
    limit = None
    if env:
        try:
            limit = int(env)
        except ValueError:
            raise ConfigError(f"GAMP_LAB_THREADS must be an integer, got {env!r}", field="GAMP_LAB_THREADS") from None
        if limit < 1:
            raise ConfigError("GAMP_LAB_THREADS must be positive", field="GAMP_LAB_THREADS")
    n = requested or limit or 1
    return max(1, min(n, limit) if limit else n)


@dataclass
class MonteCarloResult:
    selection: str
    trials: list
    median: np.ndarray
    failures: int

    @property
    def ok_trials(self):
        return [t for t in self.trials if t["ok"]]


def run_montecarlo(config: ExperimentConfig, selection: str, workers=None, se_trace=None) -> MonteCarloResult:
    """Trial t uses seed base_seed + t; results are ordered by trial index."""
    if config.se_modifications and se_trace is None:
        se_trace = run_se(config, selection)
    jobs = [(config.to_dict(), selection, t, se_trace) for t in range(config.trials)]
    workers = worker_count(workers)
    if workers == 1:
        results = [_trial_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_worker, jobs))
    results.sort(key=lambda r: r["trial"])
    failures = sum(not r["ok"] for r in results)
    if failures and failures >= MAX_FAILURE_FRACTION * config.trials:
        first = next(r for r in results if not r["ok"])
        raise DivergenceError(f"{failures} of {config.trials} trials failed for {selection}; first: {first['error']}", iteration=None)
    length = config.max_iters + 1
    traces = [pad_trace(r["nse_db"], length) for r in results if r["ok"]]
    return MonteCarloResult(selection, results, median_trace(traces), failures)


def lmmse_oracle(instance):
    """Dense solve of the Gaussian-prior / AWGN-output MAP = MMSE estimate."""
    if not isinstance(instance.input_spec, AwgnInputSpec) or not isinstance(instance.output_spec, AwgnOutputSpec):
        raise ConfigError("the LMMSE oracle needs an awgn_input prior and an awgn output channel", field="input")
    A, y, q = instance.A, instance.y, instance.q
    c = instance.input_spec.var / instance.output_spec.noise_var
    lhs = np.eye(instance.n) + c * (A.T @ A)
    return q + np.linalg.solve(lhs, c * (A.T @ (y - A @ q)))

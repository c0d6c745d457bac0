"""Channel specifications: plain, immutable, JSON-serializable descriptions.

Behaviour (sampling, likelihoods, estimators) lives in ``model``,
``input_channels`` and ``output_channels``; these classes only carry and
validate parameters.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError


def _positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise ConfigError(f"{name} must be positive, got {value!r}", field=name)


@dataclass(frozen=True)
class AwgnInputSpec:
    """x ~ N(mean, var); the mean is delivered to the estimator through q."""

    mean: float = 0.0
    var: float = 1.0
    kind: str = field(default="awgn_input", init=False)

    def __post_init__(self):
        _positive("var", self.var)


@dataclass(frozen=True)
class BernoulliGaussianSpec:
    """x = 0 with probability 1 - rho, otherwise N(active_mean, active_var)."""

    rho: float = 0.1
    active_var: float = 1.0
    active_mean: float = 0.0
    kind: str = field(default="bernoulli_gaussian", init=False)

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho!r}", field="rho")
        _positive("active_var", self.active_var)


@dataclass(frozen=True)
class LaplacianSpec:
    """Density (scale/2) exp(-scale |x|)."""

    scale: float = 1.0
    kind: str = field(default="laplacian", init=False)

    def __post_init__(self):
        _positive("scale", self.scale)


@dataclass(frozen=True)
class DiscreteSpec:
    points: tuple = (-1.0, 1.0)
    probs: tuple = (0.5, 0.5)
    kind: str = field(default="discrete", init=False)

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(float(p) for p in self.points))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.points) != len(self.probs) or not self.points:
            raise ConfigError("points and probs must be nonempty and of equal length", field="probs")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            raise ConfigError("discrete probabilities must be nonnegative and sum to 1", field="probs")


@dataclass(frozen=True)
class AwgnOutputSpec:
    """y = z + w, w ~ N(0, noise_var)."""

    noise_var: float = 0.01
    kind: str = field(default="awgn", init=False)

    def __post_init__(self):
        _positive("noise_var", self.noise_var)


@dataclass(frozen=True)
class SigmoidAwgnSpec:
    """y = 1 / (1 + exp(-scale z)) + w, w ~ N(0, noise_var)."""

    scale: float = 6.1
    noise_var: float = 0.01
    kind: str = field(default="sigmoidal_awgn", init=False)

    def __post_init__(self):
        _positive("scale", self.scale)
        _positive("noise_var", self.noise_var)


@dataclass(frozen=True)
class LogisticSpec:
    """P(y = 1 | z) = 1 / (1 + scale exp(-z)), y in {0, 1}."""

    scale: float = 1.0
    kind: str = field(default="logistic", init=False)

    def __post_init__(self):
        _positive("scale", self.scale)


INPUT_SPECS = {cls.kind: cls for cls in (AwgnInputSpec, BernoulliGaussianSpec, LaplacianSpec, DiscreteSpec)}
OUTPUT_SPECS = {cls.kind: cls for cls in (AwgnOutputSpec, SigmoidAwgnSpec, LogisticSpec)}


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d


def _spec_from_dict(d, registry, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} spec must be an object", field=what)
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in registry:
        raise ConfigError(f"unknown {what} kind {kind!r}; expected one of {sorted(registry)}", field=f"{what}.kind")
    cls = registry[kind]
    allowed = {name for name, f in cls.__dataclass_fields__.items() if f.init}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} field(s) {sorted(unknown)} for kind {kind!r}", field=f"{what}.{sorted(unknown)[0]}")
    try:
        return cls(**d)
    except ConfigError as exc:
        raise ConfigError(str(exc), field=f"{what}.{exc.field}") from None
    except TypeError as exc:
        raise ConfigError(f"bad {what} spec: {exc}", field=what) from None


def input_spec_from_dict(d):
    return _spec_from_dict(d, INPUT_SPECS, "input")


def output_spec_from_dict(d):
    return _spec_from_dict(d, OUTPUT_SPECS, "output")

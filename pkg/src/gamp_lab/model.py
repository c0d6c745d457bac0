"""Problem instances for the linear mixing model and error metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidArgumentError
from .input_channels import default_q, prior_from_spec
from .output_channels import channel_from_spec
from .specs import input_spec_from_dict, output_spec_from_dict, spec_to_dict

CONVENTIONS = ("one_over_m", "one_over_n")
NSE_FLOOR_DB = -200.0


def matrix_variance(m: int, n: int, convention: str) -> float:
    if convention == "one_over_m":
        return 1.0 / m
    if convention == "one_over_n":
        return 1.0 / n
    raise InvalidArgumentError(f"unknown matrix variance convention {convention!r}; expected one of {CONVENTIONS}")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ProblemInstance:
    A: np.ndarray
    q: np.ndarray
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    w: np.ndarray
    input_spec: object
    output_spec: object
    seed: int
    convention: str = "one_over_n"

    def __post_init__(self):
        for name in ("A", "q", "x", "z", "y", "w"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        m, n = self.A.shape
        if self.q.shape != (n,) or self.x.shape != (n,):
            raise InvalidArgumentError("q and x must have length n")
        if self.z.shape != (m,) or self.y.shape != (m,) or self.w.shape != (m,):
            raise InvalidArgumentError("z, y and w must have length m")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def matrix_var(self) -> float:
        return matrix_variance(self.m, self.n, self.convention)

    def to_dict(self, include_arrays: bool = True) -> dict:
        d = {
            "n": self.n,
            "m": self.m,
            "convention": self.convention,
            "seed": int(self.seed),
            "input": spec_to_dict(self.input_spec),
            "output": spec_to_dict(self.output_spec),
        }
        if include_arrays:
            for name in ("A", "q", "x", "z", "y", "w"):
                d[name] = getattr(self, name).tolist()
        return d

    def to_json(self, include_arrays: bool = True) -> str:
        return json.dumps(self.to_dict(include_arrays), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemInstance":
        """Rebuild an instance; without stored arrays it is regenerated from the seed."""
        try:
            n, m, seed = int(d["n"]), int(d["m"]), int(d["seed"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"instance file is missing or has a bad field: {exc}", field=str(exc)) from None
        convention = d.get("convention", "one_over_n")
        in_spec = input_spec_from_dict(d["input"])
        out_spec = output_spec_from_dict(d["output"])
        if "A" not in d:
            return sample_problem(n, m / n, in_spec, out_spec, convention, seed, m=m)
        arrays = {k: np.asarray(d[k], dtype=float) for k in ("A", "q", "x", "z", "y", "w")}
        arrays["A"] = arrays["A"].reshape(m, n)
        return cls(input_spec=in_spec, output_spec=out_spec, seed=seed, convention=convention, **arrays)


def sample_problem(n, ratio, input_spec, output_spec, convention="one_over_n", seed=0, q=None, m=None) -> ProblemInstance:
    """Draw ``A``, ``x`` and ``w`` (in that order) from one seeded generator.

    ``ratio`` is m/n; pass ``m`` to set the row count directly.
    """
    if int(n) != n or n < 1:
        raise InvalidArgumentError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    if m is None:
        m = int(round(ratio * n))
    if m < 1:
        raise InvalidArgumentError(f"m must be at least 1 (n={n}, ratio={ratio})")
    rng = np.random.default_rng(int(seed))
    A = np.sqrt(matrix_variance(m, n, convention)) * rng.standard_normal((m, n))
    q = default_q(input_spec, n) if q is None else np.asarray(q, dtype=float)
    x = prior_from_spec(input_spec).sample(n, rng, q)
    channel = channel_from_spec(output_spec)
    w = channel.sample_noise(m, rng)
    z = A @ x
    y = channel.forward(z, w)
    return ProblemInstance(A, q, x, z, y, w, input_spec, output_spec, int(seed), convention)


def nse_db(x, xhat) -> float:
    """10 log10(|x - xhat|^2 / |x|^2), floored at -200 dB."""
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    if x.shape != xhat.shape:
        raise InvalidArgumentError("x and xhat must have equal lengths")
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    if scale == 0:
        raise InvalidArgumentError("nse is undefined for x = 0")
    # rescale so tiny or huge signals neither underflow nor overflow when squared
    x, xhat = x / scale, xhat / scale
    den = float(np.dot(x, x))
    num = float(np.sum((x - xhat) ** 2))
    if num == 0:
        return NSE_FLOOR_DB
    return max(NSE_FLOOR_DB, 10.0 * np.log10(num / den))


def median_trace(traces) -> np.ndarray:
    """Per-iteration lower median (order statistic ceil(T/2)) over T traces."""
    if len(traces) == 0:
        raise InvalidArgumentError("median_trace needs at least one trace")
    if len({len(t) for t in traces}) != 1:
        raise InvalidArgumentError("all traces must have the same length")
    arr = np.asarray(traces, dtype=float)
    if arr.ndim != 2:
        raise InvalidArgumentError("all traces must have the same length")
    k = (arr.shape[0] + 1) // 2 - 1
    return np.sort(arr, axis=0)[k]

"""GAMP iterations with componentwise (full) or scalar variances."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .csvio import dumps_table, loads_table
from .errors import DivergenceError, EstimatorError, GampLabError, InvalidArgumentError
from .input_channels import TAU_CEIL, TAU_FLOOR
from .model import nse_db

VARIANTS = ("full", "scalar_variance")
TRACE_COLUMNS = ("iter", "nse_db", "tau_x_mean", "tau_p_mean", "tau_r_mean", "step_residual", "clamp_count")


@dataclass(frozen=True)
class RunConfig:
    max_iters: int = 20
    stop_tol: float = 1e-8
    min_iters: int = 2
    tau_floor: float = TAU_FLOOR
    tau_ceil: float = TAU_CEIL
    quad_order: int = 40
    damping: float = 1.0
    variant: str = "full"
    se_modifications: bool = False
    onsager: bool = True

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise InvalidArgumentError(f"max_iters must be a positive integer, got {self.max_iters!r}")
        if not 0 < self.damping <= 1:
            raise InvalidArgumentError(f"damping must lie in (0, 1], got {self.damping!r}")
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 < self.tau_floor < self.tau_ceil:
            raise InvalidArgumentError("need 0 < tau_floor < tau_ceil")
        if self.stop_tol < 0:
            raise InvalidArgumentError("stop_tol must be nonnegative")


@dataclass
class GampState:
    xhat: np.ndarray
    taux: np.ndarray
    shat: np.ndarray
    phat: np.ndarray | None = None
    zhat: np.ndarray | None = None
    taup: np.ndarray | None = None
    rhat: np.ndarray | None = None
    taur: np.ndarray | None = None
    taus: np.ndarray | None = None
    t: int = 0


@dataclass
class GampTrace:
    nse_db: list = field(default_factory=list)
    tau_x_mean: list = field(default_factory=list)
    tau_p_mean: list = field(default_factory=list)
    tau_r_mean: list = field(default_factory=list)
    step_residual: list = field(default_factory=list)
    clamp_count: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, nse, taux, taup, taur, residual, clamps):
        self.nse_db.append(float(nse))
        self.tau_x_mean.append(float(np.mean(taux)))
        self.tau_p_mean.append(float(np.mean(taup)) if taup is not None else float("nan"))
        self.tau_r_mean.append(float(np.mean(taur)) if taur is not None else float("nan"))
        self.step_residual.append(float(residual))
        self.clamp_count.append(int(clamps))

    def __len__(self):
        return len(self.nse_db)

    @property
    def iterations(self) -> int:
        """Number of completed iterations (record 0 is the initialization)."""
        return len(self) - 1

    def rows(self):
        cols = (self.nse_db, self.tau_x_mean, self.tau_p_mean, self.tau_r_mean, self.step_residual, self.clamp_count)
        return [[i, *vals] for i, vals in enumerate(zip(*cols))]

    def to_csv(self) -> str:
        return dumps_table(TRACE_COLUMNS, self.rows(), self.metadata)

    @classmethod
    def from_csv(cls, text: str) -> "GampTrace":
        columns, rows, metadata = loads_table(text)
        if tuple(columns) != TRACE_COLUMNS:
            raise InvalidArgumentError(f"unexpected trace columns {columns}")
        tr = cls(metadata=metadata)
        for row in rows:
            tr.nse_db.append(float(row[1]))
            tr.tau_x_mean.append(float(row[2]))
            tr.tau_p_mean.append(float(row[3]))
            tr.tau_r_mean.append(float(row[4]))
            tr.step_residual.append(float(row[5]))
            tr.clamp_count.append(int(row[6]))
        return tr

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def damped_update(old, new, damping):
    """Convex blend ``damping * new + (1 - damping) * old``; damping = 1 returns ``new``."""
    if not 0 < damping <= 1:
        raise InvalidArgumentError(f"damping must lie in (0, 1], got {damping!r}")
    if damping == 1:
        return new
    return damping * np.asarray(new) + (1.0 - damping) * np.asarray(old)


class _Clamp:
    def __init__(self, lo, hi):
        self.lo, self.hi, self.count = lo, hi, 0

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(np.isnan(tau)):
            return tau  # left for the divergence check
        low, high = tau < self.lo, tau > self.hi
        self.count += int(np.count_nonzero(low) + np.count_nonzero(high))
        return np.clip(tau, self.lo, self.hi)


def _safe_nse(x, xhat):
    if not np.any(x):
        return float("nan")
    return nse_db(x, xhat)


def _residual(old, new):
    den = np.linalg.norm(old)
    num = np.linalg.norm(new - old)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / den)


def _call_estimator(fn, t, trace, *args):
    try:
        a, b = fn(*args)
    except GampLabError as exc:
        raise EstimatorError(str(exc), t, getattr(exc, "index", None), trace) from exc
    return np.asarray(a, dtype=float), np.asarray(b, dtype=float)


def _check_finite(t, trace, **arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite values in {name} at iteration {t}", t, trace)


def _run(instance, in_est, out_est, config, scalar, se_trace=None, callback=None):
    A = instance.A
    y, q = instance.y, instance.q
    x_true = instance.x
    m, n = A.shape
    clamp = _Clamp(config.tau_floor, config.tau_ceil)
    trace = GampTrace(metadata={"seed": int(instance.seed), "variant": "scalar_variance" if scalar else "full"})

    if scalar:
        if config.se_modifications:
            if se_trace is None:
                raise InvalidArgumentError("se_modifications needs a state-evolution trace")
            if len(se_trace.tau_p_bar) < config.max_iters:
                raise InvalidArgumentError("state-evolution trace is shorter than max_iters")
            fro2 = m * n * instance.matrix_var
        else:
            fro2 = float(np.sum(A * A))
    else:
        A2 = A * A

    xhat, taux = _call_estimator(in_est.init, 0, trace, q)
    xhat = np.broadcast_to(xhat, (n,)).astype(float)
    taux = clamp(np.broadcast_to(taux, (n,)).astype(float))
    if scalar:
        taux = np.float64(np.mean(taux))
    shat = np.zeros(m)
    state = GampState(xhat=xhat, taux=taux, shat=shat, t=0)
    trace.append(_safe_nse(x_true, xhat), taux, None, None, float("nan"), clamp.count)
    if callback is not None:
        callback(0, state)

    for t in range(config.max_iters):
        clamp.count = 0
        # output linear step
        if scalar:
            taup = se_trace.tau_p_bar[t] if config.se_modifications else fro2 / m * taux
            taup = clamp(np.float64(taup))
        else:
            taup = clamp(A2 @ taux)
        zhat = A @ xhat
        phat = zhat - taup * shat if config.onsager else zhat.copy()
        _check_finite(t + 1, trace, phat=phat, taup=taup)
        # output nonlinear step
        shat_new, taus = _call_estimator(out_est, t + 1, trace, phat, y, np.broadcast_to(taup, (m,)))
        _check_finite(t + 1, trace, shat=shat_new)
        taus = np.where(np.isposinf(taus), config.tau_ceil, taus)
        taus = clamp(np.mean(taus) if scalar else taus)
        shat = damped_update(shat, shat_new, config.damping)
        # input linear step
        if scalar:
            taur = se_trace.tau_r_bar[t] if config.se_modifications else 1.0 / (fro2 / n * taus)
            taur = clamp(np.float64(taur))
        else:
            taur = clamp(1.0 / (A2.T @ taus))
        rhat = xhat + taur * (A.T @ shat)
        _check_finite(t + 1, trace, rhat=rhat, taur=taur, taus=taus)
        # input nonlinear step
        xhat_new, taux_new = _call_estimator(in_est, t + 1, trace, rhat, q, np.broadcast_to(taur, (n,)))
        _check_finite(t + 1, trace, xhat=xhat_new, taux=taux_new)
        taux = clamp(np.mean(taux_new) if scalar else taux_new)
        xhat_new = damped_update(xhat, xhat_new, config.damping)
        residual = _residual(xhat, xhat_new)
        xhat = xhat_new
        state = GampState(xhat=xhat, taux=taux, shat=shat, phat=phat, zhat=zhat, taup=taup, rhat=rhat, taur=taur, taus=taus, t=t + 1)
        trace.append(_safe_nse(x_true, xhat), taux, taup, taur, residual, clamp.count)
        if callback is not None:
            callback(t + 1, state)
        if t + 1 >= config.min_iters and residual < config.stop_tol:
            break
    return state, trace


def run_gamp_full(instance, in_est, out_est, config: RunConfig | None = None, callback=None):
    """Componentwise-variance GAMP.

    Returns ``(final_state, trace)``.  ``callback(t, state)`` is invoked after
    initialization (t = 0) and after every iteration.
    """
    return _run(instance, in_est, out_est, config or RunConfig(), scalar=False, callback=callback)


def run_gamp_scalar(instance, in_est, out_est, config: RunConfig | None = None, se_trace=None, callback=None):
    """GAMP with all variances collapsed to scalars.

    With ``config.se_modifications`` the variances tau_p and tau_r come from
    ``se_trace`` and the Frobenius norm of A is replaced by its expectation.
    """
    return _run(instance, in_est, out_est, config or RunConfig(variant="scalar_variance"), scalar=True, se_trace=se_trace, callback=callback)


def run_gamp(instance, in_est, out_est, config: RunConfig | None = None, se_trace=None, callback=None):
    config = config or RunConfig()
    if config.variant == "full":
        return run_gamp_full(instance, in_est, out_est, config, callback)
    return run_gamp_scalar(instance, in_est, out_est, config, se_trace, callback)

"""Output channels p(y | z) and the scalar output estimation functions g_out.

Two kinds of objects live here:

* ``*Channel`` classes describe the *true* channel ``y = h(z, w)``: they
  sample, evaluate likelihoods and tell the state-evolution engine how to
  integrate over y.
* ``*Output`` estimators map ``(phat, y, taup)`` to ``(shat, taus)`` with
  ``taus = -d g_out / d phat``.  They may be matched to a channel or not
  (the linearized estimator is deliberately mismatched).
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit

from .errors import DegeneratePosteriorError, InvalidArgumentError
from .numerics import maximize_scalar
from .specs import AwgnOutputSpec, LogisticSpec, SigmoidAwgnSpec

_LOG_2PI = np.log(2 * np.pi)


def sigmoid(z, scale):
    return expit(scale * np.asarray(z, dtype=float))


def sigmoidal_awgn_likelihood(y, z, scale, noise_var):
    """N(y; 1 / (1 + exp(-scale z)), noise_var)."""
    mean = sigmoid(z, scale)
    return np.exp(-0.5 * (np.asarray(y) - mean) ** 2 / noise_var) / np.sqrt(2 * np.pi * noise_var)


def logistic_likelihood(y, z, scale):
    """P(y | z) with P(y = 1 | z) = 1 / (1 + scale exp(-z))."""
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgumentError("logistic outputs must be 0 or 1")
    p1 = expit(np.asarray(z, dtype=float) - np.log(scale))
    return np.where(y == 1, p1, 1.0 - p1)


# --------------------------------------------------------------------------
# true channels
# --------------------------------------------------------------------------

class OutputChannel:
    discrete = False
    additive = False  # y = f(z) + w with w ~ N(0, noise_var)

    def loglik(self, y, z):
        raise NotImplementedError

    def likelihood(self, y, z):
        return np.exp(self.loglik(y, z))

    def forward(self, z, w):
        raise NotImplementedError

    def sample_noise(self, m, rng):
        raise NotImplementedError

    def sample_forward(self, z, rng):
        w = self.sample_noise(np.size(z), rng)
        return self.forward(z, w), w

    # conditional moments of y given z
    def y_mean(self, z):
        raise NotImplementedError

    def y_mean_deriv(self, z):
        raise NotImplementedError

    def y_var(self, z):
        raise NotImplementedError


class _AdditiveGaussianChannel(OutputChannel):
    """y = f(z) + w, w ~ N(0, noise_var)."""

    additive = True

    def mean_fn(self, z):
        raise NotImplementedError

    def mean_fn_deriv(self, z):
        raise NotImplementedError

    def y_mean(self, z):
        return self.mean_fn(z)

    def y_mean_deriv(self, z):
        return self.mean_fn_deriv(z)

    def y_var(self, z):
        return np.full(np.shape(z), self.noise_var)

    def loglik(self, y, z):
        r = np.asarray(y, dtype=float) - self.mean_fn(z)
        return -0.5 * (_LOG_2PI + np.log(self.noise_var)) - 0.5 * r * r / self.noise_var

    def dloglik_dz(self, y, z):
        return (np.asarray(y, dtype=float) - self.mean_fn(z)) * self.mean_fn_deriv(z) / self.noise_var

    def forward(self, z, w):
        return self.mean_fn(z) + w

    def sample_noise(self, m, rng):
        return np.sqrt(self.noise_var) * rng.standard_normal(m)


class AwgnChannel(_AdditiveGaussianChannel):
    def __init__(self, noise_var):
        self.noise_var = float(noise_var)
        self.z_scale = np.sqrt(self.noise_var)

    def mean_fn(self, z):
        return np.asarray(z, dtype=float)

    def mean_fn_deriv(self, z):
        return np.ones(np.shape(z))


class SigmoidAwgnChannel(_AdditiveGaussianChannel):
    def __init__(self, scale, noise_var):
        self.scale = float(scale)
        self.noise_var = float(noise_var)
        # narrowest z-width of the likelihood: noise std over the steepest slope
        self.z_scale = np.sqrt(self.noise_var) / (self.scale / 4.0)

    def mean_fn(self, z):
        return sigmoid(z, self.scale)

    def mean_fn_deriv(self, z):
        f = sigmoid(z, self.scale)
        return self.scale * f * (1.0 - f)

    def mean_fn_deriv2(self, z):
        f = sigmoid(z, self.scale)
        return self.scale**2 * f * (1.0 - f) * (1.0 - 2.0 * f)


class LogisticChannel(OutputChannel):
    discrete = True
    y_values = (0.0, 1.0)

    def __init__(self, scale):
        self.scale = float(scale)
        self.z_scale = 1.0

    def loglik(self, y, z):
        u = np.asarray(z, dtype=float) - np.log(self.scale)
        y = np.asarray(y, dtype=float)
        return np.where(y == 1, log_expit(u), log_expit(-u))

    def dloglik_dz(self, y, z):
        p1 = expit(np.asarray(z, dtype=float) - np.log(self.scale))
        return np.asarray(y, dtype=float) - p1

    def y_mean(self, z):
        return expit(np.asarray(z, dtype=float) - np.log(self.scale))

    def y_mean_deriv(self, z):
        p1 = self.y_mean(z)
        return p1 * (1.0 - p1)

    def y_var(self, z):
        return self.y_mean_deriv(z)

    def forward(self, z, w):
        """Hard label: w ~ U(0, 1) and y = 1 when w < P(y = 1 | z)."""
        p1 = expit(np.asarray(z, dtype=float) - np.log(self.scale))
        return (np.asarray(w) < p1).astype(float)

    def sample_noise(self, m, rng):
        return rng.random(m)


def channel_from_spec(spec) -> OutputChannel:
    if isinstance(spec, AwgnOutputSpec):
        return AwgnChannel(spec.noise_var)
    if isinstance(spec, SigmoidAwgnSpec):
        return SigmoidAwgnChannel(spec.scale, spec.noise_var)
    if isinstance(spec, LogisticSpec):
        return LogisticChannel(spec.scale)
    raise InvalidArgumentError(f"no channel for spec {spec!r}")


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------

class OutputEstimator:
    sum_product = True
    channel = None
    # (gain, offset, noise_var) when g_out is the AWGN estimator of y = offset + gain z + w
    linear_gaussian = None

    def estimate(self, phat, y, taup):
        raise NotImplementedError

    def __call__(self, phat, y, taup):
        return self.estimate(phat, y, taup)

    def likelihood(self, y, z):
        return self.channel.likelihood(y, z)

    def sample_forward(self, z, rng):
        return self.channel.sample_forward(z, rng)[0]


def awgn_output_estimate(phat, y, taup, noise_var):
    phat, y, taup = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (phat, y, taup)))
    total = noise_var + taup
    return (y - phat) / total, 1.0 / total


def linearized_output_estimate(phat, y, taup, gain, noise_var, offset=0.0):
    """Output function for the postulated channel y = offset + gain z + N(0, noise_var)."""
    phat, y, taup = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (phat, y, taup)))
    total = noise_var + gain * gain * taup
    return gain * (y - offset - gain * phat) / total, gain * gain / total


class AwgnOutput(OutputEstimator):
    """Identical for max-sum and sum-product."""

    def __init__(self, noise_var):
        self.noise_var = float(noise_var)
        self.channel = AwgnChannel(self.noise_var)
        self.linear_gaussian = (1.0, 0.0, self.noise_var)

    def estimate(self, phat, y, taup):
        return awgn_output_estimate(phat, y, taup, self.noise_var)

    def dshat_dy(self, phat, y, taup):
        return 1.0 / (self.noise_var + np.asarray(taup, dtype=float))


class LinearizedOutput(OutputEstimator):
    """AWGN estimator for an affine approximation of a nonlinear channel."""

    def __init__(self, gain, noise_var, offset=0.0):
        self.gain, self.noise_var, self.offset = float(gain), float(noise_var), float(offset)
        self.channel = None
        self.linear_gaussian = (self.gain, self.offset, self.noise_var)

    def estimate(self, phat, y, taup):
        return linearized_output_estimate(phat, y, taup, self.gain, self.noise_var, self.offset)

    def dshat_dy(self, phat, y, taup):
        return self.gain / (self.noise_var + self.gain**2 * np.asarray(taup, dtype=float))

    def likelihood(self, y, z):
        r = np.asarray(y) - self.offset - self.gain * np.asarray(z)
        return np.exp(-0.5 * r * r / self.noise_var) / np.sqrt(2 * np.pi * self.noise_var)


def _z_posterior_grid(phat, taup, z_scale, resolution, halfwidth, max_points=20001):
    """Prior-centred trapezoid nodes u (shared) and per-row spacing for z = phat + sqrt(taup) u."""
    sig = np.sqrt(taup)
    spacing = np.minimum(1.0, z_scale / sig) / resolution if z_scale else np.full_like(sig, 1.0 / resolution)
    npts = int(min(max_points, max(81, np.ceil(2 * halfwidth / np.min(spacing)) + 1)))
    npts += (npts + 1) % 2
    u = np.linspace(-halfwidth, halfwidth, npts)
    trap = np.exp(-0.5 * u * u)
    trap[0] *= 0.5
    trap[-1] *= 0.5
    return sig, u, trap / trap.sum()


def _z_posterior(loglik, phat, y, taup, z_scale, resolution, halfwidth):
    """Posterior of z ~ N(phat, taup) given y: returns (E[u], Var[u], log evidence, sig).

    Here ``u = (z - phat) / sqrt(taup)`` is the standardized abscissa.
    """
    phat, y, taup = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (phat, y, taup)))
    shape = phat.shape
    p, yy, tp = phat.ravel(), y.ravel(), taup.ravel()
    if np.any(tp <= 0):
        raise InvalidArgumentError("taup must be positive")
    sig, u, w = _z_posterior_grid(p, tp, z_scale, resolution, halfwidth)
    z = p[:, None] + sig[:, None] * u[None, :]
    ll = np.asarray(loglik(yy[:, None], z), dtype=float)
    top = np.max(ll, axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        bad = int(np.argmax(~np.isfinite(top[:, 0])))
        raise DegeneratePosteriorError("likelihood vanishes on the whole quadrature grid", index=bad)
    f = w[None, :] * np.exp(ll - top)
    zsum = f.sum(axis=1)
    if np.any(zsum <= 0):
        bad = int(np.argmax(zsum <= 0))
        raise DegeneratePosteriorError("posterior normalizer underflowed", index=bad)
    eu = (f @ u) / zsum
    du = u[None, :] - eu[:, None]
    vu = np.sum(f * du * du, axis=1) / zsum
    log_ev = np.log(zsum) + top[:, 0]
    return eu.reshape(shape), vu.reshape(shape), log_ev.reshape(shape), sig.reshape(shape)


def generic_sumproduct_output(loglik, phat, y, taup, z_scale=None, resolution=4, halfwidth=10.0):
    """MMSE output function for an arbitrary log-likelihood ``loglik(y, z)``.

    zhat0 and var(z | phat, y) come from a trapezoid rule on the prior
    N(phat, taup); then shat = (zhat0 - phat) / taup and
    taus = (1 - var / taup) / taup.  ``z_scale`` is the narrowest z-width of
    the likelihood and sets the grid spacing.
    """
    eu, vu, _, sig = _z_posterior(loglik, phat, y, taup, z_scale, resolution, halfwidth)
    taup = sig * sig
    return eu / sig, (1.0 - vu) / taup


class SumProductOutput(OutputEstimator):
    """MMSE output estimator for a channel given by its log-likelihood."""

    def __init__(self, channel: OutputChannel, resolution=4, halfwidth=10.0):
        self.channel = channel
        self.resolution = resolution
        self.halfwidth = halfwidth

    def estimate(self, phat, y, taup):
        return generic_sumproduct_output(self.channel.loglik, phat, y, taup, self.channel.z_scale, self.resolution, self.halfwidth)

    def posterior_moments(self, phat, y, taup):
        """(E[z | phat, y], var(z | phat, y))."""
        eu, vu, _, sig = _z_posterior(self.channel.loglik, phat, y, taup, self.channel.z_scale, self.resolution, self.halfwidth)
        return np.asarray(phat) + sig * eu, sig * sig * vu

    def log_evidence(self, phat, y, taup):
        """log p(y | phat, taup) for z ~ N(phat, taup)."""
        return _z_posterior(self.channel.loglik, phat, y, taup, self.channel.z_scale, self.resolution, self.halfwidth)[2]

    def refined(self):
        return SumProductOutput(self.channel, 2 * self.resolution, self.halfwidth)


def generic_maxsum_output(f_out, phat, y, taup, df=None, d2f=None, tol=1e-12):
    """MAP output function: zhat0 = argmax f_out(z, y) - (z - phat)^2 / (2 taup).

    Returns ``(shat, taus)`` with shat = (zhat0 - phat) / taup and
    taus = -f_out'' / (1 - taup f_out'') at zhat0 (unclamped).
    """
    phat, y, taup = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (phat, y, taup)))
    shape = phat.shape
    p, yy, tp = phat.ravel(), y.ravel(), taup.ravel()

    def F(z):
        return f_out(z, yy) - 0.5 * (z - p) ** 2 / tp

    dF = (lambda z: df(z, yy) - (z - p) / tp) if df is not None else None
    d2F = (lambda z: d2f(z, yy) - 1.0 / tp) if d2f is not None else None
    z0, _ = maximize_scalar(F, p.copy(), bracket_halfwidth=np.sqrt(tp), tol=tol * max(1.0, float(np.max(np.abs(p)))), df=dF, d2f=d2F)
    z0 = np.asarray(z0, dtype=float).reshape(p.shape)
    if d2f is not None:
        curv = np.asarray(d2f(z0, yy), dtype=float)
    else:
        h = 1e-4 * np.maximum(1.0, np.abs(z0))
        curv = (f_out(z0 + h, yy) - 2 * f_out(z0, yy) + f_out(z0 - h, yy)) / h**2
    with np.errstate(divide="ignore", invalid="ignore"):
        taus = -curv / (1.0 - tp * curv)
    return ((z0 - p) / tp).reshape(shape), taus.reshape(shape)


class MaxSumOutput(OutputEstimator):
    sum_product = False

    def __init__(self, f_out, df=None, d2f=None, channel=None):
        self.f_out, self.df, self.d2f = f_out, df, d2f
        self.channel = channel

    def estimate(self, phat, y, taup):
        return generic_maxsum_output(self.f_out, phat, y, taup, self.df, self.d2f)


def _swap(fn):
    """Adapt a channel method taking (y, z) to the (z, y) order used by max-sum."""
    return lambda z, y: fn(y, z)


def logistic_maxsum_output(scale):
    ch = LogisticChannel(scale)
    shift = np.log(scale)

    def d2f(z, y):
        p1 = expit(np.asarray(z) - shift)
        return -p1 * (1.0 - p1)

    return MaxSumOutput(_swap(ch.loglik), df=_swap(ch.dloglik_dz), d2f=d2f, channel=ch)


def sigmoid_awgn_maxsum_output(scale, noise_var):
    ch = SigmoidAwgnChannel(scale, noise_var)

    def d2f(z, y):
        f, f1, f2 = ch.mean_fn(z), ch.mean_fn_deriv(z), ch.mean_fn_deriv2(z)
        return ((np.asarray(y) - f) * f2 - f1 * f1) / noise_var

    return MaxSumOutput(_swap(ch.loglik), df=_swap(ch.dloglik_dz), d2f=d2f, channel=ch)


def gaussian_maxsum_output(noise_var):
    ch = AwgnChannel(noise_var)
    return MaxSumOutput(_swap(ch.loglik), df=_swap(ch.dloglik_dz), d2f=lambda z, y: np.full(np.shape(z), -1.0 / noise_var), channel=ch)


def linearization_of(spec):
    """(f'(0), f(0), noise variance) of a channel's conditional mean y = f(z) + noise about z = 0."""
    if isinstance(spec, AwgnOutputSpec):
        return 1.0, 0.0, spec.noise_var
    if isinstance(spec, SigmoidAwgnSpec):
        return spec.scale / 4.0, 0.5, spec.noise_var
    if isinstance(spec, LogisticSpec):
        p0 = 1.0 / (1.0 + spec.scale)
        return p0 * (1 - p0), p0, p0 * (1 - p0)
    raise InvalidArgumentError(f"cannot linearize {spec!r}")


def output_estimator_for(spec, method="sum_product", center=False) -> OutputEstimator:
    """Estimator for ``spec``: sum_product / max_sum (matched) or linearized (mismatched).

    The linearized estimator postulates y = f'(0) z + w with the channel's
    noise variance; ``center=True`` adds the offset f(0) to that model.
    """
    if method == "linearized":
        gain, f0, noise_var = linearization_of(spec)
        return LinearizedOutput(gain, noise_var, f0 if center else 0.0)
    if isinstance(spec, AwgnOutputSpec):
        return AwgnOutput(spec.noise_var)
    if method == "sum_product":
        return SumProductOutput(channel_from_spec(spec))
    if method == "max_sum":
        if isinstance(spec, LogisticSpec):
            return logistic_maxsum_output(spec.scale)
        if isinstance(spec, SigmoidAwgnSpec):
            return sigmoid_awgn_maxsum_output(spec.scale, spec.noise_var)
    raise InvalidArgumentError(f"no {method} output estimator for {spec!r}")

"""Scalar input estimation functions g_in.

Every estimator maps ``(rhat, q, taur)`` to ``(xhat, taux)`` where ``taux`` is
``taur * d g_in / d rhat``.  For sum-product (MMSE) estimators this is the
posterior mean and variance of X given ``rhat = X + N(0, taur)``; for
max-sum (MAP) estimators it is the proximal point of the log prior and the
curvature-corrected variance.

All estimators are vectorized: array arguments broadcast elementwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .errors import DegeneratePosteriorError, DerivativeUnavailableError, InvalidArgumentError
from .numerics import maximize_scalar
from .specs import AwgnInputSpec, BernoulliGaussianSpec, DiscreteSpec, LaplacianSpec

TAU_FLOOR = 1e-12
TAU_CEIL = 1e12
_LOG_2PI = np.log(2 * np.pi)


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Prior:
    """A scalar prior p(x | q) split into structurally different parts.

    ``atoms``      -- ((point, prob), ...) point masses
    ``gaussians``  -- ((weight, mean, var), ...) Gaussian components
    ``density``    -- optional log-density of an extra continuous part, which
                      already includes its total mass ``density_mass``; it must
                      be log-concave, centred near ``density_center`` with a
                      characteristic width ``density_scale``.

    With ``shift_by_q`` the whole prior is translated by q.
    """

    atoms: tuple = ()
    gaussians: tuple = ()
    density: Optional[Callable] = None
    density_mass: float = 0.0
    density_center: float = 0.0
    density_scale: float = 1.0
    density_moments: Optional[tuple] = None  # (E[x], E[x^2]) of the normalized density
    density_kink: Optional[float] = None     # a point where the density is not smooth
    density_sampler: Optional[Callable] = None  # (size, rng) -> draws from the normalized density
    shift_by_q: bool = False

    def __post_init__(self):
        total = sum(p for _, p in self.atoms) + sum(w for w, _, _ in self.gaussians) + self.density_mass
        if abs(total - 1.0) > 1e-12:
            raise InvalidArgumentError(f"prior masses sum to {total}, not 1")
        if self.density is not None and self.density_moments is None:
            raise InvalidArgumentError("a density part needs its first two moments")

    def moments(self, q=0.0):
        """(E[X | q], E[X^2 | q])."""
        m1 = m2 = 0.0
        for x, p in self.atoms:
            m1 += p * x
            m2 += p * x * x
        for w, mu, v in self.gaussians:
            m1 += w * mu
            m2 += w * (v + mu * mu)
        if self.density is not None:
            d1, d2 = self.density_moments
            m1 += self.density_mass * d1
            m2 += self.density_mass * d2
        if self.shift_by_q:
            q = np.asarray(q, dtype=float)
            return m1 + q, m2 + 2 * q * m1 + q * q
        return m1, m2

    def mean_var(self, q=0.0):
        m1, m2 = self.moments(q)
        return m1, m2 - m1 * m1

    def continuous_logpdf(self, x):
        """Log density of all non-atomic parts (unshifted)."""
        x = np.asarray(x, dtype=float)
        parts = []
        for w, mu, v in self.gaussians:
            parts.append(np.log(w) - 0.5 * (_LOG_2PI + np.log(v)) - 0.5 * (x - mu) ** 2 / v)
        if self.density is not None:
            parts.append(np.asarray(self.density(x), dtype=float))
        if not parts:
            return np.full_like(x, -np.inf)
        return logsumexp(np.stack(parts), axis=0)

    @property
    def continuous_mass(self):
        return sum(w for w, _, _ in self.gaussians) + self.density_mass

    @property
    def continuous_scale(self):
        """Narrowest characteristic width among the continuous parts."""
        scales = [np.sqrt(v) for _, _, v in self.gaussians]
        if self.density is not None:
            scales.append(self.density_scale)
        return min(scales) if scales else np.inf

    def sample(self, size, rng, q=0.0):
        """Draw ``size`` i.i.d. values; a density part needs ``density_sampler``."""
        labels, probs = [], []
        for k, (_, p) in enumerate(self.atoms):
            labels.append(("atom", k))
            probs.append(p)
        for k, (w, _, _) in enumerate(self.gaussians):
            labels.append(("gauss", k))
            probs.append(w)
        if self.density is not None:
            if self.density_sampler is None:
                raise InvalidArgumentError("this prior's density part has no sampler")
            labels.append(("density", 0))
            probs.append(self.density_mass)
        comp = rng.choice(len(probs), size=size, p=np.asarray(probs) / np.sum(probs))
        out = np.empty(size)
        noise = rng.standard_normal(size)
        for idx, (kind, k) in enumerate(labels):
            sel = comp == idx
            if kind == "atom":
                out[sel] = self.atoms[k][0]
            elif kind == "density":
                out[sel] = self.density_sampler(int(np.count_nonzero(sel)), rng)
            else:
                _, mu, v = self.gaussians[k]
                out[sel] = mu + np.sqrt(v) * noise[sel]
        if self.shift_by_q:
            out = out + q
        return out


def laplacian_prior(scale):
    lam = float(scale)
    return Prior(
        density=lambda x: np.log(lam / 2) - lam * np.abs(x),
        density_mass=1.0,
        density_center=0.0,
        density_scale=1.0 / lam,
        density_moments=(0.0, 2.0 / lam**2),
        density_kink=0.0,
        density_sampler=lambda size, rng: rng.laplace(0.0, 1.0 / lam, size),
    )


def prior_from_spec(spec) -> Prior:
    if isinstance(spec, AwgnInputSpec):
        return Prior(gaussians=((1.0, 0.0, spec.var),), shift_by_q=True)
    if isinstance(spec, BernoulliGaussianSpec):
        atoms = ((0.0, 1.0 - spec.rho),) if spec.rho < 1 else ()
        return Prior(atoms=atoms, gaussians=((spec.rho, spec.active_mean, spec.active_var),))
    if isinstance(spec, LaplacianSpec):
        return laplacian_prior(spec.scale)
    if isinstance(spec, DiscreteSpec):
        return Prior(atoms=tuple(zip(spec.points, spec.probs)))
    raise InvalidArgumentError(f"no prior for spec {spec!r}")


def default_q(spec, n):
    """Side-information vector: the prior mean for awgn_input, zeros otherwise."""
    if isinstance(spec, AwgnInputSpec):
        return np.full(n, float(spec.mean))
    return np.zeros(n)


# --------------------------------------------------------------------------
# estimator interface
# --------------------------------------------------------------------------

class InputEstimator:
    """Base class.  Subclasses implement ``estimate`` and ``init``."""

    closed_form = False
    sum_product = True

    def init(self, q):
        raise NotImplementedError

    def estimate(self, rhat, q, taur):
        raise NotImplementedError

    def __call__(self, rhat, q, taur):
        return self.estimate(rhat, q, taur)


def _broadcast(*args):
    return np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args])


def awgn_input_estimate(rhat, q, taur, var):
    """Posterior mean/variance for X ~ N(q, var) observed in N(0, taur) noise."""
    rhat, q, taur = _broadcast(rhat, q, taur)
    gain = var / (var + taur)
    return gain * (rhat - q) + q, var * taur / (var + taur)


def bg_sumproduct_estimate(rhat, taur, rho, active_var, active_mean=0.0):
    """Posterior mean/variance for a Bernoulli-Gaussian X observed in Gaussian noise."""
    rhat, taur = _broadcast(rhat, taur)
    slab_total = active_var + taur
    gain = active_var / slab_total
    slab_mean = active_mean + gain * (rhat - active_mean)
    slab_var = gain * taur
    if rho >= 1:
        return slab_mean, slab_var
    # log-domain responsibilities; the spike likelihood is N(rhat; 0, taur)
    log_slab = np.log(rho) - 0.5 * np.log(slab_total) - 0.5 * (rhat - active_mean) ** 2 / slab_total
    log_spike = np.log1p(-rho) - 0.5 * np.log(taur) - 0.5 * rhat**2 / taur
    pi = np.exp(log_slab - np.logaddexp(log_slab, log_spike))
    xhat = pi * slab_mean
    second = pi * (slab_var + slab_mean**2)
    return xhat, np.maximum(second - xhat**2, 0.0)


def laplacian_sumproduct_estimate(rhat, taur, scale):
    """Posterior mean/variance for a Laplacian prior (two truncated normals)."""
    rhat, taur = _broadcast(rhat, taur)
    lam = float(scale)
    s = np.sqrt(taur)
    mu_pos = rhat - lam * taur
    mu_neg = rhat + lam * taur
    a = mu_pos / s      # positive branch: N(mu_pos, taur) truncated to x > 0
    b = -mu_neg / s     # negative branch: N(mu_neg, taur) truncated to x < 0
    log_zp = -lam * rhat + log_ndtr(a)
    log_zn = lam * rhat + log_ndtr(b)
    wp = np.exp(log_zp - np.logaddexp(log_zp, log_zn))
    wn = 1.0 - wp
    # inverse Mills ratios phi/Phi computed in the log domain
    ma = np.exp(-0.5 * a * a - 0.5 * _LOG_2PI - log_ndtr(a))
    mb = np.exp(-0.5 * b * b - 0.5 * _LOG_2PI - log_ndtr(b))
    mean_p = mu_pos + s * ma
    var_p = taur * (1 - ma * (ma + a))
    mean_n = mu_neg - s * mb
    var_n = taur * (1 - mb * (mb + b))
    xhat = wp * mean_p + wn * mean_n
    second = wp * (var_p + mean_p**2) + wn * (var_n + mean_n**2)
    return xhat, np.maximum(second - xhat**2, 0.0)


def discrete_sumproduct_estimate(rhat, taur, points, probs):
    rhat, taur = _broadcast(rhat, taur)
    pts = np.asarray(points, dtype=float)
    logp = np.log(np.asarray(probs, dtype=float))
    logw = logp - 0.5 * (rhat[..., None] - pts) ** 2 / taur[..., None]
    w = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
    xhat = w @ pts
    return xhat, np.maximum(w @ pts**2 - xhat**2, 0.0)


class AwgnInput(InputEstimator):
    closed_form = True

    def __init__(self, var):
        self.var = float(var)
        self.prior = Prior(gaussians=((1.0, 0.0, self.var),), shift_by_q=True)

    def init(self, q):
        q = np.asarray(q, dtype=float)
        return q.copy(), np.full(q.shape, self.var)

    def estimate(self, rhat, q, taur):
        return awgn_input_estimate(rhat, q, taur, self.var)


class BernoulliGaussianInput(InputEstimator):
    closed_form = True

    def __init__(self, rho, active_var=1.0, active_mean=0.0):
        self.rho, self.active_var, self.active_mean = float(rho), float(active_var), float(active_mean)
        self.prior = prior_from_spec(BernoulliGaussianSpec(self.rho, self.active_var, self.active_mean))

    def init(self, q):
        mean, var = self.prior.mean_var()
        q = np.asarray(q, dtype=float)
        return np.full(q.shape, mean), np.full(q.shape, var)

    def estimate(self, rhat, q, taur):
        return bg_sumproduct_estimate(rhat, taur, self.rho, self.active_var, self.active_mean)


class LaplacianInput(InputEstimator):
    closed_form = True

    def __init__(self, scale):
        self.scale = float(scale)
        self.prior = laplacian_prior(self.scale)

    def init(self, q):
        q = np.asarray(q, dtype=float)
        return np.zeros(q.shape), np.full(q.shape, 2.0 / self.scale**2)

    def estimate(self, rhat, q, taur):
        return laplacian_sumproduct_estimate(rhat, taur, self.scale)


class DiscreteInput(InputEstimator):
    closed_form = True

    def __init__(self, points, probs):
        self.points, self.probs = tuple(points), tuple(probs)
        self.prior = Prior(atoms=tuple(zip(self.points, self.probs)))

    def init(self, q):
        mean, var = self.prior.mean_var()
        q = np.asarray(q, dtype=float)
        return np.full(q.shape, mean), np.full(q.shape, var)

    def estimate(self, rhat, q, taur):
        return discrete_sumproduct_estimate(rhat, taur, self.points, self.probs)


# --------------------------------------------------------------------------
# generic sum-product by quadrature
# --------------------------------------------------------------------------

def generic_sumproduct_input(prior: Prior, rhat, q, taur, resolution=8, halfwidth=12.0, max_points=4000):
    """Posterior mean and variance of X under ``prior`` given rhat = X + N(0, taur).

    Atoms are summed exactly.  The (log-concave) continuous part is integrated
    by Gauss-Legendre on two panels around the mode of its posterior; the
    posterior standard deviation of a log-concave part is at most
    ``sqrt(taur)``, so the window spans ``halfwidth`` such widths, and the
    panels are split at the prior's kink (if any) so each integrand is smooth.
    """
    rhat, q, taur = _broadcast(rhat, q, taur)
    shape = rhat.shape
    r = rhat.ravel() - (q.ravel() if prior.shift_by_q else 0.0)
    tr = taur.ravel()
    if np.any(tr <= 0):
        raise InvalidArgumentError("taur must be positive")
    log_terms, means, seconds = [], [], []

    for x, p in prior.atoms:
        if p <= 0:
            continue
        log_terms.append(np.log(p) - 0.5 * (_LOG_2PI + np.log(tr)) - 0.5 * (r - x) ** 2 / tr)
        means.append(np.full_like(r, x))
        seconds.append(np.full_like(r, x * x))

    if prior.continuous_mass > 0:
        s_lik = np.sqrt(tr)

        def post(x):
            return prior.continuous_logpdf(x) - 0.5 * (x - r) ** 2 / tr


        mode, _ = maximize_scalar(post, r.copy(), bracket_halfwidth=s_lik, tol=1e-6 * np.min(s_lik))
        mode = np.asarray(mode).reshape(r.shape)
        width = np.minimum(s_lik, 4 * prior.continuous_scale)
        spacing = np.minimum(s_lik, prior.continuous_scale) / resolution
        npts = int(min(max_points, max(64, np.max(np.ceil(halfwidth * width / spacing)))))
        lo = mode - halfwidth * width
        hi = mode + halfwidth * width
        # two Gauss-Legendre panels, split at the kink when it falls inside the window
        if prior.density_kink is not None:
            split = np.where((lo < prior.density_kink) & (prior.density_kink < hi), prior.density_kink, mode)
        else:
            split = mode
        gl_x, gl_w = np.polynomial.legendre.leggauss(npts)
        xs, ws = [], []
        for a, b in ((lo, split), (split, hi)):
            half = 0.5 * (b - a)
            xs.append(0.5 * (a + b)[:, None] + half[:, None] * gl_x[None, :])
            ws.append(half[:, None] * gl_w[None, :])
        xs = np.concatenate(xs, axis=1)
        ws = np.concatenate(ws, axis=1)
        logf = prior.continuous_logpdf(xs) - 0.5 * (xs - r[:, None]) ** 2 / tr[:, None]
        logf = logf - 0.5 * (_LOG_2PI + np.log(tr))[:, None]
        top = np.max(logf, axis=1, keepdims=True)
        f = ws * np.exp(logf - top)
        z = f.sum(axis=1)
        with np.errstate(divide="ignore"):
            log_terms.append(np.log(z) + top[:, 0])
        means.append((f * xs).sum(axis=1) / np.where(z > 0, z, 1.0))
        seconds.append((f * xs * xs).sum(axis=1) / np.where(z > 0, z, 1.0))

    log_terms = np.stack(log_terms)
    norm = logsumexp(log_terms, axis=0)
    if not np.all(np.isfinite(norm)):
        bad = int(np.argmax(~np.isfinite(norm)))
        raise DegeneratePosteriorError("posterior normalizer vanished", index=bad)
    resp = np.exp(log_terms - norm)
    mean = np.sum(resp * np.stack(means), axis=0)
    second = np.sum(resp * np.stack(seconds), axis=0)
    var = np.maximum(second - mean**2, 0.0)
    if prior.shift_by_q:
        mean = mean + q.ravel()
    return mean.reshape(shape), var.reshape(shape)


class SumProductInput(InputEstimator):
    """MMSE input estimator for an arbitrary ``Prior`` by quadrature."""

    def __init__(self, prior: Prior, resolution=8):
        self.prior = prior
        self.resolution = resolution

    def init(self, q):
        mean, var = self.prior.mean_var(q)
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(mean, q.shape).astype(float), np.broadcast_to(var, q.shape).astype(float)

    def estimate(self, rhat, q, taur):
        return generic_sumproduct_input(self.prior, rhat, q, taur, resolution=self.resolution)


# --------------------------------------------------------------------------
# max-sum (MAP)
# --------------------------------------------------------------------------

def _fd_second(f, x, q, h=1e-4):
    hh = h * np.maximum(1.0, np.abs(x))
    return (f(x + hh, q) - 2 * f(x, q) + f(x - hh, q)) / hh**2


def generic_maxsum_input(f_in, rhat, q, taur, df=None, d2f=None, kinks=(), tol=1e-12):
    """Proximal MAP estimate argmax_x f_in(x, q) - (rhat - x)^2 / (2 taur).

    Returns ``(xhat, taux)`` with ``taux = taur / (1 - taur f_in''(xhat))``
    clamped to [TAU_FLOOR, TAU_CEIL].  ``df``/``d2f`` are derivatives of
    ``f_in`` in x; a missing or non-finite ``d2f`` falls back to a finite
    difference.  If the maximizer sits on one of the ``kinks`` (points where
    ``f_in`` is not differentiable), the estimate is locally constant in
    rhat and ``taux`` is the floor.
    """
    rhat, q, taur = _broadcast(rhat, q, taur)
    shape = rhat.shape
    r, qq, tr = rhat.ravel(), q.ravel(), taur.ravel()

    def F(x):
        return f_in(x, qq) - 0.5 * (r - x) ** 2 / tr

    dF = None
    d2F = None
    if df is not None:
        def dF(x):
            return df(x, qq) + (r - x) / tr
        if d2f is not None:
            def d2F(x):
                return d2f(x, qq) - 1.0 / tr

    xhat, _ = maximize_scalar(F, r.copy(), bracket_halfwidth=np.sqrt(tr), tol=tol * np.maximum(1.0, np.max(np.abs(r))), df=dF, d2f=d2F)
    xhat = np.asarray(xhat, dtype=float).reshape(r.shape)

    at_kink = np.zeros(r.shape, dtype=bool)
    for k in kinks:
        near = np.abs(xhat - k) <= 1e-7 * np.maximum(1.0, np.sqrt(tr))
        if np.any(near):
            # a genuine kink maximizer: F increases into k from both sides
            eps = 1e-9 * np.maximum(1.0, abs(k))
            fk = F(np.full_like(r, k))
            genuine = near & (fk >= F(np.full_like(r, k - eps))) & (fk >= F(np.full_like(r, k + eps)))
            xhat = np.where(genuine, k, xhat)
            at_kink |= genuine

    curv = None
    if d2f is not None:
        curv = np.asarray(d2f(xhat, qq), dtype=float) * np.ones_like(xhat)
    if curv is None or not np.all(np.isfinite(curv[~at_kink])):
        fd = _fd_second(f_in, xhat, qq)
        curv = fd if curv is None else np.where(np.isfinite(curv), curv, fd)
    if not np.all(np.isfinite(curv[~at_kink])):
        raise DerivativeUnavailableError("f_in'' is not finite at the MAP estimate, even by finite differences")
    with np.errstate(divide="ignore", invalid="ignore"):
        taux = tr / (1.0 - tr * curv)
    taux = np.where(at_kink, TAU_FLOOR, taux)
    taux = np.where(np.isfinite(taux) & (taux > 0), taux, TAU_CEIL)
    taux = np.clip(taux, TAU_FLOOR, TAU_CEIL)
    return xhat.reshape(shape), taux.reshape(shape)


class MaxSumInput(InputEstimator):
    """MAP input estimator for a penalized log prior ``f_in(x, q)``."""

    sum_product = False

    def __init__(self, f_in, df=None, d2f=None, kinks=(), mode=None):
        self.f_in, self.df, self.d2f = f_in, df, d2f
        self.kinks = tuple(kinks)
        self.mode = mode  # callable q -> argmax f_in, if known

    def init(self, q):
        q = np.asarray(q, dtype=float)
        if self.mode is not None:
            x0 = np.broadcast_to(np.asarray(self.mode(q), dtype=float), q.shape).copy()
        else:
            x0, _ = maximize_scalar(lambda x: self.f_in(x, q.ravel()), np.zeros(q.size))
            x0 = np.asarray(x0).reshape(q.shape)
        if self.d2f is not None:
            curv = np.asarray(self.d2f(x0, q), dtype=float) * np.ones_like(x0)
        else:
            curv = _fd_second(self.f_in, x0, q)
        # the initial variance is the magnitude of the inverse curvature
        with np.errstate(divide="ignore"):
            tau0 = 1.0 / np.abs(curv)
        return x0, np.clip(np.where(np.isfinite(tau0), tau0, TAU_CEIL), TAU_FLOOR, TAU_CEIL)

    def estimate(self, rhat, q, taur):
        return generic_maxsum_input(self.f_in, rhat, q, taur, self.df, self.d2f, self.kinks)


def gaussian_maxsum_input(var):
    """Max-sum estimator with f_in = -(x - q)^2 / (2 var); equals AwgnInput."""
    return MaxSumInput(
        lambda x, q: -0.5 * (x - q) ** 2 / var,
        df=lambda x, q: -(x - q) / var,
        d2f=lambda x, q: np.full(np.shape(x), -1.0 / var),
        mode=lambda q: q,
    )


def laplacian_maxsum_input(scale):
    """Max-sum estimator with f_in = -scale |x|: soft thresholding at scale * taur."""
    lam = float(scale)
    return MaxSumInput(
        lambda x, q: -lam * np.abs(x),
        df=lambda x, q: -lam * np.sign(x),
        d2f=lambda x, q: np.zeros(np.shape(x)),
        kinks=(0.0,),
        mode=lambda q: 0.0,
    )


def soft_threshold(rhat, thresh):
    return np.sign(rhat) * np.maximum(np.abs(rhat) - thresh, 0.0)


def input_estimator_for(spec, method="sum_product") -> InputEstimator:
    """Catalog estimator matched to ``spec`` (``method`` is sum_product or max_sum)."""
    if method == "sum_product":
        if isinstance(spec, AwgnInputSpec):
            return AwgnInput(spec.var)
        if isinstance(spec, BernoulliGaussianSpec):
            return BernoulliGaussianInput(spec.rho, spec.active_var, spec.active_mean)
        if isinstance(spec, LaplacianSpec):
            return LaplacianInput(spec.scale)
        if isinstance(spec, DiscreteSpec):
            return DiscreteInput(spec.points, spec.probs)
    elif method == "max_sum":
        if isinstance(spec, AwgnInputSpec):
            return gaussian_maxsum_input(spec.var)
        if isinstance(spec, LaplacianSpec):
            return laplacian_maxsum_input(spec.scale)
        raise InvalidArgumentError(f"max-sum estimation needs a density prior; {spec.kind} has point masses")
    raise InvalidArgumentError(f"no {method} input estimator for {spec!r}")

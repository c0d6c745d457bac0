"""Quadrature rules for Gaussian expectations and a safeguarded scalar maximizer.

All rules integrate against the *standard normal* measure: weights sum to one
and ``E[f(mu + sqrt(var) U)]`` with ``U ~ N(0, 1)`` is ``sum(w * f(mu + sqrt(var) * u))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BracketingError, InvalidArgumentError, InvalidCovarianceError, NumericalDomainError

DEFAULT_ORDER = 40
MAX_ORDER = 200
MAX_EXPANSIONS = 60
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    kind: str = "gauss_hermite"

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def order(self) -> int:
        return len(self.nodes)

    def refined(self) -> "QuadratureRule":
        """Rule of the same family with (roughly) twice the number of nodes."""
        if self.kind == "gauss_hermite":
            return gauss_hermite(min(2 * self.order, MAX_ORDER))
        halfwidth = float(self.nodes[-1])
        return trapezoid_rule(2 * self.order - 1, halfwidth)


def gauss_hermite(order: int = DEFAULT_ORDER) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule, exact for polynomials up to degree 2*order-1."""
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= MAX_ORDER:
        raise InvalidArgumentError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {order!r}")
    nodes, weights = np.polynomial.hermite_e.hermegauss(int(order))
    # hermegauss is symmetric only to rounding; enforce it exactly
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(nodes, weights / weights.sum(), "gauss_hermite")


def trapezoid_rule(points: int = 401, halfwidth: float = 10.0) -> QuadratureRule:
    """Uniform-grid rule for N(0, 1) on [-halfwidth, halfwidth].

    Converges geometrically for smooth integrands and, unlike Gauss-Hermite,
    resolves features much narrower than one standard deviation when the grid
    is fine enough.
    """
    if points < 1 or points % 2 == 0:
        raise InvalidArgumentError(f"trapezoid rule needs an odd positive point count, got {points}")
    if points == 1:
        return QuadratureRule(np.zeros(1), np.ones(1), "trapezoid")
    nodes = np.linspace(-halfwidth, halfwidth, points)
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = np.exp(-0.5 * nodes**2)
    return QuadratureRule(nodes, weights / weights.sum(), "trapezoid")


def _check_finite(values, abscissae):
    bad = ~np.isfinite(values)
    if np.any(bad):
        node = float(np.asarray(abscissae)[np.argmax(bad)])
        raise NumericalDomainError(f"integrand is not finite at node {node!r}", node=node)


def expect_gaussian_1d(f, mean: float, var: float, rule: QuadratureRule | None = None) -> float:
    """E[f(X)] for X ~ N(mean, var); ``f`` must accept numpy arrays."""
    if var < 0:
        raise InvalidArgumentError(f"variance must be nonnegative, got {var}")
    if var == 0:
        value = np.asarray(f(np.asarray([float(mean)])), dtype=float)
        _check_finite(value, [mean])
        return float(value[0])
    rule = rule or gauss_hermite()
    x = mean + np.sqrt(var) * rule.nodes
    values = np.asarray(f(x), dtype=float)
    _check_finite(values, x)
    # exact summation: mirrored terms of odd integrands cancel exactly
    return math.fsum(rule.weights * values)


def _clamp_psd(cov, tol=1e-12):
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2):
        raise InvalidCovarianceError(f"expected a 2x2 covariance, got shape {cov.shape}")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if abs(cov[0, 1] - cov[1, 0]) > tol * scale:
        raise InvalidCovarianceError("covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    eig = np.linalg.eigvalsh(cov)
    if eig[0] < -tol * scale:
        raise InvalidCovarianceError(f"covariance is not positive semidefinite (min eigenvalue {eig[0]:.3e})")
    return cov


def gaussian_2d_nodes(cov, rule: QuadratureRule | None = None, rule_inner: QuadratureRule | None = None):
    """Nodes and weights for (Z, P) ~ N(0, cov) by conditioning Z on P.

    Returns ``(z, p, w)`` flat arrays.  A zero variance for P, or a zero
    conditional variance for Z, collapses that dimension to a single point.
    """
    cov = _clamp_psd(cov)
    rule = rule or gauss_hermite()
    rule_inner = rule_inner or rule
    k11, k12, k22 = cov[0, 0], cov[0, 1], cov[1, 1]
    if k22 <= 0:
        p_nodes, p_w = np.zeros(1), np.ones(1)
        slope, cond_var = 0.0, max(k11, 0.0)
    else:
        p_nodes, p_w = np.sqrt(k22) * rule.nodes, rule.weights
        slope = k12 / k22
        cond_var = max(k11 - k12 * k12 / k22, 0.0)
    if cond_var <= 0:
        u, u_w = np.zeros(1), np.ones(1)
    else:
        u, u_w = np.sqrt(cond_var) * rule_inner.nodes, rule_inner.weights
    p = np.repeat(p_nodes, len(u))
    z = slope * p + np.tile(u, len(p_nodes))
    w = np.outer(p_w, u_w).ravel()
    return z, p, w


def expect_gaussian_2d(f, cov, rule: QuadratureRule | None = None) -> float:
    """E[f(Z, P)] for a zero-mean bivariate normal with (possibly singular) covariance."""
    z, p, w = gaussian_2d_nodes(cov, rule)
    values = np.asarray(f(z, p), dtype=float)
    if not np.all(np.isfinite(values)):
        bad = np.argmax(~np.isfinite(values))
        raise NumericalDomainError(f"integrand is not finite at node ({z[bad]!r}, {p[bad]!r})", node=(z[bad], p[bad]))
    return float(np.dot(w, values))


def _bracket(f, x0, w):
    """Vectorized uphill bracketing: returns (a, b, c, fa, fb, fc) with fb >= fa, fc and a < b < c."""
    a = x0 - w
    b = x0.copy()
    c = x0 + w
    fa, fb, fc = f(a), f(b), f(c)
    width = w.copy()
    for _ in range(MAX_EXPANSIONS):
        left = fa > fb
        right = (fc > fb) & ~left
        todo = left | right
        if not np.any(todo):
            return a, b, c, fa, fb, fc
        # shift the triple toward the uphill side and double its width
        width = np.where(todo, 2.0 * width, width)
        new_a = np.where(left, a - width, np.where(right, b, a))
        new_b = np.where(left, a, np.where(right, c, b))
        new_c = np.where(left, b, np.where(right, c + width, c))
        fa_new = np.where(left, f(new_a), np.where(right, fb, fa))
        fb_new = np.where(left, fa, np.where(right, fc, fb))
        fc_new = np.where(right, f(new_c), np.where(left, fb, fc))
        a, b, c, fa, fb, fc = new_a, new_b, new_c, fa_new, fb_new, fc_new
    left = fa > fb
    right = fc > fb
    if np.any(left | right):
        raise BracketingError(f"no maximum enclosed after {MAX_EXPANSIONS} bracket expansions")
    return a, b, c, fa, fb, fc


def maximize_scalar(f, init, bracket_halfwidth=1.0, tol=1e-10, df=None, d2f=None, max_iter=500):
    """Maximize a unimodal function, elementwise over arrays.

    ``f`` maps an array of abscissae to an array of values of the same shape;
    each element is an independent 1-D problem.  Bracketing is followed by
    golden-section search.  When ``df`` is given, the result is polished by a
    Newton iteration on ``df = 0`` that is safeguarded by bisection inside the
    final bracket (``d2f`` is used for the Newton step when available).

    Returns ``(argmax, max)`` with the same shape as ``init``.
    """
    scalar = np.ndim(init) == 0
    x0 = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    w = np.broadcast_to(np.asarray(bracket_halfwidth, dtype=float), x0.shape).copy()
    if np.any(w <= 0) or tol <= 0:
        raise InvalidArgumentError("bracket_halfwidth and tol must be positive")

    def fv(x):
        return np.asarray(f(x), dtype=float).reshape(x.shape)

    a, b, c, fa, fb, fc = _bracket(fv, x0, w)

    lo, hi = a.copy(), c.copy()
    x1 = hi - _INVPHI * (hi - lo)
    x2 = lo + _INVPHI * (hi - lo)
    f1, f2 = fv(x1), fv(x2)
    for _ in range(max_iter):
        active = (hi - lo) > tol * 0.5
        if not np.any(active):
            break
        go_left = f1 >= f2
        new_lo = np.where(go_left, lo, x1)
        new_hi = np.where(go_left, x2, hi)
        nx1 = np.where(go_left, new_hi - _INVPHI * (new_hi - new_lo), x2)
        nx2 = np.where(go_left, x1, new_lo + _INVPHI * (new_hi - new_lo))
        probe = np.where(go_left, nx1, nx2)
        fp = fv(probe)
        nf1 = np.where(go_left, fp, f2)
        nf2 = np.where(go_left, f1, fp)
        lo = np.where(active, new_lo, lo)
        hi = np.where(active, new_hi, hi)
        x1 = np.where(active, nx1, x1)
        x2 = np.where(active, nx2, x2)
        f1 = np.where(active, nf1, f1)
        f2 = np.where(active, nf2, f2)
    x = np.where(f1 >= f2, x1, x2)

    # Golden section bottoms out near sqrt(machine eps); refine on the
    # stationarity condition inside the original bracket.
    if df is not None:
        x = _polish(df, d2f, x, a, c)
    else:
        cand = _polish(_fd_derivative(fv), None, x, a, c)
        fx, fc_ = fv(x), fv(cand)
        # a kink can fool the difference quotient; keep the candidate only if it is no worse
        x = np.where(fc_ >= fx - 4 * np.finfo(float).eps * np.abs(fx), cand, x)

    fx = fv(x)
    if scalar:
        return float(x[0]), float(fx[0])
    return x, fx


def _fd_derivative(fv):
    def d(x):
        h = 1e-5 * np.maximum(1.0, np.abs(x))
        return (fv(x + h) - fv(x - h)) / (2 * h)

    return d


def _polish(df, d2f, x, lo, hi):
    """Newton on df = 0, safeguarded by bisection inside [lo, hi]."""
    def g(v):
        return np.asarray(df(v), dtype=float).reshape(v.shape)

    # a maximizer needs df > 0 on the left and df < 0 on the right; grow a
    # local bracket around x since the outer one may hold other stationary points
    ok = np.zeros(x.shape, dtype=bool)
    blo, bhi = lo, hi
    lo, hi = x.copy(), x.copy()
    width = bhi - blo
    for frac in 10.0 ** np.arange(-10, 1):
        a = np.maximum(x - frac * width, blo)
        b = np.minimum(x + frac * width, bhi)
        hit = ~ok & (g(a) > 0) & (g(b) < 0)
        lo = np.where(hit, a, lo)
        hi = np.where(hit, b, hi)
        ok |= hit
        if np.all(ok):
            break
    if not np.any(ok):
        return x
    x = np.where(ok, np.clip(x, lo, hi), x)
    for _ in range(200):
        gx = g(x)
        lo = np.where(ok & (gx > 0), x, lo)
        hi = np.where(ok & (gx < 0), x, hi)
        if d2f is not None:
            h = np.asarray(d2f(x), dtype=float).reshape(x.shape)
            with np.errstate(divide="ignore", invalid="ignore"):
                cand = x + np.where(h < 0, -gx / h, np.nan)
        else:
            cand = np.full_like(x, np.nan)
        inside = np.isfinite(cand) & (cand > lo) & (cand < hi)
        new = np.where(inside, cand, 0.5 * (lo + hi))
        new = np.where(ok & (gx != 0), new, x)
        scale = np.maximum(1.0, np.abs(x))
        settled = (np.abs(new - x) <= 2e-16 * scale) | ((hi - lo) <= 4e-16 * scale)
        x = new
        if np.all(settled | ~ok):
            break
    return x

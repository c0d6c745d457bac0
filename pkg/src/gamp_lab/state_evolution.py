"""Deterministic state-evolution (SE) recursion for GAMP.

The recursion tracks second moments of the pairs (X, Xhat) and (Z, Phat):

* ``K_x = E[(X, Xhat)^T (X, Xhat)]`` is propagated to ``K_p = c_out K_x``,
  with ``c_out = n * var(a_ij)``;
* the output update averages over (Z, Phat) ~ N(0, K_p) and Y ~ p(y | Z):
  ``tau_r = 1 / (c_in E[tau_s])``, ``xi_r = tau_r^2 c_in E[g_out^2]`` and
  ``alpha_r = tau_r c_in E[d g_out / dz]`` with ``c_in = m * var(a_ij)``;
* the input update uses the scalar-equivalent model
  ``Rhat = alpha_r X + N(0, xi_r)`` to get ``tau_x`` and the new ``K_x``.

With ``var(a_ij) = 1/m`` this is ``c_out = n/m``, ``c_in = 1``.

All expectations use uniform (trapezoid) grids whose spacing follows the
narrowest feature of the integrand, so they stay accurate when the
estimators become sharp.  ``resolution`` is the number of grid points per
feature width; doubling it is the refinement used for robustness checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .csvio import dumps_table, loads_table
from .errors import InvalidArgumentError, SingularUpdateError
from .input_channels import default_q, prior_from_spec
from .model import matrix_variance
from .output_channels import channel_from_spec

SE_COLUMNS = ("iter", "tau_x_bar", "xi_x", "tau_p_bar", "tau_r_bar", "xi_r", "alpha_r", "nse_pred_db")
DEFAULT_RESOLUTION = 4
HALFWIDTH = 12.0
MAX_POINTS = 40001
_CHUNK = 1 << 15


def se_gains(m, n, convention="one_over_n"):
    """(c_out, c_in) for an m x n matrix with the given entry-variance convention."""
    s2 = matrix_variance(m, n, convention)
    return n * s2, m * s2


@dataclass
class SeState:
    t: int
    tau_x_bar: float
    K_x: np.ndarray
    tau_p_bar: float = float("nan")
    K_p: np.ndarray | None = None
    tau_r_bar: float = float("nan")
    xi_r: float = float("nan")
    alpha_r: float = float("nan")

    @property
    def xi_x(self) -> float:
        """E[(X - Xhat)^2]."""
        K = self.K_x
        return float(K[0, 0] - 2 * K[0, 1] + K[1, 1])


@dataclass
class SeTrace:
    states: list = field(default_factory=list)
    second_moment: float = 1.0  # E[X^2], the NSE reference
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def _col(self, name):
        return [getattr(s, name) for s in self.states]

    @property
    def tau_x_bar(self):
        return self._col("tau_x_bar")

    @property
    def tau_p_bar(self):
        return self._col("tau_p_bar")

    @property
    def tau_r_bar(self):
        return self._col("tau_r_bar")

    @property
    def xi_r(self):
        return self._col("xi_r")

    @property
    def alpha_r(self):
        return self._col("alpha_r")

    @property
    def xi_x(self):
        return self._col("xi_x")

    @property
    def nse_pred_db(self):
        return [10.0 * np.log10(max(s.xi_x, 0.0) / self.second_moment) if s.xi_x > 0 else -200.0 for s in self.states]

    def rows(self):
        nse = self.nse_pred_db
        return [[s.t, s.tau_x_bar, s.xi_x, s.tau_p_bar, s.tau_r_bar, s.xi_r, s.alpha_r, nse[i]] for i, s in enumerate(self.states)]

    def to_csv(self) -> str:
        return dumps_table(SE_COLUMNS, self.rows(), self.metadata)

    @staticmethod
    def table_from_csv(text):
        """Parse an SE CSV into a dict of columns."""
        columns, rows, metadata = loads_table(text)
        if tuple(columns) != SE_COLUMNS:
            raise InvalidArgumentError(f"unexpected SE columns {columns}")
        table = {c: [r[i] for r in rows] for i, c in enumerate(columns)}
        return table, metadata


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

def _std_grid(ratio, resolution, halfwidth=HALFWIDTH):
    """Trapezoid nodes/weights for N(0, 1) with spacing ``min(1, ratio) / resolution``."""
    ratio = float(np.clip(ratio, 0.0, 1.0)) if np.isfinite(ratio) else 1.0
    if ratio <= 0:
        ratio = 1.0 / MAX_POINTS
    h = ratio / resolution
    npts = int(min(MAX_POINTS, 2 * int(np.ceil(halfwidth / h)) + 1))
    u = np.linspace(-halfwidth, halfwidth, npts)
    w = np.exp(-0.5 * u * u)
    return u, w / w.sum()


def _gauss_nodes(mean, var, feature, resolution):
    """Nodes for N(mean, var) resolving features of width ``feature``."""
    if var <= 0:
        return np.array([float(mean)]), np.ones(1)
    sd = np.sqrt(var)
    u, w = _std_grid(feature / sd, resolution)
    return mean + sd * u, w


def _psd_clean(K):
    K = 0.5 * (K + K.T)
    vals, vecs = np.linalg.eigh(K)
    if vals[0] >= 0:
        return K
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T


def _apply_chunked(fn, *arrays):
    """Call an elementwise estimator on flattened arrays in bounded chunks."""
    shape = arrays[0].shape
    flat = [a.ravel() for a in arrays]
    out_a = np.empty(flat[0].size)
    out_b = np.empty(flat[0].size)
    for start in range(0, flat[0].size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        a, b = fn(*(f[sl] for f in flat))
        out_a[sl] = np.broadcast_to(a, out_a[sl].shape)
        out_b[sl] = np.broadcast_to(b, out_b[sl].shape)
    return out_a.reshape(shape), out_b.reshape(shape)


# --------------------------------------------------------------------------
# output update
# --------------------------------------------------------------------------

def _output_linear(out_est, channel, K, resolution):
    """Expectations for an AWGN-form g_out; only conditional moments of y are needed."""
    gain, offset, _ = out_est.linear_gaussian
    k11, k12, k22 = K[0, 0], K[0, 1], K[1, 1]
    feature = channel.z_scale
    # E[m'(Z)] over Z ~ N(0, k11)
    z1, w1 = _gauss_nodes(0.0, k11, feature, resolution)
    e_dm = float(w1 @ channel.y_mean_deriv(z1))
    # E[(m(Z) - offset - gain P)^2 + v(Z)] over (Z, P) ~ N(0, K)
    p, wp = _gauss_nodes(0.0, k22, np.inf, resolution)
    if k22 > 0:
        slope, cv = k12 / k22, max(k11 - k12 * k12 / k22, 0.0)
    else:
        slope, cv = 0.0, k11
    u, wu = _gauss_nodes(0.0, cv, feature, resolution)
    z = slope * p[:, None] + u[None, :]
    resid = channel.y_mean(z) - offset - gain * p[:, None]
    e_sq = float(wp @ ((resid * resid + channel.y_var(z)) @ wu))
    return e_sq, e_dm


def se_output_update(K_p, tau_p, out_est, channel, resolution=DEFAULT_RESOLUTION):
    """Return (E[tau_s], E[g_out^2], E[d g_out / dz]) for (Z, Phat) ~ N(0, K_p).

    ``channel`` is the *true* channel; ``out_est`` may be mismatched.
    """
    K = _psd_clean(np.asarray(K_p, dtype=float))
    if out_est.linear_gaussian is not None:
        gain, _, noise_var = out_est.linear_gaussian
        den = noise_var + gain * gain * tau_p
        e_sq, e_dm = _output_linear(out_est, channel, K, resolution)
        return gain * gain / den, gain * gain * e_sq / den**2, gain * e_dm / den

    k11, k12, k22 = K[0, 0], K[0, 1], K[1, 1]
    zs = channel.z_scale
    if k22 > 0:
        slope, cv = k12 / k22, max(k11 - k12 * k12 / k22, 0.0)
        feat_p = min(zs, np.sqrt(tau_p), zs / abs(slope) if slope else np.inf)
        p, wp = _gauss_nodes(0.0, k22, feat_p, resolution)
    else:
        slope, cv = 0.0, k11
        p, wp = np.zeros(1), np.ones(1)
    u, wu = _gauss_nodes(0.0, cv, zs, resolution)
    z = slope * p[:, None] + u[None, :]  # (P, U)

    if channel.discrete:
        ys = np.asarray(channel.y_values, dtype=float)
        hy = np.ones(len(ys))
    else:
        sd_w = np.sqrt(float(np.max(channel.y_var(z))))
        m_all = channel.y_mean(z)
        lo, hi = float(m_all.min()) - HALFWIDTH * sd_w, float(m_all.max()) + HALFWIDTH * sd_w
        ny = int(min(MAX_POINTS, np.ceil((hi - lo) / (sd_w / resolution)) + 1))
        ys = np.linspace(lo, hi, ny)
        hy = np.full(ny, (hi - lo) / (ny - 1))
        hy[0] *= 0.5
        hy[-1] *= 0.5
    # L[i, k] ~ P(y_k | p_i), S[i, k] ~ E[d/dz p(y_k | Z) | p_i]
    L = np.empty((len(p), len(ys)))
    S = np.empty((len(p), len(ys)))
    if channel.additive:
        # Gaussian noise around the conditional mean: skip re-evaluating f per y node
        mz, dmz = channel.y_mean(z), channel.y_mean_deriv(z)
        nv = channel.noise_var
        norm = 1.0 / np.sqrt(2 * np.pi * nv)
        for k, yk in enumerate(ys):
            r = yk - mz
            lik = norm * np.exp(-0.5 * r * r / nv)
            L[:, k] = (lik @ wu) * hy[k]
            S[:, k] = ((lik * r * dmz) @ wu) * (hy[k] / nv)
    else:
        for k, yk in enumerate(ys):
            lik = np.exp(channel.loglik(yk, z))
            L[:, k] = (lik @ wu) * hy[k]
            S[:, k] = ((lik * channel.dloglik_dz(yk, z)) @ wu) * hy[k]
    P = np.broadcast_to(p[:, None], L.shape)
    Y = np.broadcast_to(ys[None, :], L.shape)
    g, taus = _apply_chunked(lambda a, b: out_est(a, b, np.full(a.shape, tau_p)), np.ascontiguousarray(P), np.ascontiguousarray(Y))
    e_taus = float(wp @ np.sum(L * taus, axis=1))
    e_g2 = float(wp @ np.sum(L * g * g, axis=1))
    e_dz = float(wp @ np.sum(S * g, axis=1))
    return e_taus, e_g2, e_dz


# --------------------------------------------------------------------------
# input update
# --------------------------------------------------------------------------

def _input_feature(prior, tau_r):
    """Width in rhat over which g_in can change appreciably."""
    _, var = prior.mean_var(0.0)
    sd = np.sqrt(max(float(var), 1e-300))
    return min(np.sqrt(tau_r), tau_r / sd)


def se_input_update(xi_r, alpha_r, tau_r, in_est, prior, q=0.0, resolution=DEFAULT_RESOLUTION):
    """Return (tau_x_bar, K_x) for Rhat = alpha_r X + N(0, xi_r), Xhat = g_in(Rhat, q, tau_r)."""
    if xi_r < 0:
        raise InvalidArgumentError(f"xi_r must be nonnegative, got {xi_r}")
    feat = _input_feature(prior, tau_r)
    shift = float(q) if prior.shift_by_q else 0.0
    e_xxh = e_xh2 = e_taux = 0.0

    def g(r):
        return _apply_chunked(lambda a: in_est(a, np.full(a.shape, q), np.full(a.shape, tau_r)), r)

    for x0, prob in prior.atoms:
        x0 = x0 + shift
        r, w = _gauss_nodes(alpha_r * x0, xi_r, feat, resolution)
        xh, tx = g(r)
        e_xxh += prob * x0 * (w @ xh)
        e_xh2 += prob * (w @ (xh * xh))
        e_taux += prob * (w @ tx)
    for weight, mu, v in prior.gaussians:
        mu = mu + shift
        rv = alpha_r * alpha_r * v + xi_r
        r, w = _gauss_nodes(alpha_r * mu, rv, feat, resolution)
        xh, tx = g(r)
        cond_mean = mu + (alpha_r * v / rv) * (r - alpha_r * mu) if rv > 0 else np.full(r.shape, mu)
        e_xxh += weight * (w @ (cond_mean * xh))
        e_xh2 += weight * (w @ (xh * xh))
        e_taux += weight * (w @ tx)
    if prior.density is not None:
        xs, wx = _density_nodes(prior, resolution)
        u, wu = _gauss_nodes(0.0, xi_r, feat, resolution)
        r = alpha_r * (xs[:, None] + shift) + u[None, :]
        xh, tx = g(r)
        e_xxh += wx @ ((xs + shift) * (xh @ wu))
        e_xh2 += wx @ ((xh * xh) @ wu)
        e_taux += wx @ (tx @ wu)
    _, m2 = prior.moments(q)
    K = np.array([[float(m2), e_xxh], [e_xxh, e_xh2]])
    return float(e_taux), _psd_clean(K)


def _density_nodes(prior, resolution, reach=40.0):
    """Gauss-Legendre panels (split at the kink) carrying the density part's mass."""
    c, s = prior.density_center, prior.density_scale
    split = prior.density_kink if prior.density_kink is not None else c
    npts = 40 * resolution
    gl, gw = np.polynomial.legendre.leggauss(npts)
    xs, ws = [], []
    for a, b in ((c - reach * s, split), (split, c + reach * s)):
        xs.append(0.5 * (b - a) * gl + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * gw)
    xs, ws = np.concatenate(xs), np.concatenate(ws)
    return xs, ws * np.exp(prior.density(xs))


# --------------------------------------------------------------------------
# recursion
# --------------------------------------------------------------------------

def se_init(input_spec, in_est, q=None, prior=None):
    """SE state at t = 0 from the estimator's initialization."""
    prior = prior or prior_from_spec(input_spec)
    q = float(default_q(input_spec, 1)[0]) if q is None else float(q)
    xh0, tx0 = in_est.init(np.array([q]))
    xh0, tx0 = float(np.ravel(xh0)[0]), float(np.ravel(tx0)[0])
    m1, m2 = prior.moments(q)
    K = np.array([[float(m2), float(m1) * xh0], [float(m1) * xh0, xh0 * xh0]])
    return SeState(t=0, tau_x_bar=tx0, K_x=K)


def _output_step(state, out_est, channel, c_out, c_in, resolution, tau_floor=1e-300):
    state.tau_p_bar = c_out * state.tau_x_bar
    state.K_p = c_out * state.K_x
    e_taus, e_g2, e_dz = se_output_update(state.K_p, state.tau_p_bar, out_est, channel, resolution)
    if not np.isfinite(e_taus) or e_taus <= 1e-14 / state.tau_p_bar or e_taus <= tau_floor:
        raise SingularUpdateError("expected output curvature vanishes; tau_r is undefined", iteration=state.t)
    state.tau_r_bar = 1.0 / (c_in * e_taus)
    state.xi_r = state.tau_r_bar**2 * c_in * e_g2
    state.alpha_r = state.tau_r_bar * c_in * e_dz


def se_run(input_spec, output_spec, in_est, out_est, beta, t_max, resolution=DEFAULT_RESOLUTION, c_in=1.0, q=None, channel=None, prior=None):
    """Iterate the SE recursion for ``t_max`` steps; returns an :class:`SeTrace` with t_max + 1 states.

    ``beta`` is the output gain ``c_out`` (n/m under the 1/m convention); the
    output quantities of the last state are evaluated too so that every row is
    complete.
    """
    if int(t_max) != t_max or t_max < 1:
        raise InvalidArgumentError(f"t_max must be a positive integer, got {t_max!r}")
    prior = prior or prior_from_spec(input_spec)
    channel = channel or channel_from_spec(output_spec)
    q = float(default_q(input_spec, 1)[0]) if q is None else float(q)
    state = se_init(input_spec, in_est, q, prior)
    trace = SeTrace(second_moment=float(prior.moments(q)[1]), metadata={"c_out": float(beta), "c_in": float(c_in)})
    for t in range(int(t_max) + 1):
        state.t = t
        _output_step(state, out_est, channel, beta, c_in, resolution)
        trace.states.append(state)
        if t == t_max:
            break
        tau_x, K_x = se_input_update(state.xi_r, state.alpha_r, state.tau_r_bar, in_est, prior, q, resolution)
        state = SeState(t=t + 1, tau_x_bar=tau_x, K_x=K_x)
    return trace


def check_special_case_identities(trace: SeTrace, case: str, noise_var_post=None, beta=None, c_in=1.0):
    """Largest deviations from the closed-form identities of a special regime.

    ``awgn_output``: alpha_r = 1 and tau_r = (tau_w_post + beta tau_x) / c_in.
    ``matched_sumproduct``: xi_r = tau_r and K_x = [[E X^2, E X^2 - tau_x], [., E X^2 - tau_x]].
    """
    if case == "awgn_output":
        if noise_var_post is None or beta is None:
            raise InvalidArgumentError("awgn_output check needs noise_var_post and beta")
        return {
            "alpha_r_dev": max(abs(s.alpha_r - 1.0) for s in trace.states),
            "tau_r_dev": max(abs(s.tau_r_bar - (noise_var_post + beta * s.tau_x_bar) / c_in) for s in trace.states),
        }
    if case == "matched_sumproduct":
        m2 = trace.second_moment
        kdev = 0.0
        for s in trace.states[1:]:
            form = np.array([[m2, m2 - s.tau_x_bar], [m2 - s.tau_x_bar, m2 - s.tau_x_bar]])
            kdev = max(kdev, float(np.max(np.abs(s.K_x - form))))
        return {
            "xi_r_rel_dev": max(abs(s.xi_r - s.tau_r_bar) / s.tau_r_bar for s in trace.states),
            "K_x_form_dev": kdev,
        }
    raise InvalidArgumentError(f"unknown case {case!r}")

"""Scalar MMSE denoising under a Bernoulli-Gaussian prior and its EM update.

The belief on each coordinate is the prior tilted by a Gaussian pseudo
measurement ``r = x + N(0, 1/gamma)``:

    b(x) ∝ [(1-beta) delta(x) + beta N(x; mu, tau)] exp(-gamma/2 (x - r)^2)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import expit

from .problem import BgParams

BETA_MIN = 1e-6
TAU_MIN = 1e-12

_LOG2PI = np.log(2 * np.pi)
_INV_SQRT2PI = 1.0 / math.sqrt(2 * math.pi)


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class PseudoMeasurement:
    r: np.ndarray
    gamma: float

    def __post_init__(self):
        if not (self.gamma >= 0) or not np.isfinite(self.gamma):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")


@dataclass(frozen=True)
class CoordinatePosterior:
    """Per-coordinate belief statistics; fields broadcast like ``r``."""

    pi: np.ndarray
    m_act: np.ndarray
    v_act: np.ndarray

    @property
    def mean(self):
        return self.pi * self.m_act

    @property
    def var(self):
        # pi (v + m^2) - (pi m)^2 written without cancellation
        return self.pi * self.v_act + self.pi * (1 - self.pi) * self.m_act**2


@dataclass(frozen=True)
class DenoiserOutput:
    xhat: np.ndarray
    eta: float
    pi: np.ndarray
    var: np.ndarray
    degenerate: bool = False


def _lognorm(x, mean, var):
    return -0.5 * (_LOG2PI + np.log(var) + (x - mean) ** 2 / var)


def bg_coordinate_posterior(r, gamma: float, params: BgParams) -> CoordinatePosterior:
    """Posterior active probability and active-component moments.

    ``r`` may be a scalar or an array.  With ``gamma == 0`` the prior
    moments are returned.
    """
    r = np.asarray(r, dtype=float)
    beta, mu, tau = params.beta, params.mu, params.tau
    if not np.isfinite(gamma) or gamma < 0:
        raise ValueError(f"gamma must be finite and >= 0, got {gamma}")
    if gamma == 0:
        shape = r.shape
        return CoordinatePosterior(
            pi=np.full(shape, beta), m_act=np.full(shape, mu), v_act=np.full(shape, tau)
        )
    v_act = 1.0 / (gamma + 1.0 / tau)
    m_act = v_act * (gamma * r + mu / tau)
    if beta >= 1.0:
        pi = np.ones_like(r)
    else:
        # log-likelihood ratio of slab vs spike for the pseudo measurement
        llr = (
            np.log(beta) - np.log1p(-beta)
            + _lognorm(r, mu, tau + 1.0 / gamma)
            - _lognorm(r, 0.0, 1.0 / gamma)
        )
        pi = expit(llr)
    return CoordinatePosterior(pi=pi, m_act=m_act, v_act=np.broadcast_to(v_act, r.shape).copy())


def denoise(pm: PseudoMeasurement, params: BgParams) -> DenoiserOutput:
    post = bg_coordinate_posterior(pm.r, pm.gamma, params)
    var = post.var
    avg = float(np.mean(var))
    degenerate = not (avg > 0)
    eta = np.inf if degenerate else 1.0 / avg
    return DenoiserOutput(xhat=post.mean, eta=eta, pi=post.pi, var=var, degenerate=degenerate)


def em_update_theta1(pm: PseudoMeasurement, params_old: BgParams,
                     freeze: tuple[str, ...] = (), return_flag: bool = False):
    """One EM step for ``(beta, mu, tau)``.

    The belief is computed under ``params_old``; the returned parameters
    maximise ``E[ln p(x | theta1)]`` under that belief.  Names listed in
    ``freeze`` keep their old values.
    """
    post = bg_coordinate_posterior(pm.r, pm.gamma, params_old)
    pi, m, v = post.pi, post.m_act, post.v_act
    mass = float(np.sum(pi))
    if not (mass > 0):
        warnings.warn("no posterior active mass; theta1 left unchanged", RuntimeWarning)
        return (params_old, True) if return_flag else params_old

    beta = params_old.beta if "beta" in freeze else mass / pi.size
    mu = params_old.mu if "mu" in freeze else float(np.sum(pi * m) / mass)
    if "tau" in freeze:
        tau = params_old.tau
    else:
        tau = float(np.sum(pi * (v + (m - mu) ** 2)) / mass)
    new = BgParams(
        beta=float(np.clip(beta, BETA_MIN, 1.0)), mu=mu, tau=max(tau, TAU_MIN)
    )
    return (new, False) if return_flag else new


def _slab_integrals(r: float, gamma: float, params: BgParams, funcs, epsrel=1e-12):
    """Integrate ``f(x) * beta N(x; mu, tau) exp(-gamma/2 (x-r)^2)`` for each f.

    Returns ``(log_scale, [I_f ...])`` where the true integrals are
    ``exp(log_scale) * I_f``.  The peak of the slab integrand is located
    numerically so the window does not depend on the closed-form posterior.
    """
    from scipy.optimize import minimize_scalar

    beta, mu, tau = params.beta, params.mu, params.tau

    def logf(x):
        return np.log(beta) + _lognorm(x, mu, tau) - 0.5 * gamma * (x - r) ** 2

    # the log-integrand is a concave quadratic; bracket around both centres
    lo, hi = min(r, mu), max(r, mu)
    res = minimize_scalar(lambda x: -logf(x), bounds=(lo - 1.0, hi + 1.0), method="bounded",
                          options={"xatol": 1e-12 * (1 + abs(hi))})
    x0 = float(res.x)
    curv = gamma + 1.0 / tau  # second derivative of -logf
    width = 1.0 / np.sqrt(curv)
    lf0 = logf(x0)
    out = []
    for f in funcs:
        val, err = integrate.quad(
            lambda t: f(x0 + width * t) * np.exp(logf(x0 + width * t) - lf0),
            -np.inf, np.inf, epsabs=0.0, epsrel=epsrel, limit=200,
        )
        out.append(val * width)
    return lf0, out


def quadrature_moments(r: float, gamma: float, params: BgParams):
    """Independent numerical moments of the tilted BG belief for one coordinate.

    Returns ``(pi, mean, var)`` computed by adaptive quadrature over the slab
    plus the exact atom contribution.  Used as a test oracle.
    """
    if gamma <= 0:
        raise ValueError("quadrature oracle needs gamma > 0")
    beta = params.beta
    lf0, (I0,) = _slab_integrals(r, gamma, params, [lambda x: 1.0])
    log_slab = lf0 + np.log(I0)
    log_atom = np.log1p(-beta) - 0.5 * gamma * r**2 if beta < 1 else -np.inf
    top = max(log_slab, log_atom)
    w_slab = np.exp(log_slab - top)
    w_atom = np.exp(log_atom - top)
    Z = w_slab + w_atom
    pi = w_slab / Z
    _, (I1,) = _slab_integrals(r, gamma, params, [lambda x: x])
    mean = pi * I1 / I0
    _, (I2,) = _slab_integrals(r, gamma, params, [lambda x: (x - mean) ** 2])
    var = pi * I2 / I0 + (1 - pi) * mean**2
    return float(pi), float(mean), float(var)


def expected_log_prior(pm: PseudoMeasurement, params_eval: BgParams,
                       params_belief: BgParams, epsrel: float = 1e-12) -> float:
    """``E[ln p(x | params_eval)]`` summed over coordinates.

    The belief is built from ``params_belief``.  The atom contributes
    ``(1 - pi) ln(1 - beta_eval)`` exactly; the slab term
    ``pi E_slab[ln beta_eval + ln N(x; mu_eval, tau_eval)]`` is integrated
    by adaptive quadrature against the belief's slab density.  Returns
    ``-inf`` when the belief puts mass where the evaluated prior has none.
    """
    post = bg_coordinate_posterior(pm.r, pm.gamma, params_belief)
    pi = np.atleast_1d(post.pi)
    m = np.atleast_1d(post.m_act)
    v = np.atleast_1d(post.v_act)
    be, me, te = params_eval.beta, params_eval.mu, params_eval.tau
    total = 0.0
    for pin, mn, vn in zip(pi, m, v):
        if pin < 1:
            if be >= 1:
                return -np.inf
            total += (1 - pin) * np.log1p(-be)
        if pin > 0:
            if be <= 0:
                return -np.inf
            sd = math.sqrt(vn)
            mn_, c0 = float(mn), -0.5 * math.log(2 * math.pi * te)

            def integrand(t):
                x = mn_ + sd * t
                return math.exp(-0.5 * t * t) * _INV_SQRT2PI * (c0 - 0.5 * (x - me) ** 2 / te)

            val, err = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-14,
                                      epsrel=epsrel, limit=200)
            if not np.isfinite(val) or err > 1e3 * max(epsrel * abs(val), 1e-14):
                raise QuadratureError(f"slab expectation did not converge (err={err:.2e})")
            total += pin * (np.log(be) + val)
    return float(total)


"""Likelihood building blocks: the conditional log-likelihood, the
empirical-likelihood multiplier equation, and the three-term split of the
full profile log-likelihood.

The full profile log-likelihood (constants dropped) is

    ell(N, alpha, gamma) = count_term(N, alpha)
                         + study_term(gamma)
                         - sum_i log*[1 + lambda * (Phi_i - alpha)]

where Phi_i = Phi(gamma1 + gamma2 / s_i), lambda minimizes the last sum,
and log* is the smoothed logarithm from :mod:`elmeta._special`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln

from ._special import (
    inverse_mills,
    log_star,
    log_star_prime,
    std_normal_cdf,
    std_normal_log_cdf,
)
from .model import FullParams, MetaDataset, SelectionParams, selection_probit

__all__ = [
    "ELWeights",
    "solve_lambda",
    "el_weights",
    "cond_loglik",
    "cond_loglik_grad",
    "study_loglik",
    "study_loglik_grad",
    "binom_count_loglik",
    "argmax_n_total",
    "el_term",
    "min_el_term",
    "full_profile_loglik",
    "full_profile_parts",
    "select_probs_given_se",
]

#: bracket expansion for the multiplier stops here
LAMBDA_CAP = 1e8

#: infeasible moment constraints (alpha outside the Phi range) get a steep
#: finite wall: -WALL * (1 + violation); WALL dwarfs every feasible value
#: representable in floats (|EL term| < n * log(max float) ~ 1e5)
FEASIBILITY_WALL = 1e6

#: Phi values closer to alpha than this are treated as exactly balanced
_BALANCE_TOL = 1e-14


@dataclass(frozen=True)
class ELWeights:
    """Empirical-likelihood masses on the observed standard errors.

    ``boundary`` marks the degenerate case where no interior multiplier
    exists (all Phi_i on one side of alpha); the masses then fall back to
    1/n and the moment constraint sum(p * Phi) = alpha cannot hold.
    """

    p: np.ndarray
    lam: float
    boundary: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))


def select_probs_given_se(gamma12, data: MetaDataset) -> np.ndarray:
    """Phi(gamma1 + gamma2 / s_i) for every study."""
    g1, g2 = gamma12
    return std_normal_cdf(g1 + g2 * data.inv_ses)


def _lambda_root(alpha: float, phi: np.ndarray):
    """Root of sum (Phi_i - alpha) / (1 + lam*(Phi_i - alpha)) = 0.

    Returns (lam, boundary). boundary=True when all deviations share one
    sign (or vanish), in which case lam = 0 by convention.
    """
    w = phi - alpha
    w_max = w.max()
    w_min = w.min()
    if w_max <= _BALANCE_TOL and w_min >= -_BALANCE_TOL:
        return 0.0, True
    if w_min >= -_BALANCE_TOL or w_max <= _BALANCE_TOL:
        return 0.0, True

    def residual(lam):
        return float(np.sum(w / (1.0 + lam * w)))

    if abs(residual(0.0)) <= 1e-14:
        return 0.0, False

    # residual is strictly decreasing on the open interval where all
    # 1 + lam*w stay positive; shrink toward the endpoints until it brackets
    lo_lim = -1.0 / w_max
    hi_lim = -1.0 / w_min
    for shrink in (1e-10, 1e-12, 1e-14):
        lo = lo_lim * (1.0 - shrink) if lo_lim < 0 else lo_lim * (1.0 + shrink)
        hi = hi_lim * (1.0 - shrink) if hi_lim > 0 else hi_lim * (1.0 + shrink)
        if residual(lo) > 0.0 > residual(hi):
            lam = brentq(residual, lo, hi, xtol=1e-13, rtol=8.9e-16, maxiter=200)
            break
    else:  # pragma: no cover - bracketing failed only with pathological w
        return 0.0, True

    # Newton polish for the residual tolerance
    for _ in range(5):
        r = residual(lam)
        if abs(r) <= 1e-12:
            break
        dr = -float(np.sum((w / (1.0 + lam * w)) ** 2))
        step = r / dr
        cand = lam - step
        if lo_lim < cand < hi_lim:
            lam = cand
        else:
            break
    return float(lam), False


def solve_lambda(alpha: float, gamma12, data: MetaDataset):
    """Solve the multiplier equation for the EL masses.

    Returns
    -------
    lam : float
    boundary : bool
        True when no interior root exists (all Phi_i - alpha of one sign).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    phi = select_probs_given_se(gamma12, data)
    return _lambda_root(alpha, phi)


def el_weights(alpha: float, gamma12, data: MetaDataset) -> ELWeights:
    """EL masses p_i = n^-1 [1 + lam*(Phi_i - alpha)]^-1 at the solved lam."""
    phi = select_probs_given_se(gamma12, data)
    lam, boundary = _lambda_root(alpha, phi)
    p = 1.0 / (data.n * (1.0 + lam * (phi - alpha)))
    return ELWeights(p=p, lam=lam, boundary=boundary)


def _study_terms(g: SelectionParams, data: MetaDataset):
    v = selection_probit(g, data.effects, data.ses)
    total_var = g.tau**2 + data.ses**2
    resid = data.effects - g.theta
    return (
        std_normal_log_cdf(v)
        - 0.5 * np.log(total_var)
        - resid**2 / (2.0 * total_var)
    )


def study_loglik(g: SelectionParams, data: MetaDataset) -> float:
    """sum_i [log Phi(v_i) - log-normal kernel of the effect given se].

    Additive constants (-n/2 log 2pi) are dropped, matching the profile
    log-likelihood convention.
    """
    return float(np.sum(_study_terms(g, data)))


def cond_loglik(g: SelectionParams, data: MetaDataset) -> float:
    """Conditional log-likelihood of the effects given the ses and
    publication: study_loglik minus sum_i log Phi(gamma1 + gamma2/s_i)."""
    a = g.gamma1 + g.gamma2 * data.inv_ses
    value = study_loglik(g, data) - float(np.sum(std_normal_log_cdf(a)))
    if not np.isfinite(value):
        raise FloatingPointError("conditional log-likelihood is not finite")
    return value


def _study_grad_pieces(g: SelectionParams, data: MetaDataset):
    s = data.ses
    y = data.effects
    A = g.tau**2 + s**2
    B = 1.0 - (g.rho**2) * s**2 / A
    D = np.sqrt(B)
    m = g.gamma1 + g.gamma2 / s + g.rho * s * (y - g.theta) / A
    v = m / D
    r = inverse_mills(v)
    return s, y, A, B, D, m, r


def study_loglik_grad(g: SelectionParams, data: MetaDataset) -> np.ndarray:
    """Gradient of :func:`study_loglik` in (gamma1, gamma2, rho, tau, theta)."""
    s, y, A, B, D, m, r = _study_grad_pieces(g, data)
    resid = y - g.theta
    d_g1 = np.sum(r / D)
    d_g2 = np.sum(r / (s * D))
    d_rho = np.sum(r * (s * resid / (A * D) + m * g.rho * s**2 / (A * D**3)))
    d_tau = np.sum(
        r
        * (
            -2.0 * g.tau * g.rho * s * resid / (A**2 * D)
            - m * g.tau * g.rho**2 * s**2 / (A**2 * D**3)
        )
        - g.tau / A
        + g.tau * resid**2 / A**2
    )
    d_theta = np.sum(r * (-g.rho * s / (A * D)) + resid / A)
    return np.array([d_g1, d_g2, d_rho, d_tau, d_theta])


def cond_loglik_grad(g: SelectionParams, data: MetaDataset) -> np.ndarray:
    """Gradient of :func:`cond_loglik` in (gamma1, gamma2, rho, tau, theta)."""
    grad = study_loglik_grad(g, data)
    a = g.gamma1 + g.gamma2 * data.inv_ses
    ratio = inverse_mills(a)
    grad[0] -= np.sum(ratio)
    grad[1] -= np.sum(ratio * data.inv_ses)
    return grad


def binom_count_loglik(n_total, alpha: float, n: int) -> float:
    """log C(N, n) + (N - n) log(1 - alpha), via log-gamma (N may be real)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if n_total < n:
        raise ValueError("n_total must be >= n")
    n_total = float(n_total)
    log_choose = gammaln(n_total + 1.0) - gammaln(n + 1.0) - gammaln(n_total - n + 1.0)
    return float(log_choose + (n_total - n) * math.log1p(-alpha))


def argmax_n_total(alpha: float, n: int) -> int:
    """Integer N maximizing the count term at fixed alpha.

    The ratio test gives N <= n/alpha as the increasing range, so the
    maximizer is floor(n/alpha); exact ties are broken upward.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    x = n / alpha
    best = int(math.floor(x + 1e-9))
    return max(best, n)


def el_term(lam: float, alpha: float, phi: np.ndarray, c_n: float) -> float:
    """-sum_i log*[1 + lam*(Phi_i - alpha)] at a given multiplier."""
    z = 1.0 + lam * (phi - alpha)
    return -float(np.sum(log_star(z, c_n)))


def _el_term_dlam(lam: float, w: np.ndarray, c_n: float) -> float:
    z = 1.0 + lam * w
    return -float(np.sum(w * log_star_prime(z, c_n)))


def min_el_term(alpha: float, phi: np.ndarray, c_n: float, lam0: float = 0.0):
    """Minimize the smoothed EL term over the multiplier.

    The objective is convex and C2 in lambda.  When all Phi_i - alpha share
    one sign, alpha lies outside the convex hull of the Phi_i, the infimum
    over the multiplier is -inf, and the moment constraint is infeasible;
    a steep finite wall sloped toward feasibility stands in, flagged by a
    non-finite lam (+inf when alpha is below every Phi_i, -inf above).

    Returns (value, lam).
    """
    w = phi - alpha
    if not math.isfinite(lam0):
        lam0 = 0.0
    if np.all(np.abs(w) <= _BALANCE_TOL):
        return 0.0, 0.0
    if w.min() >= -_BALANCE_TOL:  # alpha below every Phi_i
        return -FEASIBILITY_WALL * (1.0 + float(w.min())), math.inf
    if w.max() <= _BALANCE_TOL:  # alpha above every Phi_i
        return -FEASIBILITY_WALL * (1.0 - float(w.max())), -math.inf
    d0 = _el_term_dlam(0.0, w, c_n)
    if abs(d0) <= 1e-14:
        return el_term(0.0, alpha, phi, c_n), 0.0

    # bracket the sign change of the (nondecreasing) derivative
    if d0 < 0.0:
        lo, dlo = 0.0, d0
        hi = max(1.0, 2.0 * abs(lam0))
        while _el_term_dlam(hi, w, c_n) < 0.0:
            hi *= 4.0
            if hi >= LAMBDA_CAP:
                return el_term(LAMBDA_CAP, alpha, phi, c_n), LAMBDA_CAP
    else:
        hi, dhi = 0.0, d0
        lo = min(-1.0, -2.0 * abs(lam0))
        while _el_term_dlam(lo, w, c_n) > 0.0:
            lo *= 4.0
            if lo <= -LAMBDA_CAP:
                return el_term(-LAMBDA_CAP, alpha, phi, c_n), -LAMBDA_CAP

    lam = lam0 if lo < lam0 < hi else 0.5 * (lo + hi)
    for _ in range(100):
        d = _el_term_dlam(lam, w, c_n)
        if d > 0.0:
            hi = lam
        else:
            lo = lam
        z = 1.0 + lam * w
        upper = z > 1.0 / c_n
        z_safe = np.where(upper, z, 1.0)
        curv = float(np.sum(np.where(upper, (w / z_safe) ** 2,
                                     w * w * c_n * c_n)))
        step = d / curv if curv > 0 else 0.0
        cand = lam - step
        if not lo < cand < hi:
            cand = 0.5 * (lo + hi)
        if abs(cand - lam) <= 1e-12 * max(1.0, abs(lam)):
            lam = cand
            break
        lam = cand
    return el_term(lam, alpha, phi, c_n), float(lam)


def full_profile_parts(fp: FullParams, data: MetaDataset, c_n: float | None = None):
    """The three terms of the profile log-likelihood plus the solved lam."""
    c_n = float(data.n) if c_n is None else float(c_n)
    phi = select_probs_given_se((fp.gamma.gamma1, fp.gamma.gamma2), data)
    count = binom_count_loglik(fp.n_total, fp.alpha, data.n)
    study = study_loglik(fp.gamma, data)
    el_val, lam = min_el_term(fp.alpha, phi, c_n)
    return count, study, el_val, lam


def full_profile_loglik(fp: FullParams, data: MetaDataset,
                        c_n: float | None = None) -> float:
    """Profile log-likelihood of (N, alpha, gamma) with the EL masses
    profiled out (smoothed log inside the EL term)."""
    count, study, el_val, _ = full_profile_parts(fp, data, c_n)
    return count + study + el_val

"""Scalar special functions shared across the package.

Normal CDF/PDF wrappers delegate to scipy.special (erf-based, abs error
well below 1e-12); the smoothed logarithm used inside the empirical
likelihood term is implemented here.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

__all__ = [
    "std_normal_cdf",
    "std_normal_pdf",
    "std_normal_log_cdf",
    "std_normal_quantile",
    "inverse_mills",
    "log_star",
    "log_star_prime",
    "chi2_quantile",
]

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def std_normal_cdf(x):
    """Standard normal distribution function Phi(x)."""
    return _sp.ndtr(x)


def std_normal_pdf(x):
    """Standard normal density phi(x)."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI)
    return out if out.ndim else float(out)


def std_normal_log_cdf(x):
    """log Phi(x), safe for strongly negative arguments (no log(0))."""
    return _sp.log_ndtr(x)


def std_normal_quantile(p):
    """Inverse of Phi."""
    return _sp.ndtri(p)


def inverse_mills(x):
    """phi(x) / Phi(x), computed in log space to survive x << 0."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI - _sp.log_ndtr(x))
    return out if out.ndim else float(out)


def log_star(z, c_n):
    """Smoothed logarithm: log(z) above 1/c_n, quadratic extension below.

    The two branches agree in value and first derivative at z = 1/c_n,
    so the result is concave and continuously differentiable on all reals.
    """
    if c_n <= 0:
        raise ValueError("c_n must be positive")
    z = np.asarray(z, dtype=float)
    zc = z * c_n
    upper = z > 1.0 / c_n
    out = np.where(
        upper,
        np.log(np.where(upper, z, 1.0)),
        -np.log(c_n) - 1.5 + 2.0 * zc - 0.5 * zc * zc,
    )
    return out if out.ndim else float(out)


def log_star_prime(z, c_n):
    """First derivative of :func:`log_star` with respect to z."""
    if c_n <= 0:
        raise ValueError("c_n must be positive")
    z = np.asarray(z, dtype=float)
    upper = z > 1.0 / c_n
    out = np.where(upper, 1.0 / np.where(upper, z, 1.0), c_n * (2.0 - z * c_n))
    return out if out.ndim else float(out)


def chi2_quantile(level, df=1):
    """Chi-square quantile via the regularized incomplete gamma inverse."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return float(_sp.chdtri(df, 1.0 - level))

"""Core data types and model densities for the selection meta-analysis model.

The observation model for a study with true standard error ``s``:

* effect estimate given s:  ``y = theta + tau * u + s * eps`` with
  ``u, eps`` independent standard normal;
* latent publication score:  ``z = gamma1 + gamma2 / s + delta`` where
  ``(eps, delta)`` is bivariate standard normal with correlation ``rho``;
  the study is published iff ``z > 0``.

All densities below condition on pieces of this model and reduce to the
univariate normal CDF.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._special import std_normal_cdf, std_normal_log_cdf, std_normal_pdf

__all__ = [
    "DegenerateModelError",
    "StudyRecord",
    "MetaDataset",
    "SelectionParams",
    "FullParams",
    "selection_probit",
    "p_select_given_study",
    "p_select_given_se",
    "effect_density_given_se",
]

#: denominator of the conditional probit below this is treated as zero
_DEGENERATE_TOL = 1e-12


class DegenerateModelError(ValueError):
    """Raised when (rho, tau) make the conditional selection variance vanish."""


@dataclass(frozen=True)
class StudyRecord:
    """One published study: effect estimate and its standard error."""

    effect: float
    se: float

    def __post_init__(self):
        if not np.isfinite(self.effect):
            raise ValueError("effect must be finite")
        if not (np.isfinite(self.se) and self.se > 0):
            raise ValueError("se must be finite and positive")


class MetaDataset:
    """Ordered collection of published studies, stored as numpy arrays.

    Parameters
    ----------
    effects, ses : array-like, shape (n,)
        Effect estimates and their standard errors; n >= 2, ses > 0.
    """

    def __init__(self, effects, ses):
        effects = np.atleast_1d(np.asarray(effects, dtype=float))
        ses = np.atleast_1d(np.asarray(ses, dtype=float))
        if effects.ndim != 1 or ses.ndim != 1 or effects.shape != ses.shape:
            raise ValueError("effects and ses must be 1-d arrays of equal length")
        if effects.size < 2:
            raise ValueError("at least 2 studies are required")
        if not np.all(np.isfinite(effects)):
            raise ValueError("effects must be finite")
        if not (np.all(np.isfinite(ses)) and np.all(ses > 0)):
            raise ValueError("ses must be finite and positive")
        self.effects = effects.copy()
        self.ses = ses.copy()
        self.effects.flags.writeable = False
        self.ses.flags.writeable = False
        self.inv_ses = 1.0 / self.ses
        self.inv_ses.flags.writeable = False

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls([r.effect for r in records], [r.se for r in records])

    @property
    def n(self) -> int:
        return self.effects.size

    @property
    def studies(self):
        return tuple(StudyRecord(float(y), float(s))
                     for y, s in zip(self.effects, self.ses))

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"MetaDataset(n={self.n})"


@dataclass(frozen=True)
class SelectionParams:
    """Selection-model parameter vector (gamma1, gamma2, rho, tau, theta).

    gamma1, gamma2 control publication probability through
    Phi(gamma1 + gamma2 / se); rho is the correlation between outcome and
    selection errors; tau >= 0 the between-study heterogeneity SD; theta the
    overall effect.
    """

    gamma1: float
    gamma2: float
    rho: float
    tau: float
    theta: float

    def __post_init__(self):
        vals = (self.gamma1, self.gamma2, self.rho, self.tau, self.theta)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("all parameters must be finite")
        if abs(self.rho) > 1.0:
            raise ValueError("|rho| must be <= 1")
        if self.tau < 0.0:
            raise ValueError("tau must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma1, self.gamma2, self.rho, self.tau, self.theta])

    @classmethod
    def from_array(cls, x) -> "SelectionParams":
        g1, g2, rho, tau, theta = (float(v) for v in x)
        return cls(g1, g2, rho, tau, theta)


@dataclass(frozen=True)
class FullParams:
    """Full-likelihood parameter: total study count, marginal publication
    probability, and the selection parameters.

    ``n_total`` is kept as a float so profile searches can move continuously;
    reported values are rounded to integers.
    """

    n_total: float
    alpha: float
    gamma: SelectionParams

    def __post_init__(self):
        if not np.isfinite(self.n_total) or self.n_total < 1:
            raise ValueError("n_total must be finite and >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


def _conditional_variance(g: SelectionParams, se):
    """1 - rho^2 * s^2 / (tau^2 + s^2), the conditional probit variance."""
    se = np.asarray(se, dtype=float)
    total_var = g.tau**2 + se**2
    return 1.0 - (g.rho**2) * se**2 / total_var


def selection_probit(g: SelectionParams, effect, se):
    """Probit argument of the publication probability given (effect, se).

    Equals [gamma1 + gamma2/s + rho*s*(y - theta)/(tau^2+s^2)] divided by
    sqrt(1 - rho^2 s^2/(tau^2+s^2)).

    Raises
    ------
    DegenerateModelError
        If the denominator vanishes (tau = 0 together with |rho| = 1).
    """
    effect = np.asarray(effect, dtype=float)
    se = np.asarray(se, dtype=float)
    total_var = g.tau**2 + se**2
    denom_sq = _conditional_variance(g, se)
    if np.any(denom_sq <= _DEGENERATE_TOL):
        raise DegenerateModelError(
            "conditional selection variance is numerically zero "
            "(tau ~ 0 with |rho| ~ 1)"
        )
    num = g.gamma1 + g.gamma2 / se + g.rho * se * (effect - g.theta) / total_var
    out = num / np.sqrt(denom_sq)
    return out if out.ndim else float(out)


def p_select_given_study(g: SelectionParams, effect, se):
    """Publication probability given both the effect estimate and its se."""
    return std_normal_cdf(selection_probit(g, effect, se))


def log_p_select_given_study(g: SelectionParams, effect, se):
    """log of :func:`p_select_given_study`, underflow-safe."""
    return std_normal_log_cdf(selection_probit(g, effect, se))


def p_select_given_se(g: SelectionParams, se):
    """Publication probability given the standard error alone:
    Phi(gamma1 + gamma2 / se)."""
    se = np.asarray(se, dtype=float)
    out = std_normal_cdf(g.gamma1 + g.gamma2 / se)
    return out if np.ndim(out) else float(out)


def log_p_select_given_se(g: SelectionParams, se):
    """log Phi(gamma1 + gamma2 / se), underflow-safe."""
    se = np.asarray(se, dtype=float)
    return std_normal_log_cdf(g.gamma1 + g.gamma2 / se)


def effect_density_given_se(g: SelectionParams, effect, se):
    """Marginal density of the effect estimate given se:
    N(theta, tau^2 + s^2) evaluated at ``effect``."""
    effect = np.asarray(effect, dtype=float)
    se = np.asarray(se, dtype=float)
    total_var = g.tau**2 + se**2
    if np.any(total_var <= 0):
        raise ValueError("tau^2 + se^2 must be positive")
    out = std_normal_pdf((effect - g.theta) / np.sqrt(total_var)) / np.sqrt(total_var)
    return out if np.ndim(out) else float(out)

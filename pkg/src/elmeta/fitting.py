"""Maximum-likelihood fitting.

Two estimators live here: the conditional MLE (multi-start block
maximization of the conditional log-likelihood) and the full MLE, computed
by profiling the count and EL terms over alpha:

    step 1  for fixed alpha, maximize the count term over N (closed form)
            and minimize the EL term over the multiplier;
    step 2  maximize the study term over the selection parameters
            (the (rho, tau, theta) block, or all five in free mode);
    step 3  scalar maximization over alpha (coarse scan + bounded Brent);
    step 4  recover (N, gamma) at the alpha maximizer.

`profile_full_loglik` runs the same machinery with any subset of
coordinates held fixed, which is what likelihood-ratio intervals need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from ._special import log_star_prime, std_normal_cdf, std_normal_pdf
from .likelihood import (
    FEASIBILITY_WALL,
    _lambda_root,
    argmax_n_total,
    binom_count_loglik,
    cond_loglik,
    cond_loglik_grad,
    min_el_term,
    select_probs_given_se,
    study_loglik,
    study_loglik_grad,
)
from .model import FullParams, MetaDataset, SelectionParams

__all__ = [
    "FitOptions",
    "FitReport",
    "ProfilePoint",
    "fit_conditional",
    "fit_full",
    "profile_full_loglik",
    "numerical_hessian",
    "random_effects_ml",
    "dl_estimate",
]

#: alpha search interval: the lower end caps N at 50n (n/alpha <= 50n)
ALPHA_LO = 0.02
ALPHA_HI = 1.0 - 1e-6

_X5_NAMES = ("gamma1", "gamma2", "rho", "tau", "theta")

_DEFAULT_GAMMA12_GRID = tuple(
    (g1, g2)
    for g1 in (-1.5, -1.0, -0.6, -0.2)
    for g2 in (0.2, 0.4, 0.6, 0.8, 1.0)
)


@dataclass(frozen=True)
class FitOptions:
    """Knobs for both fitters; defaults follow the package conventions."""

    gamma12_grid: tuple = _DEFAULT_GAMMA12_GRID
    max_iter: int = 200
    tol: float = 1e-8
    c_n: float | None = None
    mode: str = "fix_gamma12"
    polish: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if len(self.gamma12_grid) == 0:
            raise ValueError("gamma12_grid must be nonempty")
        if self.mode not in ("fix_gamma12", "free_gamma12"):
            raise ValueError("mode must be 'fix_gamma12' or 'free_gamma12'")
        if self.c_n is not None and not self.c_n > 0:
            raise ValueError("c_n must be > 0")


@dataclass(frozen=True)
class FitReport:
    """Outcome of one fit: the point, its log-likelihood, and diagnostics."""

    params: object  # SelectionParams (conditional) or FullParams (full)
    loglik: float
    converged: bool
    n_evals: int
    mode: str
    warnings: tuple = ()
    lam: float | None = None

    def __post_init__(self):
        if self.converged and not math.isfinite(self.loglik):
            raise ValueError("converged fit must have finite loglik")


@dataclass
class ProfilePoint:
    """A maximized profile log-likelihood with the maximizing coordinates."""

    loglik: float
    x5: np.ndarray
    alpha: float
    n_total: float
    lam: float
    h1: float
    h23: float
    inner_converged: bool
    n_evals: int


def dl_estimate(data: MetaDataset):
    """Moment (DerSimonian–Laird) heterogeneity and effect estimates."""
    w = 1.0 / data.ses**2
    theta_fe = float(np.sum(w * data.effects) / np.sum(w))
    q = float(np.sum(w * (data.effects - theta_fe) ** 2))
    denom = float(np.sum(w) - np.sum(w**2) / np.sum(w))
    tau2 = max(0.0, (q - (data.n - 1)) / denom) if denom > 0 else 0.0
    w2 = 1.0 / (data.ses**2 + tau2)
    theta = float(np.sum(w2 * data.effects) / np.sum(w2))
    return math.sqrt(tau2), theta


def random_effects_ml(data: MetaDataset):
    """ML fit of the no-selection random-effects model.

    Maximizes sum_i [-log(tau^2+s_i^2)/2 - (y_i-theta)^2/(2(tau^2+s_i^2))]
    over tau >= 0 and theta; this is the limit the conditional fit
    collapses to when rho = 0.
    """
    s2 = data.ses**2
    y = data.effects

    def neg(x):
        tau, theta = x
        a = tau**2 + s2
        r = y - theta
        val = -0.5 * np.sum(np.log(a)) - 0.5 * np.sum(r**2 / a)
        d_tau = np.sum(-tau / a + tau * r**2 / a**2)
        d_theta = np.sum(r / a)
        return -val, -np.array([d_tau, d_theta])

    tau0, theta0 = dl_estimate(data)
    best = None
    for t0 in (max(tau0, 0.05), 0.0):
        res = minimize(neg, np.array([t0, theta0]), jac=True,
                       method="L-BFGS-B", bounds=[(0.0, None), (None, None)],
                       options={"maxiter": 200, "ftol": 1e-12})
        if best is None or res.fun < best.fun:
            best = res
    return float(best.x[0]), float(best.x[1])


def _x5_bounds(data: MetaDataset):
    sd = float(np.std(data.effects, ddof=1)) if data.n > 1 else 1.0
    tau_hi = 10.0 * sd if sd > 0 else 10.0
    return [
        (-20.0, 20.0),
        (-20.0, 20.0),
        (-1.0 + 1e-6, 1.0 - 1e-6),
        (0.0, tau_hi),
        (float(data.effects.min()) - 5.0, float(data.effects.max()) + 5.0),
    ]


def _proj_grad_inf(x, grad, bounds):
    """Infinity norm of the gradient projected onto the feasible box."""
    worst = 0.0
    for xi, gi, (lo, hi) in zip(x, grad, bounds):
        g = gi
        if lo is not None and xi <= lo + 1e-12 and g > 0:
            g = 0.0
        if hi is not None and xi >= hi - 1e-12 and g < 0:
            g = 0.0
        worst = max(worst, abs(g))
    return worst


# ---------------------------------------------------------------------------
# conditional fit
# ---------------------------------------------------------------------------

def fit_conditional(data: MetaDataset, opts: FitOptions | None = None) -> FitReport:
    """Conditional MLE over (gamma1, gamma2, rho, tau, theta).

    Each (gamma1, gamma2) grid point anchors a stable inner maximization
    over (rho, tau, theta); the best few grid points are then polished with
    all five coordinates free.  Ties go to the lexicographically smallest
    grid start.
    """
    opts = opts or FitOptions()
    if data.n < 5:
        raise ValueError("n >= 5 required: the model has five free parameters")

    bounds5 = _x5_bounds(data)
    tau_ml, theta_ml = random_effects_ml(data)
    tau_start = min(max(tau_ml, 0.05), bounds5[3][1])
    evals = [0]

    def neg5(x):
        evals[0] += 1
        g = SelectionParams(*x)
        return -cond_loglik(g, data), -cond_loglik_grad(g, data)

    def neg3(x, g12):
        evals[0] += 1
        g = SelectionParams(g12[0], g12[1], x[0], x[1], x[2])
        return -cond_loglik(g, data), -cond_loglik_grad(g, data)[2:]

    scipy_opts = {"maxiter": opts.max_iter, "ftol": 1e-12, "gtol": 1e-9}
    grid = sorted(tuple(map(float, g)) for g in opts.gamma12_grid)
    per_start = []
    for g12 in grid:
        best_inner = None
        for rho0 in (-0.5, 0.5):
            x0 = np.array([rho0, tau_start, theta_ml])
            res = minimize(neg3, x0, args=(g12,), jac=True, method="L-BFGS-B",
                           bounds=bounds5[2:], options=scipy_opts)
            if best_inner is None or res.fun < best_inner.fun - 1e-12:
                best_inner = res
        x5 = np.array([g12[0], g12[1], *best_inner.x])
        per_start.append((float(-best_inner.fun), x5, g12))

    per_start_vals = [v for v, _, _ in per_start]
    order = sorted(range(len(per_start)), key=lambda i: (-per_start_vals[i], grid[i]))

    warnings = []
    if opts.polish:
        polished = []
        for i in order[:3]:
            res = minimize(neg5, per_start[i][1], jac=True, method="L-BFGS-B",
                           bounds=bounds5, options=scipy_opts)
            polished.append((float(-res.fun), res.x.copy(), grid[i]))
        polished.sort(key=lambda t: (-t[0], t[2]))
        best_val, best_x, _ = polished[0]
        spread = polished[0][0] - polished[-1][0]
        if len(polished) > 1 and spread > 1e-3:
            warnings.append(
                "multi-start disagreement: polished optima differ by "
                f"{spread:.3g} in log-likelihood; possible multimodality"
            )
    else:
        best_val, best_x, _ = per_start[order[0]]

    g_hat = SelectionParams(*best_x)
    grad = cond_loglik_grad(g_hat, data)
    converged = _proj_grad_inf(best_x, -grad, bounds5) < 1e-5
    if abs(g_hat.rho) < 0.05:
        warnings.append(
            "identifiability: |rho| < 0.05; selection parameters are weakly "
            "identified when rho is near 0"
        )
    return FitReport(params=g_hat, loglik=best_val, converged=converged,
                     n_evals=evals[0], mode=opts.mode, warnings=tuple(warnings))


# ---------------------------------------------------------------------------
# full fit via the alpha profile
# ---------------------------------------------------------------------------

def _el_term_grad_g12(lam, alpha, gamma12, data, c_n):
    """d/d(gamma1,gamma2) of the minimized EL term (envelope form).

    A non-finite lam marks the infeasibility wall; its slope pulls the
    nearest Phi_i back toward alpha.
    """
    a = gamma12[0] + gamma12[1] * data.inv_ses
    phi = std_normal_cdf(a)
    if not math.isfinite(lam):
        i = int(np.argmin(phi)) if lam > 0 else int(np.argmax(phi))
        slope = (-1.0 if lam > 0 else 1.0) * FEASIBILITY_WALL * std_normal_pdf(a[i])
        return float(slope), float(slope * data.inv_ses[i])
    z = 1.0 + lam * (phi - alpha)
    inner = -lam * log_star_prime(z, c_n) * std_normal_pdf(a)
    return float(np.sum(inner)), float(np.sum(inner * data.inv_ses))


def _max_h23(data, alpha, c_n, free_idx, template, starts, bounds5,
             evals, lam_cell, maxiter):
    """Maximize study term + minimized EL term over x5[free_idx].

    Returns (value, x5, lam, converged).  `lam_cell` carries the EL
    multiplier across calls as a warm start.
    """
    g12_free = 0 in free_idx or 1 in free_idx
    template = np.asarray(template, dtype=float)

    if not g12_free:
        phi = select_probs_given_se((template[0], template[1]), data)
        el_val, lam = min_el_term(alpha, phi, c_n, lam0=lam_cell[0])
        lam_cell[0] = lam
    else:
        el_val = lam = None  # recomputed inside the objective

    def neg(xf):
        evals[0] += 1
        x5 = template.copy()
        x5[free_idx] = xf
        g = SelectionParams(*x5)
        val = study_loglik(g, data)
        grad = study_loglik_grad(g, data)
        if g12_free:
            phi_g = select_probs_given_se((x5[0], x5[1]), data)
            ev, lm = min_el_term(alpha, phi_g, c_n, lam0=lam_cell[0])
            lam_cell[0] = lm
            d1, d2 = _el_term_grad_g12(lm, alpha, (x5[0], x5[1]), data, c_n)
            val += ev
            grad = grad.copy()
            grad[0] += d1
            grad[1] += d2
        return -val, -grad[free_idx]

    scipy_opts = {"maxiter": maxiter, "ftol": 1e-12, "gtol": 1e-9}
    sub_bounds = [bounds5[i] for i in free_idx]
    best = None
    for x0 in starts:
        res = minimize(neg, np.asarray(x0, dtype=float)[free_idx], jac=True,
                       method="L-BFGS-B", bounds=sub_bounds, options=scipy_opts)
        if best is None or res.fun < best.fun - 1e-12:
            best = res
    x5 = template.copy()
    x5[free_idx] = best.x
    value = float(-best.fun)
    if not g12_free:
        value += el_val
    else:
        lam = lam_cell[0]
    grad_ok = _proj_grad_inf(best.x, best.jac, sub_bounds) < 1e-5
    return value, x5, float(lam), grad_ok


def profile_full_loglik(data: MetaDataset, gamma12_init, opts: FitOptions | None = None,
                        fix: dict | None = None, warm: ProfilePoint | None = None) -> ProfilePoint:
    """Profile log-likelihood with an arbitrary subset of coordinates fixed.

    `fix` maps coordinate names ('gamma1', 'gamma2', 'rho', 'tau', 'theta',
    'alpha', 'n_total') to fixed values; everything else is maximized.  In
    fix_gamma12 mode the gammas stay at `gamma12_init` unless listed in
    `fix` explicitly.

    The alpha search is golden-section + parabolic refinement over the whole
    interval, and in free mode every alpha evaluation restarts the inner
    maximization from the same anchor (`warm` when given, else the
    conditional-fit-based start).  Both choices are deliberate: the full
    likelihood has a degenerate ridge (gamma2 large, every selection
    probability near 1, alpha near 1, N = n) where the model collapses to
    no selection, and a fixed anchor plus a sliver-blind scalar search keep
    the estimator on the anchored interior maximum instead.
    """
    opts = opts or FitOptions()
    fix = dict(fix or {})
    unknown = set(fix) - set(_X5_NAMES) - {"alpha", "n_total"}
    if unknown:
        raise ValueError(f"unknown coordinates in fix: {sorted(unknown)}")
    c_n = float(data.n) if opts.c_n is None else float(opts.c_n)
    bounds5 = _x5_bounds(data)
    n = data.n

    template = np.empty(5)
    template[0], template[1] = gamma12_init
    if warm is not None:
        template[:] = warm.x5
        template[0], template[1] = (warm.x5[0], warm.x5[1])
    else:
        tau_ml, theta_ml = random_effects_ml(data)
        template[2] = 0.0
        template[3] = min(max(tau_ml, 0.05), bounds5[3][1])
        template[4] = theta_ml
    if opts.mode == "fix_gamma12":
        template[0], template[1] = gamma12_init
    for name, val in fix.items():
        if name in _X5_NAMES:
            template[_X5_NAMES.index(name)] = float(val)

    fixed_x5 = set(fix) & set(_X5_NAMES)
    if opts.mode == "fix_gamma12":
        fixed_x5 |= {"gamma1", "gamma2"}
    free_idx = np.array([i for i, nm in enumerate(_X5_NAMES) if nm not in fixed_x5],
                        dtype=int)
    if free_idx.size == 0:
        raise ValueError("no free selection coordinates to maximize over")

    if warm is not None:
        starts = [template.copy()]
    elif 2 in free_idx:
        starts = []
        for rho0 in (-0.5, 0.5):
            x0 = template.copy()
            x0[2] = rho0
            starts.append(x0)
    else:
        starts = [template.copy()]

    evals = [0]
    lam_cell = [warm.lam if warm is not None else 0.0]
    fixed_n = fix.get("n_total")
    if fixed_n is not None and fixed_n < n:
        raise ValueError("fixed n_total must be >= n")

    def count_term(alpha):
        if fixed_n is not None:
            return binom_count_loglik(fixed_n, alpha, n), float(fixed_n)
        n_best = argmax_n_total(alpha, n)
        return binom_count_loglik(n_best, alpha, n), float(n_best)

    g12_free = (0 in free_idx) or (1 in free_idx)
    if not g12_free:
        # study term does not depend on alpha: maximize it once
        h2_val, x5_hat, _, grad_ok = _max_h23(
            data, 0.5, c_n, free_idx, template, starts, bounds5, evals,
            [0.0], opts.max_iter)
        phi_fixed = select_probs_given_se((x5_hat[0], x5_hat[1]), data)
        # remove the EL part evaluated at the dummy alpha
        h2_val -= min_el_term(0.5, phi_fixed, c_n)[0]

        def h123(alpha):
            h1v, _ = count_term(alpha)
            el_v, lam = min_el_term(alpha, phi_fixed, c_n, lam0=lam_cell[0])
            lam_cell[0] = lam
            return h1v + h2_val + el_v
    else:

        def h123(alpha):
            val, x5, lam, ok = _max_h23(
                data, alpha, c_n, free_idx, template, starts,
                bounds5, evals, lam_cell, opts.max_iter)
            return h1v_plus(alpha, val)

        def h1v_plus(alpha, val):
            h1v, _ = count_term(alpha)
            return h1v + val

    if "alpha" in fix:
        alpha_hat = float(fix["alpha"])
        if not ALPHA_LO <= alpha_hat <= ALPHA_HI:
            raise ValueError("fixed alpha outside the search interval")
    else:
        res_a = minimize_scalar(lambda a: -h123(a), bounds=(ALPHA_LO, ALPHA_HI),
                                method="bounded",
                                options={"xatol": 1e-7, "maxiter": 300})
        alpha_hat = float(res_a.x)

    # final assembly at alpha_hat
    if not g12_free:
        h1v, n_hat = count_term(alpha_hat)
        el_v, lam = min_el_term(alpha_hat, phi_fixed, c_n, lam0=lam_cell[0])
        total = h1v + h2_val + el_v
        point = ProfilePoint(loglik=total, x5=x5_hat.copy(), alpha=alpha_hat,
                             n_total=n_hat, lam=float(lam), h1=h1v,
                             h23=h2_val + el_v, inner_converged=grad_ok,
                             n_evals=evals[0])
    else:
        val, x5, lam, ok = _max_h23(
            data, alpha_hat, c_n, free_idx, template, starts,
            bounds5, evals, lam_cell, opts.max_iter)
        h1v, n_hat = count_term(alpha_hat)
        point = ProfilePoint(loglik=h1v + val, x5=x5.copy(), alpha=alpha_hat,
                             n_total=n_hat, lam=float(lam), h1=h1v, h23=val,
                             inner_converged=ok, n_evals=evals[0])
    return point


def fit_full(data: MetaDataset, gamma12_init, opts: FitOptions | None = None) -> FitReport:
    """Full MLE of (N, alpha, gamma) by the nested alpha profile.

    `gamma12_init` anchors the gammas: they stay fixed in fix_gamma12 mode
    and serve as starting values in free_gamma12 mode.
    """
    opts = opts or FitOptions()
    if data.n < 5:
        raise ValueError("n >= 5 required: the model has five free parameters")
    g12 = (float(gamma12_init[0]), float(gamma12_init[1]))
    point = profile_full_loglik(data, g12, opts)

    warnings = []
    if point.alpha - ALPHA_LO < 1e-4:
        warnings.append("alpha at the lower search bound: the N <= 50n cap is active")
    elif ALPHA_HI - point.alpha < 1e-4:
        warnings.append("alpha at the upper search bound (near 1)")
    if not point.inner_converged:
        warnings.append("inner maximization did not meet the gradient tolerance")

    # report when the smoothed objective differs from the plain-log one
    phi = select_probs_given_se((point.x5[0], point.x5[1]), data)
    c_n = float(data.n) if opts.c_n is None else float(opts.c_n)
    lam_plain, boundary = _lambda_root(point.alpha, phi)
    smooth_val = min_el_term(point.alpha, phi, c_n, lam0=point.lam)[0]
    if boundary:
        warnings.append(
            "EL moment constraint infeasible at alpha-hat under the plain "
            "log; the smoothed objective value was used"
        )
    else:
        plain_val = -float(np.sum(np.log1p(lam_plain * (phi - point.alpha))))
        if abs(plain_val - smooth_val) > 1e-8:
            warnings.append(
                f"smoothed EL term {smooth_val:.10g} differs from plain-log "
                f"value {plain_val:.10g} at the optimum"
            )

    gamma = SelectionParams(*point.x5)
    params = FullParams(n_total=point.n_total, alpha=point.alpha, gamma=gamma)
    return FitReport(params=params, loglik=point.loglik,
                     converged=point.inner_converged, n_evals=point.n_evals,
                     mode=opts.mode, warnings=tuple(warnings), lam=point.lam)


def numerical_hessian(objective, x):
    """Central-difference Hessian with step 1e-4 * max(1, |x_j|) per axis.

    Symmetric by construction; raises FloatingPointError naming the entry
    indices when any evaluation turns out non-finite.
    """
    x = np.asarray(x, dtype=float)
    k = x.size
    h = 1e-4 * np.maximum(1.0, np.abs(x))
    f0 = objective(x)
    hess = np.empty((k, k))

    def at(shift):
        return objective(x + shift)

    for j in range(k):
        ej = np.zeros(k)
        ej[j] = h[j]
        hess[j, j] = (at(ej) - 2.0 * f0 + at(-ej)) / h[j] ** 2
    for j in range(k):
        for l in range(j + 1, k):
            ej = np.zeros(k)
            el_ = np.zeros(k)
            ej[j] = h[j]
            el_[l] = h[l]
            val = (at(ej + el_) - at(ej - el_) - at(-ej + el_) + at(-ej - el_))
            hess[j, l] = hess[l, j] = val / (4.0 * h[j] * h[l])

    bad = [(int(j), int(l)) for j in range(k) for l in range(k)
           if not np.isfinite(hess[j, l])]
    if bad:
        raise FloatingPointError(f"non-finite Hessian entries at {bad}")
    return hess

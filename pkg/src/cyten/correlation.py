"""Logistic-regression association of CE probabilities with AHT and outcome.

Fits p(y=1) = sigmoid(b0 + b1 x) by iteratively reweighted least squares
and reports McFadden pseudo-R^2 (1 - LL / LL_null). Functional-status
scores are binned Good (<=6), Mild (7..14), Moderate (15..21),
Severe (>=22); the outcome fit dichotomizes at the Good boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ValidationError

FSS_BINS = ("Good", "Mild", "Moderate", "Severe")
SEPARATION_SLOPE = 50.0
GRAD_TOL = 1e-8
MAX_ITER = 100

# Externally reported reference values for the two analyses; not
# reproducible on synthetic cohorts and carried only as documentation.
REFERENCE_R2 = {"aht": 0.5, "outcome": 0.64}


def bin_fss(score):
    """Functional-status category for an integer score >= 0."""
    score = int(score)
    if score < 0:
        raise ValidationError("bad fss", f"fss score must be >= 0, got {score}")
    if score <= 6:
        return "Good"
    if score <= 14:
        return "Mild"
    if score <= 21:
        return "Moderate"
    return "Severe"


@dataclass
class LogisticFit:
    intercept: float
    slope: float
    converged: bool
    separable: bool
    iterations: int
    log_likelihood: float
    null_log_likelihood: float
    mcfadden_r2: float

    def to_dict(self):
        return asdict(self)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_likelihood(x, y, b0, b1):
    eta = b0 + b1 * x
    # log sigma(eta) = -log(1+e^-eta); stable split on sign
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(x, y):
    """Maximum-likelihood univariate logistic fit via IRLS.

    Requires n >= 4 and both classes present. Complete separation is
    detected when |slope| exceeds 50 and flagged instead of silently
    returning a diverging estimate.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("shape mismatch", f"x {list(x.shape)} vs y {list(y.shape)}")
    if x.size < 4:
        raise ValidationError("too few points", f"fit_logistic needs n >= 4, got {x.size}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("bad label", "y must be 0 or 1")
    if y.min() == y.max():
        raise ValidationError("single-class outcome", "fit_logistic needs both classes present")

    design = np.column_stack([np.ones_like(x), x])
    theta = np.zeros(2)
    converged = False
    separable = False
    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        eta = design @ theta
        p = _sigmoid(eta)
        grad = design.T @ (y - p)
        if np.linalg.norm(grad) < GRAD_TOL:
            converged = True
            break
        w = np.maximum(p * (1.0 - p), 1e-10)
        z = eta + (y - p) / w
        sw = np.sqrt(w)
        theta_new, *_ = np.linalg.lstsq(design * sw[:, None], z * sw, rcond=None)
        theta = theta_new
        if abs(theta[1]) > SEPARATION_SLOPE:
            separable = True
            break
    else:
        iterations = MAX_ITER

    ll = _log_likelihood(x, y, theta[0], theta[1])
    pbar = float(y.mean())
    ll_null = float(y.size * (pbar * np.log(pbar) + (1.0 - pbar) * np.log(1.0 - pbar)))
    r2 = 1.0 - ll / ll_null if ll_null < 0 else 0.0
    # guard tiny negative drift from the converged-at-null case
    r2 = float(min(max(r2, 0.0), 1.0 - 1e-15))
    return LogisticFit(intercept=float(theta[0]), slope=float(theta[1]),
                       converged=converged and not separable, separable=separable,
                       iterations=iterations, log_likelihood=ll,
                       null_log_likelihood=ll_null, mcfadden_r2=r2)


def fitted_curve(fit, x_values, n_points=101):
    """Sampled fitted probabilities for plotting, spanning the data range."""
    x = np.asarray(x_values, dtype=np.float64)
    grid = np.linspace(float(x.min()), float(x.max()), n_points)
    p = _sigmoid(fit.intercept + fit.slope * grid)
    return [{"x": float(a), "p": float(b)} for a, b in zip(grid, p)]


def correlate_report(probabilities, aht_labels, fss_scores):
    """Two logistic fits of per-subject CE probability.

    Fit A: y = AHT label. Fit B: y = 1 when the functional-status score
    exceeds the Good boundary (score > 6). Subjects missing the needed
    label are dropped per analysis and the drop counts reported.
    """
    subjects = sorted(probabilities)
    report = {"n_subjects": len(subjects), "reference_r2": dict(REFERENCE_R2, reproducible=False)}

    for name, label_of in (("aht", lambda s: aht_labels.get(s)),
                           ("outcome", lambda s: None if fss_scores.get(s) is None else int(fss_scores[s] > 6))):
        xs, ys = [], []
        for s in subjects:
            lab = label_of(s)
            if lab is None:
                continue
            xs.append(probabilities[s])
            ys.append(lab)
        dropped = len(subjects) - len(xs)
        if len(xs) < 4:
            raise ValidationError("too few points", f"{name} analysis has {len(xs)} usable subjects, needs >= 4")
        fit = fit_logistic(np.array(xs), np.array(ys))
        report[name] = {
            "n_used": len(xs),
            "n_dropped_missing": dropped,
            "fit": fit.to_dict(),
            "curve": fitted_curve(fit, xs),
        }
    return report

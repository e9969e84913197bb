"""Binary pseudo-masks from continuous anomaly maps.

Scores below a fixed quantile form the fitting set for a one- or
two-component Gaussian mixture (the truncation keeps the rare true
anomalies from distorting the fit); the component count is chosen by BIC.
The cutoff is the largest per-component upper-tail threshold, and the map
is binarized against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from batchad.errors import DataError

EM_TOL = 1e-6
EM_MAX_ITER = 500
VARIANCE_FLOOR_SCALE = 1e-12

# Rational approximation for the inverse standard-normal CDF (max error
# ~1.15e-9) followed by one Halley step, which brings it to full double
# precision away from the endpoints.
_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02,
           -2.759285104469687e+02, 1.383577518672690e+02,
           -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02,
           -1.556989798598866e+02, 6.680131188771972e+01,
           -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01,
           -2.400758277161838e+00, -2.549732539343734e+00,
           4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01,
           2.445134137142996e+00, 3.754408661907416e+00)


def norm_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_quantile(q):
    """Inverse standard-normal CDF."""
    if not 0.0 < q < 1.0:
        raise DataError(f"quantile must be in (0, 1), got {q}")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    p_low = 0.02425
    if q < p_low:
        t = math.sqrt(-2.0 * math.log(q))
        x = (((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) / \
            ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + 1.0)
    elif q <= 1.0 - p_low:
        t = q - 0.5
        r = t * t
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * t / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        t = math.sqrt(-2.0 * math.log(1.0 - q))
        x = -(((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) / \
            ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + 1.0)
    err = norm_cdf(x) - q
    u = err * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def truncate_scores(scores, q_fit=0.95):
    """Scores at or below the empirical q_fit quantile."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise DataError("empty score set")
    if not 0.0 < q_fit <= 1.0:
        raise DataError(f"q_fit must be in (0, 1], got {q_fit}")
    if q_fit == 1.0:
        return s.copy()
    return s[s <= np.percentile(s, 100.0 * q_fit)]


@dataclass
class GmmFit:
    k: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    bic: dict
    converged: bool = True
    warnings: list = field(default_factory=list)


def _em_1d(z, k, floor, tol=EM_TOL, max_iter=EM_MAX_ITER):
    """EM for a 1-D Gaussian mixture on standardized data.

    Initialization splits the sample at its median (deterministic).
    Returns (weights, means, variances, loglik, converged).
    """
    n = z.size
    if k == 1:
        mu = np.array([z.mean()])
        var = np.array([max(z.var(), floor)])
        ll = float(np.sum(_log_normal(z, mu[0], var[0])))
        return np.array([1.0]), mu, var, ll, True

    median = np.median(z)
    lower, upper = z[z <= median], z[z > median]
    if upper.size == 0:                    # constant-ish data
        lower, upper = z[: n // 2], z[n // 2:]
    weights = np.array([lower.size / n, upper.size / n])
    means = np.array([lower.mean(), upper.mean()])
    variances = np.maximum(np.array([lower.var(), upper.var()]), floor)

    prev_ll = -np.inf
    converged = False
    for _ in range(max_iter):
        log_p = np.stack([
            np.log(weights[j]) + _log_normal(z, means[j], variances[j])
            for j in range(2)
        ])
        mx = log_p.max(axis=0)
        log_total = mx + np.log(np.exp(log_p - mx).sum(axis=0))
        ll = float(log_total.sum())
        resp = np.exp(log_p - log_total)
        nk = resp.sum(axis=1)
        nk = np.maximum(nk, 1e-300)
        weights = nk / n
        means = (resp @ z) / nk
        variances = np.maximum(
            (resp @ (z**2)) / nk - means**2, floor
        )
        if abs(ll - prev_ll) < tol:
            converged = True
            break
        prev_ll = ll
    return weights, means, variances, ll, converged


def _log_normal(z, mu, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (z - mu) ** 2 / var)


def fit_gmm(fitting_set, max_components=2):
    """Fit K in {1..max_components} by EM and keep the lowest BIC.

    Data are standardized internally (the reported parameters are on the
    original scale), variances are floored at 1e-12 times the squared data
    range, and BIC counts 3K-1 free parameters.
    """
    s = np.asarray(fitting_set, dtype=np.float64).ravel()
    n = s.size
    if n < 20:
        raise DataError(f"need >= 20 samples to fit, got {n}")
    span = float(s.max() - s.min())
    loc = float(s.mean())
    scale = span if span > 0 else 1.0
    z = (s - loc) / scale
    floor = VARIANCE_FLOOR_SCALE * max(span, 1.0) ** 2 / scale**2

    fits, bics = {}, {}
    warnings = []
    for k in range(1, max_components + 1):
        weights, means, variances, ll_std, conv = _em_1d(z, k, floor)
        ll = ll_std - n * np.log(scale)
        bic = -2.0 * ll + (3 * k - 1) * np.log(n)
        fits[k] = (weights, means * scale + loc, variances * scale**2, conv)
        bics[k] = float(bic)
        if not conv:
            warnings.append(f"EM for K={k} hit the iteration cap")
    best = min(bics, key=lambda k: (bics[k], k))
    weights, means, variances, conv = fits[best]
    return GmmFit(k=best, weights=weights, means=means, variances=variances,
                  bic=bics, converged=conv, warnings=warnings)


@dataclass
class ThresholdDecision:
    q_comp: float
    thresholds: np.ndarray
    cutoff: float
    q_fit: float = None


def adaptive_cutoff(fit, q_comp=0.99, q_fit=None):
    """Largest per-component upper-tail threshold mu_j + sigma_j * z(q)."""
    z = norm_quantile(q_comp)
    thresholds = fit.means + np.sqrt(fit.variances) * z
    return ThresholdDecision(
        q_comp=float(q_comp),
        thresholds=thresholds,
        cutoff=float(thresholds.max()),
        q_fit=q_fit,
    )


def binarize(anomaly_map, cutoff):
    """Binary pseudo-mask: one where the map reaches the cutoff."""
    return (np.asarray(anomaly_map) >= cutoff).astype(np.uint8)


def generate_pseudo_masks(maps, scope="category", q_fit=0.95, q_comp=0.99):
    """Pseudo-masks for a set of continuous anomaly maps.

    ``scope='category'`` pools all map values into one fit (the default);
    ``scope='image'`` fits each map separately.  Returns
    ``(masks, decisions)`` aligned with the input order.
    """
    if scope not in ("category", "image"):
        raise DataError(f"scope must be 'category' or 'image', got {scope!r}")
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks, decisions = [], []
    if scope == "category":
        pooled = np.concatenate([m.ravel() for m in maps])
        fit = fit_gmm(truncate_scores(pooled, q_fit))
        decision = adaptive_cutoff(fit, q_comp, q_fit)
        for m in maps:
            masks.append(binarize(m, decision.cutoff))
            decisions.append(decision)
    else:
        for m in maps:
            fit = fit_gmm(truncate_scores(m.ravel(), q_fit))
            decision = adaptive_cutoff(fit, q_comp, q_fit)
            masks.append(binarize(m, decision.cutoff))
            decisions.append(decision)
    return masks, decisions

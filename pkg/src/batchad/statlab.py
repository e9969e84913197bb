"""Statistical laboratory for the heavy-tail similarity model.

Tools to estimate tail indices from inverse distances, fit the power-law
decay of mutual-distance growth rates, verify the Beta order-statistic
spacing law by simulation, and reproduce the Poisson point-process toy
model where the tail index of inverse distances equals the ambient
dimension.  All sampling uses counter-based generators so outputs are
reproducible from the stamped seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from batchad.errors import DataError

BETA_RATIO_CEIL_EPS = 1e-12


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class HillCurve:
    ks: np.ndarray
    estimates: np.ndarray


@dataclass
class PowerLawFit:
    exponent: float          # slope magnitude in log-log space
    intercept: float
    r_squared: float


@dataclass
class SpacingStats:
    alpha0: float
    means: np.ndarray        # E[log spacing] per rank i = 1..omega-1
    variances: np.ndarray
    spacings: np.ndarray     # [replicates, omega-1]
    seed: int

    def expected_mean(self, i):
        return 1.0 / (self.alpha0 * i)

    def expected_variance(self, i):
        return 1.0 / (self.alpha0 * i) ** 2


@dataclass
class PoissonTailResult:
    curves: list             # HillCurve per reference point
    plateaus: np.ndarray
    n_points: int
    seed: int


@dataclass
class QQResult:
    empirical: np.ndarray
    theoretical: np.ndarray
    ks_distance: float


def hill_estimator(samples, k):
    """Hill tail-index estimate from the k largest samples."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    n = s.size
    if not 1 <= k < n:
        raise DataError(f"need 1 <= k < n, got k={k}, n={n}")
    if np.any(s <= 0):
        raise DataError("samples must be positive")
    top = np.sort(s)[::-1][: k + 1]
    logs = np.log(top)
    denom = logs[:k].mean() - logs[k]
    if denom <= 0:
        raise DataError("degenerate tail: mean log excess is zero")
    return float(1.0 / denom)


def hill_curve(samples, ks=None):
    """Hill estimates across a range of order statistics."""
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())[::-1]
    n = s.size
    if n < 2:
        raise DataError("need at least two samples")
    if np.any(s <= 0):
        raise DataError("samples must be positive")
    if ks is None:
        ks = np.arange(1, n)
    ks = np.asarray(ks, dtype=np.int64)
    logs = np.log(s)
    csum = np.cumsum(logs)
    est = np.empty(ks.size)
    for out, k in enumerate(ks):
        denom = csum[k - 1] / k - logs[k]
        est[out] = np.inf if denom <= 0 else 1.0 / denom
    return HillCurve(ks=ks, estimates=est)


def plateau_estimate(curve, lo_frac=0.05, hi_frac=0.20):
    """Median Hill estimate over the fixed k-window [5%, 20%] of n."""
    n = curve.ks.max() + 1
    lo = max(1, int(np.floor(lo_frac * n)))
    hi = max(lo, int(np.floor(hi_frac * n)))
    window = curve.estimates[(curve.ks >= lo) & (curve.ks <= hi)]
    finite = window[np.isfinite(window)]
    if finite.size == 0:
        raise DataError("no finite Hill estimates in the plateau window")
    return float(np.median(finite))


def fit_power_law(mean_growth_rates, ranks=None):
    """OLS fit of log growth rate against log rank.

    Nonpositive growth rates are dropped; at least three points must
    remain.  Returns the slope magnitude as the decay exponent.
    """
    y = np.asarray(mean_growth_rates, dtype=np.float64).ravel()
    x = np.arange(1, y.size + 1, dtype=np.float64) if ranks is None \
        else np.asarray(ranks, dtype=np.float64).ravel()
    keep = y > 0
    x, y = x[keep], y[keep]
    if y.size < 3:
        raise DataError(f"need >= 3 positive growth rates, got {y.size}")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(exponent=float(abs(slope)), intercept=float(intercept),
                       r_squared=float(r2))


def sample_beta_order_stats(alpha0, omega, replicates, seed=0):
    """Monte-Carlo log-spacings of Beta(alpha0, 1) order statistics.

    Each replicate draws ``omega`` samples; spacing i is
    ln Z_(i+1) - ln Z_(i) of the ascending order statistics, expected to be
    Exp(alpha0 * i): mean 1/(alpha0 i), variance 1/(alpha0 i)^2.
    """
    if alpha0 <= 0:
        raise DataError(f"alpha0 must be positive, got {alpha0}")
    if omega < 2:
        raise DataError(f"omega must be >= 2, got {omega}")
    rng = _rng(seed)
    u = rng.random((replicates, omega))
    z = u ** (1.0 / alpha0)
    z.sort(axis=1)
    spacings = np.diff(np.log(z), axis=1)
    return SpacingStats(
        alpha0=float(alpha0),
        means=spacings.mean(axis=0),
        variances=spacings.var(axis=0, ddof=1),
        spacings=spacings,
        seed=seed,
    )


def poisson_toy_model(intensity, domain_size, d, reference_points, seed=0):
    """Inverse-distance Hill curves in a homogeneous Poisson field.

    Points are scattered with the given intensity over [0, domain_size]^d;
    for each reference point the Hill curve of inverse distances is
    returned along with its plateau estimate (expected near d).
    """
    if intensity <= 0:
        raise DataError(f"intensity must be positive, got {intensity}")
    rng = _rng(seed)
    volume = float(domain_size) ** d
    n = int(rng.poisson(intensity * volume))
    if n < 10:
        raise DataError(f"only {n} points sampled; increase the domain or intensity")
    points = rng.random((n, d)) * domain_size
    refs = np.atleast_2d(np.asarray(reference_points, dtype=np.float64))
    if refs.shape[1] != d:
        raise DataError(f"reference points must have dimension {d}")
    curves, plateaus = [], []
    for ref in refs:
        z = np.linalg.norm(points - ref, axis=1)
        z = z[z > 0]
        curve = hill_curve(1.0 / z)
        curves.append(curve)
        plateaus.append(plateau_estimate(curve))
    return PoissonTailResult(curves=curves, plateaus=np.asarray(plateaus),
                             n_points=n, seed=seed)


def qq_beta(ratios, alpha0, beta=1.0):
    """Empirical vs Beta quantiles of endurance ratios, with KS distance."""
    z = np.asarray(ratios, dtype=np.float64).ravel()
    if z.size == 0:
        raise DataError("empty ratio sample")
    if np.any(z <= 0) or np.any(z > 1):
        raise DataError("ratios must lie in (0, 1]")
    z = np.sort(z)
    n = z.size
    probs = (np.arange(1, n + 1) - 0.5) / n
    theoretical = stats.beta.ppf(probs, alpha0, beta)
    cdf = stats.beta.cdf(z, alpha0, beta)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(0, n) / n
    ks = float(max(upper.max(), lower.max()))
    return QQResult(empirical=z, theoretical=theoretical, ks_distance=ks)


def fit_beta_alpha(ratios):
    """Maximum-likelihood shape of Beta(alpha, 1) from ratios in (0, 1).

    Values at or above one are nudged just below it; if every value needed
    nudging the estimate diverges and an error is raised.
    """
    z = np.asarray(ratios, dtype=np.float64).ravel()
    if z.size < 2:
        raise DataError("need at least two ratios")
    if np.any(z <= 0):
        raise DataError("ratios must be positive")
    capped = z >= 1.0
    if capped.all():
        raise DataError("all ratios at the upper bound; shape diverges")
    z = np.where(capped, 1.0 - BETA_RATIO_CEIL_EPS, z)
    return float(-z.size / np.log(z).sum())


def small_ball_ratio(points, center, radii):
    """Empirical mass of balls around a point, scaled by r^d."""
    pts = np.asarray(points, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    d = pts.shape[1]
    dist = np.linalg.norm(pts - center, axis=1)
    radii = np.asarray(radii, dtype=np.float64)
    mass = np.array([(dist <= r).mean() for r in radii])
    return mass / radii**d

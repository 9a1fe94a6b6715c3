"""Multi-annotator reference construction and the agreement/evaluation
statistics suite: leave-one-out specialist deviations, ICC(A,k) with a
95% confidence interval, error statistics, Bland-Altman agreement, tolerance
curves, and per-category breakdowns.

Sample (n-1) standard deviations are used for every reported statistic;
population std appears only in image normalization.
"""

import math
from dataclasses import dataclass

import numpy as np

ALPHA = 0.05  # two-sided confidence level for the ICC interval


@dataclass(frozen=True)
class FrameAgreement:
    key: tuple  # (video_id, frame_idx)
    reference: tuple
    distances_to_reference: tuple  # one per specialist, in label order
    loo_deviation: float
    sigma: float  # sample std of the distances to the reference


def reference_labels(positions_by_frame):
    """Coordinate-wise mean of the specialists' positions, per frame."""
    refs = {}
    for key, positions in positions_by_frame.items():
        if len(positions) < 2:
            raise ValueError(f"frame {key}: need >= 2 specialists, got {len(positions)}")
        pts = np.asarray(positions, dtype=np.float64)
        refs[key] = tuple(pts.mean(axis=0))
    return refs


def loo_specialist_deviation(positions):
    """Per-specialist leave-one-out distances and their mean for one frame.

    Each specialist's label is compared with the mean of the remaining ones;
    the frame deviation is the mean over the folds.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise ValueError(f"need >= 3 specialists for leave-one-out, got {n}")
    total = pts.sum(axis=0)
    dists = np.empty(n)
    for k in range(n):
        others_mean = (total - pts[k]) / (n - 1)
        dists[k] = np.hypot(*(pts[k] - others_mean))
    return dists, float(dists.mean())


def frame_agreement(key, positions):
    """Reference, per-specialist distances, LOO deviation and spread for a frame.

    With only two specialists the leave-one-out deviation is undefined and
    reported as NaN; the reference and spread remain valid.
    """
    pts = np.asarray(positions, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError(f"frame {key}: need >= 2 specialists, got {len(pts)}")
    ref = pts.mean(axis=0)
    dref = np.hypot(pts[:, 0] - ref[0], pts[:, 1] - ref[1])
    if len(pts) >= 3:
        _, dbar = loo_specialist_deviation(positions)
    else:
        dbar = float("nan")
    sigma = float(dref.std(ddof=1))
    return FrameAgreement(
        key=key,
        reference=tuple(ref),
        distances_to_reference=tuple(dref),
        loo_deviation=dbar,
        sigma=sigma,
    )


def _log_beta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 500):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_cdf(x, d1, d2):
    if x <= 0:
        return 0.0
    return betainc_reg(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_ppf(q, d1, d2, tol=1e-10):
    """F-distribution quantile by bisection on the regularized incomplete beta."""
    if not (0.0 < q < 1.0):
        raise ValueError("q must be in (0, 1)")
    lo, hi = 0.0, 1.0
    while f_cdf(hi, d1, d2) < q:
        hi *= 2.0
        if hi > 1e300:
            raise ArithmeticError("F quantile bracket overflow")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f_cdf(mid, d1, d2) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, lo):
            break
    return 0.5 * (lo + hi)


def _anova_mean_squares(table):
    """Two-way mean squares (rows, columns, error) of an n x k table."""
    table = np.asarray(table, dtype=np.float64)
    n, k = table.shape
    grand = table.mean()
    row_means = table.mean(axis=1)
    col_means = table.mean(axis=0)
    ssr = k * np.sum((row_means - grand) ** 2)
    ssc = n * np.sum((col_means - grand) ** 2)
    sst = np.sum((table - grand) ** 2)
    sse = sst - ssr - ssc
    msr = ssr / (n - 1)
    msc = ssc / (k - 1)
    mse = sse / ((n - 1) * (k - 1))
    return msr, msc, mse


def icc_a_k(ratings, alpha=ALPHA):
    """Two-way absolute-agreement mean-rating ICC with a confidence interval.

    ICC(A,k) = (MSR - MSE) / (MSR + (MSC - MSE)/n) from the two-way ANOVA
    mean squares. The interval follows the single-rater absolute-agreement
    interval stepped up to k raters. A constant table is perfect agreement by
    convention: ICC 1 with interval [1, 1].
    """
    table = np.asarray(ratings, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("ratings must be a 2D frames x raters table")
    n, k = table.shape
    if n < 5:
        raise ValueError(f"need >= 5 frames for the ICC, got {n}")
    if not np.isfinite(table).all():
        raise ValueError("ratings contain missing or non-finite cells")
    if np.ptp(table) == 0.0:
        return 1.0, 1.0, 1.0
    msr, msc, mse = _anova_mean_squares(table)
    denom = msr + (msc - mse) / n
    icc_k = (msr - mse) / denom if denom != 0 else 1.0
    if mse == 0.0 and msc == 0.0:
        return float(icc_k), 1.0, 1.0

    icc_1 = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)
    a = k * icc_1 / (n * (1.0 - icc_1)) if icc_1 != 1.0 else np.inf
    b = 1.0 + k * icc_1 * (n - 1.0) / (n * (1.0 - icc_1)) if icc_1 != 1.0 else np.inf
    if not np.isfinite(a):
        return float(icc_k), 1.0, 1.0
    v = (a * msc + b * mse) ** 2 / (
        (a * msc) ** 2 / (k - 1) + (b * mse) ** 2 / ((n - 1) * (k - 1))
    )
    f_u = f_ppf(1.0 - alpha / 2.0, n - 1.0, v)
    f_l = f_ppf(1.0 - alpha / 2.0, v, n - 1.0)
    lo1 = n * (msr - f_u * mse) / (
        f_u * (k * msc + (k * n - k - n) * mse) + n * msr
    )
    hi1 = n * (f_l * msr - mse) / (
        k * msc + (k * n - k - n) * mse + n * f_l * msr
    )
    lo_k = lo1 * k / (1.0 + (k - 1.0) * lo1)
    hi_k = hi1 * k / (1.0 + (k - 1.0) * hi1)
    return float(icc_k), float(lo_k), float(hi_k)


def error_stats(model_positions, reference_positions, spacing_mm):
    """RMSE, SEM, and MAE in millimetres over Euclidean distances.

    spacing_mm may be a scalar or a per-frame array of mm-per-pixel factors.
    """
    model = np.asarray(model_positions, dtype=np.float64)
    ref = np.asarray(reference_positions, dtype=np.float64)
    if model.shape != ref.shape or model.ndim != 2:
        raise ValueError("aligned (n, 2) position arrays required")
    if model.shape[0] == 0:
        raise ValueError("empty position set")
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    if np.any(spacing <= 0):
        raise ValueError("spacing must be positive")
    d = np.hypot(model[:, 0] - ref[:, 0], model[:, 1] - ref[:, 1]) * spacing
    return distance_stats(d)


def distance_stats(distances_mm):
    """RMSE / SEM / MAE of a set of mm distances (SEM = sample SD / sqrt(n))."""
    d = np.asarray(distances_mm, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty distance set")
    rmse = float(np.sqrt(np.mean(d**2)))
    sem = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    mae = float(np.mean(d))
    return {"rmse": rmse, "sem": sem, "mae": mae, "n": int(d.size)}


def bland_altman(model_values, reference_values, image_extent):
    """Bias and 95% limits of agreement for one coordinate axis.

    Differences are model minus reference; the abscissa is the pairwise mean
    normalized by the image extent (scalar or per-element).
    """
    model = np.asarray(model_values, dtype=np.float64)
    ref = np.asarray(reference_values, dtype=np.float64)
    if model.shape != ref.shape or model.size == 0:
        raise ValueError("aligned non-empty value arrays required")
    diffs = model - ref
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1)) if diffs.size > 1 else 0.0
    means = ((model + ref) / 2.0) / np.asarray(image_extent, dtype=np.float64)
    return {
        "bias": bias,
        "loa_low": bias - 1.96 * sd,
        "loa_high": bias + 1.96 * sd,
        "pairs": np.stack([means, diffs], axis=1),
    }


def tolerance_curve(model_distances, specialist_distances, sigma_bar, n_grid):
    """Percent of frames within n* * sigma_bar, for the model and specialists.

    specialist_distances pools every specialist-to-reference distance; both
    resulting curves are monotone non-decreasing in n*.
    """
    if sigma_bar <= 0:
        raise ValueError("sigma_bar must be positive")
    model = np.asarray(model_distances, dtype=np.float64)
    spec = np.asarray(specialist_distances, dtype=np.float64)
    curve = []
    for n_star in n_grid:
        tol = n_star * sigma_bar
        model_pct = 100.0 * np.mean(model <= tol) if model.size else float("nan")
        spec_pct = 100.0 * np.mean(spec <= tol) if spec.size else float("nan")
        curve.append((float(n_star), float(model_pct), float(spec_pct)))
    return curve


def breakdown(distances_mm, group_labels):
    """Per-group distance statistics; groups with no frames are reported empty."""
    d = np.asarray(distances_mm, dtype=np.float64)
    labels = np.asarray(group_labels)
    if d.shape[0] != labels.shape[0]:
        raise ValueError("distances and group labels must align")
    out = {}
    for g in sorted(set(labels.tolist())):
        out[g] = distance_stats(d[labels == g])
    return out

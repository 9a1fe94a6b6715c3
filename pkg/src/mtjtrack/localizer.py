"""Point estimates from probability maps via bounded 2D Gaussian least
squares, plus the three error-case filters applied before evaluation."""

import enum
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from . import heatmap

_DEGENERATE_EPS = 1e-6
SIGMA_MIN = 0.5
LOW_CONFIDENCE = 0.25
BORDER_PAD = 10
SPECIALIST_DISTANCE_FACTOR = 20.0
MIN_INCONSISTENT = 3


class FilterCase(enum.Enum):
    NONE = "none"
    BORDER = "border"
    LOW_CONFIDENCE_PAD = "low_confidence_pad"
    SPECIALIST_INCONSISTENT = "specialist_inconsistent"


@dataclass(frozen=True)
class FilterVerdict:
    kept: bool
    case: FilterCase

    def __post_init__(self):
        if self.kept != (self.case is FilterCase.NONE):
            raise ValueError("kept must hold exactly when case is NONE")


@dataclass(frozen=True)
class GaussParams:
    """Elliptical Gaussian A*exp(-(a dx^2 + 2b dx dy + c dy^2)) + d with the
    quadratic-form coefficients derived from (sigma_x, sigma_y, theta)."""

    A: float
    x0: float
    y0: float
    sigma_x: float
    sigma_y: float
    theta: float
    d: float

    def as_vector(self):
        return np.array(
            [self.A, self.x0, self.y0, self.sigma_x, self.sigma_y, self.theta, self.d]
        )

    @classmethod
    def from_vector(cls, v):
        return cls(*(float(x) for x in v))


@dataclass(frozen=True)
class Prediction:
    position: tuple  # (x, y) integer pixel coordinates
    confidence: float
    gauss: GaussParams
    fit_converged: bool


def _quad_coeffs(sigma_x, sigma_y, theta):
    ct, st = np.cos(theta), np.sin(theta)
    a = ct**2 / (2 * sigma_x**2) + st**2 / (2 * sigma_y**2)
    b = -np.sin(2 * theta) / (4 * sigma_x**2) + np.sin(2 * theta) / (4 * sigma_y**2)
    c = st**2 / (2 * sigma_x**2) + ct**2 / (2 * sigma_y**2)
    return a, b, c


def gauss2d(params, width, height):
    """Evaluate the model on a width x height pixel grid."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    dx = xs[None, :] - params.x0
    dy = ys[:, None] - params.y0
    a, b, c = _quad_coeffs(params.sigma_x, params.sigma_y, params.theta)
    return params.A * np.exp(-(a * dx**2 + 2 * b * dx * dy + c * dy**2)) + params.d


def init_guess(pmap):
    """Starting parameters from map statistics.

    Amplitude is max minus twice the pixel std, the center sits at the argmax,
    both spreads are five times the pixel std, and angle/offset start at zero.
    """
    pmap = np.asarray(pmap, dtype=np.float64)
    if pmap.size == 0:
        raise ValueError("empty map")
    (x0, y0), vmax = heatmap.peak(pmap)
    sd = float(pmap.std())
    return GaussParams(
        A=vmax - 2.0 * sd,
        x0=float(x0),
        y0=float(y0),
        sigma_x=5.0 * sd,
        sigma_y=5.0 * sd,
        theta=0.0,
        d=0.0,
    )


def is_degenerate(init):
    """Inits the fit cannot start from: vanishing amplitude or spread."""
    return not (init.A > _DEGENERATE_EPS and init.sigma_x > _DEGENERATE_EPS)


def default_bounds(width, height):
    lo = np.array([0.0, 0.0, 0.0, SIGMA_MIN, SIGMA_MIN, -np.pi / 2, -0.5])
    hi = np.array(
        [
            2.0,
            float(width - 1),
            float(height - 1),
            float(max(width, height)),
            float(max(width, height)),
            np.pi / 2,
            0.5,
        ]
    )
    return lo, hi


def _residual_and_jac(pmap):
    height, width = pmap.shape
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    data = pmap.ravel()

    def unpack(v):
        amp, x0, y0, sx, sy, th, off = v
        dx = (xs[None, :] - x0).ravel()
        dyv = np.repeat(ys - y0, width)
        return amp, x0, y0, sx, sy, th, off, dx, dyv

    def fun(v):
        amp, _, _, sx, sy, th, off, dx, dyv = unpack(v)
        a, b, c = _quad_coeffs(sx, sy, th)
        e = np.exp(-(a * dx**2 + 2 * b * dx * dyv + c * dyv**2))
        return amp * e + off - data

    def jac(v):
        amp, _, _, sx, sy, th, off, dx, dyv = unpack(v)
        a, b, c = _quad_coeffs(sx, sy, th)
        e = np.exp(-(a * dx**2 + 2 * b * dx * dyv + c * dyv**2))
        ae = amp * e
        j = np.empty((e.size, 7))
        j[:, 0] = e
        j[:, 1] = ae * (2 * a * dx + 2 * b * dyv)
        j[:, 2] = ae * (2 * b * dx + 2 * c * dyv)
        ct2, st2 = np.cos(th) ** 2, np.sin(th) ** 2
        s2t = np.sin(2 * th)
        da_sx, db_sx, dc_sx = -ct2 / sx**3, s2t / (2 * sx**3), -st2 / sx**3
        da_sy, db_sy, dc_sy = -st2 / sy**3, -s2t / (2 * sy**3), -ct2 / sy**3
        j[:, 3] = -ae * (da_sx * dx**2 + 2 * db_sx * dx * dyv + dc_sx * dyv**2)
        j[:, 4] = -ae * (da_sy * dx**2 + 2 * db_sy * dx * dyv + dc_sy * dyv**2)
        half_inv = 1 / (2 * sy**2) - 1 / (2 * sx**2)
        da_th = np.sin(2 * th) * half_inv
        db_th = np.cos(2 * th) * half_inv
        dc_th = -da_th
        j[:, 5] = -ae * (da_th * dx**2 + 2 * db_th * dx * dyv + dc_th * dyv**2)
        j[:, 6] = 1.0
        return j

    return fun, jac


def _canonicalize(v):
    """Enforce sigma_x >= sigma_y by swapping spreads and rotating 90 degrees."""
    amp, x0, y0, sx, sy, th, off = v
    if sy > sx:
        sx, sy = sy, sx
        th += np.pi / 2
    while th > np.pi / 2:
        th -= np.pi
    while th < -np.pi / 2:
        th += np.pi
    return np.array([amp, x0, y0, sx, sy, th, off])


def fit_gaussian(pmap, init, bounds=None):
    """Bounded least-squares fit of the elliptical Gaussian to the map.

    Uses the trust-region reflective solver with an analytic Jacobian;
    iterates stay inside the bounds. Returns the canonicalized parameters
    (sigma_x >= sigma_y) and a convergence flag.
    """
    pmap = np.asarray(pmap, dtype=np.float64)
    if is_degenerate(init):
        return init, False
    v0 = init.as_vector()
    if not np.isfinite(v0).all():
        raise ValueError("non-finite initial parameters")
    lo, hi = bounds if bounds is not None else default_bounds(*pmap.shape[::-1])
    v0 = np.clip(v0, lo, hi)
    fun, jac = _residual_and_jac(pmap)
    res = least_squares(
        fun,
        v0,
        jac=jac,
        bounds=(lo, hi),
        method="trf",
        gtol=1e-8,
        xtol=1e-10,
        ftol=None,
        max_nfev=200,
    )
    if not np.isfinite(res.fun).all():
        raise ArithmeticError("non-finite residual during Gaussian fit")
    converged = bool(res.status > 0 and np.isfinite(res.x).all())
    return GaussParams.from_vector(_canonicalize(res.x)), converged


def locate(pmap):
    """Point estimate for a probability map.

    The fitted sub-pixel center is rounded to the nearest pixel when the fit
    converges; otherwise the argmax is used with fit_converged=False. The
    confidence is the raw map maximum either way.
    """
    pmap = np.asarray(pmap, dtype=np.float64)
    height, width = pmap.shape
    (px, py), vmax = heatmap.peak(pmap)
    init = init_guess(pmap)
    if is_degenerate(init):
        return Prediction((px, py), vmax, init, False)
    params, converged = fit_gaussian(pmap, init)
    if converged:
        x = int(np.clip(np.rint(params.x0), 0, width - 1))
        y = int(np.clip(np.rint(params.y0), 0, height - 1))
        return Prediction((x, y), vmax, params, True)
    return Prediction((px, py), vmax, params, False)


def filter_prediction(pred, width, height):
    """Error cases 1-2: border hits, and low-confidence near-border hits."""
    x, y = pred.position
    if x in (0, width - 1) or y in (0, height - 1):
        return FilterVerdict(False, FilterCase.BORDER)
    in_pad = not (
        BORDER_PAD <= x <= width - 1 - BORDER_PAD
        and BORDER_PAD <= y <= height - 1 - BORDER_PAD
    )
    if in_pad and pred.confidence < LOW_CONFIDENCE:
        return FilterVerdict(False, FilterCase.LOW_CONFIDENCE_PAD)
    return FilterVerdict(True, FilterCase.NONE)


PREDICTIONS_HEADER = "video_id,frame_idx,x_px,y_px,confidence,fit_converged,filter_case"


def write_predictions(rows, path):
    """Predictions CSV; rows are (video_id, frame_idx, Prediction, FilterVerdict)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(PREDICTIONS_HEADER + "\n")
        for video_id, frame_idx, pred, verdict in rows:
            fh.write(
                f"{video_id},{frame_idx},{pred.position[0]},{pred.position[1]},"
                f"{pred.confidence!r},{str(pred.fit_converged).lower()},"
                f"{verdict.case.value}\n"
            )


def read_predictions(path):
    """Parse a predictions CSV into (video_id, frame_idx, x, y, confidence,
    fit_converged, FilterCase) tuples."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n").rstrip("\r")
        if header != PREDICTIONS_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for row_num, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path} row {row_num}: expected 7 fields")
            vid, fidx, xs, ys, conf, conv, case = parts
            rows.append(
                (
                    vid,
                    int(fidx),
                    int(xs),
                    int(ys),
                    float(conf),
                    conv == "true",
                    FilterCase(case),
                )
            )
    return rows


def filter_specialist_frame(labels, reference, sigma_bar, min_outliers=MIN_INCONSISTENT):
    """Error case 3: too many specialists far from the frame reference.

    A frame is excluded when at least min_outliers specialist labels lie more
    than 20 * sigma_bar from the reference position.
    """
    if len(labels) < 2:
        raise ValueError(f"need at least 2 specialist labels, got {len(labels)}")
    if sigma_bar <= 0:
        raise ValueError("sigma_bar must be positive")
    ref = np.asarray(reference, dtype=np.float64)
    threshold = SPECIALIST_DISTANCE_FACTOR * sigma_bar
    outliers = sum(
        1 for p in labels if np.hypot(p[0] - ref[0], p[1] - ref[1]) > threshold
    )
    if outliers >= min_outliers:
        return FilterVerdict(False, FilterCase.SPECIALIST_INCONSISTENT)
    return FilterVerdict(True, FilterCase.NONE)

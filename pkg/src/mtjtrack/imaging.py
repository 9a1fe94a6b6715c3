"""Deterministic pre-processing and seeded stochastic augmentation.

Frames and probability maps are 2D float arrays indexed [y, x]. The crop is
constrained to a 2:1 aspect ratio and resizing uses a separable third-order
(Keys bicubic) kernel, so a same-size resample is an exact copy. Augmentation
applies a single affine transform jointly to a frame and its probability map,
with reflected borders and bilinear sampling.
"""

from dataclasses import dataclass

import numpy as np

ROTATION_RANGE_DEG = 20.0
ZOOM_RANGE = (0.7, 1.3)
SHEAR_RANGE = 0.2
SHIFT_RANGE = 0.1

_ASPECT_TOL = 1e-6
_STD_GUARD = 1e-12


@dataclass(frozen=True)
class CropSpec:
    """Top-left offset and size of a 2:1 crop rectangle, in source pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"crop size {self.w}x{self.h} must be positive")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"crop offset ({self.x}, {self.y}) must be non-negative")
        if abs(self.w - 2 * self.h) > 2 * self.h * _ASPECT_TOL:
            raise ValueError(
                f"crop ratio {self.w}:{self.h} is not 2:1 within 1e-6"
            )


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float
    zoom: float
    shear: float
    shift_x: float
    shift_y: float
    flip_h: bool
    flip_v: bool

    def __post_init__(self):
        if abs(self.rotation_deg) > ROTATION_RANGE_DEG:
            raise ValueError(f"rotation {self.rotation_deg} outside ±{ROTATION_RANGE_DEG}")
        if not (ZOOM_RANGE[0] <= self.zoom <= ZOOM_RANGE[1]):
            raise ValueError(f"zoom {self.zoom} outside {ZOOM_RANGE}")
        if abs(self.shear) > SHEAR_RANGE:
            raise ValueError(f"shear {self.shear} outside ±{SHEAR_RANGE}")
        if abs(self.shift_x) > SHIFT_RANGE or abs(self.shift_y) > SHIFT_RANGE:
            raise ValueError("shift outside ±10% of image size")

    @classmethod
    def identity(cls):
        return cls(0.0, 1.0, 0.0, 0.0, 0.0, False, False)


def _cubic_weights(t):
    """Keys bicubic kernel (a = -0.5) at tap offsets -1..2 for fraction t."""
    t = np.asarray(t)
    w = np.empty(t.shape + (4,), dtype=t.dtype)
    for tap in range(4):
        d = np.abs(t - (tap - 1))
        w[..., tap] = np.where(
            d <= 1,
            1.5 * d**3 - 2.5 * d**2 + 1,
            np.where(d < 2, -0.5 * d**3 + 2.5 * d**2 - 4 * d + 2, 0.0),
        )
    return w


def _resample_axis(img, n_out, axis):
    n_in = img.shape[axis]
    if n_in == n_out:
        return img
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.intp)
    frac = src - i0
    weights = _cubic_weights(frac)  # (n_out, 4)
    moved = np.moveaxis(img, axis, 0)
    out = np.zeros((n_out,) + moved.shape[1:], dtype=np.float64)
    for tap in range(4):
        idx = np.clip(i0 + tap - 1, 0, n_in - 1)
        out += weights[:, tap].reshape(-1, *([1] * (moved.ndim - 1))) * moved[idx]
    return np.moveaxis(out, 0, axis)


def crop_resize(frame, crop, out_w=256, out_h=128):
    """Crop per spec rectangle and bicubic-resize to out_w x out_h.

    Output intensities are clamped to the cropped source range, since the
    cubic kernel can overshoot.
    """
    frame = np.asarray(frame)
    h, w = frame.shape
    if crop.x + crop.w > w or crop.y + crop.h > h:
        raise ValueError(
            f"crop {crop} exceeds frame bounds {w}x{h}"
        )
    sub = frame[crop.y : crop.y + crop.h, crop.x : crop.x + crop.w].astype(np.float64)
    out = _resample_axis(_resample_axis(sub, out_w, axis=1), out_h, axis=0)
    out = np.clip(out, sub.min(), sub.max())
    return out.astype(frame.dtype) if frame.dtype.kind == "f" else out


def normalize(frame):
    """Zero-mean unit-std contrast normalization (population std).

    Constant frames map to all zeros via an epsilon guard on the std.
    """
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ValueError("cannot normalize an empty frame")
    x = frame.astype(np.float64) if frame.dtype.kind != "f" else frame
    sd = x.std()
    if sd < _STD_GUARD:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def sample_augment(rng_seed):
    """Draw augmentation parameters uniformly within the configured ranges."""
    rng = np.random.Generator(np.random.PCG64(int(rng_seed) & ((1 << 64) - 1)))
    return AugmentParams(
        rotation_deg=rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG),
        zoom=rng.uniform(*ZOOM_RANGE),
        shear=rng.uniform(-SHEAR_RANGE, SHEAR_RANGE),
        shift_x=rng.uniform(-SHIFT_RANGE, SHIFT_RANGE),
        shift_y=rng.uniform(-SHIFT_RANGE, SHIFT_RANGE),
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
    )


def _affine_matrix(params, width, height):
    """Forward point map p' = A (p - c) + b + c with c the image center.

    Factor order is rotation, then shear, then zoom, then shift, then flips.
    """
    th = np.deg2rad(params.rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, params.shear], [0.0, 1.0]])
    zoom = np.array([[params.zoom, 0.0], [0.0, params.zoom]])
    flip = np.diag(
        [-1.0 if params.flip_h else 1.0, -1.0 if params.flip_v else 1.0]
    )
    a = flip @ zoom @ shear @ rot
    shift = np.array([params.shift_x * width, params.shift_y * height])
    b = flip @ shift
    return a, b


def transform_point(params, point, width, height):
    """Image of a point (x, y) under the augmentation's forward transform."""
    a, b = _affine_matrix(params, width, height)
    c = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return tuple(a @ (np.asarray(point, dtype=np.float64) - c) + b + c)


def _reflect_index(i, n):
    i = np.mod(i, 2 * n)
    return np.where(i >= n, 2 * n - 1 - i, i)


def _warp_bilinear(img, a_inv, b, width, height):
    c = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    ys, xs = np.mgrid[0:height, 0:width]
    pts = np.stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    src = a_inv @ (pts - (c + b)[:, None]) + c[:, None]
    sx, sy = src[0], src[1]
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    x0r = _reflect_index(x0, width)
    x1r = _reflect_index(x0 + 1, width)
    y0r = _reflect_index(y0, height)
    y1r = _reflect_index(y0 + 1, height)
    out = (
        (1 - fx) * (1 - fy) * img[y0r, x0r]
        + fx * (1 - fy) * img[y0r, x1r]
        + (1 - fx) * fy * img[y1r, x0r]
        + fx * fy * img[y1r, x1r]
    )
    return out.reshape(height, width)


def apply_augment(frame, pmap, params):
    """Apply one affine transform identically to a frame and its map.

    Out-of-bounds samples are reflected; both channels use bilinear sampling;
    the probability map is re-clamped to [0, 1] afterwards.
    """
    frame = np.asarray(frame)
    pmap = np.asarray(pmap)
    if frame.shape != pmap.shape:
        raise ValueError(
            f"frame {frame.shape} and map {pmap.shape} dimensions differ"
        )
    height, width = frame.shape
    a, b = _affine_matrix(params, width, height)
    a_inv = np.linalg.inv(a)
    warped_frame = _warp_bilinear(frame.astype(np.float64), a_inv, b, width, height)
    warped_map = _warp_bilinear(pmap.astype(np.float64), a_inv, b, width, height)
    return warped_frame, np.clip(warped_map, 0.0, 1.0)

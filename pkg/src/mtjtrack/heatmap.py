"""Soft-label probability maps from point labels, and peak extraction."""

import struct

import numpy as np

LABEL_VARIANCE_PX = 100.0  # isotropic covariance of the soft-label kernel

PMAP_HEADER = struct.Struct("<II")


def make_soft_label(position, width, height):
    """Unnormalized Gaussian map exp(-r^2 / (2*100)) around the label position.

    An absent position (None) encodes a frame without a visible junction and
    yields the all-zero map.
    """
    if position is None:
        return np.zeros((height, width), dtype=np.float64)
    x0, y0 = position
    if not (0 <= x0 < width and 0 <= y0 < height):
        raise ValueError(f"label position {position} outside {width}x{height}")
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    d2 = (xs[None, :] - x0) ** 2 + (ys[:, None] - y0) ** 2
    return np.exp(-d2 / (2.0 * LABEL_VARIANCE_PX))


def peak(pmap):
    """Coordinates (x, y) and value of the map maximum.

    Ties break to the smallest y, then the smallest x (row-major argmax).
    """
    pmap = np.asarray(pmap)
    if pmap.size == 0:
        raise ValueError("empty map")
    flat = int(np.argmax(pmap))
    y, x = divmod(flat, pmap.shape[1])
    return (x, y), float(pmap[y, x])


def save_pmap(pmap, path):
    """Raster dump: u32 width, u32 height, then float32 LE values row-major."""
    pmap = np.asarray(pmap)
    height, width = pmap.shape
    with open(path, "wb") as fh:
        fh.write(PMAP_HEADER.pack(width, height))
        fh.write(np.ascontiguousarray(pmap, dtype="<f4").tobytes())


def load_pmap(path):
    with open(path, "rb") as fh:
        width, height = PMAP_HEADER.unpack(fh.read(PMAP_HEADER.size))
        raw = fh.read(4 * width * height)
        if len(raw) != 4 * width * height:
            raise ValueError(f"{path}: truncated raster")
        return np.frombuffer(raw, dtype="<f4").reshape(height, width).copy()

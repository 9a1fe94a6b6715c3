"""Dataset manifests, label ingestion, frame sampling, and the synthetic
speckle-phantom generator that stands in for non-distributable recordings.

On-disk formats:
  - manifest: JSON with a schema_version and one entry per video (instrument,
    movement, muscle, subject group, frame directory, pixel spacing, crop).
  - labels: CSV `video_id,frame_idx,annotator_id,x_px,y_px`; empty x/y cells
    encode an absent junction.
  - frames: directories of 8-bit grayscale PNGs named frame_%06d.png.
"""

import json
import os
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from . import _rng
from .imaging import CropSpec

MANIFEST_SCHEMA_VERSION = 1
LABEL_HEADER = "video_id,frame_idx,annotator_id,x_px,y_px"
LABEL_BOUNDS = (256, 128)  # exclusive upper bounds of post-resize coordinates

INSTRUMENTS = ("Aixplorer", "Esaote", "Telemed", "SyntheticA", "SyntheticB")
MOVEMENTS = ("MVC", "PT", "RUN")
MUSCLES = ("MG", "LG")
SUBJECT_GROUPS = ("healthy", "impaired")

DEFAULT_PIXEL_SPACING_MM = 0.15  # synthetic data convention

# Per-instrument contrast/speckle presets for the synthetic domains.
PHANTOM_PRESETS = {
    "SyntheticA": {"contrast": 0.8, "speckle_scale": 0.25, "blur_radius": 0.0},
    "SyntheticB": {"contrast": 0.3, "speckle_scale": 0.7, "blur_radius": 2.0},
}

_FRAME_RE = re.compile(r"^frame_(\d{6})\.png$")
_JUNCTION_MARGIN = 12


class DataFormatError(ValueError):
    """Raised when a manifest, label file, or frame directory is malformed."""


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    instrument: str
    movement: str
    muscle: str
    subject_group: str
    frame_dir: str
    pixel_spacing_mm: float
    crop: CropSpec
    stride: int = 1

    def __post_init__(self):
        if not self.video_id or not self.frame_dir:
            raise DataFormatError("video_id and frame_dir must be non-empty")
        if self.instrument not in INSTRUMENTS:
            raise DataFormatError(f"unknown instrument {self.instrument!r}")
        if self.movement not in MOVEMENTS:
            raise DataFormatError(f"unknown movement {self.movement!r}")
        if self.muscle not in MUSCLES:
            raise DataFormatError(f"unknown muscle {self.muscle!r}")
        if self.subject_group not in SUBJECT_GROUPS:
            raise DataFormatError(f"unknown subject_group {self.subject_group!r}")
        if self.pixel_spacing_mm <= 0:
            raise DataFormatError("pixel_spacing_mm must be positive")
        if self.stride < 1:
            raise DataFormatError("stride must be >= 1")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def by_id(self, video_id):
        for entry in self.entries:
            if entry.video_id == video_id:
                return entry
        raise KeyError(video_id)


@dataclass(frozen=True)
class LabelRecord:
    video_id: str
    frame_idx: int
    annotator_id: str
    position: tuple | None  # (x_px, y_px) in post-resize coordinates

    def __post_init__(self):
        if self.frame_idx < 0:
            raise DataFormatError("frame_idx must be non-negative")
        if self.position is not None:
            x, y = self.position
            if not (0 <= x < LABEL_BOUNDS[0] and 0 <= y < LABEL_BOUNDS[1]):
                raise DataFormatError(
                    f"label position {self.position} outside "
                    f"[0,{LABEL_BOUNDS[0]})x[0,{LABEL_BOUNDS[1]})"
                )


@dataclass(frozen=True)
class PhantomParams:
    seed: int
    width: int
    height: int
    junction_x: float
    junction_y: float
    speckle_scale: float
    contrast: float
    blur_radius: float = 0.0

    def __post_init__(self):
        if self.speckle_scale < 0:
            raise ValueError("speckle_scale must be non-negative")
        if not (0 < self.contrast <= 1):
            raise ValueError("contrast must be in (0, 1]")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be non-negative")
        m = _JUNCTION_MARGIN
        if not (
            m <= self.junction_x <= self.width - 1 - m
            and m <= self.junction_y <= self.height - 1 - m
        ):
            raise ValueError(
                f"junction ({self.junction_x}, {self.junction_y}) closer than "
                f"{m} px to the border of {self.width}x{self.height}"
            )


def _entry_from_dict(d, index):
    try:
        crop_d = d["crop"]
        crop = CropSpec(x=crop_d["x"], y=crop_d["y"], w=crop_d["w"], h=crop_d["h"])
        return VideoEntry(
            video_id=d["video_id"],
            instrument=d["instrument"],
            movement=d["movement"],
            muscle=d["muscle"],
            subject_group=d["subject_group"],
            frame_dir=d["frame_dir"],
            pixel_spacing_mm=float(d["pixel_spacing_mm"]),
            crop=crop,
            stride=int(d.get("stride", 1)),
        )
    except KeyError as exc:
        raise DataFormatError(f"entry {index}: missing field {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"entry {index}: {exc}") from exc


def load_manifest(path):
    """Parse and fully validate a dataset manifest."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataFormatError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise DataFormatError(f"manifest {path} lacks an 'entries' list")
    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise DataFormatError(
            f"manifest {path}: unsupported schema_version {version!r}"
        )
    entries = []
    seen = set()
    for index, d in enumerate(doc["entries"]):
        entry = _entry_from_dict(d, index)
        if entry.video_id in seen:
            raise DataFormatError(f"entry {index}: duplicate video_id {entry.video_id!r}")
        seen.add(entry.video_id)
        entries.append(entry)
    return DatasetManifest(entries=tuple(entries), schema_version=version)


def save_manifest(manifest, path):
    doc = {
        "schema_version": manifest.schema_version,
        "entries": [
            {
                "video_id": e.video_id,
                "instrument": e.instrument,
                "movement": e.movement,
                "muscle": e.muscle,
                "subject_group": e.subject_group,
                "frame_dir": e.frame_dir,
                "pixel_spacing_mm": e.pixel_spacing_mm,
                "stride": e.stride,
                "crop": {"x": e.crop.x, "y": e.crop.y, "w": e.crop.w, "h": e.crop.h},
            }
            for e in manifest.entries
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _parse_coord(text, row_num, name, bound):
    try:
        value = float(text)
    except ValueError as exc:
        raise DataFormatError(f"row {row_num}: bad {name} value {text!r}") from exc
    if not (0 <= value < bound):
        raise DataFormatError(
            f"row {row_num}: {name}={value} outside [0, {bound})"
        )
    return value


def load_labels(path, bounds=LABEL_BOUNDS):
    """Read a label CSV; returns records sorted by (video, frame, annotator)."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n").rstrip("\r")
        if header != LABEL_HEADER:
            raise DataFormatError(f"{path}: unexpected header {header!r}")
        for row_num, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise DataFormatError(f"row {row_num}: expected 5 fields, got {len(parts)}")
            video_id, frame_s, annotator, xs, ys = parts
            if not video_id or not annotator:
                raise DataFormatError(f"row {row_num}: empty video_id or annotator_id")
            try:
                frame_idx = int(frame_s)
            except ValueError as exc:
                raise DataFormatError(f"row {row_num}: bad frame_idx {frame_s!r}") from exc
            if (xs == "") != (ys == ""):
                raise DataFormatError(
                    f"row {row_num}: x and y must both be present or both empty"
                )
            if xs == "":
                position = None
            else:
                position = (
                    _parse_coord(xs, row_num, "x_px", bounds[0]),
                    _parse_coord(ys, row_num, "y_px", bounds[1]),
                )
            try:
                records.append(LabelRecord(video_id, frame_idx, annotator, position))
            except DataFormatError as exc:
                raise DataFormatError(f"row {row_num}: {exc}") from exc
    records.sort(key=lambda r: (r.video_id, r.frame_idx, r.annotator_id))
    return records


def write_labels(records, path):
    """Write records in canonical sorted order with shortest-repr coordinates."""
    records = sorted(records, key=lambda r: (r.video_id, r.frame_idx, r.annotator_id))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LABEL_HEADER + "\n")
        for r in records:
            if r.position is None:
                fh.write(f"{r.video_id},{r.frame_idx},{r.annotator_id},,\n")
            else:
                x, y = r.position
                fh.write(f"{r.video_id},{r.frame_idx},{r.annotator_id},{x!r},{y!r}\n")


def list_frames(frame_dir):
    """Sorted frame indices present in a directory of frame_%06d.png files."""
    try:
        names = os.listdir(frame_dir)
    except OSError as exc:
        raise DataFormatError(f"cannot list frames in {frame_dir}: {exc}") from exc
    indices = sorted(int(m.group(1)) for n in names if (m := _FRAME_RE.match(n)))
    return indices


def sample_frames(entry, stride, base_dir="."):
    """Frame indices {0, stride, 2*stride, ...} that exist on disk."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    available = list_frames(os.path.join(base_dir, entry.frame_dir))
    if not available:
        raise DataFormatError(f"{entry.video_id}: empty frame directory")
    return [i for i in available if i % stride == 0]


def read_frame(path):
    """Load an 8-bit grayscale PNG as floats in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_frame(frame, path):
    """Quantize a [0, 1] float frame to 8-bit grayscale PNG."""
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def _band_profile(ys, curve_y, valid, thickness):
    d = ys[:, None] - curve_y[None, :]
    prof = np.exp(-(d**2) / (2.0 * thickness**2))
    prof[:, ~valid] = 0.0
    return prof


def synth_phantom(params, video_id="", frame_idx=0, annotator_id="gt"):
    """Render one speckle phantom with a bright Y-shaped junction.

    Two aponeurosis bands converge from one side onto a single tendon band;
    the junction point is the label. Multiplicative exponential speckle
    (smoothed with a 3x3 box filter) rides on the band image, followed by an
    optional Gaussian blur. Pure function of params.
    """
    w, h = params.width, params.height
    jx, jy = params.junction_x, params.junction_y
    rng = np.random.Generator(np.random.PCG64(int(params.seed) & ((1 << 64) - 1)))

    slope_up = rng.uniform(0.15, 0.45)
    slope_dn = rng.uniform(0.15, 0.45)
    curv_up = rng.uniform(-0.002, 0.002)
    curv_dn = rng.uniform(-0.002, 0.002)
    slope_t = rng.uniform(-0.1, 0.1)
    curv_t = rng.uniform(-0.001, 0.001)
    thickness = rng.uniform(1.3, 2.0)

    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    dx_left = jx - xs
    dx_right = xs - jx
    left = xs <= jx
    right = xs >= jx
    y_up = jy - (slope_up * dx_left + curv_up * dx_left**2)
    y_dn = jy + (slope_dn * dx_left + curv_dn * dx_left**2)
    y_t = jy + slope_t * dx_right + curv_t * dx_right**2
    signal = np.maximum.reduce(
        [
            _band_profile(ys, y_up, left, thickness),
            _band_profile(ys, y_dn, left, thickness),
            _band_profile(ys, y_t, right, thickness),
        ]
    )

    bg = 0.22
    clean = bg + (1.0 - bg) * params.contrast * signal
    if params.speckle_scale > 0:
        speckle = ndimage.uniform_filter(rng.exponential(1.0, size=(h, w)), size=3, mode="reflect")
        gain = np.maximum(1.0 + params.speckle_scale * (speckle - 1.0), 0.0)
        img = clean * gain
    else:
        img = clean
    if params.blur_radius > 0:
        img = ndimage.gaussian_filter(img, sigma=params.blur_radius, mode="reflect")
    frame = np.clip(img, 0.0, 1.0)
    label = LabelRecord(video_id, frame_idx, annotator_id, (jx, jy))
    return frame, label

"""Volume representation, NIfTI I/O, resampling, ROI cropping, normalization.

All operations are pure: they return new Volume instances and never mutate
their inputs, so subjects can be processed in parallel without locking.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .nifti import read_nifti, write_nifti

INTENSITY = "intensity"
LABELMAP = "labelmap"


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar grid with physical geometry.

    data axis order is (depth, height, width) = (z, y, x); spacing and origin
    follow the same axis order, in millimeters.
    """

    data: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    kind: str = INTENSITY

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got {self.data.ndim}D")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        if self.kind not in (INTENSITY, LABELMAP):
            raise ValueError(f"unknown volume kind: {self.kind}")
        if self.kind == LABELMAP:
            d = self.data
            if not np.issubdtype(d.dtype, np.integer):
                if not np.array_equal(d, np.round(d)):
                    raise ValueError("labelmap volumes must be integer-valued")
            if d.size and d.min() < 0:
                raise ValueError("labelmap volumes must be non-negative")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, **kwargs):
        return replace(self, data=data, **kwargs)


@dataclass(frozen=True)
class RoiSpec:
    """Axis-aligned crop window: center and size in voxels, plus pad value."""

    center: tuple
    size: tuple
    pad_value: float = 0.0

    def __post_init__(self):
        if len(self.size) != 3 or any(s <= 0 for s in self.size):
            raise ValueError(f"ROI size components must be > 0, got {self.size}")


def load_volume(path, kind=INTENSITY):
    """Load a NIfTI volume; spacing/origin come from the file header."""
    data, spacing, origin = read_nifti(path)
    if kind == INTENSITY:
        data = data.astype(np.float32, copy=False)
    return Volume(data=data, spacing=spacing, origin=origin, kind=kind)


def save_volume(volume, path):
    data = volume.data
    if volume.kind == LABELMAP and not np.issubdtype(data.dtype, np.integer):
        data = np.round(data).astype(np.int16)
    write_nifti(path, data, volume.spacing, volume.origin)


def resample_isotropic(v, target_spacing):
    """Resample to isotropic target spacing (mm).

    Intensity volumes are trilinearly interpolated, labelmaps use nearest
    neighbor. Output grid size is round(in_size * in_spacing / target) per
    axis, sharing voxel 0's center with the input so equal spacing is a
    bit-exact identity.
    """
    t = float(target_spacing)
    if t <= 0:
        raise ValueError(f"target spacing must be > 0, got {target_spacing}")
    if all(s == t for s in v.spacing):
        return v.with_data(v.data.copy(), spacing=(t, t, t))

    in_shape = np.array(v.shape, dtype=float)
    in_spacing = np.array(v.spacing, dtype=float)
    out_shape = np.maximum(np.rint(in_shape * in_spacing / t).astype(int), 1)

    grids = np.meshgrid(
        *(np.arange(n, dtype=np.float64) * t / s for n, s in zip(out_shape, in_spacing)),
        indexing="ij",
    )
    order = 0 if v.kind == LABELMAP else 1
    out = ndimage.map_coordinates(
        v.data.astype(np.float32 if order else v.data.dtype),
        np.stack(grids),
        order=order,
        mode="nearest",
    )
    return v.with_data(out.astype(v.data.dtype, copy=False), spacing=(t, t, t))


def compute_label_center(gt):
    """Center of the axis-aligned bounding box of all foreground voxels."""
    if gt.kind != LABELMAP:
        raise ValueError("label center requires a labelmap volume")
    fg = np.nonzero(gt.data)
    if fg[0].size == 0:
        raise ValueError("cannot compute label center of an all-background labelmap")
    return tuple(int((idx.min() + idx.max()) // 2) for idx in fg)


def extract_roi(v, roi):
    """Crop a fixed-size window centered at roi.center, padding out-of-bounds
    voxels with roi.pad_value. Spacing is preserved, origin shifts with the
    window start."""
    size = np.asarray(roi.size, dtype=int)
    start = np.asarray(roi.center, dtype=int) - size // 2
    out = np.full(tuple(size), roi.pad_value, dtype=v.data.dtype)

    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + size, v.shape)
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - start
        dst_hi = src_hi - start
        out[tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))] = v.data[
            tuple(slice(a, b) for a, b in zip(src_lo, src_hi))
        ]
    origin = tuple(o + s * sp for o, s, sp in zip(v.origin, start, v.spacing))
    return v.with_data(out, origin=origin)


def roi_pad_value(v):
    """Pad value convention: background 0 for labelmaps, observed minimum for
    intensity volumes (stays the range minimum after linear normalization)."""
    if v.kind == LABELMAP:
        return 0
    return float(v.data.min())


def robust_normalize(v):
    """Affine map sending the 10th/90th intensity percentile to -1/+1.

    Values outside the percentiles extrapolate linearly; there is no clamping.
    """
    if v.kind != INTENSITY:
        raise ValueError("robust normalization applies to intensity volumes")
    p10, p90 = np.percentile(v.data, [10.0, 90.0])
    if p10 == p90:
        raise ValueError("degenerate intensity distribution (p10 == p90)")
    scale = 2.0 / (p90 - p10)
    out = (v.data.astype(np.float32) - np.float32(p10)) * np.float32(scale) - 1.0
    return v.with_data(out.astype(np.float32))


def missing_sequence_placeholder(template):
    """All-zero intensity volume with the template's geometry."""
    return Volume(
        data=np.zeros(template.shape, dtype=np.float32),
        spacing=template.spacing,
        origin=template.origin,
        kind=INTENSITY,
    )

"""Spatial and intensity augmentation for domain generalization.

One SpatialParams instance is sampled per subject and applied to every
sequence and the labelmap so the channels stay voxel-aligned. Intensity
shift/scale pairs are sampled per available sequence. All parameters are
uniform within their configured ranges.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LABELMAP, roi_pad_value


@dataclass(frozen=True)
class AugmentRanges:
    """Sampling ranges; the defaults are the full-scale training settings."""

    translation: float = 20.0          # voxels, symmetric
    rotation: float = 0.35             # radians, symmetric
    iso_scale: tuple = (0.8, 1.2)
    aniso_scale: tuple = (0.9, 1.1)
    elastic_nodes: int = 8             # grid nodes per dimension
    elastic_max: float = 15.0          # voxels, symmetric
    intensity_shift: float = 0.2       # symmetric, post-normalization
    intensity_scale: tuple = (0.6, 1.4)


@dataclass(frozen=True)
class SpatialParams:
    translation: np.ndarray            # (3,) voxels
    rotation: np.ndarray               # (3,) radians
    iso_scale: float
    aniso_scale: np.ndarray            # (3,)
    elastic_grid: np.ndarray           # (n, n, n, 3) voxel displacements

    @staticmethod
    def identity(nodes=8):
        return SpatialParams(
            translation=np.zeros(3),
            rotation=np.zeros(3),
            iso_scale=1.0,
            aniso_scale=np.ones(3),
            elastic_grid=np.zeros((nodes, nodes, nodes, 3)),
        )


@dataclass(frozen=True)
class IntensityParams:
    """One (shift, scale) pair per available sequence."""

    params: dict = field(default_factory=dict)  # name -> (shift, scale)


def sample_spatial_params(rng, ranges=AugmentRanges()):
    n = ranges.elastic_nodes
    return SpatialParams(
        translation=rng.uniform(-ranges.translation, ranges.translation, 3),
        rotation=rng.uniform(-ranges.rotation, ranges.rotation, 3),
        iso_scale=float(rng.uniform(*ranges.iso_scale)),
        aniso_scale=rng.uniform(*ranges.aniso_scale, 3),
        elastic_grid=rng.uniform(-ranges.elastic_max, ranges.elastic_max, (n, n, n, 3)),
    )


def sample_intensity_params(rng, sequences, ranges=AugmentRanges()):
    params = {}
    for name in sequences:
        shift = float(rng.uniform(-ranges.intensity_shift, ranges.intensity_shift))
        scale = float(rng.uniform(*ranges.intensity_scale))
        params[name] = (shift, scale)
    return IntensityParams(params=params)


def _rotation_matrix(angles):
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _elastic_field(grid, shape):
    """Trilinearly upsample node displacements to a dense (3, *shape) field."""
    nodes = grid.shape[0]
    coords = np.meshgrid(
        *(
            np.arange(s, dtype=np.float64) * ((nodes - 1) / max(s - 1, 1))
            for s in shape
        ),
        indexing="ij",
    )
    coords = np.stack(coords)
    return np.stack(
        [
            ndimage.map_coordinates(grid[..., a], coords, order=1, mode="nearest")
            for a in range(3)
        ]
    )


def pull_coordinates(shape, p):
    """Source-voxel coordinates sampled for every output voxel.

    The content transform is translate(rotate(scale(elastic(x)))) about the
    volume center, so the pull map inverts translation, rotation and scale in
    that order and then adds the elastic displacement field.
    """
    shape = tuple(shape)
    center = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    q = np.stack(
        np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    )
    u = q - center.reshape(3, 1, 1, 1) - np.asarray(p.translation).reshape(3, 1, 1, 1)
    rot = _rotation_matrix(p.rotation)
    u = np.einsum("ij,jdhw->idhw", rot.T, u)
    scale = p.iso_scale * np.asarray(p.aniso_scale, dtype=np.float64)
    u = u / scale.reshape(3, 1, 1, 1)
    coords = u + center.reshape(3, 1, 1, 1)
    if np.any(p.elastic_grid):
        coords = coords + _elastic_field(p.elastic_grid, shape)
    return coords


def apply_spatial(v, p, coords=None):
    """Resample a volume through the composed spatial transform.

    Intensity volumes interpolate trilinearly, labelmaps nearest-neighbor;
    voxels pulled from outside the field of view take the standard pad value
    (volume minimum for intensity, background for labelmaps). Passing a
    precomputed `coords` (from pull_coordinates) reuses one transform across
    the sequences of a subject.
    """
    if coords is None:
        coords = pull_coordinates(v.shape, p)
    if v.kind == LABELMAP:
        out = ndimage.map_coordinates(v.data, coords, order=0, mode="constant", cval=0)
        return v.with_data(out.astype(v.data.dtype, copy=False))
    out = ndimage.map_coordinates(
        v.data.astype(np.float32, copy=False),
        coords,
        order=1,
        mode="constant",
        cval=roi_pad_value(v),
    )
    return v.with_data(out)


def apply_intensity(v, p, seq):
    """Elementwise out = v * scale(seq) + shift(seq) on a normalized volume."""
    if seq not in p.params:
        raise KeyError(f"no intensity parameters sampled for sequence '{seq}'")
    shift, scale = p.params[seq]
    out = v.data * np.float32(scale) + np.float32(shift)
    return v.with_data(out.astype(np.float32, copy=False))

"""Intensity clipping and spacing resampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import ImageGrid, LabelGrid

# slack for float noise in dims * spacing_in / spacing_out before taking the ceiling
_CEIL_EPS = 1e-6


@dataclass(frozen=True)
class PreprocessConfig:
    clip_lo: float = -1000.0
    clip_hi: float = 3800.0
    spacing: tuple[float, float, float] = (0.6, 0.6, 0.6)
    image_mode: str = "trilinear"
    label_mode: str = "nearest"

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ValueError(f"clip_lo ({self.clip_lo}) must be < clip_hi ({self.clip_hi})")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"target spacing must be 3 positive values, got {self.spacing}")


def clip_intensity(img: ImageGrid, lo: float = -1000.0, hi: float = 3800.0) -> ImageGrid:
    if not lo < hi:
        raise ValueError(f"lo ({lo}) must be < hi ({hi})")
    return img.with_data(np.clip(img.data, lo, hi))


def output_dims(dims, spacing_in, spacing_out) -> tuple[int, int, int]:
    """Ceiling rule: keep at least the full physical extent of the input."""
    out = []
    for d, si, so in zip(dims, spacing_in, spacing_out):
        out.append(max(1, math.ceil(d * si / so - _CEIL_EPS)))
    return tuple(out)


def _source_coords(n_out, s_out, n_in, s_in):
    # voxel i covers [i*s, (i+1)*s) from a shared grid corner; sample at its centre
    i = np.arange(n_out, dtype=np.float64)
    if s_out == s_in and n_out == n_in:
        return i
    return (i + 0.5) * (s_out / s_in) - 0.5


def _nearest_index(coords, n_in):
    idx = np.floor(coords + 0.5).astype(np.intp)
    return np.clip(idx, 0, n_in - 1)


def _linear_along(data, axis, coords):
    n_in = data.shape[axis]
    c = np.clip(coords, 0.0, n_in - 1)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = c - i0
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i1, axis=axis)
    # a + w*(b-a) keeps constants exact and stays within [min(a,b), max(a,b)]
    out = a + w * (b - a)
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def _resample_array(data, spacing_in, spacing_out, dims_out, mode):
    coords = [
        _source_coords(n_out, so, n_in, si)
        for n_out, so, n_in, si in zip(dims_out, spacing_out, data.shape, spacing_in)
    ]
    if mode == "nearest":
        ix, iy, iz = (_nearest_index(c, n) for c, n in zip(coords, data.shape))
        return data[np.ix_(ix, iy, iz)]
    if mode == "trilinear":
        out = np.asarray(data, dtype=np.float64)
        for axis in range(3):
            out = _linear_along(out, axis, coords[axis])
        return out
    raise ValueError(f"unknown interpolation mode {mode!r}")


def _resampled_affine(grid, spacing_out):
    if grid.affine is None:
        return None
    aff = np.array(grid.affine, dtype=float)
    scale = np.array(spacing_out) / np.array(grid.spacing)
    # centre of new voxel 0 sits at old continuous index (scale - 1) / 2
    origin = aff[:3, :3] @ ((scale - 1.0) / 2.0) + aff[:3, 3]
    aff[:3, :3] = aff[:3, :3] * scale
    aff[:3, 3] = origin
    return aff


def resample(grid, spacing, mode: str = None, dims=None):
    """Resample ``grid`` onto a new spacing.

    Output dims follow the ceiling rule unless ``dims`` is given.  Samples are
    taken at output voxel centres in physical space; samples falling outside
    the input clamp to the border voxel.  Label grids only accept ``nearest``.
    """
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"target spacing must be 3 positive values, got {spacing}")
    is_label = isinstance(grid, LabelGrid)
    if mode is None:
        mode = "nearest" if is_label else "trilinear"
    if is_label and mode != "nearest":
        raise ValueError("label grids can only be resampled with nearest mode")
    if dims is None:
        dims = output_dims(grid.dims, grid.spacing, spacing)
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ValueError(f"output dims must be positive, got {dims}")
    data = _resample_array(grid.data, grid.spacing, spacing, dims, mode)
    return grid.with_data(data, spacing=spacing, affine=_resampled_affine(grid, spacing))


def resample_labels_to_reference(lbl: LabelGrid, reference) -> LabelGrid:
    """Nearest-neighbour resample of labels onto the dims/spacing of ``reference``.

    ``reference`` is any grid, or a ``(dims, spacing)`` pair.
    """
    if isinstance(reference, tuple):
        dims, spacing = reference
        affine = None
    else:
        dims, spacing, affine = reference.dims, reference.spacing, reference.affine
    out = resample(lbl, spacing, "nearest", dims=dims)
    if affine is not None:
        out = out.with_data(out.data, affine=affine)
    return out


def preprocess_image(img: ImageGrid, config: PreprocessConfig = PreprocessConfig()) -> ImageGrid:
    """Clip, then resample; the order is fixed so results are reproducible."""
    out = clip_intensity(img, config.clip_lo, config.clip_hi)
    return resample(out, config.spacing, config.image_mode)

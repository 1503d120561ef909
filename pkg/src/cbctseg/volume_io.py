"""NIfTI-1 volume reading and writing (.nii and .nii.gz)."""

from __future__ import annotations

import gzip
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError

from .grid import CANONICAL, ImageGrid, LabelGrid, Orientation

LABEL_DTYPE = np.uint16
IMAGE_DTYPE = np.int16


class VolumeReadError(ValueError):
    """The file is not a readable 3-D NIfTI-1 volume."""


class UnsupportedVolumeError(VolumeReadError):
    """Valid NIfTI but outside what this package handles (e.g. 4-D data)."""


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    datatype: int
    scl_slope: float
    scl_inter: float


def read_header(path) -> VolumeHeader:
    img = _load(path)
    hdr = img.header
    dims = tuple(int(d) for d in img.shape[:3])
    slope, inter = hdr.get_slope_inter()
    return VolumeHeader(
        dims=dims,
        spacing=_spacing(hdr),
        datatype=int(hdr["datatype"]),
        scl_slope=1.0 if slope is None else float(slope),
        scl_inter=0.0 if inter is None else float(inter),
    )


def _spacing(hdr):
    # pixdim is float32; the shortest decimal that round-trips it recovers e.g. 0.3 exactly
    zooms = [float(str(np.float32(z))) for z in hdr.get_zooms()[:3]]
    return tuple(z if z > 0 else 1.0 for z in zooms)


def _load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        img = nib.load(str(path))
    except (ImageFileError, EOFError, OSError, zlib.error, ValueError) as exc:
        raise VolumeReadError(f"{path}: cannot parse NIfTI header ({exc})") from exc
    if not isinstance(img, nib.Nifti1Image):
        raise VolumeReadError(f"{path}: not a NIfTI-1 image ({type(img).__name__})")
    return img


def read_volume(path, kind: str = "auto", orientation: Orientation = CANONICAL):
    """Read a 3-D NIfTI-1 file into an :class:`ImageGrid` or :class:`LabelGrid`.

    ``kind`` is ``"image"``, ``"label"`` or ``"auto"``; auto returns a label
    grid for integer on-disk data with identity scaling, an image otherwise.
    Label reads of non-integral data raise ``TypeError``.
    """
    if kind not in ("auto", "image", "label"):
        raise ValueError(f"unknown volume kind {kind!r}")
    img = _load(path)
    shape = img.shape
    extra = [d for d in shape[3:] if d != 1]
    if extra or len(shape) > 7:
        raise UnsupportedVolumeError(f"{path}: only 3-D volumes are supported, got shape {shape}")
    hdr = img.header
    try:
        raw = np.asanyarray(img.dataobj)
    except (EOFError, OSError, zlib.error, ValueError) as exc:
        raise VolumeReadError(f"{path}: truncated or corrupt voxel data ({exc})") from exc
    while raw.ndim < 3:
        raw = raw[..., np.newaxis]
    raw = raw.reshape(raw.shape[:3])

    spacing = _spacing(hdr)
    affine = img.affine
    slope, inter = hdr.get_slope_inter()
    scaled = slope not in (None, 1.0) or inter not in (None, 0.0)
    integral_dtype = np.issubdtype(hdr.get_data_dtype(), np.integer)

    if kind == "auto":
        kind = "label" if integral_dtype and not scaled else "image"

    if kind == "label":
        data = np.asarray(raw)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
                raise TypeError(f"{path}: label volume contains non-integer values")
            data = data.astype(np.int64)
        if data.size and data.min() < 0:
            raise TypeError(f"{path}: label volume contains negative values")
        data = data.astype(_label_dtype(data), copy=False)
        return LabelGrid(data, spacing, orientation, affine)

    # dataobj already applies scl_slope / scl_inter
    return ImageGrid(np.asarray(raw, dtype=np.float64 if scaled else raw.dtype), spacing, orientation, affine)


def _label_dtype(data):
    top = int(data.max()) if data.size else 0
    if top <= np.iinfo(np.uint16).max:
        return np.uint16
    return np.uint32


def _affine_for(grid):
    if grid.affine is not None:
        aff = np.array(grid.affine, dtype=float)
        # keep the direction cosines of the stored affine; spacing comes from the grid
        cols = aff[:3, :3]
        norms = np.linalg.norm(cols, axis=0)
        norms[norms == 0] = 1.0
        aff[:3, :3] = cols / norms * np.array(grid.spacing)
        return aff
    return np.diag([*grid.spacing, 1.0])


def write_volume(grid, path, compress: Optional[bool] = None, dtype=None) -> None:
    """Write ``grid`` as NIfTI-1.

    Labels are stored as uint16 and images as int16 (values rounded), unless
    ``dtype`` overrides.  ``compress`` defaults to the ``.gz`` suffix of path.
    """
    path = Path(path)
    if compress is None:
        compress = path.name.endswith(".gz")
    if isinstance(grid, LabelGrid):
        dtype = np.dtype(dtype or LABEL_DTYPE)
        data = grid.data
        if data.size and int(data.max()) > np.iinfo(dtype).max:
            raise ValueError(f"label {int(data.max())} does not fit in {dtype}")
        data = data.astype(dtype)
    else:
        dtype = np.dtype(dtype or IMAGE_DTYPE)
        data = np.asarray(grid.data)
        if np.issubdtype(dtype, np.integer):
            data = np.round(data)
            info = np.iinfo(dtype)
            if data.size and (data.min() < info.min or data.max() > info.max):
                raise ValueError(f"image values outside {dtype} range; clip first or pass dtype")
        data = data.astype(dtype)

    img = nib.Nifti1Image(data, _affine_for(grid))
    hdr = img.header
    hdr.set_data_dtype(dtype)
    hdr.set_zooms(grid.spacing)
    hdr.set_xyzt_units("mm")
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    payload = img.to_bytes()
    # fixed gzip mtime and no embedded filename keep output byte-identical
    try:
        if compress:
            with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
                fh.write(payload)
        else:
            with open(path, "wb") as fh:
                fh.write(payload)
    except OSError as exc:
        raise OSError(f"{path}: cannot write volume ({exc.strerror or exc})") from exc


def volume_path_ok(path) -> bool:
    name = os.fspath(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")

"""Voxel grid types and crop/paste primitives.

Arrays are stored with shape ``(X, Y, Z)`` and indexed ``[x, y, z]``.  The
linear voxel order used wherever an ordering matters (component ordering,
tie-breaks) is x-fastest, i.e. Fortran order of the array.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class Orientation:
    """Declared axis roles of a grid.

    The canonical convention is x = lateral, y increasing anterior to
    posterior, z increasing inferior to superior.  A ``True`` flip means the
    stored array runs the other way along that axis.
    """

    flip_x: bool = False
    flip_y: bool = False
    flip_z: bool = False

    @property
    def flips(self) -> tuple[bool, bool, bool]:
        return (self.flip_x, self.flip_y, self.flip_z)

    @property
    def tag(self) -> str:
        names = ("x:lateral", "y:posterior", "z:superior")
        return ",".join(n + ("(flipped)" if f else "") for n, f in zip(names, self.flips))

    @classmethod
    def from_flags(cls, flags: str) -> "Orientation":
        """Parse a flag string such as ``"y"`` or ``"xz"`` naming flipped axes."""
        flags = flags.lower()
        bad = set(flags) - set("xyz")
        if bad:
            raise ValueError(f"unknown axis in flip flags: {''.join(sorted(bad))}")
        return cls("x" in flags, "y" in flags, "z" in flags)


CANONICAL = Orientation()


def _as_triple(values, kind, cast):
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{kind} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class _Grid:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: Orientation = CANONICAL
    affine: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"grid data must be 3-D, got shape {data.shape}")
        if 0 in data.shape:
            raise ValueError("grid dims must be positive")
        spacing = _as_triple(self.spacing, "spacing", float)
        if not all(s > 0 for s in spacing):
            raise ValueError(f"spacing components must be > 0, got {spacing}")
        # read-only view; grids are never mutated in place
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        if self.affine is not None:
            aff = np.array(self.affine, dtype=float)
            if aff.shape != (4, 4):
                raise ValueError("affine must be 4x4")
            aff.flags.writeable = False
            object.__setattr__(self, "affine", aff)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_geometry(self, other: "_Grid") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.orientation == other.orientation
        )

    def with_data(self, data: np.ndarray, **changes):
        return replace(self, data=data, **changes)

    def linear_index(self, x, y, z):
        """Linear x-fastest index of voxel(s) ``(x, y, z)``."""
        nx, ny, _ = self.dims
        return np.asarray(x) + nx * (np.asarray(y) + ny * np.asarray(z))

    def unravel(self, idx):
        """Inverse of :meth:`linear_index`; returns ``(x, y, z)`` arrays."""
        return np.unravel_index(idx, self.dims, order="F")

    def flat(self) -> np.ndarray:
        """Voxel values in x-fastest linear order (a copy when needed)."""
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return self.same_geometry(other) and np.array_equal(self.data, other.data)

    __hash__ = None


class ImageGrid(_Grid):
    """Scalar intensity volume (HU)."""


class LabelGrid(_Grid):
    """Integer label volume; one non-negative label per voxel."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise TypeError(f"label data must be integer, got {data.dtype}")
        if data.size and data.min() < 0:
            raise ValueError("labels must be non-negative")
        super().__post_init__()

    def labels(self) -> np.ndarray:
        return np.unique(self.data)


Grid = Union[ImageGrid, LabelGrid]


@dataclass(frozen=True)
class VoxelBox:
    """Axis-aligned voxel range with inclusive bounds on both ends."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = _as_triple(self.lo, "lo", int)
        hi = _as_triple(self.hi, "hi", int)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def empty(self) -> bool:
        return any(w <= 0 for w in self.widths)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def clamp(self, dims: Sequence[int]) -> "VoxelBox":
        lo = tuple(max(0, l) for l in self.lo)
        hi = tuple(min(d - 1, h) for d, h in zip(dims, self.hi))
        return VoxelBox(lo, hi)

    def contains(self, point: Iterable[int]) -> bool:
        return all(l <= p <= h for l, p, h in zip(self.lo, point, self.hi))

    def within(self, dims: Sequence[int]) -> bool:
        return all(0 <= l and h < d for l, h, d in zip(self.lo, self.hi, dims))

    def to_list(self) -> list[list[int]]:
        return [list(self.lo), list(self.hi)]

    @classmethod
    def from_list(cls, value) -> "VoxelBox":
        lo, hi = value
        return cls(tuple(lo), tuple(hi))

    def __str__(self):
        lo = ",".join(map(str, self.lo))
        hi = ",".join(map(str, self.hi))
        return f"{lo}:{hi}"

    @classmethod
    def parse(cls, text: str) -> "VoxelBox":
        """Parse the ``"x0,y0,z0:x1,y1,z1"`` form produced by ``str(box)``."""
        try:
            lo, hi = text.split(":")
            return cls(tuple(int(v) for v in lo.split(",")), tuple(int(v) for v in hi.split(",")))
        except ValueError as exc:
            raise ValueError(f"malformed box {text!r}; expected x0,y0,z0:x1,y1,z1") from exc


def _check_box(grid: _Grid, box: VoxelBox):
    if box.empty:
        raise ValueError("empty box")
    if not box.within(grid.dims):
        raise ValueError(f"box {box} lies outside grid dims {grid.dims}")


def crop(grid, box: VoxelBox):
    """Return the sub-grid covered by ``box``; spacing and orientation are kept."""
    _check_box(grid, box)
    affine = grid.affine
    if affine is not None:
        affine = affine.copy()
        affine[:3, 3] = affine[:3, :3] @ np.array(box.lo, float) + affine[:3, 3]
    return grid.with_data(grid.data[box.slices].copy(), affine=affine)


def paste(dst: LabelGrid, src: LabelGrid, box: VoxelBox, overwrite) -> LabelGrid:
    """Write ``src`` into ``dst`` at ``box`` for src voxels whose label is in ``overwrite``.

    ``overwrite`` is a collection of labels, or ``None`` meaning every label.
    Voxels outside the box are never touched.
    """
    _check_box(dst, box)
    if src.dims != box.widths:
        raise ValueError(f"src dims {src.dims} do not match box widths {box.widths}")
    out = dst.data.copy()
    region = out[box.slices]
    if overwrite is None:
        region[...] = src.data
    else:
        mask = np.isin(src.data, np.fromiter(overwrite, dtype=np.int64))
        region[mask] = src.data[mask]
    return dst.with_data(out)

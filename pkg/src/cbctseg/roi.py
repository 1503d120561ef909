"""Mandible-anchored crop box for the nerve pass and merge-back of its labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import LabelGrid, VoxelBox, paste


class MandibleAbsentError(ValueError):
    pass


@dataclass(frozen=True)
class RoiExpansion:
    lateral_minus: int = 110
    lateral_plus: int = 110
    posterior: int = 100
    superior: int = 90

    def __post_init__(self):
        if min(self.lateral_minus, self.lateral_plus, self.posterior, self.superior) < 0:
            raise ValueError("ROI expansions must be >= 0")

    @property
    def widths(self) -> tuple[int, int, int]:
        """Box widths before clamping (inclusive bounds)."""
        return (self.lateral_minus + self.lateral_plus + 1, self.posterior + 1, self.superior + 1)


@dataclass(frozen=True)
class MergePolicy:
    nerve_ids: tuple[int, ...] = (44, 45, 46)  # dense ids of consolidated 51, 52, 53
    clear_phase1_nerves: bool = True
    override_all: bool = True

    def __post_init__(self):
        if not self.nerve_ids:
            raise ValueError("nerve_ids must not be empty")
        object.__setattr__(self, "nerve_ids", tuple(int(n) for n in self.nerve_ids))


def _anchor_and_floor(mask: np.ndarray):
    # flat search is far faster than 3-D nonzero on mostly empty masks
    order = "F" if mask.flags.f_contiguous and not mask.flags.c_contiguous else "C"
    x, y, z = np.unravel_index(np.flatnonzero(mask.ravel(order=order)), mask.shape, order=order)
    if x.size == 0:
        raise MandibleAbsentError("mandible absent")
    i = np.lexsort((x, z, y))[0]
    return (int(x[i]), int(y[i]), int(z[i])), int(z.min())


def anterior_anchor(mask: np.ndarray) -> tuple[int, int, int]:
    """Mandible voxel with minimal y; ties by minimal z, then minimal x."""
    return _anchor_and_floor(mask)[0]


def _canonical(lbl: LabelGrid) -> np.ndarray:
    data = lbl.data
    for axis, flipped in enumerate(lbl.orientation.flips):
        if flipped:
            data = np.flip(data, axis=axis)
    return data


def compute_phase2_box(lbl: LabelGrid, mandible_id: int = 1, exp: RoiExpansion = RoiExpansion()) -> VoxelBox:
    """Crop box around the mandible, in array index space of ``lbl``.

    From the most anterior mandible voxel A and the most inferior mandible
    level z_inf: x in [A.x - minus, A.x + plus], y in [A.y, A.y + posterior],
    z in [z_inf, z_inf + superior], each clamped to the grid.  Axis roles are
    read through the grid's declared orientation.
    """
    mask = _canonical(lbl) == mandible_id
    (ax, ay, _), z_inf = _anchor_and_floor(mask)
    box = VoxelBox(
        (ax - exp.lateral_minus, ay, z_inf),
        (ax + exp.lateral_plus, ay + exp.posterior, z_inf + exp.superior),
    ).clamp(lbl.dims)
    # map back from canonical to stored axis direction
    lo, hi = list(box.lo), list(box.hi)
    for axis, flipped in enumerate(lbl.orientation.flips):
        if flipped:
            n = lbl.dims[axis]
            lo[axis], hi[axis] = n - 1 - hi[axis], n - 1 - lo[axis]
    return VoxelBox(tuple(lo), tuple(hi))


def merge_phase2(phase1: LabelGrid, phase2: LabelGrid, box: VoxelBox, policy: MergePolicy = MergePolicy()) -> LabelGrid:
    """Write the nerve labels of the cropped pass back into the full grid.

    Phase-1 nerve voxels are cleared first (when configured), then every
    phase-2 nerve voxel is written at its box position.  Non-nerve phase-2
    labels are ignored.
    """
    if phase2.dims != box.widths:
        raise ValueError(f"phase-2 dims {phase2.dims} do not match box widths {box.widths}")
    if not box.within(phase1.dims):
        raise ValueError(f"box {box} lies outside phase-1 dims {phase1.dims}")
    nerves = np.array(policy.nerve_ids)
    base = phase1
    if policy.clear_phase1_nerves:
        data = phase1.data.copy()
        data[np.isin(data, nerves)] = 0
        base = phase1.with_data(data)
    if policy.override_all:
        return paste(base, phase2, box, policy.nerve_ids)
    # only fill background voxels
    out = base.data.copy()
    region = out[box.slices]
    src = phase2.data
    put = np.isin(src, nerves) & (region == 0)
    region[put] = src[put]
    return base.with_data(out)


def volume_reduction(full_dims, box: VoxelBox) -> float:
    """Ratio of full-grid voxel count to crop voxel count."""
    return float(np.prod(full_dims)) / float(np.prod(box.widths))

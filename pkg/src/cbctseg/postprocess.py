"""Connected components and the two cleanup rules applied after fusion.

* Pharynx relabeling: stray components of any class that touch the pharynx
  are rewritten to the pharynx label.
* Mandible filtering: mandible components below a voxel-count threshold are
  set to background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from . import _backend
from .grid import LabelGrid, VoxelBox

POLICIES = ("non-largest-touching", "any-touching")
_TOUCH = ndimage.generate_binary_structure(3, 3)  # 26-adjacency


@dataclass(frozen=True)
class PostprocessConfig:
    connectivity: int = 26
    pharynx_id: int = 7
    mandible_id: int = 1
    min_mandible_voxels: int = 200_000
    pharynx_policy: str = "non-largest-touching"

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.min_mandible_voxels <= 0:
            raise ValueError("min_mandible_voxels must be > 0")
        if self.pharynx_policy not in POLICIES:
            raise ValueError(f"pharynx_policy must be one of {POLICIES}")


def min_voxels_from_mm3(mm3: float, spacing) -> int:
    """Smallest voxel count whose volume reaches ``mm3`` on this spacing."""
    vv = float(np.prod(spacing))
    return max(1, math.ceil(mm3 / vv - 1e-9))


@dataclass
class Component:
    class_id: int
    size: int
    voxels: np.ndarray  # ascending x-fastest linear indices
    bbox: VoxelBox

    @property
    def first_index(self) -> int:
        return int(self.voxels[0])


def component_map(lbl: LabelGrid, connectivity: int = 26, target: int = -1, backend: Optional[str] = None):
    """Label connected components.

    With ``target >= 0`` only that class is labeled; otherwise every nonzero
    class is, with components never crossing a label change.  Returns
    ``(ids, count)`` where ``ids`` has the grid shape, 0 marks unlabeled
    voxels and ids 1..count follow first occurrence in x-fastest order.
    """
    kern = _backend.kernels if backend is None else _backend.get(backend)
    nx, ny, nz = lbl.dims
    flat = np.ascontiguousarray(lbl.flat(), dtype=np.int32)
    comp, n = kern.label_components(flat, nx, ny, nz, int(connectivity), int(target))
    return comp.reshape(lbl.dims, order="F"), n


def connected_components(lbl: LabelGrid, class_id: int, connectivity: int = 26,
                         backend: Optional[str] = None) -> list:
    """Components of one class, largest first; ties by smallest first voxel."""
    if class_id < 0:
        raise ValueError("class id must be non-negative")
    ids, n = component_map(lbl, connectivity, class_id, backend)
    if n == 0:
        return []
    flat = ids.ravel(order="F")
    where = np.flatnonzero(flat)
    comp_of = flat[where]
    order = np.argsort(comp_of, kind="stable")
    where = where[order]
    sizes = np.bincount(comp_of, minlength=n + 1)[1:]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for c in range(n):
        vox = where[bounds[c]:bounds[c + 1]]
        x, y, z = np.unravel_index(vox, lbl.dims, order="F")
        box = VoxelBox((x.min(), y.min(), z.min()), (x.max(), y.max(), z.max()))
        out.append(Component(int(class_id), int(sizes[c]), vox, box))
    # ids already follow first occurrence, so a stable sort on size suffices
    out.sort(key=lambda comp: -comp.size)
    return out


def relabel_touching_pharynx(lbl: LabelGrid, config: PostprocessConfig = PostprocessConfig(),
                             backend: Optional[str] = None) -> LabelGrid:
    """Rewrite foreground components that touch the pharynx to the pharynx id.

    Under the default policy the largest component of each class is exempt.
    Touching means 26-adjacency.  Relabeled voxels become pharynx and may in
    turn expose further components, so the rule is applied until nothing
    changes; the result is therefore a fixed point.
    """
    pharynx = config.pharynx_id
    data = lbl.data
    ph_mask = data == pharynx
    if not ph_mask.any():
        return lbl
    ids, n = component_map(lbl, config.connectivity, -1, backend)
    if n == 0:
        return lbl
    flat_ids = ids.ravel(order="F")
    flat_lbl = lbl.flat()
    uniq, first = np.unique(flat_ids, return_index=True)
    first = first[uniq > 0]
    klass = np.zeros(n + 1, dtype=np.int64)
    klass[1:] = flat_lbl[first]
    sizes = np.bincount(flat_ids, minlength=n + 1)

    eligible = np.ones(n + 1, dtype=bool)
    eligible[0] = False
    eligible[klass == pharynx] = False
    if config.pharynx_policy == "non-largest-touching":
        # component ids follow first occurrence, so argmax picks the earliest on ties
        for c in np.unique(klass[1:]):
            members = np.flatnonzero(klass == c)
            members = members[members > 0]
            eligible[members[np.argmax(sizes[members])]] = False

    out = data.copy()
    frontier = ph_mask
    while True:
        touched = ndimage.binary_dilation(frontier, structure=_TOUCH)
        hit = np.unique(ids[touched])
        hit = hit[eligible[hit]]
        if hit.size == 0:
            break
        eligible[hit] = False
        frontier = np.isin(ids, hit)
        out[frontier] = pharynx
    return lbl.with_data(out)


def filter_small_mandible(lbl: LabelGrid, config: PostprocessConfig = PostprocessConfig(),
                          backend: Optional[str] = None) -> LabelGrid:
    """Set mandible components with fewer than ``min_mandible_voxels`` voxels to background."""
    ids, n = component_map(lbl, config.connectivity, config.mandible_id, backend)
    if n == 0:
        return lbl
    sizes = np.bincount(ids.ravel(), minlength=n + 1)
    small = sizes < config.min_mandible_voxels
    small[0] = False
    if not small.any():
        return lbl
    out = lbl.data.copy()
    out[small[ids]] = 0
    return lbl.with_data(out)


def cleanup(lbl: LabelGrid, config: PostprocessConfig = PostprocessConfig(), order: str = "pharynx-first",
            backend: Optional[str] = None) -> LabelGrid:
    """Apply both rules; ``order`` is ``"pharynx-first"`` or ``"mandible-first"``."""
    if order == "pharynx-first":
        return filter_small_mandible(relabel_touching_pharynx(lbl, config, backend), config, backend)
    if order == "mandible-first":
        return relabel_touching_pharynx(filter_small_mandible(lbl, config, backend), config, backend)
    raise ValueError(f"order must be 'pharynx-first' or 'mandible-first', got {order!r}")

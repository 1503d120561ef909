"""Synthetic jaw phantom and simulated noisy raters.

Randomness comes from numpy's Philox counter-based generator seeded with the
given integer, so outputs are reproducible across platforms.

Geometry (canonical orientation, voxel units, scaled with dims): the
mandible is a half-annulus slab opening posteriorly (+y); nerve tubes run
inside it; lower teeth sit on top of the arch, each with a pulp core; the
pharynx is a vertical column behind the arch.  Labels are consolidated ids.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .grid import ImageGrid, LabelGrid

HU = {
    "air": -1000.0,
    "soft_tissue": 40.0,
    "bone": 1500.0,
    "enamel": 2500.0,
    "pulp": 60.0,
    "nerve": 30.0,
}
NOISE_SD = 20.0

LOWER_TEETH = (31, 32, 33, 34, 35, 36, 37, 38, 41, 42, 43, 44, 45, 46, 47, 48)


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox stream ``stream`` of ``seed``; different streams are independent."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)]))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 64)
    spacing: tuple[float, float, float] = (0.3, 0.3, 0.3)
    seed: int = 0
    n_teeth: int = 8
    nerve_radius: float = 1.5

    def __post_init__(self):
        if not 0 <= self.n_teeth <= len(LOWER_TEETH):
            raise ValueError(f"n_teeth must be in 0..{len(LOWER_TEETH)}")
        if not 1.0 <= self.nerve_radius <= 2.0:
            raise ValueError("nerve_radius must be within 1-2 voxels")


@dataclass(frozen=True)
class MandibleShape:
    cx: float
    cy: float
    r_in: float
    r_out: float
    z0: int
    z1: int  # inclusive

    @property
    def height(self) -> int:
        return self.z1 - self.z0 + 1

    @property
    def volume_voxels(self) -> float:
        """Closed-form volume of the half-annulus slab, in voxels."""
        return 0.5 * math.pi * (self.r_out ** 2 - self.r_in ** 2) * self.height


def mandible_shape(dims) -> MandibleShape:
    nx, ny, nz = dims
    if min(nx, ny) < 40 or nz < 32:
        raise ValueError(f"dims {tuple(dims)} too small for the phantom (need >= 40x40x32)")
    r_out = 0.38 * min(nx, ny)
    r_in = 0.62 * r_out
    cx = (nx - 1) / 2.0
    cy = 0.5 * ny  # arch spans y in [cy - r_out, cy]; rami-free half annulus
    z0 = int(round(0.12 * nz))
    z1 = z0 + max(6, int(round(0.22 * nz))) - 1
    return MandibleShape(cx, cy, r_in, r_out, z0, z1)


def _tube(coords, path, radius):
    """Mask of voxels within ``radius`` of a polyline ``path`` (array of points)."""
    x, y, z = coords
    mask = np.zeros(x.shape, dtype=bool)
    for p, q in zip(path[:-1], path[1:]):
        d = q - p
        dd = float(d @ d)
        t = ((x - p[0]) * d[0] + (y - p[1]) * d[1] + (z - p[2]) * d[2]) / dd
        t = np.clip(t, 0.0, 1.0)
        ex = x - (p[0] + t * d[0])
        ey = y - (p[1] + t * d[1])
        ez = z - (p[2] + t * d[2])
        mask |= ex * ex + ey * ey + ez * ez <= radius * radius
    return mask


def _arc(m: MandibleShape, radius, z, angles):
    # angle 0 points to -y (anterior); positive angles go towards +x
    return np.array([[m.cx + radius * math.sin(a), m.cy - radius * math.cos(a), z] for a in angles])


def generate_phantom(spec: PhantomSpec = PhantomSpec()):
    """Return ``(image, labels)``; labels use consolidated ids."""
    dims = tuple(int(d) for d in spec.dims)
    m = mandible_shape(dims)
    nx, ny, nz = dims
    x, y, z = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64),
                          np.arange(nz, dtype=np.float64), indexing="ij")
    coords = (x, y, z)
    lbl = np.zeros(dims, dtype=np.uint16)

    r = np.hypot(x - m.cx, y - m.cy)
    mandible = (r >= m.r_in) & (r <= m.r_out) & (y <= m.cy) & (z >= m.z0) & (z <= m.z1)
    lbl[mandible] = 1

    # nerves: two incisive tubes (one per side) and a lingual tube, all inside the bone
    r_mid = 0.5 * (m.r_in + m.r_out)
    z_mid = 0.5 * (m.z0 + m.z1)
    rad = spec.nerve_radius
    half = 0.5 * (m.r_out - m.r_in)
    margin = rad + 1.0
    if half < margin + 0.5 or m.height < 2 * margin + 2:
        raise ValueError("mandible too thin to embed nerve tubes; increase dims")
    inc_z = z_mid - 0.25 * m.height
    left = _tube(coords, _arc(m, r_mid, inc_z, np.linspace(-1.35, -0.2, 12)), rad)
    right = _tube(coords, _arc(m, r_mid, inc_z, np.linspace(0.2, 1.35, 12)), rad)
    lingual = _tube(coords, _arc(m, m.r_in + margin, z_mid + 0.25 * m.height,
                                 np.linspace(-0.9, 0.9, 16)), rad)
    for nid, mask in ((51, left), (52, right), (53, lingual)):
        lbl[mask & mandible] = nid

    # teeth on top of the arch, alternating sides from the midline outwards
    tooth_r = 0.42 * (m.r_out - m.r_in)
    pulp_r = 0.4 * tooth_r
    tz = m.z1 + tooth_r + 1
    if tz + tooth_r >= nz - 1:
        raise ValueError("dims too small in z for the teeth")
    n_side = max(1, (spec.n_teeth + 1) // 2)
    step = 1.45 / max(n_side, 1)
    for k in range(spec.n_teeth):
        side = -1 if k % 2 == 0 else 1
        idx = k // 2
        tid = LOWER_TEETH[idx] if side < 0 else LOWER_TEETH[8 + idx]
        a = side * (0.12 + step * idx)
        c = _arc(m, r_mid, tz, [a])[0]
        d2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        lbl[(d2 <= tooth_r ** 2) & (lbl == 0)] = tid
        lbl[d2 <= pulp_r ** 2] = 50

    # pharynx column behind the arch, clear of every other structure
    ph_r = 0.12 * min(nx, ny)
    ph_cy = m.cy + 0.55 * (ny - m.cy)
    pharynx = (np.hypot(x - m.cx, y - ph_cy) <= ph_r) & (z >= m.z0) & (z <= nz - 1 - m.z0)
    if np.any(lbl[pharynx] != 0):
        raise ValueError("pharynx overlaps other structures; dims too small")
    lbl[pharynx] = 7

    # intensities
    head = ((x - m.cx) / (0.48 * nx)) ** 2 + ((y - 0.5 * ny) / (0.48 * ny)) ** 2 <= 1.0
    img = np.full(dims, HU["air"])
    img[head] = HU["soft_tissue"]
    img[lbl == 1] = HU["bone"]
    img[np.isin(lbl, LOWER_TEETH)] = HU["enamel"]
    img[lbl == 50] = HU["pulp"]
    img[np.isin(lbl, (51, 52, 53))] = HU["nerve"]
    img[lbl == 7] = HU["air"]
    noise = rng_for(spec.seed, 0).normal(0.0, NOISE_SD, size=dims)
    img = np.clip(np.round(img + noise), -1000.0, 3800.0)

    spacing = tuple(float(s) for s in spec.spacing)
    return ImageGrid(img, spacing), LabelGrid(lbl, spacing)


def phantom_metadata(spec: PhantomSpec) -> dict:
    m = mandible_shape(spec.dims)
    return {
        "spec": asdict(spec),
        "intensities_hu": dict(HU),
        "noise_sd_hu": NOISE_SD,
        "mandible": asdict(m) | {"analytic_volume_voxels": m.volume_voxels},
        "rng": "numpy Philox, key=[seed, stream]",
    }


@dataclass(frozen=True)
class RaterNoise:
    flip_rate: float = 0.05
    boundary_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate < 0.5:
            raise ValueError(f"flip_rate must be in [0, 0.5), got {self.flip_rate}")
        if self.boundary_steps < 0:
            raise ValueError("boundary_steps must be >= 0")


_SHIFTS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def _shifted(a, shift):
    # value of the neighbour at offset `shift`, edge-replicated
    out = a
    for axis, s in enumerate(shift):
        if s:
            idx = np.arange(a.shape[axis]) + s
            idx = np.clip(idx, 0, a.shape[axis] - 1)
            out = np.take(out, idx, axis=axis)
    return out


def simulate_rater(ref: LabelGrid, noise: RaterNoise) -> LabelGrid:
    """A noisy copy of ``ref``.

    Boundary perturbation: for each step, every voxel with a differing
    6-neighbour takes the label of one random 6-neighbour with probability
    1/2.  Flip noise: each voxel independently, with probability
    ``flip_rate``, takes a label drawn uniformly from the other labels present
    in the reference.
    """
    rng = rng_for(noise.seed, 1)
    data = ref.data.copy()
    for _ in range(noise.boundary_steps):
        choice = rng.integers(0, 6, size=data.shape)
        move = rng.random(data.shape) < 0.5
        neigh = np.empty_like(data)
        for k, sh in enumerate(_SHIFTS):
            sel = choice == k
            neigh[sel] = _shifted(data, sh)[sel]
        boundary = np.zeros(data.shape, dtype=bool)
        for sh in _SHIFTS:
            boundary |= _shifted(data, sh) != data
        upd = boundary & move
        data[upd] = neigh[upd]

    if noise.flip_rate > 0:
        labels = np.unique(ref.data)
        if labels.size > 1:
            flip = rng.random(data.shape) < noise.flip_rate
            cur = data[flip]
            pos = np.searchsorted(labels, cur)
            # uniform over the other reference labels: skip the voxel's own slot
            r = rng.integers(0, labels.size - 1, size=cur.size)
            own = (pos < labels.size) & (labels[np.minimum(pos, labels.size - 1)] == cur)
            r = np.where(own & (r >= pos), r + 1, r)
            data[flip] = labels[r]
    return ref.with_data(data)


def simulate_raters(ref: LabelGrid, k: int, flip_rates, boundary_steps: int = 0, seed: int = 0) -> list:
    """``k`` raters with per-rater flip rates (a scalar or a length-k sequence)."""
    rates = np.broadcast_to(np.asarray(flip_rates, dtype=float), (k,))
    return [simulate_rater(ref, RaterNoise(float(r), boundary_steps, seed * 1000 + j + 1)) for j, r in enumerate(rates)]

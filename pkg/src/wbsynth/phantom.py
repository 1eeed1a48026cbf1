"""Deterministic paired MR/CT torso phantoms with a known misalignment.

Axis 0 runs head to feet, axis 1 anterior to posterior, axis 2 right to
left.  Geometry is laid out in normalized coordinates in [-1, 1]^3 so the
same anatomy appears at every supported size.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np
from scipy import ndimage

from .volumes import DeformationField, Kind, LabelMask, Volume, trilinear_warp, warp, warp_labels

SIZES = (16, 32, 64, 128)

LIVER, SPINE, RIBS, FEMUR, PELVIS, BLADDER, LUNGS, BODY, FAT = range(1, 10)
ORGANS = {LIVER: "liver", SPINE: "spine", RIBS: "ribs", FEMUR: "femur",
          PELVIS: "pelvis", BLADDER: "bladder", LUNGS: "lungs", BODY: "body"}
LEGEND: Dict[int, str] = {0: "background", **ORGANS, FAT: "fat"}

# Tissue sub-regions used by the weighted MI sampling, in descending typical volume.
SUBREGIONS = ("air", "soft_tissue", "fat", "lungs", "pelvis_femur", "ribs_spine")
SUBREGION_OF_LABEL = {0: 0, BODY: 1, LIVER: 1, BLADDER: 1, FAT: 2, LUNGS: 3,
                      PELVIS: 4, FEMUR: 4, RIBS: 5, SPINE: 5}

CT_RANGE = (-1024.0, 1500.0)
MR_RANGE = (0.0, 1.0)

# (mean, jitter) per label.  CT in HU; MR in arbitrary [0, 1] units.
_CT = {0: (-1000, 0), BODY: (40, 20), FAT: (-100, 20), LIVER: (55, 10), LUNGS: (-750, 50),
       BLADDER: (10, 5), SPINE: (700, 200), RIBS: (700, 200), PELVIS: (700, 200),
       FEMUR: (700, 200)}
# Fat is brightest in-phase and loses contrast out-of-phase; marrow-rich bone is
# bright in MR although it is the densest tissue in CT.
_MR_IP = {0: 0.0, BODY: 0.35, FAT: 0.9, LIVER: 0.45, LUNGS: 0.05, BLADDER: 0.22,
          SPINE: 0.6, RIBS: 0.15, PELVIS: 0.55, FEMUR: 0.65}
_MR_OP = {0: 0.0, BODY: 0.3, FAT: 0.42, LIVER: 0.3, LUNGS: 0.05, BLADDER: 0.22,
          SPINE: 0.2, RIBS: 0.1, PELVIS: 0.2, FEMUR: 0.25}
_UPTAKE = {0: 0.0, BODY: 1.0, FAT: 0.4, LIVER: 3.0, LUNGS: 0.3, BLADDER: 8.0,
           SPINE: 2.0, RIBS: 1.2, PELVIS: 1.5, FEMUR: 1.5}


class PhantomConfigError(ValueError):
    pass


@dataclass
class PhantomCase:
    mr_ip: Volume
    mr_op: Volume
    ct: Volume               # HU, aligned with the MR channels
    labels: LabelMask        # aligned with the MR channels
    gt_field: DeformationField
    activity: Volume
    seed: int
    moved_ct: Optional[Volume] = None       # ct warped by gt_field
    moved_labels: Optional[LabelMask] = None

    @property
    def shape(self):
        return self.ct.shape


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def _coords(size: int):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, c, indexing="ij")


def _paint(size: int, rng: np.random.Generator) -> np.ndarray:
    z, y, x = _coords(size)
    lab = np.zeros((size,) * 3, dtype=np.int32)

    def jit(scale=0.1):
        return 1.0 + rng.uniform(-scale, scale)

    shift = 2.0 / size * 2.0  # +-2 voxels in normalized units
    def off():
        return rng.uniform(-shift, shift)

    # torso: superellipse cross-section, closed at the shoulders and above the hips
    ax, ay = 0.82 * jit(0.05), 0.56 * jit(0.05)
    top, hip = -0.92, 0.42
    torso = ((np.abs(y / ay) ** 2.5 + np.abs(x / ax) ** 2.5) <= 1.0) & (z >= top) & (z <= hip)
    leg_x, leg_r = 0.36, 0.3 * jit(0.05)
    legs = (((x - leg_x) ** 2 + y ** 2 <= leg_r ** 2) | ((x + leg_x) ** 2 + y ** 2 <= leg_r ** 2)) \
        & (z > 0.3) & (z <= 0.97)
    body = torso | legs
    lab[body] = BODY

    # subcutaneous fat: outer layer of the body, plus a visceral pad in the abdomen
    inner = ndimage.binary_erosion(body, iterations=max(1, round(size * 0.045)))
    lab[body & ~inner] = FAT
    visc = (((y - 0.1) / 0.28) ** 2 + (x / 0.5) ** 2 + ((z - 0.12) / 0.14) ** 2) <= 1.0
    lab[visc & inner] = FAT

    # lungs: two ellipsoids in the upper torso
    for side in (-1, 1):
        cx, cz = side * 0.38 + off(), -0.52 + off()
        rz, ry, rx = 0.3 * jit(), 0.34 * jit(), 0.26 * jit()
        lung = ((z - cz) / rz) ** 2 + ((y - 0.02) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
        lab[lung & inner] = LUNGS

    # liver: under the right lung
    lz, lx = -0.08 + off(), -0.3 + off()
    liver = ((z - lz) / (0.16 * jit())) ** 2 + ((y - 0.0) / (0.3 * jit())) ** 2 \
        + ((x - lx) / (0.34 * jit())) ** 2 <= 1.0
    lab[liver & inner & (lab != LUNGS)] = LIVER

    # bladder: low in the pelvis, anterior
    bz = 0.3 + off()
    bladder = ((z - bz) / 0.1) ** 2 + ((y + 0.2) / 0.15) ** 2 + (x / 0.18) ** 2 <= 1.0
    lab[bladder & inner] = BLADDER

    # pelvis: posterior/lateral bony ring around the bladder
    pz = 0.33 + off()
    ring = ((y - 0.05) / 0.42) ** 2 + (x / 0.58) ** 2
    pelvis = (ring <= 1.0) & (ring >= 0.45) & (np.abs(z - pz) <= 0.12 * jit()) & (y > -0.15)
    lab[pelvis & inner] = PELVIS

    # femurs: cylinders down the legs
    fr = 0.13 * jit()
    for side in (-1, 1):
        cx = side * leg_x + off() * 0.5
        fem = ((x - cx) ** 2 + (y - 0.0) ** 2 <= fr ** 2) & (z >= 0.44) & (z <= 0.95)
        lab[fem & body] = FEMUR

    # ribs: thin elliptical arcs around the thoracic cavity
    rib_ax, rib_ay = ax * 0.84, ay * 0.8
    ring = np.sqrt((y / rib_ay) ** 2 + (x / rib_ax) ** 2)
    band = np.abs(ring - 1.0) <= 0.6 * (2.0 / size) / np.sqrt(rib_ax * rib_ay)
    rib_z = np.array([-0.72, -0.5, -0.28]) + off()
    rib_half = 0.6 * (2.0 / size)
    slab = np.zeros_like(band)
    for rz in rib_z:
        slab |= np.abs(z - rz) <= rib_half
    lab[band & slab & inner] = RIBS

    # spine: posterior column, drawn last so it cuts through the rib ring
    sx, sy = off() * 0.5, 0.4 * ay / 0.56
    spine = ((x - sx) ** 2 + (y - sy) ** 2 <= (0.065 * jit()) ** 2) & (z >= -0.86) & (z <= 0.32)
    lab[spine] = SPINE
    return lab


def _intensities(lab: np.ndarray, rng: np.random.Generator, size: int):
    ct = np.zeros(lab.shape, np.float64)
    ip = np.zeros(lab.shape, np.float64)
    op = np.zeros(lab.shape, np.float64)
    act = np.zeros(lab.shape, np.float64)
    for label in LEGEND:
        m = lab == label
        mean, jitter = _CT[label]
        ct[m] = mean + rng.uniform(-jitter, jitter)
        scale = 1.0 + rng.uniform(-0.08, 0.08)
        ip[m] = _MR_IP[label] * scale
        op[m] = _MR_OP[label] * scale
        act[m] = _UPTAKE[label] * (1.0 + rng.uniform(-0.1, 0.1))
    # mild partial-volume blur and acquisition noise
    sigma = 0.6 * size / 32
    ct = ndimage.gaussian_filter(ct, sigma) + rng.normal(0, 8.0, lab.shape)
    ip = ndimage.gaussian_filter(ip, sigma) + rng.normal(0, 0.01, lab.shape)
    op = ndimage.gaussian_filter(op, sigma) + rng.normal(0, 0.01, lab.shape)
    ct = np.clip(ct, -1000.0, 3000.0)
    ip = np.clip(ip, 0.0, 1.0) * 2.0 - 1.0
    op = np.clip(op, 0.0, 1.0) * 2.0 - 1.0
    act = ndimage.gaussian_filter(act, sigma)
    return ct, ip, op, act


def thoracic_region(labels) -> np.ndarray:
    """Lung plus rib-cage region, closed and hole-filled slice by slice."""
    lab = labels.labels if isinstance(labels, LabelMask) else np.asarray(labels)
    if not (lab == LUNGS).any():
        raise ValueError("label mask has no lung voxels; cannot derive the thoracic cavity")
    lungs = lab == LUNGS
    wall = (lab == RIBS) | (lab == SPINE)
    ribs_z = np.nonzero((lab == RIBS).any(axis=(1, 2)))[0]
    if ribs_z.size:
        # bridge the gaps between rib levels so the cage is a closed wall
        wall[:ribs_z.min()] = False
        wall[ribs_z.max() + 1:] = False
        reach = max(3, int(np.ceil(0.12 * lab.shape[0])))
        wall = ndimage.binary_closing(wall, structure=np.ones((2 * reach + 1, 1, 1)))
        wall[:ribs_z.min()] = False
        wall[ribs_z.max() + 1:] = False
    region = wall | lungs
    for k in range(region.shape[0]):
        region[k] = ndimage.binary_fill_holes(region[k])
    return region


def thoracic_boundary(labels, radius: int = 2) -> np.ndarray:
    """Binary layer of voxels within ``radius`` (Chebyshev) of the thoracic surface.

    A voxel is in the layer when it lies within ``radius`` of both the
    thoracic region and its complement.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    region = thoracic_region(labels)
    to_region = ndimage.distance_transform_cdt(~region, metric="chessboard")
    to_outside = ndimage.distance_transform_cdt(region, metric="chessboard")
    return ((to_region <= radius) & (to_outside <= radius)).astype(np.uint8)


def _smooth_field(shape, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(3, 4, 4, 4))
    zoom = [s / 4 for s in shape]
    field = np.stack([ndimage.zoom(c, zoom, order=1, grid_mode=False, mode="nearest")
                      for c in coarse])
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    if magnitude == 0 or peak == 0:
        return np.zeros((3,) + tuple(shape))
    return field * (magnitude / peak)


def slip_profile(labels) -> np.ndarray:
    """Cranio-caudal slip weight: 1 mid-thorax inside the cavity, tapering to 0 at its ends."""
    region = thoracic_region(labels)
    zs = np.nonzero(region.any(axis=(1, 2)))[0]
    z = np.arange(region.shape[0], dtype=np.float64)
    lo, hi = zs.min(), zs.max()
    ramp = max(2.0, (hi - lo) / 4.0)
    taper = np.clip(np.minimum(z - lo, hi - z) / ramp, 0.0, 1.0)
    taper = 0.5 - 0.5 * np.cos(np.pi * taper)
    return region * taper[:, None, None]


def misalign(case: PhantomCase, magnitude: float = 3.0, slip: float = 2.0, seed: int = 0):
    """Move the CT away from the MR by a smooth field plus a thoracic slip.

    Returns (moved_ct, moved_labels, gt_field) with moved = original o gt_field.
    """
    if magnitude < 0 or slip < 0:
        raise ValueError("magnitude and slip must be non-negative")
    rng = _rng(seed, 101)
    disp = _smooth_field(case.shape, magnitude, rng)
    if slip > 0:
        disp[0] += slip * slip_profile(case.labels)
    gt = DeformationField(disp.astype(np.float32))
    moved_ct = warp(case.ct, gt, border=-1000.0)
    moved_labels = warp_labels(case.labels, gt)
    return moved_ct, moved_labels, gt


def generate(seed: int, size: int = 32, magnitude: float = 3.0, slip: float = 2.0) -> PhantomCase:
    if size not in SIZES:
        raise PhantomConfigError(f"unsupported phantom size {size}; choose from {SIZES}")
    rng = _rng(seed, 0)
    lab = _paint(size, rng)
    ct, ip, op, act = _intensities(lab, _rng(seed, 1), size)
    spacing = (256.0 / size,) * 3  # 2 mm at 128^3
    case = PhantomCase(
        mr_ip=Volume(ip.astype(np.float32), spacing, Kind.MR_IP),
        mr_op=Volume(op.astype(np.float32), spacing, Kind.MR_OP),
        ct=Volume(ct.astype(np.float32), spacing, Kind.CT_HU),
        labels=LabelMask(lab, dict(LEGEND)),
        gt_field=DeformationField.zeros((size,) * 3),
        activity=Volume(act.astype(np.float32), spacing, Kind.ACTIVITY),
        seed=seed,
    )
    moved_ct, moved_labels, gt = misalign(case, magnitude, slip, seed)
    return replace(case, gt_field=gt, moved_ct=moved_ct, moved_labels=moved_labels)


def subregion_map(labels) -> np.ndarray:
    lab = labels.labels if isinstance(labels, LabelMask) else np.asarray(labels)
    lut = np.zeros(max(LEGEND) + 1, dtype=np.int32)
    for label, region in SUBREGION_OF_LABEL.items():
        lut[label] = region
    return lut[lab]


def subregion_volumes(labels) -> np.ndarray:
    return np.bincount(subregion_map(labels).ravel(), minlength=len(SUBREGIONS))


def inverse_field(field: DeformationField, iterations: int = 30) -> DeformationField:
    """Fixed-point inverse: returns v with x + v(x) + u(x + v(x)) ~= x.

    Warping a volume that was moved by ``field`` with the inverse recovers the
    original, so this is the displacement a registration network should find.
    """
    import torch

    u = torch.as_tensor(field.disp, dtype=torch.float64)[None]
    v = -u.clone()
    for _ in range(iterations):
        # out-of-lattice samples reuse the nearest in-lattice displacement
        v = -_clamped_sample(u, v)
    return DeformationField(v[0].numpy().astype(field.disp.dtype))


def _grid(shape):
    import torch
    axes = [torch.arange(n, dtype=torch.float64) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))[None]


def _clamped_sample(img, disp):
    import torch
    shape = img.shape[2:]
    pos = _grid(shape) + disp
    clamped = torch.stack([pos[:, a].clamp(0, n - 1) for a, n in enumerate(shape)], 1)
    return trilinear_warp(img, clamped - _grid(shape), border=0.0)


def endpoint_error(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    err = np.sqrt(((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2).sum(axis=0))
    return float(err[mask.astype(bool)].mean() if mask is not None else err.mean())


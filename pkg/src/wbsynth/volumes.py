"""3D grid primitives: volumes, label masks, displacement fields and the
operations every other module builds on (file I/O, warping, finite
differences, Canny edges, intensity normalization).

Array layout is (D, H, W) for scalar grids and (3, D, H, W) for displacement
fields.  Displacement component ``i`` moves along array axis ``i`` and is
measured in voxels.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

MAGIC = b"SGWB0001"
HEADER_SIZE = 64
_HEADER = struct.Struct("<8sBBH3I3fQ")  # 44 bytes, zero padded to HEADER_SIZE


class VolumeFormatError(ValueError):
    """Malformed canonical volume file.  ``offset`` is the byte offset at fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DimensionError(ValueError):
    pass


class Kind(enum.IntEnum):
    MR_IP = 0
    MR_OP = 1
    CT_HU = 2
    CT_NORM = 3
    EDGE = 4
    MU = 5
    ACTIVITY = 6
    GENERIC = 7


_BOUNDED_KINDS = (Kind.MR_IP, Kind.MR_OP, Kind.CT_NORM)


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    kind: Kind = Kind.GENERIC

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 4:
            raise DimensionError(f"every dimension must be >= 4, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        self.kind = Kind(self.kind)
        if self.kind in _BOUNDED_KINDS and self.data.size:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < -1.0 or hi > 1.0:
                raise ValueError(f"{self.kind.name} data must lie in [-1, 1], got [{lo}, {hi}]")
        if self.kind == Kind.EDGE and not np.isin(self.data, (0, 1)).all():
            raise ValueError("EDGE data must be binary")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, kind: Optional[Kind] = None) -> "Volume":
        return Volume(data, self.spacing, self.kind if kind is None else kind)


@dataclass
class DeformationField:
    disp: np.ndarray  # (3, D, H, W), voxel units

    def __post_init__(self):
        self.disp = np.asarray(self.disp)
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise DimensionError(f"displacement must have shape (3, D, H, W), got {self.disp.shape}")
        if not np.isfinite(self.disp).all():
            raise ValueError("displacement field contains non-finite entries")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.disp.shape[1:])

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "DeformationField":
        return cls(np.zeros((3,) + tuple(shape), dtype=dtype))

    def norm(self) -> np.ndarray:
        return np.sqrt((self.disp.astype(np.float64) ** 2).sum(axis=0))


@dataclass
class LabelMask:
    labels: np.ndarray
    legend: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 3:
            raise DimensionError(f"label mask must be 3D, got {self.labels.shape}")
        missing = set(np.unique(self.labels).tolist()) - set(self.legend)
        if missing:
            raise ValueError(f"legend does not cover labels {sorted(missing)}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)


# ---------------------------------------------------------------------------
# canonical file format
# ---------------------------------------------------------------------------

def write_volume(v: Union[Volume, LabelMask], path) -> None:
    """Write a volume (f32) or label mask (i32) in the canonical binary format."""
    if isinstance(v, LabelMask):
        payload = np.ascontiguousarray(v.labels, dtype="<i4")
        dtype_code, kind, spacing = 1, Kind.GENERIC, (1.0, 1.0, 1.0)
    else:
        payload = np.ascontiguousarray(v.data, dtype="<f4")
        dtype_code, kind, spacing = 0, v.kind, v.spacing
    raw = payload.tobytes()
    header = _HEADER.pack(MAGIC, dtype_code, int(kind), 0, *payload.shape, *spacing, len(raw))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.ljust(HEADER_SIZE, b"\0"))
        fh.write(raw)


def _read_raw(path):
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_SIZE:
        raise VolumeFormatError(f"truncated header: {len(blob)} bytes", len(blob))
    magic, dtype_code, kind, _, d, h, w, sx, sy, sz, nbytes = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}", 0)
    if dtype_code not in (0, 1):
        raise VolumeFormatError(f"unknown dtype code {dtype_code}", 8)
    expected = d * h * w * 4
    if nbytes != expected:
        raise VolumeFormatError(
            f"payload length {nbytes} does not match dims {d}x{h}x{w}", 36)
    if len(blob) - HEADER_SIZE != expected:
        raise VolumeFormatError(
            f"payload has {len(blob) - HEADER_SIZE} bytes, expected {expected}",
            min(len(blob), HEADER_SIZE + expected))
    dt = "<f4" if dtype_code == 0 else "<i4"
    data = np.frombuffer(blob, dtype=dt, offset=HEADER_SIZE).reshape(d, h, w).copy()
    return data, dtype_code, kind, (sx, sy, sz)


def read_volume(path) -> Volume:
    data, dtype_code, kind, spacing = _read_raw(path)
    if dtype_code != 0:
        raise VolumeFormatError("file holds integer labels; use read_labels", 8)
    return Volume(data, spacing, Kind(kind))


def read_labels(path, legend: Optional[Dict[int, str]] = None) -> LabelMask:
    data, dtype_code, _, _ = _read_raw(path)
    if dtype_code != 1:
        raise VolumeFormatError("file holds float data, not labels", 8)
    if legend is None:
        from .phantom import LEGEND
        legend = LEGEND
    return LabelMask(data, dict(legend))


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def _base_grid(shape, dtype, device=None) -> torch.Tensor:
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def trilinear_warp(img: torch.Tensor, disp: torch.Tensor, border: float = -1.0) -> torch.Tensor:
    """Differentiable trilinear resampling of ``img`` at ``x + disp(x)``.

    img: (B, C, D, H, W); disp: (B, 3, D, H, W) in voxels.  Lattice corners
    outside the grid contribute ``border``, so samples fully outside take the
    border value exactly.  Integer sample positions reproduce the input
    bit-exactly.
    """
    if img.shape[0] != disp.shape[0] or img.shape[2:] != disp.shape[2:] or disp.shape[1] != 3:
        raise DimensionError(f"image {tuple(img.shape)} and field {tuple(disp.shape)} do not match")
    B, C = img.shape[:2]
    shape = img.shape[2:]
    pos = _base_grid(shape, disp.dtype, disp.device).unsqueeze(0) + disp
    lo = torch.floor(pos)
    frac = pos - lo
    lo = lo.long()
    flat = img.reshape(B, C, -1)
    strides = (shape[1] * shape[2], shape[2], 1)
    out = None
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        weight = None
        index = None
        inside = None
        for axis, bit in enumerate(bits):
            idx = lo[:, axis] + bit
            w = frac[:, axis] if bit else 1.0 - frac[:, axis]
            ok = (idx >= 0) & (idx < shape[axis])
            weight = w if weight is None else weight * w
            inside = ok if inside is None else inside & ok
            term = idx.clamp(0, shape[axis] - 1) * strides[axis]
            index = term if index is None else index + term
        gathered = torch.gather(flat, 2, index.reshape(B, 1, -1).expand(B, C, -1)).reshape(img.shape)
        sample = torch.where(inside.unsqueeze(1), gathered, torch.full_like(gathered, border))
        contrib = weight.unsqueeze(1) * sample
        out = contrib if out is None else out + contrib
    return out


def warp(moving: Volume, field: DeformationField, border: float = -1.0) -> Volume:
    if moving.shape != field.shape:
        raise DimensionError(f"volume {moving.shape} and field {field.shape} differ")
    dtype = torch.float64 if moving.data.dtype == np.float64 else torch.float32
    img = torch.as_tensor(moving.data, dtype=dtype)[None, None]
    disp = torch.as_tensor(field.disp, dtype=dtype)[None]
    with torch.no_grad():
        out = trilinear_warp(img, disp, border)[0, 0].numpy()
    if moving.kind in _BOUNDED_KINDS:
        # convex combinations can round one ulp past the range
        out = np.clip(out, -1.0, 1.0)
    return moving.with_data(out.astype(moving.data.dtype, copy=False))


def nearest_warp_labels(labels: np.ndarray, disp: np.ndarray, background: int = 0) -> np.ndarray:
    shape = labels.shape
    pos = np.indices(shape, dtype=np.float64) + disp.astype(np.float64)
    idx = np.floor(pos + 0.5).astype(np.int64)
    inside = np.ones(shape, dtype=bool)
    for axis in range(3):
        inside &= (idx[axis] >= 0) & (idx[axis] < shape[axis])
        np.clip(idx[axis], 0, shape[axis] - 1, out=idx[axis])
    out = labels[idx[0], idx[1], idx[2]]
    return np.where(inside, out, background).astype(np.int32)


def warp_labels(moving: LabelMask, field: DeformationField) -> LabelMask:
    """Transport labels with nearest-neighbour sampling; outside the lattice is 0."""
    if moving.shape != field.shape:
        raise DimensionError(f"labels {moving.shape} and field {field.shape} differ")
    legend = dict(moving.legend)
    legend.setdefault(0, "background")
    return LabelMask(nearest_warp_labels(moving.labels, field.disp), legend)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def forward_diff_terms(disp):
    """Per-voxel squared forward differences of a displacement field.

    term(w) = sum_d ||disp(w + e_d) - disp(w)||^2, dropping axis terms whose
    forward neighbour leaves the lattice.  Accepts a DeformationField, a numpy
    array (3, D, H, W) or a torch tensor (..., 3, D, H, W); torch input keeps
    the autograd graph.
    """
    if isinstance(disp, DeformationField):
        disp = disp.disp
    as_numpy = isinstance(disp, np.ndarray)
    t = torch.as_tensor(disp) if as_numpy else disp
    terms = torch.zeros(t.shape[:-4] + t.shape[-3:], dtype=t.dtype, device=t.device)
    for axis in range(3):
        d = t.diff(dim=t.ndim - 3 + axis)
        sq = (d * d).sum(dim=-4)
        pad = [0, 0] * 3
        pad[2 * (2 - axis) + 1] = 1
        terms = terms + torch.nn.functional.pad(sq, pad)
    return terms.numpy() if as_numpy else terms


# ---------------------------------------------------------------------------
# edges and intensities
# ---------------------------------------------------------------------------

def _nms_directions() -> np.ndarray:
    offs = []
    for o in np.ndindex(3, 3, 3):
        v = np.array(o) - 1
        nz = v[v != 0]
        if nz.size and nz[0] > 0:
            offs.append(v)
    return np.array(offs)  # 13 canonical orientations


NMS_DIRECTIONS = _nms_directions()


def canny3d(v: Volume, sigma: float = 1.0, lo: float = 0.1, hi: float = 0.3) -> Volume:
    """Volumetric Canny edge map.

    Gaussian smoothing, central-difference gradients, non-maximum suppression
    along the nearest of 13 lattice orientations, then hysteresis with
    thresholds given as fractions of the maximum gradient magnitude.
    """
    if not 0 <= lo < hi:
        raise ValueError(f"need 0 <= lo < hi, got lo={lo}, hi={hi}")
    img = np.asarray(v.data, dtype=np.float64)
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma, mode="nearest")
    grad = np.stack(np.gradient(img))
    mag = np.sqrt((grad ** 2).sum(axis=0))
    peak = mag.max()
    if peak <= 0:
        return v.with_data(np.zeros(v.shape, dtype=np.float32), Kind.EDGE)

    units = NMS_DIRECTIONS / np.linalg.norm(NMS_DIRECTIONS, axis=1, keepdims=True)
    proj = np.abs(np.tensordot(units, grad, axes=(1, 0)))
    direction = proj.argmax(axis=0)

    padded = np.pad(mag, 1)
    D, H, W = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    for k, (a, b, c) in enumerate(NMS_DIRECTIONS):
        ahead = padded[1 + a:1 + a + D, 1 + b:1 + b + H, 1 + c:1 + c + W]
        behind = padded[1 - a:1 - a + D, 1 - b:1 - b + H, 1 - c:1 - c + W]
        # asymmetric comparison so a two-voxel plateau yields a single surface
        keep |= (direction == k) & (mag > behind) & (mag >= ahead)

    strong = keep & (mag >= hi * peak)
    weak = keep & (mag >= lo * peak)
    comp, n = ndimage.label(weak, structure=np.ones((3, 3, 3)))
    if n:
        hit = np.zeros(n + 1, dtype=bool)
        hit[np.unique(comp[strong])] = True
        hit[0] = False
        edges = hit[comp]
    else:
        edges = np.zeros(mag.shape, dtype=bool)
    return v.with_data(edges.astype(np.float32), Kind.EDGE)


def normalize(v: Volume, in_range: Tuple[float, float]) -> Volume:
    """Affine map of ``in_range`` onto [-1, 1], clamping values outside it."""
    a, b = in_range
    if not a < b:
        raise ValueError(f"in_range must be increasing, got {in_range}")
    out = (np.asarray(v.data, dtype=np.float64) - a) * (2.0 / (b - a)) - 1.0
    out = np.clip(out, -1.0, 1.0).astype(np.float32)
    kind = Kind.CT_NORM if v.kind in (Kind.CT_HU, Kind.CT_NORM) else v.kind
    return v.with_data(out, kind)

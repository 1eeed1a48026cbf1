"""Image-quality metrics per anatomical region and a slice-wise PET
attenuation-correction surrogate built on the Radon transform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.transform import iradon, radon

from .phantom import CT_RANGE, BODY, FAT, FEMUR, LIVER, LUNGS, PELVIS, RIBS, SPINE
from .volumes import DimensionError, Kind, LabelMask, Volume

DATA_RANGE = 2.0
PSNR_IDENTICAL = float("inf")
WATER_MU = 0.096      # cm^-1 at 511 keV
BONE_SLOPE = 5.64e-5  # cm^-1 per HU above water

METRIC_REGIONS = ("whole_body", "spine", "liver", "ribs", "femur")
SUV_ROIS = ("spine", "liver", "thigh", "pelvis", "femur")


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        raise DimensionError(f"mask {m.shape} does not match volume {shape}")
    if not m.any():
        raise ValueError("empty mask")
    return m


def psnr(a, b, mask=None) -> float:
    """PSNR in dB with peak-to-peak range 2 (data in [-1, 1]); inf when equal."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    m = _mask(mask, a.shape)
    mse = float(((a - b)[m] ** 2).mean())
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * np.log10(DATA_RANGE ** 2 / mse)


def ssim_map(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    c1, c2 = (k1 * DATA_RANGE) ** 2, (k2 * DATA_RANGE) ** 2

    def mean(x):
        return ndimage.uniform_filter(x, size=window, mode="reflect")

    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a ** 2
    var_b = mean(b * b) - mu_b ** 2
    cov = mean(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, mask=None, window: int = 7) -> float:
    """Mean SSIM (uniform 7^3 window, symmetric padding) over ``mask``."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    m = _mask(mask, a.shape)
    return float(ssim_map(a, b, window)[m].mean())


# ---------------------------------------------------------------------------
# regional report
# ---------------------------------------------------------------------------

def region_masks(labels, dilate: int = 1) -> Dict[str, np.ndarray]:
    lab = labels.labels if isinstance(labels, LabelMask) else np.asarray(labels)
    out = {"whole_body": lab > 0}
    for name, code in (("spine", SPINE), ("liver", LIVER), ("ribs", RIBS), ("femur", FEMUR)):
        m = lab == code
        if dilate:
            m = ndimage.binary_dilation(m, structure=np.ones((3, 3, 3)), iterations=dilate)
        out[name] = m
    return out


@dataclass
class RegionReport:
    psnr: Dict[str, float]
    ssim: Dict[str, float]
    case_id: str = ""
    config_hash: str = ""

    def rows(self) -> List[str]:
        return [f"{self.case_id}\t{r}\t{self.psnr[r]:.4f}\t{self.ssim[r]:.4f}" for r in METRIC_REGIONS]


def region_report(syn, ref, labels, case_id: str = "", config_hash: str = "") -> RegionReport:
    masks = region_masks(labels)
    return RegionReport({r: psnr(syn, ref, masks[r]) for r in METRIC_REGIONS},
                        {r: ssim(syn, ref, masks[r]) for r in METRIC_REGIONS},
                        case_id, config_hash)


# ---------------------------------------------------------------------------
# attenuation
# ---------------------------------------------------------------------------

def hu_to_mu(ct) -> Volume:
    """Bilinear HU to 511 keV linear attenuation (cm^-1)."""
    hu = np.maximum(_arr(ct), -1000.0)
    mu = np.where(hu <= 0, WATER_MU * (1.0 + hu / 1000.0), WATER_MU + BONE_SLOPE * hu)
    spacing = getattr(ct, "spacing", (2.0, 2.0, 2.0))
    return Volume(mu.astype(np.float32), spacing, Kind.MU)


def denormalize_ct(x, in_range: Tuple[float, float] = CT_RANGE) -> np.ndarray:
    """Inverse of the [-1, 1] CT normalization, back to HU."""
    a, b = in_range
    return ((_arr(x) + 1.0) * 0.5 * (b - a) + a).astype(np.float32)


def synthetic_mu(syn, body_mask, spacing=(2.0, 2.0, 2.0)) -> Volume:
    """Attenuation map from a normalized synthetic CT.

    Voxels outside the body outline are set to air, as an MR-derived AC map
    would be; left in, the generator's residual haze in the background adds
    attenuation along every ray.
    """
    body = np.asarray(body_mask, dtype=bool)
    mu = hu_to_mu(Volume(denormalize_ct(syn), spacing, Kind.CT_HU)).data
    return Volume(np.where(body, mu, 0.0).astype(np.float32), spacing, Kind.MU)


# Tissue classes of a segmentation-based attenuation map: soft tissue, fat, lung, air.
FOUR_TISSUE_MU = {"air": 0.0, "lung": 0.024, "fat": 0.086, "soft": WATER_MU}


def four_tissue_mu(labels, spacing=(2.0, 2.0, 2.0)) -> Volume:
    """Attenuation map from a four-class segmentation; bone is read as soft tissue."""
    lab = labels.labels if isinstance(labels, LabelMask) else np.asarray(labels)
    mu = np.full(lab.shape, FOUR_TISSUE_MU["soft"])
    mu[lab == 0] = FOUR_TISSUE_MU["air"]
    mu[lab == LUNGS] = FOUR_TISSUE_MU["lung"]
    mu[lab == FAT] = FOUR_TISSUE_MU["fat"]
    return Volume(mu.astype(np.float32), spacing, Kind.MU)


def _theta(angles: int) -> np.ndarray:
    return np.arange(angles) * (180.0 / angles)


def ac_surrogate(activity, mu_true, mu_test, angles: int = 96) -> Tuple[Volume, Volume]:
    """Attenuate activity with ``mu_true``, correct with ``mu_test`` and with
    ``mu_true``, and reconstruct both by ramp-filtered backprojection.

    Works slice by slice along axis 0.  Returns ``(pet_test, pet_ref)``.
    """
    act, mt, mx = _arr(activity), _arr(mu_true), _arr(mu_test)
    if not act.shape == mt.shape == mx.shape:
        raise DimensionError(f"shape mismatch {act.shape}, {mt.shape}, {mx.shape}")
    if angles < 16:
        raise ValueError("need at least 16 projection angles")
    spacing = getattr(activity, "spacing", (2.0, 2.0, 2.0))
    ds = spacing[1] / 10.0  # cm per pixel step along a ray
    theta = _theta(angles)
    size = act.shape[1]
    test = np.zeros(act.shape)
    ref = np.zeros(act.shape)
    for k in range(act.shape[0]):
        if not act[k].any():
            continue
        emission = radon(act[k], theta, circle=False)
        measured = emission * np.exp(-radon(mt[k], theta, circle=False) * ds)
        for mu, out in ((mt, ref), (mx, test)):
            corrected = measured * np.exp(radon(mu[k], theta, circle=False) * ds)
            out[k] = iradon(corrected, theta, output_size=size, filter_name="ramp", circle=False)
    test = np.maximum(test, 0.0)
    ref = np.maximum(ref, 0.0)
    return (Volume(test.astype(np.float32), spacing, Kind.ACTIVITY),
            Volume(ref.astype(np.float32), spacing, Kind.ACTIVITY))


def roi_masks(labels) -> Dict[str, np.ndarray]:
    lab = labels.labels if isinstance(labels, LabelMask) else np.asarray(labels)
    femur_z = np.nonzero((lab == FEMUR).any(axis=(1, 2)))[0]
    thigh = np.zeros(lab.shape, dtype=bool)
    if femur_z.size:
        thigh[femur_z.min():femur_z.max() + 1] = True
    thigh &= lab == BODY
    return {"spine": lab == SPINE, "liver": lab == LIVER, "thigh": thigh,
            "pelvis": lab == PELVIS, "femur": lab == FEMUR}


def suv_difference(pet_test, pet_ref, rois, body_mask=None) -> Dict[str, float]:
    """Mean normalized uptake difference (test - ref) inside each ROI.

    Both images are divided by the body-mask mean of ``pet_ref``.  ``rois``
    is a label mask (ROIs derived via ``roi_masks``) or a dict of masks.
    """
    t, r = _arr(pet_test), _arr(pet_ref)
    if t.shape != r.shape:
        raise DimensionError(f"shape mismatch {t.shape} vs {r.shape}")
    if isinstance(rois, dict):
        masks = rois
    else:
        masks = roi_masks(rois)
        if body_mask is None:
            lab = rois.labels if isinstance(rois, LabelMask) else np.asarray(rois)
            body_mask = lab > 0
    body = _mask(body_mask, t.shape) if body_mask is not None else np.ones(t.shape, bool)
    scale = r[body].mean()
    out = {}
    for name, m in masks.items():
        m = np.asarray(m, dtype=bool)
        if not m.any():
            raise ValueError(f"ROI {name!r} is empty")
        out[name] = float(((t - r) / scale)[m].mean())
    return out


def difference_map(pet_test, pet_ref, body_mask) -> Volume:
    t, r = _arr(pet_test), _arr(pet_ref)
    scale = r[np.asarray(body_mask, bool)].mean()
    spacing = getattr(pet_ref, "spacing", (2.0, 2.0, 2.0))
    return Volume(((t - r) / scale).astype(np.float32), spacing, Kind.GENERIC)


@dataclass
class SuvReport:
    mean: Dict[str, float]
    std: Dict[str, float]
    n_cases: int = 0
    per_case: List[Dict[str, float]] = field(default_factory=list)

    def rows(self, method: str = "") -> List[str]:
        return [f"{method}\t{roi}\t{self.mean[roi]:.5f}\t{self.std[roi]:.5f}" for roi in self.mean]


def aggregate_suv(per_case: Sequence[Dict[str, float]]) -> SuvReport:
    per_case = list(per_case)
    keys = list(per_case[0])
    vals = {k: np.array([c[k] for c in per_case]) for k in keys}
    return SuvReport({k: float(v.mean()) for k, v in vals.items()},
                     {k: float(v.std()) for k, v in vals.items()}, len(per_case), per_case)

"""Training objectives.

All scalar losses take and return torch tensors so they can be
differentiated; numpy inputs are accepted where noted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .phantom import SUBREGIONS, subregion_map
from .volumes import DimensionError, forward_diff_terms


class DegenerateRegionError(ValueError):
    pass


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    data = getattr(x, "data", x)
    return torch.as_tensor(np.asarray(data))


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_recon(syn, gt) -> torch.Tensor:
    syn, gt = _t(syn), _t(gt)
    _same_shape(syn, gt)
    return (syn - gt).abs().mean()


def l2_edge(syn_edge, gt_edge) -> torch.Tensor:
    syn_edge, gt_edge = _t(syn_edge), _t(gt_edge)
    _same_shape(syn_edge, gt_edge)
    return ((syn_edge - gt_edge) ** 2).mean()


def adv_losses(D, real, fake, detach_fake: bool = False):
    """PatchGAN losses with BCE on logits.

    Returns ``(d_loss, g_loss)`` where d_loss = BCE(D(real), 1) + BCE(D(fake), 0)
    and the generator uses the non-saturating form BCE(D(fake), 1).
    """
    real_logits = D(real)
    fake_logits = D(fake.detach() if detach_fake else fake)
    d_loss = (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
              + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))
    g_loss = F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    return d_loss, g_loss


# ---------------------------------------------------------------------------
# tissue-aware pair sampling
# ---------------------------------------------------------------------------

@dataclass
class TissueWeightMap:
    weights: np.ndarray         # per-voxel probabilities, sums to 1
    region_weights: np.ndarray  # normalized weight of each sub-region
    region_volumes: np.ndarray


def region_weights_from_volumes(volumes: Sequence[float]) -> np.ndarray:
    v = np.asarray(volumes, dtype=np.float64)
    initial = v.sum() / v
    return initial / initial.sum()


def tissue_weight_map(labels, region_index: Optional[np.ndarray] = None) -> TissueWeightMap:
    """Per-voxel sampling distribution with each sub-region's mass inversely
    proportional to its volume.

    ``region_index`` may be passed directly (ints in 0..5); otherwise it is
    derived from the label mask.
    """
    regions = subregion_map(labels) if region_index is None else np.asarray(region_index)
    volumes = np.bincount(regions.ravel(), minlength=len(SUBREGIONS)).astype(np.float64)
    for i, v in enumerate(volumes):
        if v == 0:
            raise DegenerateRegionError(f"sub-region {SUBREGIONS[i]!r} is empty")
    rw = region_weights_from_volumes(volumes)
    per_voxel = (rw / volumes)[regions]
    return TissueWeightMap(per_voxel, rw, volumes)


@dataclass
class PairSample:
    indices: np.ndarray          # (n, 3) voxel coordinates
    fixed_vals: torch.Tensor
    moving_vals: torch.Tensor
    marginal_vals: torch.Tensor  # moving values under a seeded permutation
    permutation: np.ndarray


def sample_indices(w: TissueWeightMap, n: int, rng: np.random.Generator) -> np.ndarray:
    p = w.weights.ravel().astype(np.float64)
    p = p / p.sum()
    flat = rng.choice(p.size, size=n, replace=True, p=p)
    return np.stack(np.unravel_index(flat, w.weights.shape), axis=1)


def sample_pairs(fixed, moving_warped, w: TissueWeightMap, n: int, seed) -> PairSample:
    """Draw ``n`` voxels i.i.d. from ``w`` and read both images there.

    ``fixed``/``moving_warped`` are 3D grids (numpy, Volume or torch; torch
    keeps gradients).  ``seed`` is an int or a numpy Generator.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    fixed, moving = _t(fixed), _t(moving_warped)
    _same_shape(fixed, moving)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = sample_indices(w, n, rng)
    perm = rng.permutation(n)
    ii = torch.as_tensor(idx)
    fv = fixed[ii[:, 0], ii[:, 1], ii[:, 2]]
    mv = moving[ii[:, 0], ii[:, 1], ii[:, 2]]
    return PairSample(idx, fv, mv, mv[torch.as_tensor(perm)], perm)


def dv_bound(joint_scores: torch.Tensor, marginal_scores: torch.Tensor) -> torch.Tensor:
    # both terms are taken relative to the marginal maximum, so a constant
    # critic cancels before any summation and gives exactly zero
    m = marginal_scores.max().detach()
    return (joint_scores - m).mean() - torch.log(torch.exp(marginal_scores - m).mean())


def mine_bound(critic, s: PairSample) -> torch.Tensor:
    """Empirical Donsker-Varadhan lower bound on MI for one pair sample.

    Fixed/moving values may carry an extra leading channel dimension, in
    which case the critic receives the concatenated channels.
    """
    def stack(a, b):
        a = a.reshape(a.shape[0], -1) if a.ndim > 1 else a[:, None]
        b = b.reshape(b.shape[0], -1) if b.ndim > 1 else b[:, None]
        return torch.cat([a, b], 1)

    joint = critic(stack(s.fixed_vals, s.moving_vals))
    marginal = critic(stack(s.fixed_vals, s.marginal_vals))
    return dv_bound(joint, marginal)


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

def smoothness(field, exclusion=None) -> torch.Tensor:
    """Sum of squared forward differences over voxels not in ``exclusion``.

    ``field`` is (3, D, H, W) or (B, 3, D, H, W); ``exclusion`` a binary mask
    of matching spatial (and batch) shape, or None.
    """
    disp = _t(getattr(field, "disp", field))
    terms = forward_diff_terms(disp)
    if exclusion is None:
        return terms.sum()
    mask = _t(exclusion).to(torch.bool)
    if mask.shape != terms.shape:
        raise DimensionError(f"exclusion {tuple(mask.shape)} does not match field {tuple(terms.shape)}")
    return torch.where(mask, torch.zeros_like(terms), terms).sum()


# ---------------------------------------------------------------------------
# contrastive
# ---------------------------------------------------------------------------

def info_nce(vectors, organ_ids=None) -> torch.Tensor:
    """InfoNCE over all ordered same-organ pairs with cosine similarity.

    The anchor's own term is excluded from each softmax denominator.
    Pass a feature bank, or ``vectors`` (N, C) with ``organ_ids`` of length N.
    """
    if organ_ids is None:
        vectors, organ_ids = vectors.vectors, vectors.organ_ids
    v = _t(vectors)
    ids = torch.as_tensor(np.asarray(organ_ids))
    n = v.shape[0]
    if n < 2:
        raise ValueError("need at least two feature vectors")
    norms = v.norm(dim=1)
    if (norms == 0).any():
        raise ValueError("zero-norm feature vector")
    u = v / norms[:, None]
    sim = u @ u.T
    eye = torch.eye(n, dtype=torch.bool)
    positive = (ids[:, None] == ids[None, :]) & ~eye
    if not positive.any():
        raise ValueError("bank holds no positive pair")
    log_denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - log_denom
    return -(log_prob[positive]).mean()


# ---------------------------------------------------------------------------
# totals
# ---------------------------------------------------------------------------

def _finite(*xs):
    for x in xs:
        v = float(x.detach()) if isinstance(x, torch.Tensor) else float(x)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss component {v}")


def total_syn_loss(l1, l2, g_adv, contra=0.0, w_ct=1.0, w_edge=1.0, w_adv=1.0, w_contra=1.0):
    _finite(l1, l2, g_adv, contra)
    return w_ct * l1 + w_edge * l2 + w_adv * g_adv + w_contra * contra


def total_reg_loss(mine_value, smooth, lam: float = 1.0):
    _finite(mine_value, smooth)
    return -mine_value + lam * smooth

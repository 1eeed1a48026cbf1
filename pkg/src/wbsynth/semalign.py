"""Organ-level semantic alignment: a proxy CT organ segmenter, voxel-wise
feature extraction from its penultimate layer, and the contrastive loss
between synthetic and aligned CT.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .nets import NetSpec, Segmenter, build_segmenter
from .phantom import CT_RANGE, FAT, BODY, ORGANS
from .volumes import Volume, normalize

log = logging.getLogger(__name__)

N_CLASSES = 1 + len(ORGANS)
SYN, ALIGN = "SYN", "ALIGN"


class SegmenterQualityError(RuntimeError):
    def __init__(self, message: str, dice: Dict[str, float]):
        report = ", ".join(f"{k}={v:.3f}" for k, v in dice.items())
        super().__init__(f"{message}: {report}")
        self.dice = dice


@dataclass
class FeatureBank:
    vectors: torch.Tensor                 # (N, C)
    organ_ids: np.ndarray                 # (N,)
    sources: List[str]
    skipped: List[int] = field(default_factory=list)

    def __post_init__(self):
        n = self.vectors.shape[0]
        if len(self.organ_ids) != n or len(self.sources) != n:
            raise ValueError("feature bank lists are not parallel")
        if n and not torch.isfinite(self.vectors).all():
            raise ValueError("feature bank holds non-finite vectors")

    def __len__(self):
        return self.vectors.shape[0]

    def merge(self, other: "FeatureBank") -> "FeatureBank":
        return FeatureBank(torch.cat([self.vectors, other.vectors]),
                           np.concatenate([self.organ_ids, other.organ_ids]),
                           self.sources + other.sources,
                           sorted(set(self.skipped) | set(other.skipped)))


def segmentation_target(labels: np.ndarray) -> np.ndarray:
    """Phantom labels to segmenter classes: fat is folded into body."""
    out = np.asarray(labels).copy()
    out[out == FAT] = BODY
    return out


def ct_input(ct) -> torch.Tensor:
    """HU or normalized CT volume to a (1, 1, D, H, W) float tensor."""
    if isinstance(ct, torch.Tensor):
        return ct if ct.ndim == 5 else ct.reshape((1, 1) + tuple(ct.shape[-3:]))
    if isinstance(ct, Volume) and ct.kind.name == "CT_HU":
        ct = normalize(ct, CT_RANGE)
    data = getattr(ct, "data", ct)
    return torch.as_tensor(np.asarray(data, dtype=np.float32))[None, None]


def dice_per_class(pred: np.ndarray, target: np.ndarray, classes: Sequence[int]) -> Dict[int, float]:
    out = {}
    for c in classes:
        p, t = pred == c, target == c
        denom = p.sum() + t.sum()
        out[c] = float(2.0 * (p & t).sum() / denom) if denom else 1.0
    return out


def predict(segmenter: Segmenter, ct) -> np.ndarray:
    segmenter.eval()
    with torch.no_grad():
        return segmenter(ct_input(ct)).argmax(1)[0].numpy()


def evaluate_segmenter(segmenter: Segmenter, cases) -> Dict[str, float]:
    """Mean per-organ Dice over cases, keyed by organ name."""
    scores = {name: [] for name in ORGANS.values()}
    for case in cases:
        pred = predict(segmenter, case.ct)
        target = segmentation_target(case.labels.labels)
        for c, d in dice_per_class(pred, target, ORGANS).items():
            scores[ORGANS[c]].append(d)
    return {k: float(np.mean(v)) for k, v in scores.items()}


def train_proxy_segmenter(cases, spec: Optional[NetSpec] = None, val_cases=None, steps: int = 300,
                          batch: int = 4, lr: float = 2e-3, seed: int = 0,
                          min_dice: float = 0.80) -> Segmenter:
    """Train the CT organ segmenter with cross-entropy plus soft Dice.

    Raises SegmenterQualityError when held-out mean foreground Dice stays
    below ``min_dice``.  The returned network is frozen and in eval mode.
    """
    cases = list(cases)
    if val_cases is None:
        if len(cases) < 8:
            raise ValueError(f"need at least 8 training cases, got {len(cases)}")
        k = max(2, len(cases) // 4)
        cases, val_cases = cases[:-k], cases[-k:]
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = build_segmenter(spec) if spec is not None else build_segmenter()
    x = torch.cat([ct_input(c.ct) for c in cases])
    y = torch.as_tensor(np.stack([segmentation_target(c.labels.labels) for c in cases])).long()
    # also show the segmenter the misaligned CTs: more anatomy variation for free
    moved = [c for c in cases if c.moved_ct is not None]
    if moved:
        x = torch.cat([x] + [ct_input(c.moved_ct) for c in moved])
        y = torch.cat([y, torch.as_tensor(np.stack(
            [segmentation_target(c.moved_labels.labels) for c in moved])).long()])
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    for step in range(steps):
        idx = torch.as_tensor(rng.choice(len(x), size=min(batch, len(x)), replace=False))
        logits = net(x[idx])
        prob = logits.softmax(1)
        onehot = F.one_hot(y[idx], N_CLASSES).permute(0, 4, 1, 2, 3).float()
        inter = (prob * onehot).sum((0, 2, 3, 4))
        soft_dice = 1 - (2 * inter + 1) / (prob.sum((0, 2, 3, 4)) + onehot.sum((0, 2, 3, 4)) + 1)
        loss = F.cross_entropy(logits, y[idx]) + soft_dice[1:].mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0:
            log.debug("segmenter step %d loss %.4f", step, float(loss.detach()))
    freeze(net)
    dice = evaluate_segmenter(net, val_cases)
    mean = float(np.mean(list(dice.values())))
    log.info("segmenter held-out mean Dice %.3f", mean)
    if mean < min_dice:
        raise SegmenterQualityError(f"held-out mean Dice {mean:.3f} < {min_dice}", dice)
    return net


def freeze(net: torch.nn.Module) -> torch.nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
        p.grad = None
    return net


def extract_features(ct, segmenter: Segmenter, K: int = 64, seed=0, source: str = SYN) -> FeatureBank:
    """Sample up to ``K`` voxels per predicted organ and return their
    penultimate-layer feature vectors.

    ``ct`` may be a tensor that requires grad; gradients then flow through
    the frozen segmenter into the vectors.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = ct_input(ct)
    feats = segmenter.features(x)
    with torch.no_grad():
        mask = segmenter.head(feats).argmax(1)[0].numpy()
    vectors, ids, skipped = [], [], []
    for organ in ORGANS:
        where = np.flatnonzero(mask == organ)
        if where.size == 0:
            skipped.append(organ)
            continue
        pick = rng.choice(where, size=min(K, where.size), replace=False)
        pick.sort()
        coords = np.unravel_index(pick, mask.shape)
        vectors.append(feats[0][:, coords[0], coords[1], coords[2]].T)
        ids.extend([organ] * len(pick))
    c = feats.shape[1]
    vec = torch.cat(vectors) if vectors else feats.new_zeros((0, c))
    return FeatureBank(vec, np.asarray(ids, dtype=np.int64), [source] * len(ids), skipped)


def contrastive_from_volumes(syn_ct, align_ct, segmenter: Segmenter, K: int = 64, seed: int = 0):
    """InfoNCE over the merged SYN and ALIGN banks.

    Both volumes are sampled with identically seeded streams, so swapping
    the arguments leaves the loss unchanged.
    """
    syn = extract_features(syn_ct, segmenter, K, np.random.default_rng(seed), SYN)
    ali = extract_features(align_ct, segmenter, K, np.random.default_rng(seed), ALIGN)
    return losses.info_nce(syn.merge(ali))

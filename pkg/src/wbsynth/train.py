"""Two-stage training: registration (R with the MINE critic), then synthesis
(G against D) with R frozen.  Includes augmentation, checkpoints and resume.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np
import torch
from scipy import ndimage

from . import losses
from .evalkit import psnr
from .nets import (NetSpec, build_discriminator, build_mine_net, build_registration_net,
                   build_synthesis_net, load_checkpoint, save_checkpoint, state_hash)
from .phantom import CT_RANGE, PhantomCase, generate, inverse_field, endpoint_error, thoracic_boundary
from .semalign import contrastive_from_volumes, freeze
from .volumes import (DeformationField, LabelMask, Volume, canny3d, nearest_warp_labels, normalize,
                      trilinear_warp, warp, warp_labels)

log = logging.getLogger(__name__)


class NumericFailure(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    # data
    size: int = 32
    n_cases: int = 16
    n_val: int = 4
    data_seed: int = 0
    magnitude: float = 3.0
    slip: float = 2.0
    # nets
    base_channels: int = 8
    depth: int = 3
    mine_hidden: int = 64
    patch_disc_levels: int = 3
    gated: bool = True
    # losses
    lam: float = 1.0
    w_ct: float = 1.0
    w_edge: float = 1.0
    w_adv: float = 1.0
    w_contra: float = 1.0
    n_pairs: int = 4096
    tissue_aware: bool = True
    exclusion: bool = True
    boundary_radius: int = 2
    contra_k: int = 64
    canny_sigma: float = 1.0
    canny_lo: float = 0.1
    canny_hi: float = 0.3
    # train
    lr_reg: float = 4e-4
    lr_syn: float = 2e-4
    batch: int = 4
    epochs_reg: int = 30
    epochs_syn: int = 30
    aug_p: float = 0.2
    seed: int = 0
    seg_steps: int = 300
    seg_lr: float = 2e-3

    def __post_init__(self):
        if self.lr_reg <= 0 or self.lr_syn <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.aug_p <= 1.0:
            raise ValueError("aug_p must lie in [0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    def spec(self, in_channels: int) -> NetSpec:
        return NetSpec(self.base_channels, self.depth, in_channels, self.patch_disc_levels,
                       self.mine_hidden, self.gated)


def make_cases(cfg: TrainConfig, held_out: bool = False) -> List[PhantomCase]:
    base = cfg.data_seed * 100_000 + (50_000 if held_out else 0)
    n = cfg.n_val if held_out else cfg.n_cases
    return [generate(base + i, cfg.size, cfg.magnitude, cfg.slip) for i in range(n)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

AUGMENTATIONS = ("gaussian", "affine", "spline", "rotation")


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def _sample(field: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.map_coordinates(c, pos, order=1, mode="nearest") for c in field])


def augment(case: PhantomCase, p: float, seed, enabled: Sequence[str] = AUGMENTATIONS) -> PhantomCase:
    """Randomly blur the MR channels and apply one shared geometric transform.

    Each augmentation fires independently with probability ``p``.  The
    geometric part moves MR, CT, labels, activity and the misaligned CT
    together, and the misalignment field is re-expressed in the new frame.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fire = {name: bool(rng.random() < p) and name in enabled for name in AUGMENTATIONS}
    # draw every parameter regardless, so streams stay aligned across settings
    sigma = rng.uniform(0.5, 1.0)
    scale = rng.uniform(0.95, 1.05)
    shift = rng.uniform(-2.0, 2.0, size=3)
    coarse = rng.uniform(-1.0, 1.0, size=(3, 4, 4, 4))
    amp = rng.uniform(0.0, 2.0)
    axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(-10.0, 10.0))

    out = case
    if fire["gaussian"]:
        out = replace(out, mr_ip=out.mr_ip.with_data(ndimage.gaussian_filter(out.mr_ip.data, sigma)),
                      mr_op=out.mr_op.with_data(ndimage.gaussian_filter(out.mr_op.data, sigma)))
    if not (fire["affine"] or fire["spline"] or fire["rotation"]):
        return out

    shape = case.shape
    grid = np.indices(shape, dtype=np.float64)
    center = (np.array(shape, dtype=np.float64) - 1) / 2
    pos = grid.copy()
    if fire["spline"]:
        zoom = [s / 4 for s in shape]
        sp = np.stack([ndimage.zoom(c, zoom, order=1, grid_mode=False, mode="nearest") for c in coarse])
        peak = np.sqrt((sp ** 2).sum(0)).max()
        pos = pos + _sample(sp * (amp / peak), pos)
    if fire["rotation"]:
        rot = _rotation_matrix(axis, angle)
        pos = np.tensordot(rot, pos - center[:, None, None, None], axes=1) + center[:, None, None, None]
    if fire["affine"]:
        pos = (pos - center[:, None, None, None]) * scale + center[:, None, None, None] \
            + shift[:, None, None, None]
    u = DeformationField((pos - grid).astype(np.float32))

    # gt' = (id + u)^-1 o (id + gt) o (id + u) - id
    v = inverse_field(u).disp.astype(np.float64)
    q = pos + _sample(case.gt_field.disp.astype(np.float64), pos)
    gt_new = q + _sample(v, q) - grid

    def move(vol: Volume, border: float) -> Volume:
        return warp(vol, u, border)

    return replace(
        out,
        mr_ip=move(out.mr_ip, -1.0), mr_op=move(out.mr_op, -1.0),
        ct=move(out.ct, -1000.0), labels=warp_labels(out.labels, u),
        activity=move(out.activity, 0.0),
        gt_field=DeformationField(gt_new.astype(np.float32)),
        moved_ct=move(out.moved_ct, -1000.0) if out.moved_ct is not None else None,
        moved_labels=warp_labels(out.moved_labels, u) if out.moved_labels is not None else None,
    )


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------

def mr_tensor(cases: Sequence[PhantomCase]) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.stack([c.mr_ip.data, c.mr_op.data]) for c in cases]),
                           dtype=torch.float32)


def ct_tensor(vols: Sequence[Volume]) -> torch.Tensor:
    return torch.as_tensor(np.stack([normalize(v, CT_RANGE).data[None] for v in vols]),
                           dtype=torch.float32)


def register(R, cases: Sequence[PhantomCase]):
    """Displacements (B, 3, D, H, W) and aligned normalized CT (B, 1, D, H, W)."""
    mr = mr_tensor(cases)
    moving = ct_tensor([c.moved_ct for c in cases])
    phi = R(torch.cat([mr, moving], 1))
    return phi, trilinear_warp(moving, phi, border=-1.0)


# ---------------------------------------------------------------------------
# logging / state
# ---------------------------------------------------------------------------

class RunLog:
    """Tab-separated per-iteration log: epoch, iteration, then each component."""

    def __init__(self, path: Optional[Path], columns: Sequence[str]):
        self.columns = list(columns)
        self.rows: List[Dict[str, float]] = []
        self.fh: Optional[TextIO] = None
        if path is not None:
            path = Path(path)
            exists = path.exists() and path.stat().st_size > 0
            self.fh = open(path, "a")
            if not exists:
                self.fh.write("\t".join(["epoch", "iter"] + self.columns) + "\n")

    def write(self, epoch: int, it: int, values: Dict[str, float]):
        for k, v in values.items():
            if not math.isfinite(v):
                raise NumericFailure(f"non-finite {k}={v} at epoch {epoch} iter {it}: {values}")
        self.rows.append({"epoch": epoch, "iter": it, **values})
        if self.fh:
            self.fh.write("\t".join([str(epoch), str(it)] + [repr(float(values[c])) for c in self.columns]) + "\n")
            self.fh.flush()

    def epoch_means(self) -> Dict[int, Dict[str, float]]:
        out: Dict[int, Dict[str, float]] = {}
        for e in sorted({r["epoch"] for r in self.rows}):
            rows = [r for r in self.rows if r["epoch"] == e]
            out[e] = {c: float(np.mean([r[c] for r in rows])) for c in self.columns}
        return out

    def close(self):
        if self.fh:
            self.fh.close()


@dataclass
class RunState:
    epoch: int = 0
    running: Dict[str, float] = field(default_factory=dict)
    checkpoints: List[str] = field(default_factory=list)
    rng_data: Optional[dict] = None
    rng_aug: Optional[dict] = None
    rng_sample: Optional[dict] = None


def _rngs(cfg: TrainConfig, stage: int):
    return (np.random.default_rng([cfg.seed, stage, 0]),
            np.random.default_rng([cfg.seed, stage, 1]),
            np.random.default_rng([cfg.seed, stage, 2]))


def _save_state(path: Path, nets, opts, state: RunState, rngs, cfg: TrainConfig):
    state.rng_data, state.rng_aug, state.rng_sample = (r.bit_generator.state for r in rngs)
    torch.save({"opts": [o.state_dict() for o in opts], "state": asdict(state),
                "torch_rng": torch.get_rng_state(), "config": asdict(cfg)}, str(path) + ".state")
    return save_checkpoint(path, nets, {"epoch": state.epoch, "config": asdict(cfg)})


def _load_state(path: Path, nets, opts, rngs) -> RunState:
    loaded, _ = load_checkpoint(path)
    for k, net in nets.items():
        net.load_state_dict(loaded[k].state_dict())
    blob = torch.load(str(path) + ".state", weights_only=False)
    for o, s in zip(opts, blob["opts"]):
        o.load_state_dict(s)
    torch.set_rng_state(blob["torch_rng"])
    state = RunState(**blob["state"])
    for r, s in zip(rngs, (state.rng_data, state.rng_aug, state.rng_sample)):
        r.bit_generator.state = s
    return state


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _grad_norms(*nets) -> Dict[str, float]:
    out = {}
    for i, net in enumerate(nets):
        sq = sum(float((p.grad ** 2).sum()) for p in net.parameters() if p.grad is not None)
        out[f"grad_norm_{i}"] = math.sqrt(sq)
    return out


# ---------------------------------------------------------------------------
# stage 1: registration
# ---------------------------------------------------------------------------

REG_COLUMNS = ("loss", "mine", "smooth")


def registration_step(R, critic, cases, cfg: TrainConfig, rng: np.random.Generator):
    """Registration loss for one batch: -MI bound + lam * smoothness, averaged over cases."""
    phi, aligned = register(R, cases)
    n_vox = float(np.prod(phi.shape[2:]))
    total, mines, smooths = 0.0, [], []
    for b, case in enumerate(cases):
        disp = phi[b].detach().numpy()
        m_align = LabelMask(nearest_warp_labels(case.moved_labels.labels, disp), case.labels.legend)
        if cfg.tissue_aware:
            w = losses.tissue_weight_map(m_align)
        else:
            w = losses.TissueWeightMap(np.full(m_align.shape, 1.0 / n_vox), np.full(6, 1 / 6), np.zeros(6))
        fixed = torch.as_tensor(case.mr_ip.data)
        pairs = losses.sample_pairs(fixed, aligned[b, 0], w, cfg.n_pairs, rng)
        mine = losses.mine_bound(critic, pairs)
        excl = thoracic_boundary(m_align, cfg.boundary_radius) if cfg.exclusion else None
        smooth = losses.smoothness(phi[b], excl)
        total = total + losses.total_reg_loss(mine, smooth, cfg.lam)
        mines.append(float(mine.detach()))
        smooths.append(float(smooth.detach()))
    loss = total / len(cases)
    return loss, {"loss": float(loss.detach()), "mine": float(np.mean(mines)), "smooth": float(np.mean(smooths))}


def train_registration(cases: Sequence[PhantomCase], cfg: TrainConfig, out_dir=None,
                       resume: bool = False, stop_after: Optional[int] = None):
    """Train R and the MINE critic jointly.  Returns (R, critic, RunLog)."""
    if len(cases) < 8:
        raise ValueError(f"registration needs at least 8 cases, got {len(cases)}")
    torch.manual_seed(cfg.seed)
    R = build_registration_net(cfg.spec(3))
    critic = build_mine_net(cfg.spec(2))
    opt = torch.optim.Adam(list(R.parameters()) + list(critic.parameters()), lr=cfg.lr_reg)
    rngs = _rngs(cfg, 1)
    rng_data, rng_aug, rng_sample = rngs
    out = Path(out_dir) if out_dir else None
    ckpt = out / "registration.pt" if out else None
    state = RunState()
    if resume and ckpt and ckpt.exists():
        state = _load_state(ckpt, {"registration": R, "mine": critic}, [opt], rngs)
    runlog = RunLog(out / "train_reg.log" if out else None, REG_COLUMNS)
    R.train()
    last = cfg.epochs_reg if stop_after is None else min(cfg.epochs_reg, stop_after)
    for epoch in range(state.epoch, last):
        for it, idx in enumerate(_batches(len(cases), cfg.batch, rng_data)):
            batch = [augment(cases[i], cfg.aug_p, rng_aug) for i in idx]
            loss, parts = registration_step(R, critic, batch, cfg, rng_sample)
            if not math.isfinite(parts["loss"]):
                opt.zero_grad()
                loss.backward()
                raise NumericFailure(f"non-finite registration loss {parts} {_grad_norms(R, critic)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            runlog.write(epoch, it, parts)
        state.epoch = epoch + 1
        state.running = runlog.epoch_means().get(epoch, {})
        if ckpt:
            _save_state(ckpt, {"registration": R, "mine": critic}, [opt], state, rngs, cfg)
    runlog.close()
    R.eval()
    return R, critic, runlog


def registration_endpoint_error(R, cases: Sequence[PhantomCase]) -> Dict[str, float]:
    """Mean endpoint error inside the body of predicted vs. true inverse field,
    together with the zero-field baseline."""
    errs, zero = [], []
    R.eval()
    with torch.no_grad():
        for case in cases:
            phi, _ = register(R, [case])
            target = inverse_field(case.gt_field).disp
            body = case.labels.labels > 0
            errs.append(endpoint_error(phi[0].numpy(), target, body))
            zero.append(endpoint_error(np.zeros_like(target), target, body))
    return {"epe": float(np.mean(errs)), "epe_zero": float(np.mean(zero)),
            "reduction": 1.0 - float(np.mean(errs)) / float(np.mean(zero))}


def rib_dice_after_registration(R, cases: Sequence[PhantomCase]) -> float:
    from .phantom import RIBS
    scores = []
    R.eval()
    with torch.no_grad():
        for case in cases:
            phi, _ = register(R, [case])
            warped = nearest_warp_labels(case.moved_labels.labels, phi[0].numpy())
            a, b = warped == RIBS, case.labels.labels == RIBS
            scores.append(2.0 * (a & b).sum() / (a.sum() + b.sum()))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# stage 2: synthesis
# ---------------------------------------------------------------------------

SYN_COLUMNS = ("loss_g", "loss_d", "l1", "l2_edge", "g_adv", "contra")


def edge_targets(aligned: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    edges = [canny3d(Volume(a[0].numpy()), cfg.canny_sigma, cfg.canny_lo, cfg.canny_hi).data
             for a in aligned]
    return torch.as_tensor(np.stack(edges)[:, None])


def train_synthesis(cases: Sequence[PhantomCase], R, segmenter, cfg: TrainConfig, out_dir=None,
                    resume: bool = False, stop_after: Optional[int] = None):
    """Train G and D with R (and the segmenter) frozen.  Returns (G, D, RunLog)."""
    torch.manual_seed(cfg.seed + 1)
    freeze(R)
    if segmenter is not None:
        freeze(segmenter)
    r_hash = state_hash(R)
    G = build_synthesis_net(cfg.spec(2))
    D = build_discriminator(cfg.spec(1))
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_syn)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_syn)
    rngs = _rngs(cfg, 2)
    rng_data, rng_aug, rng_sample = rngs
    out = Path(out_dir) if out_dir else None
    ckpt = out / "synthesis.pt" if out else None
    state = RunState()
    if resume and ckpt and ckpt.exists():
        state = _load_state(ckpt, {"synthesis": G, "discriminator": D}, [opt_g, opt_d], rngs)
    runlog = RunLog(out / "train_syn.log" if out else None, SYN_COLUMNS)
    G.train()
    D.train()
    last = cfg.epochs_syn if stop_after is None else min(cfg.epochs_syn, stop_after)
    for epoch in range(state.epoch, last):
        for it, idx in enumerate(_batches(len(cases), cfg.batch, rng_data)):
            batch = [augment(cases[i], cfg.aug_p, rng_aug) for i in idx]
            with torch.no_grad():
                _, aligned = register(R, batch)
            edges = edge_targets(aligned, cfg)
            syn, syn_edge = G(mr_tensor(batch))

            d_loss, _ = losses.adv_losses(D, aligned, syn, detach_fake=True)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            _, g_adv = losses.adv_losses(D, aligned, syn)
            l1 = losses.l1_recon(syn, aligned)
            l2 = losses.l2_edge(syn_edge, edges)
            contra = torch.zeros(())
            if cfg.w_contra > 0 and segmenter is not None:
                seed = int(rng_sample.integers(2 ** 31))
                contra = sum(contrastive_from_volumes(syn[b:b + 1], aligned[b:b + 1], segmenter,
                                                      cfg.contra_k, seed + b)
                             for b in range(len(batch))) / len(batch)
            loss = losses.total_syn_loss(l1, l2, g_adv, contra, cfg.w_ct, cfg.w_edge, cfg.w_adv,
                                         cfg.w_contra)
            opt_g.zero_grad()
            loss.backward()
            opt_g.step()
            parts = {"loss_g": loss, "loss_d": d_loss, "l1": l1, "l2_edge": l2, "g_adv": g_adv,
                     "contra": contra}
            runlog.write(epoch, it, {k: float(v.detach()) for k, v in parts.items()})
        state.epoch = epoch + 1
        state.running = runlog.epoch_means().get(epoch, {})
        if ckpt:
            _save_state(ckpt, {"synthesis": G, "discriminator": D}, [opt_g, opt_d], state, rngs, cfg)
    runlog.close()
    if state_hash(R) != r_hash:
        raise RuntimeError("registration network changed during synthesis training")
    G.eval()
    return G, D, runlog


def synthesize(G, cases: Sequence[PhantomCase]) -> np.ndarray:
    G.eval()
    with torch.no_grad():
        return G(mr_tensor(cases))[0][:, 0].numpy()


def synthesis_psnr(G, R, cases: Sequence[PhantomCase], reference: str = "aligned") -> float:
    """Mean whole-body PSNR of G's output against R-aligned CT (``aligned``)
    or against the phantom's true MR-aligned CT (``true``)."""
    syn = synthesize(G, cases)
    vals = []
    with torch.no_grad():
        for k, case in enumerate(cases):
            if reference == "aligned":
                ref = register(R, [case])[1][0, 0].numpy()
            else:
                ref = normalize(case.ct, CT_RANGE).data
            vals.append(psnr(syn[k], ref, case.labels.labels > 0))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

# Rows add one component at a time: gated G, then tissue-aware sampling with
# thoracic exclusion in stage 1, then the contrastive term in stage 2.
ABLATION_ROWS = (
    ("baseline", dict(gated=False, tissue_aware=False, exclusion=False, w_contra=0.0)),
    ("gated", dict(gated=True, tissue_aware=False, exclusion=False, w_contra=0.0)),
    ("sim_smooth", dict(gated=True, tissue_aware=True, exclusion=True, w_contra=0.0)),
    ("contra", dict(gated=True, tissue_aware=True, exclusion=True, w_contra=1.0)),
)


def run_ablation(cfg: TrainConfig, seeds: Sequence[int], segmenter,
                 rows=ABLATION_ROWS, reference: str = "true") -> Dict[str, List[float]]:
    """Held-out whole-body PSNR for every ablation row and seed.

    Each seed draws its own phantoms and training seed.  Rows sharing the
    stage-1 settings share one registration network.  The default reference
    is the true MR-aligned CT, so rows with different R stay comparable.
    """
    table: Dict[str, List[float]] = {name: [] for name, _ in rows}
    for s in seeds:
        base = replace(cfg, seed=s, data_seed=s)
        cases, val = make_cases(base), make_cases(base, held_out=True)
        registrations = {}
        for name, over in rows:
            row_cfg = replace(base, **over)
            key = (row_cfg.tissue_aware, row_cfg.exclusion)
            if key not in registrations:
                # stage 1 ignores the generator settings, so build it from the default spec
                registrations[key] = train_registration(cases, replace(row_cfg, gated=cfg.gated))[0]
            G, _, _ = train_synthesis(cases, registrations[key], segmenter, row_cfg)
            table[name].append(synthesis_psnr(G, registrations[key], val, reference))
            log.info("ablation seed %d row %s psnr %.3f", s, name, table[name][-1])
    return table


def slip_ablation(cfg: TrainConfig, seeds: Sequence[int]) -> List[tuple]:
    """Held-out rib Dice after registration with and without thoracic
    exclusion, one (with, without) pair per seed."""
    out = []
    for s in seeds:
        base = replace(cfg, seed=s, data_seed=s)
        cases, val = make_cases(base), make_cases(base, held_out=True)
        pair = tuple(rib_dice_after_registration(
            train_registration(cases, replace(base, exclusion=flag))[0], val) for flag in (True, False))
        out.append(pair)
        log.info("slip ablation seed %d dice with %.4f without %.4f", s, *pair)
    return out

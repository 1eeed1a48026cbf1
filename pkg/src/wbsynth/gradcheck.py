"""Finite-difference gradient checks for every loss and network block, and
the Gaussian mutual-information sanity run for the MINE critic.

Each check compares the autograd directional derivative of a scalar
function against a central difference along random unit directions in
input and parameter space, in float64 on 8^3 grids.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
import torch

from . import losses
from .nets import (AttentionGate, NetSpec, build_discriminator, build_mine_net,
                   build_registration_net, build_segmenter, build_synthesis_net, conv_block)
from .volumes import trilinear_warp

TOLERANCE = 1e-4
SIZE = 8


@dataclass
class CheckResult:
    name: str
    rel_error: float
    passed: bool

    def row(self) -> str:
        return f"{self.name}\t{self.rel_error:.3e}\t{'PASS' if self.passed else 'FAIL'}"


def directional_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                      directions: int = 3, eps: float = 1e-6, seed: int = 0,
                      tolerance_kink: float = 1e-5) -> float:
    """Worst relative error between autograd and central differences of
    ``fn`` along random unit directions over ``tensors`` (modified in place
    and restored)."""
    gen = torch.Generator().manual_seed(seed)
    tensors = [t for t in tensors if t.requires_grad]
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    worst = 0.0
    done = redraws = 0
    while done < directions:
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        norm = math.sqrt(sum(float((d ** 2).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        numeric, half = (_central(fn, tensors, dirs, h) for h in (eps, eps / 2))
        scale = max(abs(analytic), abs(numeric), 1e-8)
        # a ReLU/abs kink inside [-eps, eps] makes the two step sizes disagree;
        # such a direction says nothing about the gradient, so draw another
        if abs(numeric - half) / scale > tolerance_kink and redraws < 2 * directions:
            redraws += 1
            continue
        worst = max(worst, abs(analytic - numeric) / scale)
        done += 1
    return worst


def _central(fn, tensors, dirs, eps: float) -> float:
    with torch.no_grad():
        for t, d in zip(tensors, dirs):
            t.add_(eps * d)
        plus = float(fn())
        for t, d in zip(tensors, dirs):
            t.sub_(2 * eps * d)
        minus = float(fn())
        for t, d in zip(tensors, dirs):
            t.add_(eps * d)
    return (plus - minus) / (2 * eps)


def _leaf(shape, gen, scale=1.0):
    return (torch.randn(shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(True)


def _net_check(net: torch.nn.Module, x: torch.Tensor, seed: int) -> float:
    net = net.double()
    gen = torch.Generator().manual_seed(seed + 1)
    outs = net(x)
    outs = outs if isinstance(outs, tuple) else (outs,)
    probes = [torch.randn(o.shape, generator=gen, dtype=torch.float64) for o in outs]

    def fn():
        ys = net(x)
        ys = ys if isinstance(ys, tuple) else (ys,)
        return sum((y * p).sum() for y, p in zip(ys, probes))

    return directional_check(fn, [x] + list(net.parameters()), seed=seed)


def _checks(seed: int) -> List[tuple]:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    s = SIZE
    small = NetSpec(base_channels=4, depth=2, in_channels=2, patch_disc_levels=2, mine_hidden=16)
    checks = []

    # --- losses --------------------------------------------------------------
    syn, gt = _leaf((2, 1, s, s, s), gen), torch.randn((2, 1, s, s, s), generator=gen, dtype=torch.float64)
    checks.append(("l1_recon", lambda: losses.l1_recon(syn, gt), [syn]))
    edge = torch.rand((2, 1, s, s, s), generator=gen, dtype=torch.float64).requires_grad_(True)
    edge_gt = (torch.rand((2, 1, s, s, s), generator=gen) > 0.7).double()
    checks.append(("l2_edge", lambda: losses.l2_edge(edge, edge_gt), [edge]))

    disc = build_discriminator(NetSpec(base_channels=4, depth=2, in_channels=1, patch_disc_levels=2)).double()
    real, fake = torch.randn((2, 1, s, s, s), generator=gen, dtype=torch.float64), _leaf((2, 1, s, s, s), gen)
    checks.append(("adv_d_loss", lambda: losses.adv_losses(disc, real, fake)[0], [fake] + list(disc.parameters())))
    checks.append(("adv_g_loss", lambda: losses.adv_losses(disc, real, fake)[1], [fake] + list(disc.parameters())))
    w_ct = torch.rand((), generator=gen, dtype=torch.float64)
    checks.append(("total_syn_loss", lambda: losses.total_syn_loss(
        losses.l1_recon(syn, gt), losses.l2_edge(edge, edge_gt), losses.adv_losses(disc, real, fake)[1],
        0.0, w_ct=float(w_ct)), [syn, edge, fake] + list(disc.parameters())))

    critic = build_mine_net(small).double()
    fx, mv = _leaf((256,), gen), _leaf((256,), gen)
    perm = torch.randperm(256, generator=gen)

    def mine():
        sample = losses.PairSample(np.zeros((256, 3), int), fx, mv, mv[perm], perm.numpy())
        return losses.mine_bound(critic, sample)

    checks.append(("mine_bound", mine, [fx, mv] + list(critic.parameters())))

    field = _leaf((3, s, s, s), gen)
    mask = torch.rand((s, s, s), generator=gen) > 0.8
    checks.append(("smoothness", lambda: losses.smoothness(field), [field]))
    checks.append(("smoothness_excluded", lambda: losses.smoothness(field, mask), [field]))
    checks.append(("total_reg_loss", lambda: losses.total_reg_loss(mine(), losses.smoothness(field, mask), 0.5),
                   [fx, mv, field] + list(critic.parameters())))

    vec = _leaf((12, 6), gen)
    ids = np.repeat(np.arange(4), 3)
    checks.append(("info_nce", lambda: losses.info_nce(vec, ids), [vec]))

    # --- blocks and networks ------------------------------------------------
    img = _leaf((1, 2, s, s, s), gen)
    disp = _leaf((1, 3, s, s, s), gen, scale=1.5)
    checks.append(("trilinear_warp", lambda: (trilinear_warp(img, disp) ** 2).sum(), [img, disp]))

    block = conv_block(2, 4).double()
    checks.append(("conv_block", None, (block, _leaf((1, 2, s, s, s), gen))))
    gate = AttentionGate(3, 4).double()
    f, g = _leaf((1, 3, s, s, s), gen), _leaf((1, 4, s, s, s), gen)
    probe = torch.randn((1, 3, s, s, s), generator=gen, dtype=torch.float64)
    checks.append(("attention_gate", lambda: (gate(f, g) * probe).sum(), [f, g] + list(gate.parameters())))

    checks.append(("synthesis_net", None, (build_synthesis_net(small), _leaf((1, 2, s, s, s), gen))))
    reg = build_registration_net(NetSpec(base_channels=4, depth=2, in_channels=3))
    with torch.no_grad():  # lift the near-zero head so the check is not vacuous
        reg.head.weight.normal_(0.0, 0.1)
    checks.append(("registration_net", None, (reg, _leaf((1, 3, s, s, s), gen))))
    checks.append(("discriminator", None, (build_discriminator(
        NetSpec(base_channels=4, depth=2, in_channels=1, patch_disc_levels=2)), _leaf((1, 1, s, s, s), gen))))
    checks.append(("mine_critic", None, (build_mine_net(small), _leaf((64, 2), gen))))
    checks.append(("segmenter", None, (build_segmenter(NetSpec(base_channels=4, depth=2, in_channels=1)),
                                       _leaf((2, 1, s, s, s), gen))))
    return checks


def run_gradcheck(seed: int = 0, tolerance: float = TOLERANCE) -> List[CheckResult]:
    results = []
    for i, (name, fn, args) in enumerate(_checks(seed)):
        if fn is None:
            err = _net_check(args[0], args[1], seed + i)
        else:
            err = directional_check(fn, args, seed=seed + i)
        results.append(CheckResult(name, err, err < tolerance))
    return results


# ---------------------------------------------------------------------------
# MINE sanity
# ---------------------------------------------------------------------------

def gaussian_mi(rho: float) -> float:
    return -0.5 * math.log(1.0 - rho ** 2)


@dataclass
class MineSanityResult:
    estimate: float
    analytic: float
    seconds: float
    trace: List[float]

    @property
    def error(self) -> float:
        return abs(self.estimate - self.analytic)


def mine_sanity(n: int = 10_000, rho: float = 0.9, steps: int = 500, lr: float = 1e-3,
                hidden: int = 64, seed: int = 0, eval_draws: int = 10) -> MineSanityResult:
    """Train the critic on bivariate Gaussian samples and report its DV
    estimate on fresh samples against the analytic MI."""
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)

    def draw():
        x = torch.randn(n, generator=gen, dtype=torch.float64)
        y = rho * x + math.sqrt(1 - rho ** 2) * torch.randn(n, generator=gen, dtype=torch.float64)
        return x, y

    x, y = draw()
    critic = build_mine_net(NetSpec(mine_hidden=hidden)).double()
    opt = torch.optim.Adam(critic.parameters(), lr=lr)
    trace = []
    for step in range(steps):
        perm = torch.randperm(n, generator=gen)
        bound = losses.dv_bound(critic(torch.stack([x, y], 1)), critic(torch.stack([x, y[perm]], 1)))
        opt.zero_grad()
        (-bound).backward()
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            trace.append(float(bound.detach()))
    x2, y2 = draw()
    with torch.no_grad():
        joint = critic(torch.stack([x2, y2], 1))
        vals = [float(losses.dv_bound(joint, critic(torch.stack([x2, y2[torch.randperm(n, generator=gen)]], 1))))
                for _ in range(eval_draws)]
    return MineSanityResult(float(np.mean(vals)), gaussian_mi(rho), time.perf_counter() - start, trace)

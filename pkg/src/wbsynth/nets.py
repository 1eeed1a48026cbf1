"""Networks: gated dual-decoder synthesis U-Net, registration U-Net,
PatchGAN discriminator, MINE critic and the proxy organ segmenter.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class NetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    base_channels: int = 8
    depth: int = 3
    in_channels: int = 2
    patch_disc_levels: int = 3
    mine_hidden: int = 64
    gated: bool = True

    def validate(self) -> "NetSpec":
        if self.base_channels < 4:
            raise NetConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.depth < 2:
            raise NetConfigError(f"depth must be >= 2, got {self.depth}")
        if self.in_channels < 1 or self.patch_disc_levels < 1 or self.mine_hidden < 1:
            raise NetConfigError(f"inconsistent spec {self}")
        return self

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level


def conv_block(cin: int, cout: int, norm: str = "instance") -> nn.Sequential:
    """Two 3x3x3 convolutions, each followed by normalization and ReLU."""
    Norm = nn.InstanceNorm3d if norm == "instance" else nn.BatchNorm3d
    kw = {"affine": True} if norm == "instance" else {}
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1), Norm(cout, **kw), nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1), Norm(cout, **kw), nn.ReLU(inplace=True),
    )


def _up(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=like.shape[2:], mode="trilinear", align_corners=False)


def attention_gate(f, g, w_f, w_g, w_psi, b_f=None, b_g=None, b_psi=None):
    """Gated skip feature: sigmoid(Wpsi . relu(Wg . g + Wf . f)) * f.

    ``f`` and ``g`` are (B, C, D, H, W) maps with equal spatial size; the
    weights are 1x1x1 convolution kernels.  The single-channel gate is
    broadcast over the channels of ``f``.
    """
    if f.shape[2:] != g.shape[2:]:
        raise ValueError(f"gate inputs differ in spatial size: {tuple(f.shape)} vs {tuple(g.shape)}")
    inter = F.relu(F.conv3d(g, w_g, b_g) + F.conv3d(f, w_f, b_f))
    alpha = torch.sigmoid(F.conv3d(inter, w_psi, b_psi))
    return alpha * f


class AttentionGate(nn.Module):
    def __init__(self, f_channels: int, g_channels: int, inter_channels: Optional[int] = None):
        super().__init__()
        inter = inter_channels or f_channels
        self.w_f = nn.Conv3d(f_channels, inter, 1)
        self.w_g = nn.Conv3d(g_channels, inter, 1)
        self.w_psi = nn.Conv3d(inter, 1, 1)

    def forward(self, f, g):
        return attention_gate(f, g, self.w_f.weight, self.w_g.weight, self.w_psi.weight,
                              self.w_f.bias, self.w_g.bias, self.w_psi.bias)


class Encoder(nn.Module):
    def __init__(self, spec: NetSpec, in_channels: int, norm: str = "instance"):
        super().__init__()
        chans = [in_channels] + [spec.width(l) for l in range(spec.depth)]
        self.blocks = nn.ModuleList(conv_block(chans[l], chans[l + 1], norm) for l in range(spec.depth))
        self.bottleneck = conv_block(chans[-1], spec.width(spec.depth), norm)

    def forward(self, x) -> Tuple[List[torch.Tensor], torch.Tensor]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        return skips, self.bottleneck(x)


class Decoder(nn.Module):
    """Upsample, concatenate the skip at each scale, convolve."""

    def __init__(self, spec: NetSpec, norm: str = "instance", last_width: Optional[int] = None):
        super().__init__()
        blocks = []
        for l in reversed(range(spec.depth)):
            out = spec.width(l) if (l or last_width is None) else last_width
            blocks.append(conv_block(spec.width(l + 1) + spec.width(l), out, norm))
        self.blocks = nn.ModuleList(blocks)


def _check_divisible(x: torch.Tensor, depth: int):
    if any(s % 2 ** depth for s in x.shape[2:]):
        raise ValueError(f"spatial size {tuple(x.shape[2:])} must be divisible by {2 ** depth}")


class SynthesisNet(nn.Module):
    """Shared encoder, an edge decoder and an image decoder whose skip
    connections are gated by features from the edge decoder."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec.validate()
        self.encoder = Encoder(spec, spec.in_channels)
        self.edge_decoder = Decoder(spec)
        self.image_decoder = Decoder(spec)
        self.gates = nn.ModuleList(
            AttentionGate(spec.width(l), spec.width(l + 1)) for l in reversed(range(spec.depth)))
        self.image_head = nn.Conv3d(spec.base_channels, 1, 1)
        self.edge_head = nn.Conv3d(spec.base_channels, 1, 1)
        self.force_open = False  # ablation switch: alpha == 1 in every gate

    def forward(self, x):
        _check_divisible(x, self.spec.depth)
        skips, bottom = self.encoder(x)
        e = i = bottom
        for k, level in enumerate(reversed(range(self.spec.depth))):
            f = skips[level]
            g = _up(e, f)
            e = self.edge_decoder.blocks[k](torch.cat([g, f], 1))
            if self.spec.gated and not self.force_open:
                f = self.gates[k](f, g)
            i = self.image_decoder.blocks[k](torch.cat([_up(i, f), f], 1))
        return torch.tanh(self.image_head(i)), torch.sigmoid(self.edge_head(e))


class UNet(nn.Module):
    def __init__(self, spec: NetSpec, in_channels: int, out_channels: int,
                 norm: str = "instance", feat_channels: Optional[int] = None, head_kernel: int = 1):
        super().__init__()
        self.spec = spec.validate()
        self.encoder = Encoder(spec, in_channels, norm)
        self.decoder = Decoder(spec, norm, last_width=feat_channels)
        width = feat_channels or spec.base_channels
        self.head = nn.Conv3d(width, out_channels, head_kernel, padding=head_kernel // 2)

    def features(self, x):
        _check_divisible(x, self.spec.depth)
        skips, x = self.encoder(x)
        for k, level in enumerate(reversed(range(self.spec.depth))):
            f = skips[level]
            x = self.decoder.blocks[k](torch.cat([_up(x, f), f], 1))
        return x

    def forward(self, x):
        return self.head(self.features(x))


class RegistrationNet(UNet):
    """Maps (MR_IP, MR_OP, moving CT) to a 3-channel voxel displacement."""

    def __init__(self, spec: NetSpec):
        super().__init__(spec, spec.in_channels, 3, head_kernel=3)
        # start from the identity warp
        nn.init.normal_(self.head.weight, std=1e-5)
        nn.init.zeros_(self.head.bias)


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec.validate()
        layers: List[nn.Module] = []
        cin = spec.in_channels
        for l in range(spec.patch_disc_levels):
            cout = spec.width(l)
            layers.append(nn.Conv3d(cin, cout, 4, stride=2, padding=1))
            if l:
                layers.append(nn.InstanceNorm3d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        layers.append(nn.Conv3d(cin, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class MineCritic(nn.Module):
    """Scores (fixed, moving) intensity pairs: 2 -> h -> h -> 1."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec.validate()
        h = spec.mine_hidden
        self.net = nn.Sequential(nn.Linear(2, h), nn.ReLU(), nn.Linear(h, h), nn.ReLU(), nn.Linear(h, 1))

    def forward(self, pairs):
        return self.net(pairs).squeeze(-1)


class Segmenter(UNet):
    """Proxy organ segmenter.  ``features`` exposes the penultimate layer.

    Uses batch normalization so that, once frozen in eval mode, every output
    voxel depends only on its receptive field.
    """

    def __init__(self, spec: NetSpec, n_classes: int = 9, feat_channels: int = 16):
        super().__init__(spec, 1, n_classes, norm="batch", feat_channels=feat_channels)


def build_synthesis_net(spec: NetSpec = NetSpec()) -> SynthesisNet:
    if spec.in_channels != 2:
        raise NetConfigError("synthesis network takes the two MR channels (in_channels=2)")
    return SynthesisNet(spec)


def build_registration_net(spec: NetSpec = NetSpec(in_channels=3)) -> RegistrationNet:
    if spec.in_channels != 3:
        raise NetConfigError("registration network takes MR_IP, MR_OP and moving CT (in_channels=3)")
    return RegistrationNet(spec)


def build_discriminator(spec: NetSpec = NetSpec(in_channels=1)) -> PatchDiscriminator:
    if spec.in_channels != 1:
        raise NetConfigError("discriminator sees CT only (in_channels=1)")
    return PatchDiscriminator(spec)


def build_mine_net(spec: NetSpec = NetSpec()) -> MineCritic:
    return MineCritic(spec)


def build_segmenter(spec: NetSpec = NetSpec(in_channels=1, depth=2, base_channels=8)) -> Segmenter:
    return Segmenter(spec)


BUILDERS = {
    "synthesis": build_synthesis_net,
    "registration": build_registration_net,
    "discriminator": build_discriminator,
    "mine": build_mine_net,
    "segmenter": build_segmenter,
}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_hash(module_or_state) -> str:
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, nets: Dict[str, nn.Module], extra: Optional[dict] = None) -> str:
    """Save named networks with their specs and write ``<path>.manifest``.

    Returns the combined content hash.
    """
    path = Path(path)
    payload = {"nets": {}, "extra": extra or {}}
    lines = []
    for kind, net in nets.items():
        spec = getattr(net, "spec", None)
        if spec is None:
            raise ValueError(f"network {kind!r} has no spec")
        state = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
        payload["nets"][kind] = {"spec": asdict(spec), "state": state, "class": type(net).__name__}
        for name in sorted(state):
            t = state[name]
            digest = hashlib.sha256(t.contiguous().numpy().tobytes()).hexdigest()[:16]
            lines.append(f"{kind}.{name}\t{'x'.join(map(str, t.shape)) or 'scalar'}\t{digest}")
    combined = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    torch.save(payload, path)
    Path(str(path) + ".manifest").write_text("\n".join(lines + [f"hash\t{combined}"]) + "\n")
    return combined


_CLASSES = {"SynthesisNet": SynthesisNet, "RegistrationNet": RegistrationNet,
            "PatchDiscriminator": PatchDiscriminator, "MineCritic": MineCritic, "Segmenter": Segmenter}


def load_checkpoint(path) -> Tuple[Dict[str, nn.Module], dict]:
    payload = torch.load(Path(path), weights_only=False)
    nets = {}
    for kind, entry in payload["nets"].items():
        net = _CLASSES[entry["class"]](NetSpec(**entry["spec"]))
        net.load_state_dict(entry["state"])
        nets[kind] = net
    return nets, payload.get("extra", {})


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())

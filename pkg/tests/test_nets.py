import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from wbsynth import nets as N


def conv(cin, cout, k):
    return cin * cout * k ** 3 + cout


def block(cin, cout, norm=2):
    # two convolutions, each followed by an affine norm (2 params per channel)
    return conv(cin, cout, 3) + norm * cout + conv(cout, cout, 3) + norm * cout


def gate_loop(f, g, w_f, b_f, w_g, b_g, w_psi, b_psi):
    """Per-voxel scalar evaluation of the attention gate."""
    cf, cg = f.shape[0], g.shape[0]
    inter = w_f.shape[0]
    out = np.zeros_like(f)
    D, H, W = f.shape[1:]
    for z in range(D):
        for y in range(H):
            for x in range(W):
                s = b_psi[0]
                for k in range(inter):
                    a = b_f[k] + b_g[k]
                    for c in range(cf):
                        a += w_f[k, c] * f[c, z, y, x]
                    for c in range(cg):
                        a += w_g[k, c] * g[c, z, y, x]
                    s += w_psi[0, k] * max(a, 0.0)
                alpha = 1.0 / (1.0 + math.exp(-s))
                for c in range(cf):
                    out[c, z, y, x] = alpha * f[c, z, y, x]
    return out


@pytest.mark.parametrize("seed", range(10))
def test_gate_matches_scalar_loop(seed):
    torch.manual_seed(seed)
    gate = N.AttentionGate(2, 2).double()
    f = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    g = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    got = gate(f, g)[0].detach().numpy()
    p = {k: v.detach().numpy().reshape(v.shape[0], -1) if v.ndim > 1 else v.detach().numpy()
         for k, v in gate.named_parameters()}
    want = gate_loop(f[0].numpy(), g[0].numpy(), p["w_f.weight"], p["w_f.bias"], p["w_g.weight"],
                     p["w_g.bias"], p["w_psi.weight"], p["w_psi.bias"])
    assert np.abs(got - want).max() < 1e-6


def test_gate_zero_weights_halves():
    gate = N.AttentionGate(3, 2)
    with torch.no_grad():
        for p in gate.parameters():
            p.zero_()
    f = torch.randn(1, 3, 4, 4, 4)
    assert torch.allclose(gate(f, torch.randn(1, 2, 4, 4, 4)), 0.5 * f)


def test_gate_saturation():
    gate = N.AttentionGate(2, 2)
    with torch.no_grad():
        gate.w_psi.weight.zero_()
        gate.w_psi.bias.fill_(-20.0)
    f = torch.randn(1, 2, 4, 4, 4)
    assert gate(f, torch.randn(1, 2, 4, 4, 4)).abs().max() < 1e-8


def test_gate_shape_mismatch():
    with pytest.raises(ValueError):
        N.AttentionGate(2, 2)(torch.randn(1, 2, 4, 4, 4), torch.randn(1, 2, 2, 2, 2))


@given(st.integers(0, 2 ** 16))
def test_gate_shrinks_and_keeps_sign(seed):
    torch.manual_seed(seed)
    gate = N.AttentionGate(3, 4).double()
    f = torch.randn(1, 3, 4, 4, 4, dtype=torch.float64)
    out = gate(f, torch.randn(1, 4, 4, 4, 4, dtype=torch.float64)).detach()
    assert torch.all(out.abs() <= f.abs())
    nz = f != 0
    assert torch.all(torch.sign(out[nz]) == torch.sign(f[nz]))


def test_synthesis_shapes_and_ranges():
    torch.manual_seed(0)
    G = N.build_synthesis_net()
    img, edge = G(torch.randn(1, 2, 32, 32, 32) * 5)
    assert img.shape == edge.shape == (1, 1, 32, 32, 32)
    assert img.min() >= -1 and img.max() <= 1 and edge.min() >= 0 and edge.max() <= 1


def test_forcing_gates_open_changes_output():
    torch.manual_seed(0)
    G = N.build_synthesis_net(N.NetSpec(base_channels=4, depth=2)).eval()
    x = torch.randn(1, 2, 8, 8, 8)
    with torch.no_grad():
        gated = G(x)[0]
        G.force_open = True
        opened = G(x)[0]
    assert not torch.allclose(gated, opened)


def test_registration_init_near_identity():
    torch.manual_seed(0)
    R = N.build_registration_net()
    for scale in (1.0, 100.0):
        phi = R(torch.randn(2, 3, 16, 16, 16) * scale)
        assert phi.shape == (2, 3, 16, 16, 16)
        assert phi.norm(dim=1).max() < 0.1
    R.eval()
    x = torch.randn(1, 3, 16, 16, 16)
    assert torch.equal(R(x), R(x))


def test_discriminator_is_fully_convolutional():
    D = N.build_discriminator()
    assert D(torch.randn(1, 1, 32, 32, 32)).shape == (1, 1, 4, 4, 4)
    big = D(torch.randn(1, 1, 64, 64, 64) * 50)
    assert big.shape == (1, 1, 8, 8, 8)
    assert big.abs().max() > 1.0  # no squashing activation


def test_mine_net():
    critic = N.build_mine_net()
    assert critic(torch.randn(17, 2)).shape == (17,)
    with torch.no_grad():
        for p in critic.parameters():
            p.zero_()
        critic.net[-1].bias.fill_(0.3)
    assert torch.all(critic(torch.randn(5, 2)) == 0.3)


def test_mine_input_gradient_matches_finite_difference():
    torch.manual_seed(1)
    critic = N.build_mine_net().double()
    x = torch.randn(1, 2, dtype=torch.float64, requires_grad=True)
    critic(x).sum().backward()
    eps = 1e-6
    for j in range(2):
        e = torch.zeros(1, 2, dtype=torch.float64)
        e[0, j] = eps
        with torch.no_grad():
            fd = float((critic(x + e) - critic(x - e)) / (2 * eps))
        assert abs(fd - float(x.grad[0, j])) <= 1e-4 * max(abs(fd), 1e-8)


def test_parameter_counts_follow_layer_formula():
    b = 8
    w = [b * 2 ** l for l in range(4)]
    encoder = block(2, w[0]) + block(w[0], w[1]) + block(w[1], w[2]) + block(w[2], w[3])
    decoder = sum(block(w[l + 1] + w[l], w[l]) for l in range(3))
    gates = sum(conv(w[l], w[l], 1) + conv(w[l + 1], w[l], 1) + conv(w[l], 1, 1) for l in range(3))
    assert N.count_parameters(N.build_synthesis_net()) == encoder + 2 * decoder + gates + 2 * conv(b, 1, 1)

    reg_enc = block(3, w[0]) + block(w[0], w[1]) + block(w[1], w[2]) + block(w[2], w[3])
    assert N.count_parameters(N.build_registration_net()) == reg_enc + decoder + conv(b, 3, 3)

    disc = conv(1, 8, 4) + conv(8, 16, 4) + 2 * 16 + conv(16, 32, 4) + 2 * 32 + conv(32, 1, 3)
    assert N.count_parameters(N.build_discriminator()) == disc
    assert N.count_parameters(N.build_mine_net()) == (2 * 64 + 64) + (64 * 64 + 64) + (64 + 1)


def test_spec_validation():
    with pytest.raises(N.NetConfigError):
        N.build_synthesis_net(N.NetSpec(base_channels=2))
    with pytest.raises(N.NetConfigError):
        N.build_synthesis_net(N.NetSpec(depth=1))
    with pytest.raises(N.NetConfigError):
        N.build_registration_net(N.NetSpec(in_channels=2))
    with pytest.raises(ValueError):
        N.build_synthesis_net()(torch.randn(1, 2, 12, 12, 12))


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(3)
    G, D = N.build_synthesis_net(), N.build_discriminator()
    h = N.save_checkpoint(tmp_path / "ck.pt", {"synthesis": G, "discriminator": D}, {"epoch": 4})
    manifest = (tmp_path / "ck.pt.manifest").read_text().splitlines()
    assert manifest[-1] == f"hash\t{h}"
    assert any(line.startswith("synthesis.encoder.blocks.0.0.weight\t8x2x3x3x3\t") for line in manifest)
    loaded, extra = N.load_checkpoint(tmp_path / "ck.pt")
    assert extra == {"epoch": 4}
    assert N.state_hash(loaded["synthesis"]) == N.state_hash(G)
    assert N.state_hash(loaded["discriminator"]) == N.state_hash(D)
    assert N.save_checkpoint(tmp_path / "again.pt", {"synthesis": G, "discriminator": D}, {"epoch": 4}) == h

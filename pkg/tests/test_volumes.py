import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from wbsynth.volumes import (HEADER_SIZE, DeformationField, DimensionError, Kind, LabelMask, Volume,
                             VolumeFormatError, canny3d, forward_diff_terms, normalize, read_labels,
                             read_volume, warp, warp_labels, write_volume)


def ramp(n=8):
    return Volume(np.broadcast_to(np.arange(n, dtype=np.float64)[:, None, None], (n, n, n)).copy())


def const_field(shape, vec, dtype=np.float64):
    disp = np.zeros((3,) + shape, dtype=dtype)
    for i, c in enumerate(vec):
        disp[i] = c
    return DeformationField(disp)


# --- types -------------------------------------------------------------------

def test_volume_rejects_small_dims_and_bad_spacing():
    with pytest.raises(DimensionError):
        Volume(np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4, 4)), spacing=(1, 0, 1))


def test_bounded_kinds_and_edge_binary():
    with pytest.raises(ValueError):
        Volume(np.full((4, 4, 4), 1.5), kind=Kind.MR_IP)
    with pytest.raises(ValueError):
        Volume(np.full((4, 4, 4), 0.5), kind=Kind.EDGE)
    Volume(np.ones((4, 4, 4)), kind=Kind.EDGE)


def test_field_must_be_finite():
    disp = np.zeros((3, 4, 4, 4))
    disp[0, 1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        DeformationField(disp)


def test_legend_must_cover_labels():
    with pytest.raises(ValueError):
        LabelMask(np.full((4, 4, 4), 3), {0: "air"})


# --- file format -------------------------------------------------------------

def test_roundtrip_zeros_and_spacing(tmp_path):
    v = Volume(np.zeros((4, 4, 4), np.float32), spacing=(2, 2, 2), kind=Kind.CT_HU)
    write_volume(v, tmp_path / "z.vol")
    r = read_volume(tmp_path / "z.vol")
    assert np.array_equal(r.data, v.data) and r.spacing == (2.0, 2.0, 2.0) and r.kind == Kind.CT_HU


@given(arrays(np.float32, (4, 5, 6), elements=st.floats(-1e6, 1e6, width=32)),
       st.tuples(*[st.floats(0.125, 10, width=32)] * 3))
def test_roundtrip_bit_exact(tmp_path_factory, data, spacing):
    path = tmp_path_factory.mktemp("rt") / "v.vol"
    write_volume(Volume(data, spacing, Kind.GENERIC), path)
    r = read_volume(path)
    assert r.data.tobytes() == data.tobytes()
    assert r.spacing == tuple(float(np.float32(s)) for s in spacing)


def test_label_roundtrip(tmp_path, case32):
    write_volume(case32.labels, tmp_path / "l.vol")
    assert np.array_equal(read_labels(tmp_path / "l.vol").labels, case32.labels.labels)


def test_truncated_payload_is_format_error(tmp_path):
    path = tmp_path / "t.vol"
    write_volume(Volume(np.zeros((4, 4, 4), np.float32)), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:HEADER_SIZE + 63 * 4])
    with pytest.raises(VolumeFormatError) as err:
        read_volume(path)
    assert err.value.offset == HEADER_SIZE + 63 * 4


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "m.vol"
    write_volume(Volume(np.zeros((4, 4, 4), np.float32)), path)
    blob = bytearray(path.read_bytes())
    blob[0:8] = b"NOTAVOL!"
    path.write_bytes(bytes(blob))
    with pytest.raises(VolumeFormatError) as err:
        read_volume(path)
    assert err.value.offset == 0


def test_short_header(tmp_path):
    (tmp_path / "s.vol").write_bytes(b"SGWB")
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "s.vol")


# --- warping -------------------------------------------------------------------

def test_zero_warp_is_identity(case32):
    out = warp(case32.mr_ip, DeformationField.zeros(case32.shape))
    assert np.array_equal(out.data, case32.mr_ip.data)


def test_unit_shift_of_ramp():
    out = warp(ramp(), const_field((8, 8, 8), (1, 0, 0)), border=-5.0).data
    assert np.allclose(out[:7], np.arange(1, 8)[:, None, None])
    assert np.all(out[7] == -5.0)


def test_half_shift_of_ramp():
    out = warp(ramp(), const_field((8, 8, 8), (0.5, 0, 0))).data
    assert np.allclose(out[:7], (np.arange(7) + 0.5)[:, None, None], atol=1e-12)


def test_far_outside_takes_border():
    out = warp(ramp(), const_field((8, 8, 8), (20, 0, 0)), border=3.25).data
    assert np.all(out == 3.25)


def test_warp_shape_mismatch():
    with pytest.raises(DimensionError):
        warp(ramp(8), DeformationField.zeros((8, 8, 9)))


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_warp_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    v1, v2 = rng.normal(size=(2, 6, 6, 6))
    f = DeformationField(rng.uniform(-2, 2, size=(3, 6, 6, 6)))
    lhs = warp(Volume(a * v1 + b * v2), f, border=0.0).data
    rhs = a * warp(Volume(v1), f, 0.0).data + b * warp(Volume(v2), f, 0.0).data
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_warp_labels_integer_shift_and_legend():
    lab = np.zeros((6, 6, 6), np.int32)
    lab[2:4, 2:4, 2:4] = 1
    lab[5] = 2
    m = LabelMask(lab, {0: "air", 1: "a", 2: "b"})
    out = warp_labels(m, const_field((6, 6, 6), (1, 0, 0)))
    assert np.array_equal(out.labels[:5], lab[1:])
    assert np.all(out.labels[5] == 0)
    assert out.legend == m.legend
    assert np.array_equal(warp_labels(m, DeformationField.zeros((6, 6, 6))).labels, lab)


def test_trilinear_warp_is_differentiable():
    from wbsynth.volumes import trilinear_warp
    img = torch.randn(1, 1, 5, 5, 5, dtype=torch.float64, requires_grad=True)
    disp = (torch.rand(1, 3, 5, 5, 5, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda i, d: trilinear_warp(i, d, 0.0), (img, disp))


# --- finite differences ---------------------------------------------------------

def test_forward_diff_constant_field():
    assert np.all(forward_diff_terms(const_field((4, 4, 4), (1.5, -2, 0.25))) == 0)


def test_forward_diff_linear_field():
    a = 0.75
    disp = np.zeros((3, 4, 4, 4))
    disp[0] = a * np.arange(4)[:, None, None]
    terms = forward_diff_terms(disp)
    assert np.allclose(terms[:3], a ** 2)
    assert np.all(terms[3] == 0)
    assert np.isclose(terms.sum(), a ** 2 * 3 * 4 * 4)


def test_forward_diff_spike_stencil():
    disp = np.zeros((3, 5, 5, 5))
    disp[1, 2, 2, 2] = 2.0
    terms = np.asarray(forward_diff_terms(disp))
    expected = np.zeros((5, 5, 5))
    expected[2, 2, 2] = 3 * 4.0  # the spike's own three forward differences
    for axis in range(3):
        idx = [2, 2, 2]
        idx[axis] = 1
        expected[tuple(idx)] = 4.0  # neighbours whose forward difference reaches the spike
    assert np.array_equal(terms, expected)


@given(st.integers(0, 2 ** 16))
def test_forward_diff_terms_nonnegative(seed):
    disp = np.random.default_rng(seed).normal(size=(3, 4, 5, 6))
    assert np.all(np.asarray(forward_diff_terms(disp)) >= 0)


# --- canny ----------------------------------------------------------------------

def test_canny_constant_volume():
    assert not canny3d(Volume(np.full((12, 12, 12), 3.0))).data.any()


def test_canny_half_space_step_is_one_plane():
    d = 16
    data = np.where(np.arange(d)[:, None, None] < d // 2, -1.0, 1.0) * np.ones((d, d, d))
    e = canny3d(Volume(data)).data.astype(bool)
    planes = np.nonzero(e.any(axis=(1, 2)))[0]
    assert len(planes) == 1 and abs(planes[0] - (d / 2 - 0.5)) <= 0.5
    assert e[planes[0]].all()


def test_canny_sphere_shell():
    d, r = 32, 9.0
    c = (d - 1) / 2
    z, y, x = np.indices((d, d, d))
    dist = np.sqrt((z - c) ** 2 + (y - c) ** 2 + (x - c) ** 2)
    e = canny3d(Volume((dist <= r).astype(float))).data.astype(bool)
    assert e.sum() > 0.5 * 4 * np.pi * r ** 2
    assert np.all(np.abs(dist[e] - r) <= 1.0)


@given(st.floats(0.1, 50), st.floats(-100, 100))
def test_canny_invariant_to_affine_rescale(scale, offset):
    rng = np.random.default_rng(3)
    data = np.zeros((12, 12, 12))
    data[3:9, 4:10, 2:7] = 1.0
    data += 0.05 * rng.normal(size=data.shape)
    a = canny3d(Volume(data)).data
    b = canny3d(Volume(scale * data + offset)).data
    assert np.array_equal(a, b)


def test_canny_output_kind():
    assert canny3d(Volume(np.zeros((6, 6, 6)))).kind == Kind.EDGE


# --- normalize ------------------------------------------------------------------

@pytest.mark.parametrize("hu,expected", [(-1024, -1.0), (238, 0.0), (3000, 1.0), (-2000, -1.0)])
def test_normalize_ct(hu, expected):
    v = normalize(Volume(np.full((4, 4, 4), float(hu)), kind=Kind.CT_HU), (-1024, 1500))
    assert v.kind == Kind.CT_NORM
    assert np.allclose(v.data, expected, atol=1e-7)


def test_normalize_rejects_empty_range():
    with pytest.raises(ValueError):
        normalize(Volume(np.zeros((4, 4, 4))), (1, 1))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wbsynth import evalkit as E
from wbsynth.phantom import BODY, FEMUR, LUNGS, SPINE
from wbsynth.volumes import DimensionError, Kind, Volume


def ssim_loop(a, b, window=7, k1=0.01, k2=0.03, L=2.0):
    """Windowed SSIM by explicit loops, symmetric edge padding."""
    r = window // 2
    pa, pb = np.pad(a, r, mode="symmetric"), np.pad(b, r, mode="symmetric")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    out = np.zeros(a.shape)
    for z in range(a.shape[0]):
        for y in range(a.shape[1]):
            for x in range(a.shape[2]):
                wa = pa[z:z + window, y:y + window, x:x + window].ravel()
                wb = pb[z:z + window, y:y + window, x:x + window].ravel()
                ma, mb = wa.mean(), wb.mean()
                va, vb = ((wa - ma) ** 2).mean(), ((wb - mb) ** 2).mean()
                cov = ((wa - ma) * (wb - mb)).mean()
                out[z, y, x] = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return out


# --- psnr / ssim ------------------------------------------------------------------

def test_psnr_examples():
    rng = np.random.default_rng(0)
    a = rng.uniform(-0.5, 0.5, (8, 8, 8))
    assert E.psnr(a, a) == E.PSNR_IDENTICAL == float("inf")
    assert E.psnr(a, a + 0.2) == pytest.approx(20.0, abs=1e-9)
    b = a.copy()
    b[4:] += 0.3
    mask = np.zeros(a.shape, bool)
    mask[:4] = True
    assert E.psnr(a, b, mask) == float("inf")


def test_metric_errors():
    a = np.zeros((4, 4, 4))
    with pytest.raises(ValueError):
        E.psnr(a, a, np.zeros(a.shape, bool))
    with pytest.raises(ValueError):
        E.ssim(a, a, np.zeros(a.shape, bool))
    with pytest.raises(DimensionError):
        E.psnr(a, np.zeros((4, 4, 5)))


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (16, 16, 16))
    noise = rng.normal(size=a.shape)
    vals = [E.psnr(a, a + s * noise) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_identical_and_anticorrelated():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(12, 12, 12)) * 0.3
    a -= a.mean()
    assert E.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert E.ssim(a, -a) < 0


def test_ssim_matches_window_loop():
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, (12, 12, 12))
    b = np.clip(a + rng.normal(scale=0.2, size=a.shape), -1, 1)
    assert np.abs(E.ssim_map(a, b) - ssim_loop(a, b)).max() < 1e-6


@given(st.integers(0, 2 ** 16))
def test_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (2, 8, 8, 8))
    assert E.psnr(a, b) == E.psnr(b, a)
    assert E.ssim(a, b) == pytest.approx(E.ssim(b, a), abs=1e-12)
    assert -1 <= E.ssim(a, b) <= 1


def test_region_report(case32):
    from wbsynth.volumes import normalize
    from wbsynth.phantom import CT_RANGE
    ref = normalize(case32.ct, CT_RANGE)
    rep = E.region_report(ref.data * 0.9, ref, case32.labels, "c0", "abc")
    assert set(rep.psnr) == set(rep.ssim) == set(E.METRIC_REGIONS)
    assert all(np.isfinite(v) for v in rep.psnr.values())
    assert all(-1 <= v <= 1 for v in rep.ssim.values())
    assert rep.rows()[0].startswith("c0\twhole_body\t")
    masks = E.region_masks(case32.labels)
    assert masks["spine"].sum() > (case32.labels.labels == SPINE).sum()


# --- attenuation ------------------------------------------------------------------

def test_hu_to_mu_points():
    hu = np.broadcast_to(np.array([-2000.0, -1000.0, 0.0, 1000.0], np.float32), (4, 4, 4))
    mu = E.hu_to_mu(hu).data
    assert mu[0, 0, 0] == 0.0 and mu[0, 0, 1] == 0.0
    assert mu[0, 0, 2] == pytest.approx(0.096)
    assert mu[0, 0, 3] == pytest.approx(0.1524, abs=1e-7)


def test_hu_to_mu_continuous_and_monotone():
    hu = np.linspace(-1200, 3000, 4200, dtype=np.float32).reshape(4, 1050, 1)
    mu = E.hu_to_mu(np.broadcast_to(hu, (4, 1050, 4))).data[:, :, 0].ravel()
    assert np.all(np.diff(mu) >= 0)
    eps = np.broadcast_to(np.array([-1e-3, 1e-3, 0, 0], np.float32), (4, 4, 4))
    left, right = E.hu_to_mu(eps).data[0, 0, :2]
    assert abs(left - right) < 1e-6


def test_denormalize_inverts_normalize(case32):
    from wbsynth.volumes import normalize
    from wbsynth.phantom import CT_RANGE
    back = E.denormalize_ct(normalize(case32.ct, CT_RANGE))
    clipped = np.clip(case32.ct.data, *CT_RANGE)
    assert np.abs(back - clipped).max() < 0.1


def test_four_tissue_mu(case32):
    mu = E.four_tissue_mu(case32.labels).data
    lab = case32.labels.labels
    assert np.all(mu[lab == 0] == 0) and np.allclose(mu[lab == LUNGS], 0.024)
    assert np.allclose(mu[lab == FEMUR], E.WATER_MU)  # bone is not a class


# --- AC surrogate -----------------------------------------------------------------

def _slab(case, z):
    sl = slice(z, z + 4)
    act = Volume(case.activity.data[sl], kind=Kind.ACTIVITY)
    mu = E.hu_to_mu(Volume(case.ct.data[sl], kind=Kind.CT_HU))
    return act, mu, case.labels.labels[sl]


def test_identical_mu_gives_zero_difference(case32):
    act, mu, lab = _slab(case32, 14)
    test, ref = E.ac_surrogate(act, mu, mu, angles=32)
    assert np.array_equal(test.data, ref.data)
    rois = {"a": lab == BODY}
    assert E.suv_difference(test, ref, rois, lab > 0) == {"a": 0.0}


def test_zero_mu_undercorrects(case32):
    act, mu, lab = _slab(case32, 14)
    zero = Volume(np.zeros_like(mu.data), kind=Kind.MU)
    test, ref = E.ac_surrogate(act, mu, zero, angles=32)
    body = lab > 0
    assert test.data[body].mean() < ref.data[body].mean()


def test_fbp_recovers_uniform_disk():
    n = 64
    yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
    disk = np.repeat((yy ** 2 + xx ** 2 <= 20 ** 2).astype(np.float32)[None], 4, 0)
    zero = Volume(np.zeros_like(disk), kind=Kind.MU)
    test, _ = E.ac_surrogate(Volume(disk, kind=Kind.ACTIVITY), zero, zero, angles=96)
    # the one-voxel rim of a binary disk is blurred by any band-limited
    # reconstruction, so the oracle is scored two voxels in from the edge
    inside = yy ** 2 + xx ** 2 <= 18 ** 2
    assert np.sqrt(((test.data[0][inside] - 1) ** 2).mean()) < 0.05
    whole = disk[0] > 0
    assert np.sqrt(((test.data[0][whole] - 1) ** 2).mean()) < 0.08


def test_ac_rotation_equivariant(case32):
    act, mu, _ = _slab(case32, 14)
    mu_test = Volume(mu.data * 0.9, kind=Kind.MU)
    test, _ = E.ac_surrogate(act, mu, mu_test, angles=96)

    def rot(v, kind):
        return Volume(np.ascontiguousarray(np.rot90(v.data, 1, axes=(1, 2))), kind=kind)

    rtest, _ = E.ac_surrogate(rot(act, Kind.ACTIVITY), rot(mu, Kind.MU), rot(mu_test, Kind.MU), angles=96)
    want = np.rot90(test.data, 1, axes=(1, 2))
    assert np.linalg.norm(rtest.data - want) / np.linalg.norm(want) < 0.02


def test_ac_errors():
    v = Volume(np.zeros((4, 8, 8), np.float32), kind=Kind.MU)
    with pytest.raises(ValueError):
        E.ac_surrogate(v, v, v, angles=8)
    with pytest.raises(DimensionError):
        E.ac_surrogate(v, v, Volume(np.zeros((4, 8, 9), np.float32), kind=Kind.MU))


# --- SUV --------------------------------------------------------------------------

def test_suv_scaling_and_antisymmetry():
    rng = np.random.default_rng(4)
    ref = rng.uniform(0.5, 2.0, (4, 8, 8))
    body = np.ones(ref.shape, bool)
    rois = {"a": rng.random(ref.shape) > 0.5, "b": rng.random(ref.shape) > 0.7}
    d = E.suv_difference(1.1 * ref, ref, rois, body)
    for k, m in rois.items():
        assert d[k] == pytest.approx(0.1 * (ref / ref.mean())[m].mean(), rel=1e-9)
    test = ref + rng.normal(scale=0.1, size=ref.shape)
    fwd, back = E.suv_difference(test, ref, rois, body), E.suv_difference(ref, test, rois, body)
    # antisymmetric under a shared normalization
    scale_ratio = test[body].mean() / ref[body].mean()
    for k in rois:
        assert back[k] == pytest.approx(-fwd[k] / scale_ratio, rel=1e-9)


def test_suv_empty_roi_and_report(case32):
    ref = np.ones((4, 4, 4))
    with pytest.raises(ValueError, match="'x'"):
        E.suv_difference(ref, ref, {"x": np.zeros(ref.shape, bool)}, ref > 0)
    rois = E.roi_masks(case32.labels)
    assert set(rois) == set(E.SUV_ROIS) and all(m.any() for m in rois.values())
    rep = E.aggregate_suv([{"a": 0.1, "b": 0.0}, {"a": 0.3, "b": 0.0}])
    assert rep.mean["a"] == pytest.approx(0.2) and rep.std["a"] == pytest.approx(0.1)
    assert rep.std["b"] == 0 and rep.n_cases == 2
    assert rep.rows("m")[0] == "m\ta\t0.20000\t0.10000"


def test_difference_map(case32):
    body = case32.labels.labels > 0
    ref = Volume(np.ones((32, 32, 32), np.float32) * 2, kind=Kind.ACTIVITY)
    d = E.difference_map(np.ones((32, 32, 32)) * 3, ref, body)
    assert np.allclose(d.data, 0.5) and d.kind == Kind.GENERIC


def test_synthetic_mu_clears_background():
    syn = np.full((4, 8, 8), -0.5)
    body = np.zeros(syn.shape, bool)
    body[:, 2:6, 2:6] = True
    mu = E.synthetic_mu(syn, body).data
    assert np.all(mu[~body] == 0)
    assert np.allclose(mu[body], E.hu_to_mu(E.denormalize_ct(syn)).data[body])

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glintforge.brdf import RHO_MAX, RHO_MIN, normalize, roughness_to_alpha, sample_ggx
from glintforge.envlight import (CubeMipChain, EquirectImage, MipFormatError, PfmFormatError, blend_levels,
                                 constant_chain, dir_to_face_uv, diffuse_irradiance, equirect_to_cube,
                                 equirect_uv_to_direction, face_uv_to_dir, level_roughness, load_chain,
                                 load_pfm, mip_level_stack, prefilter, read_pfm, sample_base, sample_mip,
                                 save_chain, texel_directions, texel_solid_angles, write_pfm)

directions = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


def chain_mean(faces):
    sa = texel_solid_angles(faces.shape[1])
    return np.sum(faces * sa[..., None], axis=(0, 1, 2)) / sa.sum()


# --- PFM --------------------------------------------------------------------------

def test_pfm_roundtrip_bytes(tmp_path):
    p = tmp_path / "a.pfm"
    write_pfm(p, np.array([[[1.0, 2.0, 3.0]]]))
    raw = p.read_bytes()
    img = read_pfm(p)
    np.testing.assert_array_equal(img, [[[1, 2, 3]]])
    q = tmp_path / "b.pfm"
    write_pfm(q, img)
    assert q.read_bytes() == raw


def test_pfm_hand_built_file(tmp_path):
    p = tmp_path / "h.pfm"
    vals = np.arange(12, dtype="<f4")
    p.write_bytes(b"PF\n2 2\n-1.0\n" + vals.tobytes())
    img = load_pfm(p)
    assert (img.width, img.height) == (2, 2)
    # the first stored row is the bottom row
    np.testing.assert_array_equal(img.pixels[1, 0], [0, 1, 2])


def test_pfm_big_endian(tmp_path):
    p = tmp_path / "be.pfm"
    p.write_bytes(b"PF\n1 1\n1.0\n" + np.array([1, 2, 3], dtype=">f4").tobytes())
    np.testing.assert_array_equal(read_pfm(p)[0, 0], [1, 2, 3])


@pytest.mark.parametrize("payload", [
    b"PF\n2 2\n-1.0\n" + bytes(40),
    b"Pf\n1 1\n-1.0\n" + bytes(4),
    b"P6\n1 1\n255\n" + bytes(3),
    b"PF\n1 1\nabc\n" + bytes(12),
])
def test_pfm_rejects_malformed(tmp_path, payload):
    p = tmp_path / "bad.pfm"
    p.write_bytes(payload)
    with pytest.raises(PfmFormatError):
        read_pfm(p)


def test_equirect_rejects_negative():
    with pytest.raises(ValueError):
        EquirectImage(np.full((2, 4, 3), -1.0))


# --- directions -------------------------------------------------------------------

@given(directions)
def test_face_uv_roundtrip(v):
    d = normalize(np.array(v))
    face, u, vv = dir_to_face_uv(d)
    np.testing.assert_allclose(face_uv_to_dir(face, u, vv), d, atol=1e-9)


def test_face_convention():
    centers = face_uv_to_dir(np.arange(6), 0.5, 0.5)
    np.testing.assert_allclose(centers, [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                               atol=1e-12)
    # v grows downwards on the side faces
    assert face_uv_to_dir(4, 0.5, 0.0)[1] > 0


def test_solid_angles_cover_sphere():
    assert texel_solid_angles(16).sum() == pytest.approx(4 * np.pi, rel=1e-12)


def test_pole_maps_to_top_row():
    from glintforge.envlight import direction_to_equirect_uv

    _, v = direction_to_equirect_uv(np.array([0.0, 1.0, 0.0]))
    assert v == 0.0
    np.testing.assert_allclose(equirect_uv_to_direction(0.3, 0.0), [0, 1, 0], atol=1e-12)


def test_equirect_to_cube_constant_and_indicator():
    c = equirect_to_cube(EquirectImage(np.full((16, 32, 3), 0.7)), 8)
    np.testing.assert_allclose(c, 0.7, rtol=1e-6)
    h, w = 128, 256
    u = (np.arange(w) + 0.5) / w
    dirs = equirect_uv_to_direction(u[None, :], ((np.arange(h) + 0.5) / h)[:, None])
    ind = (dirs[..., 0] > 0).astype(float)
    cube = equirect_to_cube(EquirectImage(np.repeat(ind[..., None], 3, -1)), 64)
    assert cube[0].mean() > 0.9 and cube[1].mean() < 0.1
    with pytest.raises(ValueError):
        equirect_to_cube(EquirectImage(np.ones((4, 8, 3))), 2)


# --- mip chain --------------------------------------------------------------------

def test_level_schedule():
    r = level_roughness(5)
    assert r[0] == RHO_MIN and r[-1] == RHO_MAX and np.all(np.diff(r) > 0)


def test_chain_shape_validation():
    with pytest.raises(ValueError):
        CubeMipChain((np.zeros((6, 8, 8, 3)),))
    with pytest.raises(ValueError):
        CubeMipChain((np.zeros((6, 8, 8, 3)), np.zeros((6, 8, 8, 3))))


def test_prefilter_constant():
    chain = prefilter(np.full((6, 16, 16, 3), 2.5, np.float32), levels=4)
    for lv in chain.levels:
        np.testing.assert_allclose(lv, 2.5, rtol=1e-5)
    assert [lv.shape[1] for lv in chain.levels] == [16, 8, 4, 2]


@pytest.mark.parametrize("method", ["quadrature", "sampling"])
def test_prefilter_energy(bright_face_base, method):
    chain = prefilter(bright_face_base, levels=5, samples_per_texel=1024, method=method)
    base = chain_mean(bright_face_base)
    for lv in chain.levels:
        assert np.all(np.abs(chain_mean(lv) - base) <= 0.02 * base)


def test_prefilter_point_light_energy_and_blur():
    base = np.zeros((6, 32, 32, 3), np.float32)
    base[4, 10, 20] = 100.0
    chain = prefilter(base, levels=5)
    mean0 = chain_mean(base)
    spreads = []
    d_max = texel_directions(32)[4, 10, 20]
    for lv in chain.levels:
        assert np.all(np.abs(chain_mean(lv) - mean0) <= 0.02 * mean0)
        s = lv.shape[1]
        w = lv[..., 0] * texel_solid_angles(s)
        dev = np.sum((texel_directions(s) - d_max) ** 2, axis=-1)
        spreads.append(np.sum(w * dev) / np.sum(w))
    assert np.all(np.diff(spreads) >= -1e-9)


def test_prefilter_rejects_bad_args():
    with pytest.raises(ValueError):
        prefilter(np.ones((6, 8, 8, 3)), levels=1)
    with pytest.raises(ValueError):
        prefilter(np.ones((6, 12, 12, 3)), levels=3)


def test_sample_mip_constant_and_levels(bright_face_env):
    c = constant_chain(3.0)
    rng = np.random.default_rng(0)
    d = normalize(rng.normal(size=(50, 3)))
    np.testing.assert_allclose(sample_mip(c, d, rng.uniform(0, 1, 50)), 3.0, rtol=1e-6)
    rho = level_roughness(bright_face_env.n_levels)
    from glintforge.envlight import sample_cube

    for li in range(bright_face_env.n_levels):
        np.testing.assert_allclose(sample_mip(bright_face_env, d, rho[li]),
                                   sample_cube(bright_face_env.levels[li], d), rtol=1e-6, atol=1e-7)


def test_sample_mip_matches_brute_force(bright_face_env, bright_face_base):
    n = np.array([1.0, 0.0, 0.0])
    rng = np.random.default_rng(2)
    a = roughness_to_alpha(RHO_MIN)
    h, _ = sample_ggx(a, n, rng.random(1 << 14), rng.random(1 << 14))
    w = 2 * (h @ n)[:, None] * h - n
    from glintforge.envlight import sample_cube

    nl = np.clip(w @ n, 0, None)
    ref = np.sum(sample_cube(bright_face_base, w) * nl[:, None], 0) / nl.sum()
    np.testing.assert_allclose(sample_mip(bright_face_env, n, RHO_MIN), ref, rtol=0.05)


def test_diffuse_irradiance(bright_face_env):
    px = diffuse_irradiance(bright_face_env, np.array([1.0, 0, 0]))
    nx = diffuse_irradiance(bright_face_env, np.array([-1.0, 0, 0]))
    assert np.all(px > nx)
    np.testing.assert_array_equal(px, sample_mip(bright_face_env, np.array([1.0, 0, 0]), RHO_MAX))
    np.testing.assert_allclose(diffuse_irradiance(constant_chain(0.4), np.array([0, 0, 1.0])), 0.4, rtol=1e-6)


def test_sample_mip_continuous_in_rho(bright_face_env):
    rng = np.random.default_rng(9)
    d = normalize(rng.normal(size=(100, 3)))
    rho = rng.uniform(RHO_MIN, 1 - 1e-4, 100)
    rng_dyn = max(float(lv.max()) for lv in bright_face_env.levels) - min(
        float(lv.min()) for lv in bright_face_env.levels)
    diff = np.abs(sample_mip(bright_face_env, d, rho) - sample_mip(bright_face_env, d, rho + 1e-4))
    assert np.all(diff <= 1e-2 * rng_dyn)


def test_level_stack_blend_matches_sample_mip(bright_face_env):
    rng = np.random.default_rng(5)
    d = normalize(rng.normal(size=(64, 3)))
    rho = rng.uniform(0, 1, 64)
    np.testing.assert_array_equal(blend_levels(mip_level_stack(bright_face_env, d), rho),
                                  sample_mip(bright_face_env, d, rho))


def test_chain_file_roundtrip(tmp_path, bright_face_env):
    p = tmp_path / "e.cmip"
    save_chain(bright_face_env, p)
    raw = p.read_bytes()
    assert raw[:4] == b"CMIP" and raw[4] == 1
    back = load_chain(p)
    for a, b in zip(back.levels, bright_face_env.levels):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(sample_base(back, np.array([1.0, 0, 0])), 5.0)
    p.write_bytes(raw[:-4])
    with pytest.raises(MipFormatError):
        load_chain(p)

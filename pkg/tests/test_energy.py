import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial.transform import Rotation

from handavatar import autodiff as ad
from handavatar import fixtures as fx
from handavatar.energy import (APP_TERMS, GEO_TERMS, EnergyLog, EnergyModel, EnergyWeights, draw_texture_offsets,
                               e_arap, e_init, e_lap, e_n_reg, e_norm, e_percep, e_photo, e_sil, e_t_reg, e_verts)
from handavatar.geometry import build_edges, laplacian_matrix, subdivide_linear
from handavatar.render import Camera, RenderOptions, render_mesh
from handavatar.rig import lbs, personalized_vertices, regress_joints
from handavatar.state import AvatarState


def val(x):
    return float(ad.value(x))


# ---------------------------------------------------------------- silhouette / init / verts


def test_sil_examples():
    m = np.ones((4, 4), bool)
    assert val(e_sil(m, m.astype(float))) == 0.0
    assert val(e_sil(np.ones((3, 3)), np.zeros((3, 3)))) == 1.0
    a = np.array([[1, 1], [0, 0]], bool)
    s = np.array([[1.0, 1.0], [1.0, 0.0]])
    assert val(e_sil(a, s)) == 0.25
    with pytest.raises(ValueError):
        e_sil(np.ones((2, 3)), np.ones((3, 2)))


def test_init_examples():
    J = np.random.default_rng(0).normal(size=(4, 3))
    assert val(e_init(J, J)) == 0.0
    K = J.copy()
    K[2] += [1.0, 0.0, 0.0]
    assert val(e_init(K, J)) == pytest.approx(0.25, abs=1e-15)
    t = np.array([0.1, -0.2, 0.3])
    assert val(e_init(J + t, J)) == pytest.approx(np.abs(t).sum(), abs=1e-12)


def test_verts_examples():
    assert val(e_verts(np.zeros(10))) == 0.0
    assert val(e_verts(np.full(7, 1e-3))) == pytest.approx(7e-6, rel=1e-12)
    D = np.random.default_rng(1).normal(size=50)
    assert val(e_verts(D)) == pytest.approx(sum(d * d for d in D), rel=1e-12)


# ---------------------------------------------------------------- mesh regularizers


def test_lap_square_by_hand():
    m = fx.unit_square()
    # neighbour means: v0 -> (2/3, 2/3), v1 -> (1/2, 1/2), v2 -> (1/3, 1/3), v3 -> (1/2, 1/2)
    expect = (8 / 9 + 1 / 2 + 8 / 9 + 1 / 2) / 4
    assert val(e_lap(m.vertices, laplacian_matrix(m.faces, 4))) == pytest.approx(expect, abs=1e-15)


def test_lap_grid_interior_and_rigid():
    m = fx.hex_grid(7)
    L = laplacian_matrix(m.faces, m.n_vertices)
    d = L @ m.vertices
    interior = np.asarray((abs(L) > 0).sum(1)).ravel() == 7
    assert interior.any() and np.abs(d[interior]).max() < 1e-12
    R = Rotation.from_rotvec([0.3, -0.5, 0.9]).as_matrix()
    a = val(e_lap(m.vertices, L))
    b = val(e_lap(m.vertices @ R.T + [1, 2, 3], L))
    assert b == pytest.approx(a, rel=1e-12)


def test_norm_examples():
    m = fx.hex_grid(5)
    et = build_edges(m.faces, m.n_vertices)
    assert abs(val(e_norm(m.vertices, m.faces, et.edge_faces))) < 1e-15
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, 1, 0], [0.5, 0, 1]], float)
    f = np.array([[0, 1, 2], [1, 0, 3]])
    et = build_edges(f, 4)
    assert val(e_norm(v, f, et.edge_faces)) == pytest.approx(1.0, abs=1e-15)
    coarse = fx.icosphere(1)
    fine = fx.icosphere(2)
    ec, ef = build_edges(coarse.faces, coarse.n_vertices), build_edges(fine.faces, fine.n_vertices)
    assert val(e_norm(fine.vertices, fine.faces, ef.edge_faces)) < val(e_norm(coarse.vertices, coarse.faces, ec.edge_faces))


def test_arap_examples():
    rig = fx.paddle_rig()
    fine, _ = rig.subdivision
    T = rig.subdivision_map @ rig.template.vertices
    E = fine.edges.edges
    assert val(e_arap(T, T, E)) == 0.0
    R = Rotation.from_rotvec([1.0, -0.4, 2.2]).as_matrix()
    assert val(e_arap(T @ R.T + [0.3, -1.0, 2.0], T, E)) < 1e-10
    seg = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    assert val(e_arap(2 * seg, seg, np.array([[0, 1]]))) == pytest.approx(2.0)  # two directed pairs


# ---------------------------------------------------------------- image terms


def test_photo_examples():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(6, 5, 3))
    mask = np.zeros((6, 5), bool)
    mask[1:4, 1:4] = True
    assert val(e_photo(img, img, mask, mask)) == 0.0
    black = np.where(mask[..., None], 0.0, np.ones((6, 5, 3)))
    white = np.ones((6, 5, 3))
    assert val(e_photo(black, white, mask, mask)) == 1.0
    one = img.copy()
    one[2, 2, 1] += 1.0
    assert val(e_photo(one, img, mask, mask)) == pytest.approx(1 / (3 * mask.sum()), abs=1e-15)
    # region is the union of the mask and the rendered coverage
    cov = np.zeros_like(mask)
    cov[0, 0] = True
    assert val(e_photo(black, white, mask, cov)) == pytest.approx(9 / 10)


def _brute_percep(a, b, levels=4):
    k = np.array([1, 4, 6, 4, 1]) / 16.0

    def down(x):
        for ax in (0, 1):
            x = ndimage.correlate1d(x, k, axis=ax, mode="reflect")
        return x[::2, ::2]

    def term(x, y):
        gx = np.abs(np.abs(np.diff(x, axis=1)) - np.abs(np.diff(y, axis=1))).mean()
        gy = np.abs(np.abs(np.diff(x, axis=0)) - np.abs(np.diff(y, axis=0))).mean()
        return 0.5 * (gx + gy)

    total = 0.0
    for lvl in range(levels):
        total += term(a, b)
        if lvl < levels - 1:
            a, b = down(a), down(b)
    return total / levels


def test_percep_examples():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(24, 20, 3))
    assert val(e_percep(img, img)) == 0.0
    assert val(e_percep(img + 0.3, img)) < 1e-15
    chk = ((np.indices((24, 20)).sum(0) // 2) % 2)[..., None] * np.ones(3)
    gray = np.full((24, 20, 3), 0.5)
    v = val(e_percep(chk, gray))
    assert v > 0
    assert v == pytest.approx(_brute_percep(chk, gray), rel=1e-12)
    assert val(e_percep(img, chk)) == pytest.approx(_brute_percep(img, chk), rel=1e-12)


def test_texture_regularizers():
    rng = np.random.default_rng(3)
    off = draw_texture_offsets(rng, 8)
    assert val(e_t_reg(np.full((8, 8, 3), 0.4), off)) == 0.0
    up = np.zeros((8, 8, 3))
    up[..., 2] = 1.0
    assert val(e_n_reg(up, off)) == 0.0
    down = -up
    assert val(e_n_reg(down, off)) == pytest.approx(4 / 3, abs=1e-15)
    # two-texel ramp along u, every texel shifted half a texel to the right
    ramp = np.zeros((2, 2, 3))
    ramp[:, 1] = 1.0
    half = np.tile([0.5, 0.0], (4, 1))
    assert val(e_t_reg(ramp, half)) == pytest.approx(0.25, abs=1e-15)
    noisy = rng.uniform(size=(8, 8, 3))
    assert val(e_t_reg(noisy, off)) >= 0


def test_texture_offsets_reproducible():
    a = draw_texture_offsets(np.random.default_rng(7), 16)
    b = draw_texture_offsets(np.random.default_rng(7), 16)
    assert np.array_equal(a, b)
    tex = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert val(e_t_reg(tex, a)) == val(e_t_reg(tex, b))
    assert a.std() == pytest.approx(2.0, rel=0.1)


# ---------------------------------------------------------------- assembly


@pytest.fixture(scope="module")
def scene():
    rig = fx.paddle_rig()
    cam = Camera(120, 120, 32, 32, 64, 64)
    rng = np.random.default_rng(0)
    n = 2
    gam = rng.normal(0, 0.1, (n, 4, 3))
    tr = np.array([[0.002, 0.001, 0.3], [-0.003, 0.002, 0.31]])
    tex = 16
    yy, xx = np.mgrid[0:tex, 0:tex] / tex
    albedo = np.stack([0.3 + 0.4 * xx, 0.4 + 0.3 * yy, 0.5 + 0.0 * xx], -1)
    nm = np.zeros((tex, tex, 3))
    nm[..., 2] = 1.0
    st = AvatarState(np.zeros(4), gam, tr, np.zeros(rig.n_fine), albedo, nm,
                     np.array([[0.05, -0.2, 0.0]]), np.array([[0.4] * 3, [0.6] * 3]))
    fine = rig.subdivision[0]
    imgs, sils = [], []
    for t in range(n):
        V = personalized_vertices(rig, st.beta, st.pose(t), st.displacement)
        r = render_mesh(V, fine, albedo, nm, st.light_positions, st.reflection, cam).numpy()
        imgs.append(r.color)
        sils.append(r.silhouette)
    joints = np.array([regress_joints(rig, lbs(rig, st.beta, g, x).vertices) for g, x in zip(gam, tr)])
    return rig, cam, st, np.array(imgs), np.array(sils), joints


def test_perfect_reconstruction_data_terms(scene):
    rig, cam, st, imgs, sils, joints = scene
    model = EnergyModel(rig, cam, imgs, sils, joints)
    P = {k: st.to_store()[k] for k in st.to_store().names()}
    off = draw_texture_offsets(np.random.default_rng(0), 16)
    _, rep = model(P, [0, 1], GEO_TERMS + APP_TERMS, off)
    for k in ("sil", "init", "photo", "vgg"):
        assert rep.terms[k] < 1e-6, k
    assert rep.terms["verts"] == 0.0
    assert rep.total == pytest.approx(rep.weighted_sum(), abs=1e-9)
    for t in (0, 1):
        assert set(rep.per_frame[t]) >= {"sil", "photo", "vgg", "init"}


def test_zero_weights_total_zero(scene):
    rig, cam, st, imgs, sils, joints = scene
    model = EnergyModel(rig, cam, imgs, sils, joints, EnergyWeights.zeros())
    st2 = st.copy()
    st2.displacement[:] = 1e-3
    P = {k: st2.to_store()[k] for k in st2.to_store().names()}
    total, rep = model(P, [0], GEO_TERMS + APP_TERMS, draw_texture_offsets(np.random.default_rng(0), 16))
    assert val(total) == 0.0 and rep.total == 0.0 and rep.terms == {}


def test_weighted_total_matches_manual_sum(scene):
    rig, cam, st, imgs, sils, joints = scene
    model = EnergyModel(rig, cam, imgs, sils > 0.5, joints)
    rng = np.random.default_rng(4)
    st2 = st.copy()
    st2.gammas = st2.gammas + rng.normal(0, 0.05, st2.gammas.shape)
    st2.displacement = rng.normal(0, 1e-3, st2.displacement.shape)
    st2.albedo = rng.uniform(size=st2.albedo.shape)
    P = {k: st2.to_store()[k] for k in st2.to_store().names()}
    _, rep = model(P, [0, 1], GEO_TERMS + APP_TERMS, draw_texture_offsets(rng, 16))
    w = EnergyWeights().as_dict()
    manual = sum(w[k] * v for k, v in rep.terms.items())
    assert rep.total == pytest.approx(manual, abs=1e-9)
    assert all(v >= 0 for v in rep.terms.values())
    assert set(rep.terms) == set(GEO_TERMS + APP_TERMS)


def test_energy_gradients_match_finite_differences(scene):
    rig, cam, st, imgs, sils, joints = scene
    rng = np.random.default_rng(5)
    st2 = st.copy()
    st2.gammas = st2.gammas + rng.normal(0, 0.05, st2.gammas.shape)
    st2.beta = rng.normal(0, 0.3, 4)
    st2.displacement = rng.normal(0, 5e-4, st2.displacement.shape)
    st2.albedo = np.clip(st2.albedo + rng.normal(0, 0.05, st2.albedo.shape), 0.05, 0.95)
    st2.normal_map[..., :2] = rng.normal(0, 0.1, (16, 16, 2))
    model = EnergyModel(rig, cam, imgs, sils > 0.5, joints, options=RenderOptions(shadow_map_size=128))
    off = draw_texture_offsets(rng, 16)
    store = st2.to_store()
    coords = ad.sample_coords(store, 60, rng)
    rep = ad.finite_diff_check(lambda P: model(P, [0, 1], GEO_TERMS + APP_TERMS, off)[0], store, coords)
    assert rep.p95_rel < 1e-3, rep.by_group()
    assert rep.n_flagged < len(coords) // 3


def test_energy_log_csv(tmp_path, scene):
    rig, cam, st, imgs, sils, joints = scene
    model = EnergyModel(rig, cam, imgs, sils, joints)
    P = {k: st.to_store()[k] for k in st.to_store().names()}
    log = EnergyLog()
    for e in range(2):
        log.add(e, "geometry", model(P, [0], GEO_TERMS)[1])
    log.write(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "epoch,stage,term,value"
    assert len(lines) == 1 + 2 * (len(GEO_TERMS) + 1)
    assert len(log.totals()) == 2


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        EnergyWeights(sil=-1.0)
    assert EnergyWeights().as_dict()["init"] == 10.0

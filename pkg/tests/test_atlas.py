import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionseg.atlas import (
    AtlasMesh,
    FoldedMeshError,
    build_atlas,
    deformation_log_prior,
    interpolate_lesion_prior,
    interpolate_prior,
    lesion_augmented,
    load_atlas,
    prior_vertex_gradient,
    rasterize,
    regular_mesh,
    save_atlas,
)
from lesionseg.volume import LabelMap, LesionMask, VolumeGrid

# a single tetrahedron whose centroid is the centre of voxel (1,1,1)
TET_VERTS = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]])
ALPHA4 = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6], [0.3, 0.3, 0.4]])
BETA4 = np.array([0.1, 0.5, 0.9, 0.3])


def one_tet(alpha=ALPHA4, beta=BETA4, verts=TET_VERTS):
    return AtlasMesh(verts, verts, [[0, 1, 2, 3]], alpha, beta)


def lattice_mesh(grid, cells, K=3, seed=0, stiffness=0.1):
    v, t = regular_mesh(grid, cells)
    rng = np.random.default_rng(seed)
    a = rng.random((len(v), K)) + 0.05
    return AtlasMesh(v, v, t, a / a.sum(1, keepdims=True), rng.random(len(v)), stiffness)


def perturbed(mesh, scale, seed):
    rng = np.random.default_rng(seed)
    return mesh.with_vertices(mesh.vertices + scale * rng.standard_normal(mesh.vertices.shape))


class TestMeshValidation:
    def test_alpha_rows_simplex(self):
        with pytest.raises(ValueError):
            one_tet(alpha=ALPHA4 * 1.1)

    def test_beta_range(self):
        with pytest.raises(ValueError):
            one_tet(beta=BETA4 + 0.5)

    def test_inverted_reference_rejected(self):
        with pytest.raises(ValueError):
            AtlasMesh(TET_VERTS, TET_VERTS, [[0, 2, 1, 3]], ALPHA4, BETA4)

    def test_invalid_vertex_index(self):
        with pytest.raises(ValueError):
            AtlasMesh(TET_VERTS, TET_VERTS, [[0, 1, 2, 4]], ALPHA4, BETA4)


class TestRasterize:
    def test_voxel_at_vertex(self):
        rast = rasterize(one_tet(), VolumeGrid((5, 5, 5)))
        i = 0  # voxel (0,0,0) coincides with vertex 0
        assert rast.tet_index[i] == 0
        w = dict(zip(rast.vertex_ids[i], rast.weights[i]))
        assert w[0] == pytest.approx(1.0) and sum(v for k, v in w.items() if k != 0) == pytest.approx(0.0)

    def test_centroid_weights(self):
        g = VolumeGrid((5, 5, 5))
        rast = rasterize(one_tet(), g)
        i = 1 + 5 + 25
        assert np.allclose(rast.weights[i], 0.25)

    def test_outside_voxels_background(self):
        g = VolumeGrid((5, 5, 5))
        rast = rasterize(one_tet(), g)
        i = 4 + 5 * 4 + 25 * 4  # far corner
        assert not rast.inside[i] and rast.tet_index[i] == -1
        prior = interpolate_prior(one_tet(), rast)
        assert prior[i].tolist() == [1.0, 0.0, 0.0]
        assert interpolate_lesion_prior(one_tet(), rast).probs[i] == 0.0

    def test_folded_mesh_rejected(self):
        m = one_tet()
        v = m.vertices.copy()
        v[3, 2] = -1.0
        with pytest.raises(FoldedMeshError):
            rasterize(m.with_vertices(v), VolumeGrid((2, 2, 2)))

    def test_lattice_covers_grid(self):
        g = VolumeGrid((7, 6, 5))
        rast = rasterize(lattice_mesh(g, (3, 2, 2)), g)
        assert rast.inside.all()

    def test_shared_face_lowest_index(self):
        # two tets sharing the face (1,2,3); voxel (1,1,0) lies on it... pick a point on the shared face
        v = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 2], [2, 2, 2]], float)
        tets = [[0, 1, 2, 3], [4, 2, 1, 3]]
        a = np.full((5, 2), 0.5)
        m = AtlasMesh(v, v, tets, a, np.zeros(5))
        rast = rasterize(m, VolumeGrid((3, 3, 3)))
        i = 1 + 3 * 1 + 9 * 0  # (1,1,0) lies on face x+y+z=2
        assert rast.tet_index[i] == 0

    @given(st.integers(0, 1000), st.floats(0.0, 0.15))
    def test_weights_reproduce_voxel_centres(self, seed, scale):
        g = VolumeGrid((6, 5, 4), (1.0, 1.5, 2.0))
        m = perturbed(lattice_mesh(g, (2, 2, 2)), scale, seed)
        if np.isinf(deformation_log_prior(m, with_grad=False)):
            return
        rast = rasterize(m, g)
        ins = rast.inside
        assert np.all(rast.weights[ins] >= -1e-12)
        assert np.allclose(rast.weights[ins].sum(1), 1.0, atol=1e-9)
        rec = np.einsum("ia,iac->ic", rast.weights[ins], m.vertices[rast.vertex_ids[ins]])
        assert np.abs(rec - g.voxel_centers()[ins]).max() < 1e-6


class TestInterpolation:
    def test_constant_alpha_field(self):
        g = VolumeGrid((5, 4, 3))
        m = lattice_mesh(g, (2, 2, 1))
        a = np.array([0.2, 0.5, 0.3])
        m2 = AtlasMesh(m.vertices, m.reference_vertices, m.tets, np.tile(a, (m.n_vertices, 1)), m.beta)
        assert np.allclose(interpolate_prior(m2, rasterize(m2, g)), a)

    def test_prior_at_vertex_equals_alpha(self):
        rast = rasterize(one_tet(), VolumeGrid((5, 5, 5)))
        assert np.allclose(interpolate_prior(one_tet(), rast)[4], ALPHA4[1])  # voxel (4,0,0) = vertex 1

    def test_centroid_is_mean_of_rows(self):
        rast = rasterize(one_tet(), VolumeGrid((5, 5, 5)))
        i = 1 + 5 + 25
        assert np.allclose(interpolate_prior(one_tet(), rast)[i], ALPHA4.mean(0))
        assert interpolate_lesion_prior(one_tet(), rast).probs[i] == pytest.approx(BETA4.mean())

    def test_beta_limits(self):
        g = VolumeGrid((5, 5, 5))
        rast = rasterize(one_tet(), g)
        assert interpolate_lesion_prior(one_tet(beta=np.zeros(4)), rast).probs.max() == 0.0
        ones = interpolate_lesion_prior(one_tet(beta=np.ones(4)), rast).probs
        assert np.allclose(ones[rast.inside], 1.0) and np.all(ones[~rast.inside] == 0.0)

    @given(st.integers(0, 10_000), st.floats(0.0, 1.0))
    def test_superposition(self, seed, t):
        g = VolumeGrid((5, 4, 4))
        m1 = lattice_mesh(g, (2, 2, 2), seed=seed)
        m2 = lattice_mesh(g, (2, 2, 2), seed=seed + 1)
        mix = AtlasMesh(m1.vertices, m1.reference_vertices, m1.tets,
                        t * m1.alpha + (1 - t) * m2.alpha, t * m1.beta + (1 - t) * m2.beta)
        rast = rasterize(m1, g)
        p = interpolate_prior(mix, rast)
        assert np.allclose(p, t * interpolate_prior(m1, rast) + (1 - t) * interpolate_prior(m2, rast))
        r = interpolate_lesion_prior(mix, rast).probs
        assert np.allclose(r, t * interpolate_lesion_prior(m1, rast).probs
                           + (1 - t) * interpolate_lesion_prior(m2, rast).probs)

    @given(st.integers(0, 10_000))
    def test_rows_on_simplex_after_deformation(self, seed):
        g = VolumeGrid((6, 6, 6))
        m = perturbed(lattice_mesh(g, (3, 3, 3), seed=seed), 0.2, seed)
        if np.isinf(deformation_log_prior(m, with_grad=False)):
            return
        p = interpolate_prior(m, rasterize(m, g))
        assert np.all(p >= -1e-12) and np.allclose(p.sum(1), 1.0, atol=1e-6)

    def test_lesion_augmented_rows_simplex(self):
        m = lesion_augmented(one_tet())
        assert m.n_labels == 4
        assert np.allclose(m.alpha.sum(1), 1.0)
        assert np.allclose(m.alpha[:, 3], BETA4)
        assert np.allclose(m.alpha[:, :3], ALPHA4 * (1 - BETA4[:, None]))

    def test_prior_vertex_gradient_matches_fd(self, rng):
        g = VolumeGrid((6, 6, 6))
        m = perturbed(lattice_mesh(g, (2, 2, 2), seed=4), 0.1, 4)
        D = rng.standard_normal((g.n_voxels, m.n_labels))

        def f(mesh):
            return float(np.sum(D * interpolate_prior(mesh, rasterize(mesh, g))))

        grad = prior_vertex_gradient(m, rasterize(m, g), D)
        # interior vertex (boundary vertices change which voxels are covered)
        j = int(np.flatnonzero(~m.boundary_vertices())[0])
        h = 1e-6
        for c in range(3):
            v = m.vertices.copy()
            v[j, c] += h
            fp = f(m.with_vertices(v))
            v[j, c] -= 2 * h
            fm = f(m.with_vertices(v))
            assert grad[j, c] == pytest.approx((fp - fm) / (2 * h), rel=1e-4, abs=1e-7)


class TestDeformationPrior:
    def test_reference_is_mode(self):
        m = lattice_mesh(VolumeGrid((5, 5, 5)), (2, 2, 2))
        val, grad = deformation_log_prior(m)
        # c'(1) != 0, so only interior vertices (whose incident reference
        # volumes cancel) are stationary; boundary vertices are pinned in fits
        interior = ~m.boundary_vertices()
        assert val == 0.0 and np.abs(grad[interior]).max() < 1e-12

    def test_collapsed_tet_is_minus_inf(self):
        m = one_tet()
        v = m.vertices.copy()
        v[3] = [1.0, 1.0, 0.0]  # coplanar with the others
        assert deformation_log_prior(m.with_vertices(v), with_grad=False) == -np.inf

    def test_brute_force_value(self):
        m = perturbed(lattice_mesh(VolumeGrid((5, 5, 5)), (2, 2, 2)), 0.05, 1)
        total = 0.0
        for t in m.tets:
            vol = np.linalg.det(m.vertices[t[1:]] - m.vertices[t[0]]) / 6
            ref = np.linalg.det(m.reference_vertices[t[1:]] - m.reference_vertices[t[0]]) / 6
            r = vol / ref
            total += (r - 1) ** 2 - np.log(r)
        val = deformation_log_prior(m, with_grad=False)
        assert val < 0 and val == pytest.approx(-m.deformation_stiffness * total, rel=1e-12)

    @given(st.integers(0, 10_000), st.floats(0.01, 0.3))
    def test_gradient_matches_fd(self, seed, scale):
        m = perturbed(lattice_mesh(VolumeGrid((5, 5, 5)), (2, 2, 2)), scale, seed)
        val, grad = deformation_log_prior(m)
        if np.isinf(val):
            return
        h = 1e-6
        x = m.vertices.ravel()
        rng = np.random.default_rng(seed)
        for k in rng.choice(x.size, 6, replace=False):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (deformation_log_prior(m.with_vertices(xp), False)
                  - deformation_log_prior(m.with_vertices(xm), False)) / (2 * h)
            assert grad.ravel()[k] == pytest.approx(fd, rel=1e-4, abs=1e-6)


class TestBuildAtlas:
    def test_single_label_laplace(self):
        g = VolumeGrid((5, 5, 5))
        m = build_atlas([LabelMap(g, np.full(g.n_voxels, 3), 3)], None, (2, 2, 2))
        # recount voxels per nearest vertex from the mesh itself
        centres = g.voxel_centers()
        d = ((centres[:, None, :] - m.reference_vertices[None]) ** 2).sum(-1)
        V = np.bincount(np.argmin(d, axis=1), minlength=m.n_vertices)
        expected = np.stack([np.ones_like(V), np.ones_like(V), V + 1], 1) / (V + 3)[:, None]
        assert np.allclose(m.alpha, expected)

    def test_no_lesions_beta(self):
        g = VolumeGrid((5, 5, 5))
        lm = LabelMap(g, np.ones(g.n_voxels, int), 2)
        m = build_atlas([lm], [LesionMask(g, np.zeros(g.n_voxels))], (2, 2, 2))
        centres = g.voxel_centers()
        d = ((centres[:, None, :] - m.reference_vertices[None]) ** 2).sum(-1)
        V = np.bincount(np.argmin(d, axis=1), minlength=m.n_vertices)
        assert np.allclose(m.beta, 1.0 / (V + 2))

    def test_fifty_fifty_symmetric(self):
        g = VolumeGrid((4, 4, 4))
        a = LabelMap(g, np.full(g.n_voxels, 1), 2)
        b = LabelMap(g, np.full(g.n_voxels, 2), 2)
        m = build_atlas([a, b], None, (1, 1, 1))
        assert np.allclose(m.alpha[:, 0], m.alpha[:, 1])

    def test_errors(self):
        with pytest.raises(ValueError):
            build_atlas([], None)
        a = LabelMap(VolumeGrid((4, 4, 4)), np.ones(64, int))
        b = LabelMap(VolumeGrid((4, 4, 5)), np.ones(80, int))
        with pytest.raises(ValueError):
            build_atlas([a, b])

    def test_k_inferred(self, small_atlas):
        assert small_atlas.n_labels == 5

    def test_round_trip(self, tmp_path, small_atlas):
        save_atlas(tmp_path / "a.amsh", small_atlas)
        back = load_atlas(tmp_path / "a.amsh")
        for f in ("vertices", "reference_vertices", "tets", "alpha", "beta"):
            assert np.array_equal(getattr(back, f), getattr(small_atlas, f))
        assert back.deformation_stiffness == small_atlas.deformation_stiffness
        assert (tmp_path / "a.amsh").read_bytes()[:4] == b"AMSH"

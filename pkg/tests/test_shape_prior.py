import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import lesionseg.shape_prior as sp
from lesionseg.metrics import dice
from lesionseg.shape_prior import (
    TrainingDivergedError,
    VaeTrainConfig,
    augment_rotations,
    decode,
    elbo,
    encode,
    init_model,
    load_shape_prior,
    sample_prior,
    save_shape_prior,
    train,
)
from lesionseg.volume import LesionMask, VolumeGrid

G8 = VolumeGrid((8, 8, 8))
G16 = VolumeGrid((16, 16, 16))


def zero_model(grid=G8, L=4, channels=(2, 2)):
    m = init_model(grid, L, channels)
    return m.with_flat_params(np.zeros_like(m.flat_params()))


def ball(grid, center, radius):
    idx = np.indices(grid.dims).astype(float)
    d2 = sum((idx[a] - center[a]) ** 2 for a in range(3))
    return (d2 <= radius**2).astype(float)


def as_mask(grid, vol):
    return LesionMask(grid, grid.flatten(vol.astype(bool)))


class TestDecodeEncode:
    def test_zero_weights_decode_to_half(self):
        p = decode(zero_model(), np.ones(4))
        assert np.all(p.probs == 0.5)

    def test_zero_weights_encode(self):
        mu, sigma = encode(zero_model(), np.zeros(G8.dims))
        assert np.all(mu == 0)
        assert np.allclose(sigma, np.log(2.0), rtol=0, atol=1e-15)

    def test_deterministic(self):
        m = init_model(G8, 4, (2, 3), seed=1)
        h = np.arange(4.0)
        assert np.array_equal(decode(m, h).probs, decode(m, h).probs)
        z = ball(G8, (4, 4, 4), 2)
        a, b = encode(m, z), encode(m, z)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    @given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.integers(0, 10))
    @settings(max_examples=20)
    def test_decoder_output_strictly_inside_unit_interval(self, h, seed):
        m = init_model(G8, 4, (2, 3), seed=seed)
        m.params["dec_tconv1_b"][:] = 40.0 * (seed - 5)  # push towards saturation
        p = decode(m, np.array(h)).probs
        assert p.min() > 0 and p.max() < 1

    def test_nonfinite_latent_rejected(self):
        with pytest.raises(ValueError):
            decode(zero_model(), [0, np.nan, 0, 0])

    def test_grid_mismatch_rejected(self):
        m = zero_model()
        with pytest.raises(ValueError):
            encode(m, LesionMask(G16, np.zeros(G16.n_voxels, bool)))
        with pytest.raises(ValueError):
            encode(m, np.zeros((8, 8, 9)))

    def test_flat_mask_accepted(self):
        m = init_model(G8, 4, (2, 2), seed=2)
        z = ball(G8, (3, 4, 5), 2)
        assert np.array_equal(encode(m, z)[0], encode(m, G8.flatten(z))[0])
        assert np.array_equal(encode(m, z)[0], encode(m, as_mask(G8, z))[0])

    def test_decoder_mirrors_encoder(self):
        m = init_model(VolumeGrid((9, 7, 5)), 3, (2, 4, 3))
        assert m.shapes == [(9, 7, 5), (5, 4, 3), (3, 2, 2), (2, 1, 1)]
        assert decode(m, np.zeros(3)).probs.shape == (9 * 7 * 5,)

    def test_invalid_architecture(self):
        with pytest.raises(ValueError):
            init_model(G8, 0)
        m = init_model(G8, 2, (2, 2))
        bad = dict(m.params)
        bad["enc_dense_W"] = bad["enc_dense_W"][:, :1]
        with pytest.raises(ValueError):
            sp.ShapePriorModel(G8, 2, (2, 2), bad)


def with_encoder_output(mu, sigma, L=4):
    """Model whose encoder ignores its input and returns (mu, sigma)."""
    m = zero_model(L=L)
    m.params["enc_dense_b"][:L] = mu
    m.params["enc_dense_b"][L:] = np.log(np.expm1(sigma))  # inverse softplus
    return m


class TestElbo:
    def test_kl_zero_at_standard_normal(self):
        r = elbo(with_encoder_output(np.zeros(4), np.ones(4)), np.zeros(G8.dims), np.random.default_rng(0))
        assert abs(r.kl) < 1e-14

    def test_kl_half_for_unit_mean_shift(self):
        r = elbo(with_encoder_output([1, 0, 0, 0], np.ones(4)), np.zeros(G8.dims), np.random.default_rng(0))
        assert r.kl == pytest.approx(0.5, abs=1e-14)

    def test_reconstruction_at_half(self):
        # decoder output is 0.5 everywhere, so each voxel contributes ln 0.5
        r = elbo(with_encoder_output(np.zeros(4), np.ones(4)), ball(G8, (4, 4, 4), 2), np.random.default_rng(0))
        assert r.reconstruction == pytest.approx(G8.n_voxels * np.log(0.5), rel=1e-14)
        assert r.value == pytest.approx(r.reconstruction - r.kl, rel=1e-14)

    @given(st.integers(0, 2**31), st.floats(0.05, 0.95))
    @settings(max_examples=25)
    def test_kl_nonnegative_and_elbo_nonpositive(self, seed, density):
        rng = np.random.default_rng(seed)
        m = init_model(G8, 3, (2, 2), seed=seed % 1000)
        m = m.with_flat_params(m.flat_params() + 0.5 * rng.standard_normal(m.flat_params().size))
        z = (rng.random(G8.dims) < density).astype(float)
        r = elbo(m, z, rng, mc_samples=2, with_grad=False)
        assert r.kl >= 0 and r.value <= 0

    def test_fixed_eps_is_reproducible(self):
        m = init_model(G8, 4, (2, 2), seed=3)
        z = ball(G8, (4, 4, 4), 2)
        eps = np.random.default_rng(1).standard_normal((2, 1, 4))
        a, b = elbo(m, z, eps=eps), elbo(m, z, eps=eps)
        assert a.value == b.value
        assert all(np.array_equal(a.grads[k], b.grads[k]) for k in a.grads)

    @pytest.mark.parametrize("draw", range(5))
    def test_gradient_matches_finite_differences(self, draw):
        rng = np.random.default_rng(100 + draw)
        g = VolumeGrid((4, 4, 4))
        m = init_model(g, 2, (2, 2), seed=draw)
        m = m.with_flat_params(m.flat_params() + 0.3 * rng.standard_normal(m.flat_params().size))
        z = (rng.random((1, 4, 4, 4)) < 0.4).astype(float)
        eps = rng.standard_normal((2, 1, 2))
        r = elbo(m, z, eps=eps)
        analytic = np.concatenate([r.grads[k].ravel() for k in m.param_names()])
        x = m.flat_params()
        fd = np.empty_like(x)
        h = 1e-6
        for i in range(len(x)):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fp = elbo(m.with_flat_params(xp), z, eps=eps, with_grad=False).value
            fm = elbo(m.with_flat_params(xm), z, eps=eps, with_grad=False).value
            fd[i] = (fp - fm) / (2 * h)
        assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) < 1e-4


class TestConvolutionLayers:
    @pytest.mark.parametrize("shape", [(5, 4, 3), (9, 8, 7), (16, 17, 18)])
    def test_adjoint_identity(self, shape, rng):
        ci, co = 2, 3
        x = rng.standard_normal((2, *shape, ci))
        W = rng.standard_normal((3, 3, 3, ci, co))
        y = rng.standard_normal((2, *sp._out_shape(shape), co))
        lhs = np.vdot(sp._conv_nobias(x, W), y)
        rhs = np.vdot(x, sp._conv_adjoint(y, W, shape))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_adjoint_paths_agree(self, rng, monkeypatch):
        shape = (7, 6, 5)
        W = rng.standard_normal((3, 3, 3, 2, 3))
        y = rng.standard_normal((3, *sp._out_shape(shape), 3))
        monkeypatch.setattr(sp, "_SCATTER_MIN_VOXELS", 10**9)
        dilated = sp._conv_adjoint(y, W, shape)
        monkeypatch.setattr(sp, "_SCATTER_MIN_VOXELS", 0)
        scatter = sp._conv_adjoint(y, W, shape)
        assert np.allclose(dilated, scatter, rtol=0, atol=1e-12)

    def test_chunking_does_not_change_results(self, rng, monkeypatch):
        x = rng.standard_normal((5, 6, 6, 6, 2))
        W = rng.standard_normal((3, 3, 3, 2, 4))
        whole = sp._conv_nobias(x, W)
        monkeypatch.setattr(sp, "_PATCH_BUDGET", 1)
        assert np.allclose(sp._conv_nobias(x, W), whole, rtol=0, atol=1e-12)

    def test_convolution_matches_direct_sum(self, rng):
        x = rng.standard_normal((1, 5, 5, 5, 1))
        W = rng.standard_normal((3, 3, 3, 1, 1))
        out = sp._conv_nobias(x, W)
        xp = np.pad(x[0, ..., 0], 1)
        for i, j, k in [(0, 0, 0), (1, 2, 0), (2, 2, 2)]:
            ref = np.sum(xp[2 * i : 2 * i + 3, 2 * j : 2 * j + 3, 2 * k : 2 * k + 3] * W[..., 0, 0])
            assert out[0, i, j, k, 0] == pytest.approx(ref, rel=1e-12)


class TestTraining:
    def masks(self, n=3):
        return [as_mask(G8, ball(G8, (3 + i, 4, 4), 2)) for i in range(n)]

    def test_zero_learning_rate_is_noop(self):
        m0 = init_model(G8, 4, (2, 2), seed=0)
        m, _ = train(self.masks(), VaeTrainConfig(epochs=2, learning_rate=0.0, latent_dim=4, channels=(2, 2)), m0)
        assert np.array_equal(m.flat_params(), m0.flat_params())

    def test_seeded_runs_bitwise_identical(self):
        cfg = VaeTrainConfig(epochs=3, batch_size=4, learning_rate=1e-3, latent_dim=4, channels=(2, 2), seed=7)
        a, ra = train(self.masks(), cfg)
        b, rb = train(self.masks(), cfg)
        assert np.array_equal(a.flat_params(), b.flat_params())
        assert ra == rb

    def test_different_seed_differs(self):
        kw = dict(epochs=2, batch_size=4, learning_rate=1e-3, latent_dim=4, channels=(2, 2))
        a, _ = train(self.masks(), VaeTrainConfig(seed=1, **kw))
        b, _ = train(self.masks(), VaeTrainConfig(seed=2, **kw))
        assert not np.array_equal(a.flat_params(), b.flat_params())

    def test_elbo_improves(self, tmp_path):
        cfg = VaeTrainConfig(epochs=20, batch_size=7, learning_rate=1e-3, latent_dim=4, channels=(4, 8))
        _, rows = train(self.masks(), cfg, log_path=tmp_path / "log.csv")
        final = np.mean([r[1] for r in rows[-2:]])  # final 10% of epochs
        assert final > rows[0][1]
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,elbo,kl,reconstruction" and len(lines) == 21

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self):
        m0 = init_model(G8, 4, (2, 2))
        m0.params["dec_dense_W"][0, 0] = np.inf
        with pytest.raises(TrainingDivergedError) as err:
            train(self.masks(), VaeTrainConfig(epochs=1, latent_dim=4, channels=(2, 2)), m0)
        assert err.value.step == 1

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            train([])
        with pytest.raises(ValueError):
            train([self.masks()[0], LesionMask(G16, np.zeros(G16.n_voxels, bool))])
        with pytest.raises(ValueError):
            VaeTrainConfig(epochs=0)
        with pytest.raises(ValueError):
            VaeTrainConfig(learning_rate=-1)

    def test_rotation_augmentation(self):
        v = ball(G16, (8, 8, 8), 3)
        assert len(augment_rotations(v, 0)) == 1
        rot = augment_rotations(v, 10)
        assert len(rot) == 7
        for r in rot:
            assert set(np.unique(r)) <= {0.0, 1.0}
            assert dice(r > 0, v > 0) > 0.85

    def test_blob_overfit(self):
        blob = ball(G16, (6, 8, 9), 3.5)
        cfg = VaeTrainConfig(epochs=200, batch_size=10, learning_rate=3e-3, rotation_deg=0,
                             latent_dim=8, channels=(8, 16, 32), seed=0)
        m, _ = train([as_mask(G16, blob)] * 4, cfg)
        mu, _ = encode(m, blob)
        recon = G16.to_volume(decode(m, mu).probs) > 0.5
        assert dice(recon, blob > 0) > 0.9

    def test_prior_samples_follow_training_frequency(self):
        a = ball(G16, (4, 4, 4), 2.5)
        b = ball(G16, (11, 11, 11), 2.5)
        masks = [as_mask(G16, a)] * 3 + [as_mask(G16, b)] * 3
        cfg = VaeTrainConfig(epochs=200, batch_size=6, learning_rate=3e-3, rotation_deg=0,
                             latent_dim=4, channels=(4, 8, 16), seed=1)
        m, _ = train(masks, cfg)
        rng = np.random.default_rng(0)
        mean = np.mean([sample_prior(m, rng).probs for _ in range(100)], axis=0)
        freq = G16.flatten((a + b) / 2)
        assert np.corrcoef(mean, freq)[0, 1] > 0.5

    def test_trained_encoder_separates_empty_and_full(self):
        cfg = VaeTrainConfig(epochs=5, batch_size=4, learning_rate=1e-3, latent_dim=4, channels=(2, 2))
        m, _ = train(self.masks(), cfg)
        assert np.linalg.norm(encode(m, np.zeros(G8.dims))[0] - encode(m, np.ones(G8.dims))[0]) > 0


class TestSampling:
    def test_seeded_sample_reproducible(self):
        m = init_model(G8, 4, (2, 2), seed=4)
        a = sample_prior(m, np.random.default_rng(5)).probs
        b = sample_prior(m, np.random.default_rng(5)).probs
        assert np.array_equal(a, b)
        assert a.min() > 0 and a.max() < 1


class TestFileFormat:
    def test_round_trip_is_f32(self, tmp_path):
        m = init_model(VolumeGrid((8, 6, 4), (2.0, 2.0, 2.0)), 3, (2, 3), seed=9)
        save_shape_prior(tmp_path / "m.vae1", m)
        back = load_shape_prior(tmp_path / "m.vae1")
        assert back.latent_dim == 3 and back.channels == (2, 3)
        assert back.grid.same_as(m.grid)
        for k in m.param_names():
            assert np.array_equal(back.params[k], m.params[k].astype(np.float32).astype(float))
        raw = (tmp_path / "m.vae1").read_bytes()
        assert raw[:4] == b"VAE1"

    def test_corrupt_files_rejected(self, tmp_path):
        m = init_model(G8, 2, (2, 2))
        p = tmp_path / "m.vae1"
        save_shape_prior(p, m)
        raw = p.read_bytes()
        for bad in (b"XXXX" + raw[4:], raw[:-4], raw + b"\0\0\0\0", raw[:4] + b"\2\0\0\0" + raw[8:]):
            p.write_bytes(bad)
            with pytest.raises(ValueError):
                load_shape_prior(p)

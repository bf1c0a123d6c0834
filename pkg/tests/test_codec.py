"""Codec tests: shapes, token conditioning, power normalization, checkpoints."""

import numpy as np
import numpy.testing as npt
import pytest

from mimojscc import codec as cd
from mimojscc.entropy import GaussianParams, discretized_gaussian_nll

TINY = cd.CodecConfig(
    patch_size=4, channels=3, latent_dim=8, hyper_dim=2, hidden=8,
    trunk_hidden=8, unify_dim=8, token_dim=4, k_q=2,
    rate_levels=(2, 4, 6, 8), cqi_levels=(1.0, 2.0, 4.0, 8.0),
)


@pytest.fixture
def params():
    return cd.ToyCodecParams.init_random(TINY, seed=0)


@pytest.fixture
def full_params():
    return cd.ToyCodecParams.init_random(cd.CodecConfig(), seed=1)


class TestParams:
    def test_flat_length_matches_views(self, params):
        total = sum(params[name].size for name in params.names())
        assert params.flat.size == total

    def test_views_alias_flat(self, params):
        name = next(iter(params.names()))
        before = params[name].ravel()[0]
        params.flat[0] += 1.0
        assert params[name].ravel()[0] == before + 1.0
        params.flat[0] -= 1.0

    def test_init_deterministic(self):
        a = cd.ToyCodecParams.init_random(TINY, seed=3)
        b = cd.ToyCodecParams.init_random(TINY, seed=3)
        npt.assert_array_equal(a.flat, b.flat)

    def test_flat_length_validation(self):
        with pytest.raises(ValueError):
            cd.ToyCodecParams(TINY, np.zeros(10))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            cd.CodecConfig(k_q=2, rate_levels=(2, 4))
        with pytest.raises(ValueError):
            cd.CodecConfig(cqi_levels=(2.0, 1.0))
        with pytest.raises(ValueError):
            cd.CodecConfig(latent_dim=0)


class TestPatches:
    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(8, 12, 3))
        patches, grid = cd.extract_patches(x, 4)
        assert patches.shape == (6, 48) and grid == (2, 3)
        npt.assert_array_equal(cd.assemble_patches(patches, grid, 4, 3), x)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            cd.extract_patches(np.zeros((9, 8, 3)), 4)


class TestAnalyzeSynthesize:
    def test_patch_count_and_dims(self, full_params):
        x = np.zeros((32, 32, 3))
        lat = cd.analyze(x, full_params)
        assert lat.l == 64 and lat.c == 16 and lat.spatial_shape == (8, 8)

    def test_zero_image_is_bias_path(self, params):
        lat = cd.analyze(np.zeros((8, 8, 3)), params)
        bias_path, _ = cd.mlp_forward(
            params, "ga", np.zeros((1, TINY.patch_dim)), 3, act_last=False
        )
        npt.assert_allclose(lat.patches, np.broadcast_to(bias_path, lat.patches.shape))

    def test_per_patch_independence(self, params):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(8, 8, 3))
        b = rng.uniform(size=(8, 8, 3))
        b[0:4, 0:4] = a[0:4, 0:4]  # shared first patch
        la = cd.analyze(a, params)
        lb = cd.analyze(b, params)
        npt.assert_array_equal(la.patches[0], lb.patches[0])

    def test_roundtrip_shape(self, params):
        x = np.random.default_rng(2).uniform(size=(8, 8, 3))
        lat = cd.analyze(x, params)
        out = cd.synthesize(lat, params)
        assert out.shape == x.shape

    def test_eval_clamps_to_unit_interval(self, params):
        big = cd.LatentTensor(patches=np.full((4, 8), 50.0), spatial_shape=(2, 2))
        out = cd.synthesize(big, params)
        assert out.min() >= 0.0 and out.max() <= 1.0
        raw = cd.synthesize(big, params, clamp=False)
        assert raw.min() < 0.0 or raw.max() > 1.0

    def test_latent_dim_mismatch_rejected(self, params):
        bad = cd.LatentTensor(patches=np.zeros((4, 5)), spatial_shape=(2, 2))
        with pytest.raises(ValueError):
            cd.synthesize(bad, params)


class TestHyperPath:
    def test_shapes(self, params):
        lat = cd.analyze(np.random.default_rng(3).uniform(size=(8, 8, 3)), params)
        z = cd.hyper_encode(lat, params)
        assert z.shape == (4, 2)
        gp = cd.hyper_decode(z, params)
        assert gp.mu.shape == lat.patches.shape
        assert gp.sigma.shape == lat.patches.shape

    def test_sigma_at_least_sigma_min(self, params):
        z = np.random.default_rng(4).normal(size=(16, 2)) * 20.0
        gp = cd.hyper_decode(z, params)
        assert np.all(gp.sigma >= TINY.sigma_min)

    def test_patch_nll_gradient_through_mu_sigma(self, params):
        # d patch_nll(h_s(z)) / dz via the manual backward vs central differences.
        rng = np.random.default_rng(5)
        z = rng.normal(size=(3, 2))
        y = rng.normal(size=(3, 8))

        def bits(z_arr):
            mu, sigma, _ = cd.hyper_decode_fwd(z_arr, params)
            return float(
                np.sum(discretized_gaussian_nll(y, GaussianParams(mu, sigma)))
            )

        from mimojscc.entropy import discretized_gaussian_nll_grad

        mu, sigma, state = cd.hyper_decode_fwd(z, params)
        _, _, d_mu, d_sigma = discretized_gaussian_nll_grad(y, mu, sigma)
        grads = params.zeros_like()
        g_z = cd.hyper_decode_bwd(d_mu, d_sigma, state, params, grads)

        h = 1e-5
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                zp = z.copy()
                zp[i, j] += h
                zm = z.copy()
                zm[i, j] -= h
                fd = (bits(zp) - bits(zm)) / (2 * h)
                denom = max(abs(fd), abs(g_z[i, j]), 1e-7)
                assert abs(fd - g_z[i, j]) / denom < 1e-3


class TestJsccCodec:
    def test_encoder_output_lengths(self, params):
        y = np.zeros(8)
        for idx, lv in enumerate(TINY.rate_levels):
            out = cd.jscc_encode(y, idx, 0, lv, params)
            assert out.shape == (2 * lv,)

    def test_unknown_level_rejected(self, params):
        with pytest.raises(ValueError):
            cd.jscc_encode(np.zeros(8), 0, 0, 5, params)

    def test_rate_tokens_are_injected(self, params):
        y = np.random.default_rng(6).normal(size=8)
        a = cd.jscc_encode(y, 1, 0, 4, params)
        zeroed = params.copy()
        zeroed["rate_tokens"] = np.zeros_like(zeroed["rate_tokens"])
        b = cd.jscc_encode(y, 1, 0, 4, zeroed)
        assert np.abs(a - b).max() > 1e-9

    def test_csi_tokens_change_output(self, params):
        y = np.random.default_rng(7).normal(size=8)
        a = cd.jscc_encode(y, 1, 0, 4, params)
        b = cd.jscc_encode(y, 1, 2, 4, params)
        assert np.abs(a - b).max() > 1e-9

    def test_decoder_output_dims(self, params):
        for idx, lv in enumerate(TINY.rate_levels):
            w = np.random.default_rng(8).normal(size=2 * lv)
            out = cd.jscc_decode(w, idx, 1, params)
            assert out.shape == (8,)

    def test_decoder_accepts_complex(self, params):
        w = np.random.default_rng(9).normal(size=8)
        got = cd.jscc_decode(cd.reals_to_complex(w), 1, 0, params)
        npt.assert_array_equal(got, cd.jscc_decode(w, 1, 0, params))

    def test_decoder_determinism(self, params):
        w = np.random.default_rng(10).normal(size=4)
        a = cd.jscc_decode(w, 0, 0, params)
        b = cd.jscc_decode(w, 0, 0, params)
        npt.assert_array_equal(a, b)

    def test_batch_matches_single(self, params):
        rng = np.random.default_rng(11)
        y = rng.normal(size=(5, 8))
        level_idx = np.array([0, 2, 1, 2, 3])
        cqi_idx = np.array([0, 1, 2, 3, 1])
        outs, _ = cd.jscc_encode_batch(y, level_idx, cqi_idx, params)
        for i in range(5):
            single = cd.jscc_encode(
                y[i], int(level_idx[i]), int(cqi_idx[i]),
                TINY.rate_levels[level_idx[i]], params,
            )
            npt.assert_allclose(outs[i], single, atol=1e-12)

    def test_encoder_backward_matches_fd(self, params):
        # Contract the encoder outputs with fixed vectors; check d/dy.
        rng = np.random.default_rng(12)
        y = rng.normal(size=(3, 8))
        level_idx = np.array([0, 1, 3])
        cqi_idx = np.array([1, 0, 2])
        probes = [rng.normal(size=2 * TINY.rate_levels[i]) for i in level_idx]

        def value(y_arr):
            outs, _ = cd.jscc_encode_batch(y_arr, level_idx, cqi_idx, params)
            return sum(float(p @ o) for p, o in zip(probes, outs))

        outs, cache = cd.jscc_encode_batch(y, level_idx, cqi_idx, params)
        grads = params.zeros_like()
        g_y = cd.jscc_encode_batch_bwd(probes, cache, params, grads)
        h = 1e-6
        for i in range(3):
            for j in range(8):
                yp = y.copy(); yp[i, j] += h
                ym = y.copy(); ym[i, j] -= h
                fd = (value(yp) - value(ym)) / (2 * h)
                assert abs(fd - g_y[i, j]) / max(abs(fd), abs(g_y[i, j]), 1e-7) < 1e-3


class TestPowerNormalize:
    def test_mean_power_four_scales_by_half(self):
        data = np.full((4, 2), 2.0, dtype=complex)  # |s|^2 = 4 everywhere
        out = cd.power_normalize(cd.SymbolStreams(data=data, lengths=(4, 4)))
        npt.assert_allclose(out.data, data / 2.0)
        assert out.power_scale == pytest.approx(2.0)
        assert np.mean(np.abs(out.data) ** 2) == pytest.approx(1.0, abs=1e-9)

    def test_idempotent_on_normalized_input(self):
        rng = np.random.default_rng(13)
        data = rng.normal(size=(6, 2)) + 1j * rng.normal(size=(6, 2))
        once = cd.power_normalize(cd.SymbolStreams(data=data, lengths=(6, 6)))
        twice = cd.power_normalize(once)
        npt.assert_allclose(twice.data, once.data, atol=1e-12)

    def test_denormalization_restores_input(self):
        rng = np.random.default_rng(14)
        data = 3.7 * (rng.normal(size=(5, 2)) + 1j * rng.normal(size=(5, 2)))
        out = cd.power_normalize(cd.SymbolStreams(data=data, lengths=(5, 5)))
        npt.assert_allclose(out.data * out.power_scale, data, rtol=1e-12)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            cd.power_normalize(cd.SymbolStreams(data=np.zeros((3, 2), dtype=complex),
                                                lengths=(3, 3)))


class TestPackUnpack:
    def test_roundtrip(self):
        from mimojscc.asm import RateAllocation

        rng = np.random.default_rng(15)
        quantized = np.array([2, 4, 2, 6])
        stream = np.array([0, 1, 0, 1])
        alloc = RateAllocation(
            continuous=quantized.astype(float), quantized=quantized,
            stream=stream, entropy_bits=np.ones(4), eta=1.0, n_streams=2,
        )
        symbols = [rng.normal(size=k) + 1j * rng.normal(size=k) for k in quantized]
        streams, offsets = cd.pack_streams(symbols, alloc)
        assert streams.data.shape == (10, 2)  # max load = 4 + 6
        assert streams.lengths == (4, 10)
        back = cd.unpack_streams(streams.data, alloc, offsets)
        for orig, got in zip(symbols, back):
            npt.assert_array_equal(orig, got)

    def test_padding_is_zero(self):
        from mimojscc.asm import RateAllocation

        alloc = RateAllocation(
            continuous=np.array([2.0]), quantized=np.array([2]),
            stream=np.array([0]), entropy_bits=np.ones(1), eta=1.0, n_streams=2,
        )
        streams, _ = cd.pack_streams([np.ones(2, dtype=complex)], alloc)
        npt.assert_array_equal(streams.data[:, 1], 0.0)


class TestComplexPacking:
    def test_roundtrip(self):
        w = np.arange(8).astype(float)
        c = cd.reals_to_complex(w)
        npt.assert_array_equal(c, [0 + 1j, 2 + 3j, 4 + 5j, 6 + 7j])
        npt.assert_array_equal(cd.complex_to_reals(c), w)

    def test_odd_length_rejected(self):
        with pytest.raises(ValueError):
            cd.reals_to_complex(np.ones(3))


class TestSerialization:
    def test_roundtrip_preserves_f32_values_and_config(self, params, tmp_path):
        path = tmp_path / "model.ckpt"
        cd.save_params(params, path)
        loaded = cd.load_params(path)
        assert loaded.config == params.config
        npt.assert_array_equal(
            loaded.flat, params.flat.astype("<f4").astype(np.float64)
        )

    def test_save_load_save_is_bit_exact(self, params, tmp_path):
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        cd.save_params(params, p1)
        cd.save_params(cd.load_params(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_payload_rejected(self, params, tmp_path):
        path = tmp_path / "bad.ckpt"
        cd.save_params(params, path)
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(ValueError, match="payload"):
            cd.load_params(path)

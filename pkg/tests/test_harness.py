"""End-to-end link, configuration, ingestion and sweep tests."""

import dataclasses
import logging

import numpy as np
import numpy.testing as npt
import pytest
import yaml

from mimojscc import codec as cd
from mimojscc.asm import map_streams
from mimojscc.channel import ChannelRealization, KroneckerSpec, sample_kronecker
from mimojscc.data import ar1_textures
from mimojscc.entropy import FactorizedPrior, factorized_nll, hard_quantize
from mimojscc.harness import (
    DatasetSpec,
    LinkSettings,
    evaluate_model,
    ingest,
    load_config,
    make_channel_fn,
    run_sweep,
    transmit_item,
    transmit_one,
)
from mimojscc.metrics import psnr

TINY = cd.CodecConfig(
    patch_size=4, channels=3, latent_dim=8, hyper_dim=2, hidden=8,
    trunk_hidden=8, unify_dim=8, token_dim=4, k_q=2,
    rate_levels=(2, 4, 6, 8), cqi_levels=(1.0, 2.0, 4.0, 8.0),
)


@pytest.fixture
def params():
    return cd.ToyCodecParams.init_random(TINY, seed=0)


def config_yaml(tmp_path, **overrides):
    base = {
        "schema_version": 1,
        "seed": 3,
        "output_dir": str(tmp_path / "out"),
        "n_t": 2, "n_r": 2, "n_s": 2,
        "snr_db": [0.0, 10.0],
        "channel": {"kind": "kronecker", "n_c": 2},
        "codec": {
            "patch_size": 4, "channels": 3, "latent_dim": 8, "hyper_dim": 2,
            "hidden": 8, "trunk_hidden": 8, "unify_dim": 8, "token_dim": 4,
            "k_q": 2, "rate_levels": [2, 4, 6, 8],
            "cqi_levels": [1.0, 2.0, 4.0, 8.0],
        },
        "train": {"lambda": 0.01, "steps": 3, "batch": 2, "seed": 1},
        "dataset": {"kind": "synthetic", "size": 16, "rho": 0.9, "count": 6, "seed": 7},
        "eval_items": 4,
        "flags": {"transmit_side_info": True, "count_overhead_in_cbr": False},
    }
    for key, value in overrides.items():
        base[key] = value
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(base))
    return path


def identity_channel(n=2, noise_power=0.0, n_c=1):
    return ChannelRealization(
        h=np.broadcast_to(np.eye(n, dtype=complex), (n_c, n, n)).copy(),
        noise_power=noise_power,
    )


class TestConfig:
    def test_roundtrip_load(self, tmp_path):
        cfg = load_config(config_yaml(tmp_path))
        assert cfg.seed == 3
        assert cfg.codec.latent_dim == 8
        assert cfg.train.lam == 0.01
        assert cfg.train.transmit_side_info is True
        assert cfg.snr_db == (0.0, 10.0)

    def test_schema_version_required(self, tmp_path):
        path = config_yaml(tmp_path, schema_version=99)
        with pytest.raises(ValueError, match="schema_version"):
            load_config(path)

    def test_stream_limit_enforced(self, tmp_path):
        path = config_yaml(tmp_path, n_s=3)
        with pytest.raises(ValueError, match="n_s"):
            load_config(path)

    def test_unknown_keys_rejected(self, tmp_path):
        path = config_yaml(tmp_path, channel={"kind": "kronecker", "bogus": 1})
        with pytest.raises(ValueError, match="bogus"):
            load_config(path)

    def test_missing_dataset_dir_rejected(self, tmp_path):
        path = config_yaml(
            tmp_path, dataset={"kind": "directory", "path": str(tmp_path / "nope")}
        )
        with pytest.raises(ValueError, match="does not exist"):
            load_config(path)

    def test_missing_checkpoint_rejected(self, tmp_path):
        path = config_yaml(tmp_path, checkpoint=str(tmp_path / "missing.ckpt"))
        with pytest.raises(ValueError, match="checkpoint"):
            load_config(path)

    def test_wideband_channel_fn(self, tmp_path):
        cfg = load_config(config_yaml(
            tmp_path, channel={"kind": "wideband", "n_c": 8, "n_taps": 4}
        ))
        chan = make_channel_fn(cfg)(np.random.default_rng(0), 0.1)
        assert chan.h.shape == (8, 2, 2)

    def test_shipped_example_config_loads(self):
        from pathlib import Path

        example = Path(__file__).resolve().parents[1] / "configs" / "example.yaml"
        cfg = load_config(example)
        assert cfg.codec.k_q == 3
        assert cfg.train.steps == 2000


class TestIngest:
    def test_synthetic_deterministic(self):
        spec = DatasetSpec(kind="synthetic", size=8, rho=0.9, count=5, seed=9)
        a = ingest(spec, 4)
        b = ingest(spec, 4)
        assert len(a) == 5
        for xa, xb in zip(a, b):
            npt.assert_array_equal(xa, xb)
            assert xa.shape == (8, 8, 3)

    def test_directory_center_crop(self, tmp_path):
        from PIL import Image

        arr = (np.random.default_rng(0).uniform(size=(33, 33, 3)) * 255).astype("uint8")
        Image.fromarray(arr).save(tmp_path / "img.png")
        items = ingest(DatasetSpec(kind="directory", path=str(tmp_path)), 4)
        assert items[0].shape == (32, 32, 3)

    def test_unreadable_file_skipped(self, tmp_path, caplog):
        from PIL import Image

        arr = (np.random.default_rng(1).uniform(size=(16, 16, 3)) * 255).astype("uint8")
        Image.fromarray(arr).save(tmp_path / "good.png")
        (tmp_path / "junk.png").write_text("not an image")
        with caplog.at_level(logging.WARNING, logger="mimojscc"):
            items = ingest(DatasetSpec(kind="directory", path=str(tmp_path)), 4)
        assert len(items) == 1
        assert any("skip" in r.message for r in caplog.records)

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no readable images"):
            ingest(DatasetSpec(kind="directory", path=str(tmp_path)), 4)


class TestTransmit:
    def test_noiseless_identity_channel_matches_codec_roundtrip(self, params):
        # With sigma_n^2 = 0 and H = I the link is transparent: the received
        # PSNR equals the codec's own noiseless round trip at the same rates.
        x = ar1_textures(16, 0.9, 1, seed=0)[0]
        chan = identity_channel()
        link = LinkSettings()
        x_hat, row = transmit_item(x, params, link, chan, np.random.default_rng(0))

        from mimojscc.channel import zf_capacities
        from mimojscc.entropy import GaussianParams, discretized_gaussian_nll

        lat = cd.analyze(x, params)
        z_bar = hard_quantize(cd.hyper_encode(lat, params)).astype(float)
        gp = cd.hyper_decode(z_bar, params)
        bits = discretized_gaussian_nll(lat.patches, gp).sum(axis=1)
        report = zf_capacities(chan, 2, TINY.cqi_levels)
        alloc = map_streams(bits, report.per_stream_capacity, link.eta,
                            TINY.rate_quantizer)
        level_idx = np.array([TINY.rate_quantizer.level_index(int(k))
                              for k in alloc.quantized])
        cqi = report.quantized_cqi[alloc.stream]
        w, _ = cd.jscc_encode_batch(lat.patches, level_idx, cqi, params)
        y_hat, _ = cd.jscc_decode_batch(w, level_idx, cqi, params)
        ref = cd.synthesize(
            cd.LatentTensor(patches=y_hat, spatial_shape=lat.spatial_shape), params
        )
        npt.assert_allclose(x_hat, ref, atol=1e-9)
        assert row["psnr_db"] == pytest.approx(psnr(x, ref), abs=1e-7)

    def test_rows_deterministic(self, params):
        x = ar1_textures(16, 0.9, 1, seed=1)[0]
        chan = sample_kronecker(
            KroneckerSpec(np.eye(2), np.eye(2)), 2, np.random.default_rng(3), 0.1
        )
        a = transmit_item(x, params, LinkSettings(), chan, np.random.default_rng(5))[1]
        b = transmit_item(x, params, LinkSettings(), chan, np.random.default_rng(5))[1]
        assert a == b

    @pytest.mark.parametrize("count_overhead", [False, True])
    def test_bandwidth_audit(self, params, count_overhead):
        x = ar1_textures(16, 0.9, 1, seed=2)[0]
        chan = identity_channel(noise_power=0.1)
        link = LinkSettings(count_overhead_in_cbr=count_overhead)
        _, row = transmit_item(x, params, link, chan, np.random.default_rng(0))
        k = row["k_y"] + row["k_z"]
        if count_overhead:
            k += row["overhead_bits"] / link.c_z
        assert row["cbr"] == pytest.approx(k / row["m"], abs=1e-12)

    def test_no_side_info_mode_charges_nothing(self, params):
        x = ar1_textures(16, 0.9, 1, seed=3)[0]
        chan = identity_channel(noise_power=0.1)
        link = LinkSettings(transmit_side_info=False)
        _, row = transmit_item(x, params, link, chan, np.random.default_rng(0))
        assert row["k_z"] == 0.0

    def test_side_info_rate_matches_prior_code_length(self, params):
        x = ar1_textures(16, 0.9, 1, seed=4)[0]
        chan = identity_channel(noise_power=0.1)
        link = LinkSettings()
        _, row = transmit_item(x, params, link, chan, np.random.default_rng(0))
        lat = cd.analyze(x, params)
        z_bar = hard_quantize(cd.hyper_encode(lat, params)).astype(float)
        prior = FactorizedPrior(params["prior.loc"], params.prior_scale())
        assert row["k_z"] == pytest.approx(factorized_nll(z_bar, prior) / link.c_z)

    @pytest.mark.parametrize("n", [2, 4])
    @pytest.mark.parametrize("kind", ["kronecker", "wideband"])
    def test_pipeline_closure_matrix(self, n, kind):
        cfg_c = dataclasses.replace(TINY, cqi_levels=(0.5, 1.0, 2.0, 4.0, 8.0))
        params = cd.ToyCodecParams.init_random(cfg_c, seed=n)
        rng = np.random.default_rng(10 + n)
        if kind == "kronecker":
            corr = np.array([[0.5 ** abs(i - j) for j in range(n)] for i in range(n)])
            chan = sample_kronecker(KroneckerSpec(corr, corr), 4, rng, 0.1)
        else:
            from mimojscc.channel import sample_wideband_rayleigh, uniform_power_profile

            chan = sample_wideband_rayleigh(
                8, 4, uniform_power_profile(4), rng, n_r=n, n_t=n, noise_power=0.1
            )
        x = ar1_textures(16, 0.9, 1, seed=n)[0]
        x_hat, row = transmit_item(x, params, LinkSettings(), chan, rng)
        assert x_hat.shape == x.shape
        assert len(row["capacities"]) == n

    def test_transmit_one_samples_channel_from_config(self, tmp_path, params):
        cfg = load_config(config_yaml(tmp_path))
        x = ar1_textures(16, 0.9, 1, seed=5)[0]
        x_hat, row = transmit_one(x, params, cfg, np.random.default_rng(0), snr_db=10.0)
        assert x_hat.shape == x.shape
        assert row["snr_db"] == pytest.approx(10.0)


class TestEvaluateModel:
    def test_aggregates_and_determinism(self, params):
        from mimojscc.training import TrainConfig, default_channel_fn

        items = [ar1_textures(16, 0.9, 3, seed=6)[i] for i in range(3)]
        a = evaluate_model(params, items, TrainConfig(), default_channel_fn, 10.0, seed=4)
        b = evaluate_model(params, items, TrainConfig(), default_channel_fn, 10.0, seed=4)
        assert a == b
        assert a["count"] == 3
        assert a["psnr_db_se"] >= 0.0


class TestRunSweep:
    def test_snr_sweep_outputs(self, tmp_path):
        cfg = load_config(config_yaml(tmp_path))
        summary = run_sweep(cfg, "snr")
        out = tmp_path / "out"
        assert (out / "results.csv").is_file()
        assert (out / "summary.json").is_file()
        assert (out / "sweep.dat").is_file()
        assert len(summary["aggregates"]) == 2
        header = (out / "results.csv").read_text().splitlines()[1]
        assert header.startswith("setting,item,snr_db,psnr_db")

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = load_config(config_yaml(tmp_path))
        run_sweep(cfg, "snr", out_dir=tmp_path / "a")
        run_sweep(cfg, "snr", out_dir=tmp_path / "b")
        for name in ("results.csv", "summary.json", "sweep.dat"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_cbr_sweep_rows_sorted(self, tmp_path):
        cfg = load_config(config_yaml(tmp_path, lambdas=[0.001, 0.1]))
        summary = run_sweep(cfg, "cbr", out_dir=tmp_path / "cbr")
        rows = summary["rows"]
        assert len(rows) == 2
        assert rows == sorted(rows, key=lambda r: r["cbr"])

    def test_bad_mode_rejected(self, tmp_path):
        cfg = load_config(config_yaml(tmp_path))
        with pytest.raises(ValueError):
            run_sweep(cfg, "both")

    def test_missing_checkpoint_is_actionable(self, tmp_path):
        cfg = load_config(config_yaml(tmp_path))
        ghost = tmp_path / "ghost.ckpt"
        cfg = dataclasses.replace(cfg, checkpoint=str(ghost))
        with pytest.raises(FileNotFoundError, match="ghost.ckpt"):
            run_sweep(cfg, "snr")


class TestCli:
    def test_train_evaluate_and_stats(self, tmp_path):
        from mimojscc.cli import main

        cfg_path = config_yaml(tmp_path)
        out = tmp_path / "cli_out"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "model.ckpt").is_file()
        assert (out / "loss_trace.csv").is_file()
        assert main([
            "evaluate", "--config", str(cfg_path), "--out", str(out),
            "--checkpoint", str(out / "model.ckpt"),
        ]) == 0
        assert main([
            "channel-stats", "--config", str(cfg_path), "--out", str(out),
            "--samples", "500",
        ]) == 0
        assert (out / "covariance.csv").is_file()
        assert (out / "sinr.csv").is_file()

    def test_sweep_command(self, tmp_path):
        from mimojscc.cli import main

        cfg_path = config_yaml(tmp_path)
        out = tmp_path / "sweep_out"
        assert main([
            "sweep", "--mode", "snr", "--config", str(cfg_path), "--out", str(out)
        ]) == 0
        assert (out / "results.csv").is_file()

    def test_gradcheck_command(self):
        from mimojscc.cli import main

        assert main(["gradcheck", "--points", "1", "--seed", "3"]) == 0

"""Experiment orchestration: configs, the end-to-end link, sweeps, reporting.

Configuration is one YAML file (schema documented in the README,
``schema_version: 1``).  Sweep outputs are ``results.csv`` (one row per
transmitted item), ``summary.json`` (aggregates) and a gnuplot-ready
``sweep.dat``; re-running with the same config and seed reproduces all three
byte-identically.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import codec as cd
from .asm import bandwidth_report, map_streams
from .channel import (
    DEFAULT_R_RX,
    DEFAULT_R_TX,
    ChannelRealization,
    KroneckerSpec,
    apply_channel,
    exponential_power_profile,
    sample_kronecker,
    sample_wideband_rayleigh,
    uniform_power_profile,
    zf_capacities,
    zf_detect,
)
from .data import ar1_textures, load_image_dir
from .entropy import (
    FactorizedPrior,
    GaussianParams,
    discretized_gaussian_nll,
    factorized_nll,
    hard_quantize,
)
from .metrics import ms_ssim, psnr
from .training import TrainConfig, train, rd_sweep

log = logging.getLogger("mimojscc")

__all__ = [
    "ChannelSpec",
    "DatasetSpec",
    "ExperimentConfig",
    "LinkSettings",
    "load_config",
    "make_channel_fn",
    "ingest",
    "transmit_one",
    "transmit_item",
    "evaluate_model",
    "ensure_params",
    "run_sweep",
    "channel_stats",
]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "kronecker"  # kronecker | wideband
    n_c: int = 1
    r_tx: tuple = DEFAULT_R_TX
    r_rx: tuple = DEFAULT_R_RX
    n_taps: int = 8
    profile: str = "uniform"  # uniform | exponential
    decay: float = 0.5

    def __post_init__(self):
        if self.kind not in ("kronecker", "wideband"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.n_c < 1:
            raise ValueError("n_c must be >= 1")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | directory
    size: int = 32
    rho: float = 0.9
    count: int = 256
    seed: int = 7
    path: str = ""

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    n_t: int = 2
    n_r: int = 2
    n_s: int = 2
    snr_db: tuple = (0.0, 5.0, 10.0, 15.0)
    channel: ChannelSpec = ChannelSpec()
    codec: cd.CodecConfig = cd.CodecConfig()
    train: TrainConfig = TrainConfig()
    dataset: DatasetSpec = DatasetSpec()
    eval_items: int = 64
    eval_snr_db: float = 10.0
    lambdas: tuple = (1e-3, 1e-2, 1e-1)
    checkpoint: str | None = None
    transmit_side_info: bool = True
    count_overhead_in_cbr: bool = False

    def __post_init__(self):
        if not 1 <= self.n_s <= min(self.n_t, self.n_r):
            raise ValueError(
                f"n_s must satisfy 1 <= n_s <= min(n_t, n_r) = "
                f"{min(self.n_t, self.n_r)}, got {self.n_s}"
            )
        object.__setattr__(self, "snr_db", tuple(float(v) for v in self.snr_db))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))

    @property
    def link(self) -> "LinkSettings":
        return LinkSettings(
            eta=self.train.eta,
            c_z=self.train.c_z,
            n_s=self.n_s,
            transmit_side_info=self.transmit_side_info,
            count_overhead_in_cbr=self.count_overhead_in_cbr,
        )


@dataclass(frozen=True)
class LinkSettings:
    """Everything the end-to-end link needs besides params and the channel."""

    eta: float = 1.0
    c_z: float = 2.0
    n_s: int | None = None  # None: min(n_t, n_r) of the realization
    transmit_side_info: bool = True
    count_overhead_in_cbr: bool = False


def _build(cls, raw: dict, remap=()):
    raw = dict(raw or {})
    for src, dst in remap:
        if src in raw:
            raw[dst] = raw.pop(src)
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - valid
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)


def load_config(path) -> ExperimentConfig:
    """Load and validate a YAML experiment configuration."""
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValueError(f"config schema_version must be {SCHEMA_VERSION}, got {version}")

    channel = _build(ChannelSpec, raw.pop("channel", {}))
    dataset = _build(DatasetSpec, raw.pop("dataset", {}))
    codec = _build(cd.CodecConfig, raw.pop("codec", {}))
    train_cfg = _build(TrainConfig, raw.pop("train", {}), remap=[("lambda", "lam")])

    flags = raw.pop("flags", {}) or {}
    cfg = _build(
        ExperimentConfig,
        {
            **raw,
            "channel": channel,
            "dataset": dataset,
            "codec": codec,
            "train": train_cfg,
            **flags,
        },
    )
    # Keep the side-info flag consistent between link and loss.
    cfg = dataclasses.replace(
        cfg,
        train=dataclasses.replace(
            cfg.train, transmit_side_info=cfg.transmit_side_info
        ),
    )
    if cfg.dataset.kind == "directory" and not Path(cfg.dataset.path).is_dir():
        raise ValueError(f"dataset directory does not exist: {cfg.dataset.path}")
    if cfg.checkpoint is not None and not Path(cfg.checkpoint).is_file():
        raise ValueError(f"checkpoint does not exist: {cfg.checkpoint}")
    return cfg


def make_channel_fn(cfg: ExperimentConfig):
    """Channel sampler ``(rng, noise_power) -> ChannelRealization`` from a config."""
    ch = cfg.channel
    if ch.kind == "kronecker":
        r_tx = np.asarray(ch.r_tx, dtype=np.complex128)
        r_rx = np.asarray(ch.r_rx, dtype=np.complex128)
        if r_tx.shape != (cfg.n_t, cfg.n_t) or r_rx.shape != (cfg.n_r, cfg.n_r):
            raise ValueError("correlation matrices must match the antenna counts")
        spec = KroneckerSpec(r_tx, r_rx)

        def fn(rng, noise_power):
            return sample_kronecker(spec, ch.n_c, rng, noise_power)

    else:
        if ch.profile == "uniform":
            profile = uniform_power_profile(ch.n_taps)
        elif ch.profile == "exponential":
            profile = exponential_power_profile(ch.n_taps, ch.decay)
        else:
            raise ValueError(f"unknown power profile {ch.profile!r}")

        def fn(rng, noise_power):
            return sample_wideband_rayleigh(
                ch.n_c, ch.n_taps, profile, rng, cfg.n_r, cfg.n_t, noise_power
            )

    return fn


def ingest(spec: DatasetSpec, patch_size: int) -> list:
    """Source tensors in [0, 1] per the dataset spec."""
    if spec.kind == "synthetic":
        if spec.size % patch_size:
            raise ValueError(
                f"synthetic size {spec.size} not divisible by patch size {patch_size}"
            )
        arr = ar1_textures(spec.size, spec.rho, spec.count, spec.seed)
        return [arr[i] for i in range(arr.shape[0])]
    return load_image_dir(spec.path, patch_size)


# ---------------------------------------------------------------------------
# End-to-end link


def transmit_item(
    x: np.ndarray,
    params: cd.ToyCodecParams,
    link: LinkSettings,
    chan: ChannelRealization,
    rng: np.random.Generator,
):
    """Send one source tensor through the full pipeline; returns (x_hat, row).

    The row dict carries the metrics and every bandwidth term needed to audit
    the reported CBR.
    """
    cfg_c = params.config
    quant = cfg_c.rate_quantizer
    x = np.asarray(x, dtype=np.float64)
    n_s = link.n_s if link.n_s is not None else chan.n_streams

    lat = cd.analyze(x, params)
    y = lat.patches

    if link.transmit_side_info:
        z = cd.hyper_encode(lat, params)
        z_bar = hard_quantize(z).astype(np.float64)
        prior = FactorizedPrior(params["prior.loc"], params.prior_scale())
        k_z = factorized_nll(z_bar, prior) / link.c_z
        gp = cd.hyper_decode(z_bar, params)
    else:
        k_z = 0.0
        gp = GaussianParams(
            mu=np.zeros_like(y),
            sigma=np.broadcast_to(params.fallback_sigma(), y.shape).copy(),
        )

    # Allocation entropy at the continuous latent: y itself is never rounded
    # on the link (only z is), and this matches the rates the model was
    # trained against.
    patch_bits = discretized_gaussian_nll(y, gp).sum(axis=1)

    report = zf_capacities(chan, n_s, cfg_c.cqi_levels)
    alloc = map_streams(patch_bits, report.per_stream_capacity, link.eta, quant)
    level_idx = np.array(
        [quant.level_index(int(k)) for k in alloc.quantized], dtype=np.intp
    )
    cqi_per_patch = report.quantized_cqi[alloc.stream]

    w_outs, _ = cd.jscc_encode_batch(y, level_idx, cqi_per_patch, params)
    symbols = [cd.reals_to_complex(w) for w in w_outs]
    streams, offsets = cd.pack_streams(symbols, alloc)
    streams = cd.power_normalize(streams)

    received = apply_channel(chan, streams.data, rng)
    detected, _ = zf_detect(chan, received, n_s, cfg_c.cqi_levels)
    w_hat_mat = detected * streams.power_scale

    w_hat_reals = [
        cd.complex_to_reals(w) for w in cd.unpack_streams(w_hat_mat, alloc, offsets)
    ]
    y_hat, _ = cd.jscc_decode_batch(w_hat_reals, level_idx, cqi_per_patch, params)
    x_hat = cd.synthesize(
        cd.LatentTensor(patches=y_hat, spatial_shape=lat.spatial_shape), params
    )

    bw = bandwidth_report(
        alloc, n_s, chan.n_t, k_z, m=x.size, k_q=cfg_c.k_q, c_z=link.c_z,
        count_overhead_in_cbr=link.count_overhead_in_cbr,
    )
    mse = float(np.mean((x - x_hat) ** 2))
    snr_db = math.inf if chan.noise_power == 0 else -10.0 * math.log10(chan.noise_power)
    row = {
        "psnr_db": psnr(x, x_hat),
        "ms_ssim": ms_ssim(x, x_hat),
        "mse": mse,
        "cbr": bw.cbr,
        "k_y": bw.k_y,
        "k_z": bw.k_z,
        "overhead_bits": bw.overhead_bits,
        "m": int(x.size),
        "capacities": tuple(float(v) for v in report.per_stream_capacity),
        "snr_db": snr_db,
        "power_scale": float(streams.power_scale),
    }
    return x_hat, row


def transmit_one(
    x: np.ndarray,
    params: cd.ToyCodecParams,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    snr_db: float | None = None,
    chan: ChannelRealization | None = None,
):
    """Config-level wrapper of :func:`transmit_item`: samples the channel too."""
    if chan is None:
        if snr_db is None:
            snr_db = cfg.snr_db[0]
        noise_power = 10.0 ** (-snr_db / 10.0)
        chan = make_channel_fn(cfg)(rng, noise_power)
    return transmit_item(x, params, cfg.link, chan, rng)


def _item_rng(master_seed: int, tag: int, item: int) -> np.random.Generator:
    # Stable per-item derivation so results are independent of scheduling.
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), tag, item]))


def evaluate_model(
    params: cd.ToyCodecParams,
    items,
    train_cfg: TrainConfig,
    channel_fn,
    snr_db: float,
    seed: int = 0,
    count_overhead_in_cbr: bool = False,
    tag: int = 0,
):
    """Mean metrics over ``items`` at one SNR, with per-item derived seeds."""
    link = LinkSettings(
        eta=train_cfg.eta,
        c_z=train_cfg.c_z,
        transmit_side_info=train_cfg.transmit_side_info,
        count_overhead_in_cbr=count_overhead_in_cbr,
    )
    noise_power = 10.0 ** (-snr_db / 10.0)
    rows = []
    for i, x in enumerate(items):
        rng = _item_rng(seed, tag, i)
        chan = channel_fn(rng, noise_power)
        _, row = transmit_item(x, params, link, chan, rng)
        rows.append(row)
    return aggregate_rows(rows)


def aggregate_rows(rows: list) -> dict:
    out = {}
    n = len(rows)
    for key in ("psnr_db", "ms_ssim", "cbr", "mse", "k_y", "k_z"):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_se"] = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    out["count"] = n
    return out


# ---------------------------------------------------------------------------
# Sweeps and persistent reporting


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _write_csv(path: Path, comment: str, header: list, rows: list) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_json(path: Path, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ensure_params(cfg: ExperimentConfig, dataset, channel_fn) -> cd.ToyCodecParams:
    if cfg.checkpoint is not None:
        path = Path(cfg.checkpoint)
        if not path.is_file():
            raise FileNotFoundError(
                f"expected a codec checkpoint at {path}; train one with the "
                f"'train' subcommand or clear the checkpoint field"
            )
        return cd.load_params(path)
    log.info("no checkpoint configured; training on demand (%d steps)", cfg.train.steps)
    params0 = cd.ToyCodecParams.init_random(cfg.codec, cfg.seed)
    trained, _ = train(cfg.train, dataset, params0, channel_fn)
    return trained


_ITEM_COLUMNS = [
    "setting", "item", "snr_db", "psnr_db", "ms_ssim", "mse", "cbr",
    "k_y", "k_z", "overhead_bits", "m", "power_scale",
]


def run_sweep(cfg: ExperimentConfig, mode: str, out_dir=None) -> dict:
    """Run an SNR or CBR sweep; writes results.csv, summary.json, sweep.dat.

    Returns the summary dict.  Identical config and seed reproduce the output
    files byte-identically.
    """
    if mode not in ("snr", "cbr"):
        raise ValueError(f"mode must be 'snr' or 'cbr', got {mode!r}")
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = ingest(cfg.dataset, cfg.codec.patch_size)
    channel_fn = make_channel_fn(cfg)
    eval_items = dataset[: cfg.eval_items]
    # Metric self-check on every run: identity cases must hold exactly.
    probe = eval_items[0]
    if psnr(probe, probe) != 100.0 or ms_ssim(probe, probe) != 1.0:
        raise RuntimeError("metric identity self-check failed")

    item_rows = []
    summary: dict = {"mode": mode, "seed": cfg.seed, "schema_version": SCHEMA_VERSION}

    if mode == "snr":
        params = ensure_params(cfg, dataset, channel_fn)
        aggregates = []
        for si, snr_db in enumerate(cfg.snr_db):
            noise_power = 10.0 ** (-snr_db / 10.0)
            rows = []
            for i, x in enumerate(eval_items):
                rng = _item_rng(cfg.seed, si, i)
                chan = channel_fn(rng, noise_power)
                _, row = transmit_item(x, params, cfg.link, chan, rng)
                rows.append(row)
                item_rows.append([
                    _fmt(float(snr_db)), i, _fmt(row["snr_db"]), _fmt(row["psnr_db"]),
                    _fmt(row["ms_ssim"]), _fmt(row["mse"]), _fmt(row["cbr"]),
                    _fmt(row["k_y"]), _fmt(row["k_z"]), row["overhead_bits"],
                    row["m"], _fmt(row["power_scale"]),
                ])
            agg = aggregate_rows(rows)
            agg["snr_db"] = float(snr_db)
            aggregates.append(agg)
        psnrs = [a["psnr_db_mean"] for a in aggregates]
        monotone = all(b >= a for a, b in zip(psnrs, psnrs[1:]))
        if not monotone:
            log.warning("mean PSNR is not non-decreasing in SNR: %s", psnrs)
        summary["aggregates"] = aggregates
        summary["psnr_monotone_in_snr"] = monotone
        dat_rows = [
            (a["snr_db"], a["psnr_db_mean"], a["psnr_db_se"],
             a["ms_ssim_mean"], a["ms_ssim_se"], a["cbr_mean"])
            for a in aggregates
        ]
        dat_header = "# snr_db  psnr_mean  psnr_se  msssim_mean  msssim_se  cbr_mean"
    else:
        rows, flags = rd_sweep(
            cfg.lambdas, cfg.train, dataset, cfg.codec,
            channel_fn=channel_fn, eval_snr_db=cfg.eval_snr_db,
            eval_count=cfg.eval_items, init_seed=cfg.seed,
            eval_dataset=eval_items,
        )
        for r in rows:
            item_rows.append([
                _fmt(r["lambda"]), "-", _fmt(cfg.eval_snr_db), _fmt(r["psnr_db"]),
                _fmt(r["ms_ssim"]), _fmt(r["mse"]), _fmt(r["cbr"]), "-", "-", "-", "-", "-",
            ])
        summary["rows"] = rows
        summary["flags"] = flags
        dat_rows = [(r["cbr"], r["psnr_db"], r["ms_ssim"], r["lambda"]) for r in rows]
        dat_header = "# cbr  psnr_db  ms_ssim  lambda"

    _write_csv(
        out / "results.csv",
        f"mimojscc {mode} sweep results; columns: {', '.join(_ITEM_COLUMNS)}",
        _ITEM_COLUMNS,
        item_rows,
    )
    _write_json(out / "summary.json", summary)
    with open(out / "sweep.dat", "w", newline="\n") as fh:
        fh.write(dat_header + "\n")
        for row in dat_rows:
            fh.write("  ".join(_fmt(float(v)) for v in row) + "\n")
    return summary


def channel_stats(cfg: ExperimentConfig, out_dir=None, samples: int = 10_000) -> dict:
    """Empirical vec(H) covariance and post-ZF SINR samples, written as CSV."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    channel_fn = make_channel_fn(cfg)
    rng = np.random.default_rng(cfg.seed)
    noise_power = 10.0 ** (-cfg.snr_db[0] / 10.0)

    vecs = []
    sinr_rows = []
    for i in range(samples):
        chan = channel_fn(rng, noise_power)
        # Column-major stacking matches the Kronecker covariance identity.
        vecs.append(chan.h[0].flatten(order="F"))
        if i < 1000:
            report = zf_capacities(chan, cfg.n_s, cfg.codec.cqi_levels)
            for t in range(cfg.n_s):
                sinr_rows.append([
                    i, t, _fmt(float(report.per_stream_sinr[t])),
                    _fmt(float(report.per_stream_capacity[t])),
                    int(report.quantized_cqi[t]),
                ])
    v = np.array(vecs)
    cov = (v.T @ v.conj()) / v.shape[0]  # E[vec(H) vec(H)^H]
    cov_rows = [
        [i, j, _fmt(float(cov[i, j].real)), _fmt(float(cov[i, j].imag))]
        for i in range(cov.shape[0])
        for j in range(cov.shape[1])
    ]
    _write_csv(out / "covariance.csv", "empirical covariance of vec(H), first subcarrier",
               ["row", "col", "re", "im"], cov_rows)
    _write_csv(out / "sinr.csv", "post-ZF effective SINR per realization and stream",
               ["realization", "stream", "sinr", "capacity", "cqi_index"], sinr_rows)
    return {"samples": samples, "cov_shape": list(cov.shape)}

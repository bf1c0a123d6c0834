"""Command-line entry points: train, evaluate, sweep, channel-stats, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec as cd
from . import harness
from .training import gradient_check, tiny_check_setup, train


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment YAML")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = harness.ingest(cfg.dataset, cfg.codec.patch_size)
    channel_fn = harness.make_channel_fn(cfg)
    params0 = cd.ToyCodecParams.init_random(cfg.codec, cfg.seed)
    trained, trace = train(cfg.train, dataset, params0, channel_fn)
    ckpt = out / "model.ckpt"
    cd.save_params(trained, ckpt)
    with open(out / "loss_trace.csv", "w", newline="\n") as fh:
        fh.write("step,k_y_tilde,k_z_tilde,distortion,total\n")
        for i, lb in enumerate(trace):
            fh.write(
                f"{i},{lb.k_y_tilde:.10g},{lb.k_z_tilde:.10g},"
                f"{lb.distortion:.10g},{lb.total:.10g}\n"
            )
    print(f"trained {cfg.train.steps} steps; final loss {trace[-1].total:.6g}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    dataset = harness.ingest(cfg.dataset, cfg.codec.patch_size)
    channel_fn = harness.make_channel_fn(cfg)
    if args.checkpoint:
        params = cd.load_params(args.checkpoint)
    else:
        params = harness.ensure_params(cfg, dataset, channel_fn)
    items = dataset[: cfg.eval_items]
    for si, snr in enumerate(cfg.snr_db):
        stats = harness.evaluate_model(
            params, items, cfg.train, channel_fn, snr, seed=cfg.seed, tag=si,
            count_overhead_in_cbr=cfg.count_overhead_in_cbr,
        )
        print(
            f"SNR {snr:6.2f} dB | PSNR {stats['psnr_db_mean']:7.3f} dB "
            f"(+-{stats['psnr_db_se']:.3f}) | MS-SSIM {stats['ms_ssim_mean']:.4f} "
            f"| CBR {stats['cbr_mean']:.4f}"
        )
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    summary = harness.run_sweep(cfg, args.mode)
    out = Path(cfg.output_dir)
    print(f"{args.mode} sweep written to {out}/results.csv, summary.json, sweep.dat")
    if args.mode == "snr" and not summary.get("psnr_monotone_in_snr", True):
        print("warning: mean PSNR is not monotone in SNR", file=sys.stderr)
    if args.mode == "cbr" and not all(summary.get("flags", {}).values()):
        print("warning: RD ordering violated, see summary.json", file=sys.stderr)
    return 0


def cmd_channel_stats(args) -> int:
    cfg = _load(args)
    info = harness.channel_stats(cfg, samples=args.samples)
    print(
        f"wrote covariance.csv and sinr.csv for {info['samples']} realizations "
        f"to {cfg.output_dir}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for point in range(args.points):
        x, params, chan, cfg, rng = tiny_check_setup(seed=args.seed + point)
        rel, _, _ = gradient_check(x, params, chan, cfg, rng)
        frac = float(np.mean(rel < 1e-3))
        worst = max(worst, float(rel.max()))
        print(
            f"point {point}: {params.size} params, "
            f"{100 * frac:.2f}% under 1e-3, max rel err {rel.max():.3e}"
        )
        if frac < 0.99:
            print("gradcheck FAILED", file=sys.stderr)
            return 1
    print(f"gradcheck passed ({args.points} points, worst rel err {worst:.3e})")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="mimojscc",
        description="Adaptive multi-stream JSCC link simulator over MIMO fading channels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec per the config")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint over the SNR grid")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="codec checkpoint path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="run an SNR or CBR sweep")
    _add_common(p)
    p.add_argument("--mode", choices=("snr", "cbr"), required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("channel-stats", help="dump channel covariance and SINR samples")
    _add_common(p)
    p.add_argument("--samples", type=int, default=10_000)
    p.set_defaults(fn=cmd_channel_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check on the tiny setup")
    p.add_argument("--points", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())

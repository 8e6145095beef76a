"""Command-line interface.

Exit status: 0 on success, 2 for invalid configuration or arguments, 3 for
runtime failures (missing inputs, diverged training, ...).
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import calibration, metrics, noisemodel, storage
from . import config as cfgmod
from .data import SplitSample, as_image, load_samples, make_clean_pairs, make_noisy_samples, save_samples
from .data import split_dataset
from .inference import save_predictions
from .pipeline import compare, predict_image
from .training import load_checkpoint, train

logger = logging.getLogger("splitvae")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
RESOLVED_NAME = "config.resolved.yaml"


class UsageError(Exception):
    """Bad flag values detected after argument parsing (exit status 2)."""


def _write_resolved(out_dir, command, args, extra=None):
    """Record the command, its arguments and seeds beside the outputs."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "arguments": {k: v for k, v in vars(args).items() if k != "func"}}
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, RESOLVED_NAME), "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def _out_dir_of(path):
    """Parent directory of an output file, created if missing."""
    out = os.path.dirname(os.path.abspath(path))
    os.makedirs(out, exist_ok=True)
    return out


def _ids(manifest):
    return [e["id"] for e in manifest["entries"]]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args):
    kinds = args.kind.split("-")
    if len(kinds) != 2:
        raise UsageError(f"--kind must name two structure kinds like 'dots-curves', got {args.kind!r}")
    pairs = make_clean_pairs(kinds[0], kinds[1], args.n, args.size, args.seed, args.density1, args.density2, args.peak)
    samples = [SplitSample(input=a + b, target1=a, target2=b, clean1=a, clean2=b) for a, b in pairs]
    prov = {"kinds": kinds, "n": args.n, "size": args.size, "seed": args.seed, "peak": args.peak,
            "densities": [args.density1, args.density2], "noise": None}
    save_samples(args.out, samples, provenance=prov)
    _write_resolved(args.out, "gen-data", args)


def cmd_add_noise(args):
    if args.gaussian_scale not in cfgmod.GAUSSIAN_SCALES:
        raise UsageError(f"--gaussian-scale must be one of {cfgmod.GAUSSIAN_SCALES}")
    if args.poisson_factor not in cfgmod.POISSON_FACTORS:
        raise UsageError(f"--poisson-factor must be one of {cfgmod.POISSON_FACTORS}")
    samples, manifest = load_samples(args.input)
    if not all(s.has_clean for s in samples):
        raise ValueError(f"{args.input} has no clean channels to add noise to")
    pairs = [(s.clean1, s.clean2) for s in samples]
    noisy, ref_std = make_noisy_samples(pairs, args.gaussian_scale, args.poisson_factor, args.seed)
    prov = dict(manifest.get("provenance", {}))
    prov["noise"] = {
        "gaussian_scale": args.gaussian_scale,
        "poisson_factor": args.poisson_factor,
        "seed": args.seed,
        "reference_std": ref_std,
        "source": os.path.abspath(args.input),
        "order": "poisson_then_gaussian",
    }
    save_samples(args.out, noisy, provenance=prov, ids=_ids(manifest))
    _write_resolved(args.out, "add-noise", args, {"reference_std": ref_std})


def cmd_fit_nm(args):
    samples, manifest = load_samples(args.data)
    ch = args.channel
    if args.denoised:
        records, _ = storage.read_dataset(args.denoised)
        by_id = {r["id"]: r["images"] for r in records}
        refs = []
        for sid in _ids(manifest):
            imgs = by_id.get(sid)
            if imgs is None:
                raise ValueError(f"{args.denoised} has no entry for sample {sid}")
            ref = imgs.get(f"pred{ch}", imgs.get(f"denoised{ch}"))
            if ref is None:
                raise ValueError(f"{args.denoised}: entry {sid} lacks pred{ch}/denoised{ch}")
            refs.append(ref)
    else:
        refs = [getattr(s, f"clean{ch}") for s in samples]
        if any(r is None for r in refs):
            raise ValueError(f"{args.data} has no clean channel {ch}; pass --denoised for a bootstrap fit")
    pairs = [(r, getattr(s, f"target{ch}")) for r, s in zip(refs, samples)]
    if args.type == "gmm":
        model = noisemodel.fit_gmm(
            pairs, args.components, args.degree, args.iterations, args.batch_pixels, args.seed
        )
    else:
        model = noisemodel.fit_histogram(pairs, bins=args.bins)
    out_dir = _out_dir_of(args.out)
    noisemodel.save(model, args.out)
    _write_resolved(out_dir, "fit-nm", args)


def cmd_train(args):
    cfg = cfgmod.load(args.config)
    samples, manifest = load_samples(args.data)
    split = split_dataset(samples, cfg.data.split_seed)
    nms = None
    if cfg.model.likelihood_head == "noise_model":
        if not (args.nm1 and args.nm2):
            raise UsageError("the noise_model likelihood head needs --nm1 and --nm2")
        nms = (noisemodel.load(args.nm1), noisemodel.load(args.nm2))
    os.makedirs(args.out, exist_ok=True)
    cfgmod.save(cfg, os.path.join(args.out, RESOLVED_NAME))
    ids = _ids(manifest)
    with open(os.path.join(args.out, "split.json"), "w") as fh:
        json.dump({k: [ids[i] for i in v] for k, v in split.indices.items()} | {"seed": split.seed}, fh, indent=2)
    resume = os.path.join(args.out, "last.ckpt") if args.resume else None
    if resume and not os.path.exists(resume):
        raise FileNotFoundError(f"--resume given but {resume} does not exist")
    result = train(cfg.model, cfg.training, split, noise_models=nms, out_dir=args.out, resume_from=resume)
    logger.info("best epoch %d, val loss %.6g", result.best_epoch, result.best_val_loss)


def cmd_predict(args):
    model, meta, _, _ = load_checkpoint(args.checkpoint)
    samples, manifest = load_samples(args.data)
    ids = _ids(manifest)
    if args.split_file:
        with open(args.split_file) as fh:
            wanted = set(json.load(fh)[args.split])
        keep = [i for i, sid in enumerate(ids) if sid in wanted]
        ids, samples = [ids[i] for i in keep], [samples[i] for i in keep]
    ev = cfgmod.EvalConfig(k=args.k, tile=args.tile, pad=args.pad, seed=args.seed)
    preds, stds = [], []
    for s in samples:
        pred, std = predict_image(model, s.input, ev, mode=args.mode, return_std=True)
        preds.append(pred)
        stds.append(std)
    prov = {
        "checkpoint": os.path.abspath(args.checkpoint),
        "checkpoint_sha256": storage.file_digest(args.checkpoint),
        "mode": args.mode,
        "k": args.k,
        "seed": args.seed,
        "tile": args.tile,
        "pad": args.pad,
        "source": os.path.abspath(args.data),
    }
    save_predictions(args.out, ids, preds, provenance=prov, stds=stds)
    _write_resolved(args.out, "predict", args)


def _load_pred_gt(pred_dir, gt_dir, need_std=False):
    """Align prediction and ground-truth directories by sample id."""
    pred_records, _ = storage.read_dataset(pred_dir)
    gt_records, _ = storage.read_dataset(gt_dir)
    gt_by_id = {r["id"]: r["images"] for r in gt_records}
    out = []
    for rec in pred_records:
        if rec["id"] not in gt_by_id:
            raise ValueError(f"{gt_dir} has no ground truth for sample {rec['id']}")
        p, g = rec["images"], gt_by_id[rec["id"]]
        row = {"id": rec["id"]}
        for ch in (1, 2):
            row[f"pred{ch}"] = p.get(f"pred{ch}", p.get(f"clean{ch}"))
            row[f"gt{ch}"] = g.get(f"clean{ch}", g.get(f"target{ch}", g.get(f"pred{ch}")))
            if row[f"pred{ch}"] is None or row[f"gt{ch}"] is None:
                raise ValueError(f"sample {rec['id']}: missing channel {ch} in predictions or ground truth")
            if need_std:
                row[f"std{ch}"] = p.get(f"std{ch}")
                if row[f"std{ch}"] is None:
                    raise ValueError(f"{pred_dir}: sample {rec['id']} has no std{ch}; predict with --mode mmse")
        out.append(row)
    if not out:
        raise ValueError(f"{pred_dir} contains no predictions")
    return out


def _channel_stacks(rows, key):
    return [np.stack([r[f"{key}{ch}"] for r in rows]) for ch in (1, 2)]


def cmd_calibrate(args):
    rows = _load_pred_gt(args.pred, args.gt, need_std=True)
    state = calibration.calibrate(
        _channel_stacks(rows, "std"), _channel_stacks(rows, "pred"), _channel_stacks(rows, "gt"),
        bins=args.bins, binning=args.binning,
    )
    out_dir = _out_dir_of(args.out)
    calibration.save_calibration(state, args.out)
    _write_resolved(out_dir, "calibrate", args)


def cmd_calib_curve(args):
    rows = _load_pred_gt(args.pred, args.gt, need_std=True)
    state = calibration.load_calibration(args.calib)
    bins = args.bins or state.bins
    binning = args.binning or state.binning
    sig, pred, gt = _channel_stacks(rows, "std"), _channel_stacks(rows, "pred"), _channel_stacks(rows, "gt")
    curves = {
        ch: calibration.calibration_curve(sig[ch - 1], pred[ch - 1], gt[ch - 1], state.scalars[ch - 1], bins, binning)
        for ch in (1, 2)
    }
    out_dir = _out_dir_of(args.out)
    calibration.write_curve_csv(curves, args.out)
    _write_resolved(out_dir, "calib-curve", args)


def cmd_eval(args):
    rows = _load_pred_gt(args.pred, args.gt)
    out_dir = _out_dir_of(args.out)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "channel", "ri_psnr", "ms_ssim"])
        for r in rows:
            for ch in (1, 2):
                p, g = as_image(r[f"pred{ch}"]), as_image(r[f"gt{ch}"])
                writer.writerow([r["id"], ch, repr(metrics.ri_psnr(p, g)), repr(metrics.ms_ssim(p, g))])
    _write_resolved(out_dir, "eval", args)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_compare(args):
    cfg = cfgmod.load(args.config)
    for g in args.gaussian_scales or []:
        if g not in cfgmod.GAUSSIAN_SCALES:
            raise UsageError(f"gaussian scale {g} not in {cfgmod.GAUSSIAN_SCALES}")
    for p in args.poisson_factors or []:
        if p not in cfgmod.POISSON_FACTORS:
            raise UsageError(f"poisson factor {p} not in {cfgmod.POISSON_FACTORS}")
    rows = compare(cfg, args.out, args.gaussian_scales, args.poisson_factors, args.seeds)
    for r in rows:
        logger.info("%-24s g=%-4s p=%-6s seed=%-3s ri_psnr %.2f / %.2f",
                    r["method"], r["gaussian_scale"], r["poisson_factor"], r["seed"],
                    r["ri_psnr_ch1"], r["ri_psnr_ch2"])


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="splitvae", description="Two-channel image splitting with a hierarchical VAE.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate clean synthetic channel pairs")
    p.add_argument("--kind", default="dots-curves", help="two structure kinds joined by '-' (dots, curves, mesh)")
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--peak", type=float, default=20000.0)
    p.add_argument("--density1", type=float, default=0.05)
    p.add_argument("--density2", type=float, default=0.08)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("add-noise", help="inject Poisson and Gaussian noise per channel")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--gaussian-scale", type=float, default=1.0)
    p.add_argument("--poisson-factor", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_add_noise)

    p = sub.add_parser("fit-nm", help="fit a pixel noise model for one channel")
    p.add_argument("--data", required=True, help="noisy dataset with clean channels")
    p.add_argument("--channel", type=int, choices=(1, 2), required=True)
    p.add_argument("--denoised", help="prediction directory used instead of clean channels (bootstrap)")
    p.add_argument("--type", choices=("gmm", "histogram"), default="gmm")
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--batch-pixels", type=int, default=20000)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_nm)

    p = sub.add_parser("train", help="train a splitting model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--nm1")
    p.add_argument("--nm2")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict both channels of every image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split-file", help="split.json written by train")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--mode", choices=("mmse", "posterior_mean"), default="mmse")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--pad", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", help="fit per-channel uncertainty scalars")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--binning", choices=("equal_count", "equal_width"), default="equal_count")
    p.add_argument("--out", required=True, help="calib.json path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("calib-curve", help="write RMV vs RMSE plot data")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--bins", type=int)
    p.add_argument("--binning", choices=("equal_count", "equal_width"))
    p.add_argument("--out", required=True, help="curve.csv path")
    p.set_defaults(func=cmd_calib_curve)

    p = sub.add_parser("eval", help="RI-PSNR and MS-SSIM per sample and channel")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="metrics.csv path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and evaluate all methods over noise levels")
    p.add_argument("--config", required=True)
    p.add_argument("--gaussian-scales", type=_float_list)
    p.add_argument("--poisson-factors", type=_float_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"splitvae {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit status
        print(f"splitvae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            logger.exception("traceback")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

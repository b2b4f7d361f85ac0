"""
Command line entry point: ``python -m mcseg <subcommand> ...``.

Subcommands
    train           run one experiment from a YAML config
    infer           sliding-window segmentation of one volume container
    evaluate        metrics for a predicted mask against ground truth, as CSV
    synth-data      write a seeded synthetic dataset plus split manifest
    uncertainty-map MC-dropout entropy (or decoder discrepancy) of one volume
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import datapipe, harness, inference, metrics, uncertainty
from .netarch import forward_with_dropout, load_checkpoint
from .volumes import (
    Volume, read_mask, read_volume, write_array, write_mask, write_probability,
)


def _triple(text):
    parts = [int(p) for p in text.replace(",", " ").split()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 integers, got {text!r}")
    return tuple(parts)


def _window_for(payload, requested):
    if requested is not None:
        return requested
    cfg = payload.get("train_config")
    if cfg is None:
        raise SystemExit("checkpoint has no training config; pass --window")
    return tuple(cfg["patch"]["shape"])


def _prepared(path, normalize):
    vol = read_volume(path)
    data = datapipe.normalize_intensity(vol.data) if normalize else vol.data
    return Volume(data, vol.spacing)


def cmd_train(args):
    cfg = harness.load_config(args.config, preset=args.preset)
    overrides = {k: v for k, v in (("data_dir", args.data_dir), ("out_dir", args.out_dir),
                                   ("seed", args.seed)) if v is not None}
    if overrides:
        cfg = harness.preset_config(args.preset, **{**cfg.to_dict(), **overrides})
    if args.variant:
        cfg = harness.ablation_variant(cfg, args.variant)
    exp_log, _ = harness.run_experiment(cfg, resume_from=args.resume, progress=args.progress)
    final = exp_log.final_eval()
    for output, row in final.items():
        print(f"{output}: dice {row['dice']:.2f} jaccard {row['jaccard']:.2f} "
              f"hd95 {row['hd95']:.2f} asd {row['asd']:.2f}")
    return 0


def cmd_infer(args):
    net, payload = load_checkpoint(args.checkpoint)
    vol = _prepared(args.input, not args.no_normalize)
    window = _window_for(payload, args.window)
    stride = args.stride or tuple(max(1, w // 2) for w in window)
    plan = inference.plan_windows(vol.shape, window, stride)
    prob, mask = inference.segment_volume(net, vol, plan, threshold=args.threshold)
    write_probability(prob, args.prob_out, vol.spacing)
    write_mask(mask, args.mask_out)
    print(f"{len(plan)} windows, {int(mask.data.sum())} foreground voxels")
    return 0


def cmd_evaluate(args):
    pred = read_mask(args.pred)
    gt = read_mask(args.gt)
    if pred.shape != gt.shape:
        raise SystemExit(f"shape mismatch: {pred.shape} vs {gt.shape}")
    report = metrics.evaluate(pred.data, gt.data, gt.spacing if args.mm else None)
    if args.header:
        print(metrics.csv_header(report))
    print(metrics.csv_row(args.id or Path(args.pred).stem, report))
    return 0


def cmd_synth_data(args):
    spec = datapipe.desk_synthetic_spec(args.seed, args.count, args.shape)
    split = datapipe.write_synthetic_dataset(spec, args.out, n_validation=args.validation,
                                             labeled_ratio=args.labeled_ratio)
    print(f"wrote {spec.count} cases to {args.out}: {len(split.labeled)} labeled, "
          f"{len(split.unlabeled)} unlabeled, {len(split.validation)} validation")
    return 0


def cmd_uncertainty_map(args):
    net, payload = load_checkpoint(args.checkpoint)
    vol = _prepared(args.input, not args.no_normalize)
    window = _window_for(payload, args.window)
    stride = args.stride or tuple(max(1, w // 2) for w in window)
    plan = inference.plan_windows(vol.shape, window, stride)
    if args.method == "decoder_discrepancy":
        pa, pb = inference.predict_windows(net, vol, plan)
        umap = uncertainty.decoder_discrepancy(pa, pb)
    else:
        def predict(arr, seed):
            return inference.predict_windows(lambda x: forward_with_dropout(net, x, seed), arr, plan)
        umap = uncertainty.mc_dropout_uncertainty(net, vol, args.passes, args.seed, predict=predict)
    write_array(umap.data.astype(np.float32), vol.spacing, args.out)
    s = umap.summary(args.threshold)
    print(f"mean {s['mean']:.6f}")
    print(f"max {s['max']:.6f}")
    print(f"fraction_above {s['fraction_above']:.6f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mcseg", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True, help="YAML file with TrainConfig keys")
    t.add_argument("--preset", choices=sorted(harness.PRESETS), default="desk")
    t.add_argument("--variant", help="ablation cell such as V2d+CPL or V2+none")
    t.add_argument("--data-dir")
    t.add_argument("--out-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="final.pt of an interrupted run")
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment one volume")
    i.add_argument("checkpoint")
    i.add_argument("input", help="volume container header")
    i.add_argument("prob_out", help="output probability map header")
    i.add_argument("mask_out", help="output mask header")
    i.add_argument("--window", type=_triple, help="defaults to the training patch shape")
    i.add_argument("--stride", type=_triple, help="defaults to half the window")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--no-normalize", action="store_true",
                   help="input is already zero-mean / unit-variance")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="compare a predicted mask with ground truth")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--id")
    e.add_argument("--header", action="store_true", help="print the CSV header first")
    e.add_argument("--mm", action="store_true", help="also report distances in mm")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth-data", help="write a synthetic dataset")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=40)
    s.add_argument("--shape", type=_triple, default=datapipe.DESK_SHAPE)
    s.add_argument("--validation", type=int, default=8)
    s.add_argument("--labeled-ratio", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    u = sub.add_parser("uncertainty-map", help="voxelwise epistemic uncertainty")
    u.add_argument("checkpoint")
    u.add_argument("input")
    u.add_argument("out", help="output container header")
    u.add_argument("--method", choices=uncertainty.METHODS, default="mc_dropout")
    u.add_argument("--passes", type=int, default=8)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--threshold", type=float, default=0.5,
                   help="for the fraction_above statistic")
    u.add_argument("--window", type=_triple)
    u.add_argument("--stride", type=_triple)
    u.add_argument("--no-normalize", action="store_true")
    u.set_defaults(func=cmd_uncertainty_map)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

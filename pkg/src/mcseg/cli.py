"""Command-line entry point.

Subcommands: gen (synthesize a dataset), gtgen (derive ground-truth maps),
train, eval, infer, params (parameter count of an architecture), report
(pretty-print evaluation results). Results go to files or stdout; diagnostics
go to stderr; the exit code is 0 iff no error. ``MCSEG_THREADS`` bounds the
compiled kernels' thread count, ``MCSEG_BACKEND`` picks the kernel backend.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np
from PIL import Image

from mcseg import dataio, metrics as mt
from mcseg.groundtruth import generate_ground_truth
from mcseg.losses import head_kind
from mcseg.networks import (PRESET_NAMES, build_multicameral,
                            count_parameters, resolve_arch)
from mcseg.scenegen import SceneConfig, corpus_seed, generate_scene
from mcseg.trainer import (TrainConfig, evaluate, infer, load_checkpoint,
                           save_checkpoint, train)


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError("size must look like 640x512")


def _parse_range(text):
    try:
        lo, hi = text.split("..")
        return int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError("range must look like 15..25")


def cmd_gen(args):
    w, h = args.size
    cfg = SceneConfig(width=w, height=h, instance_count=args.instances,
                      plus_mode=args.plus, rng_seed=args.seed)
    cfg.validate()
    os.makedirs(args.out, exist_ok=True)
    ids = []
    for i in range(args.count):
        scene = generate_scene(replace(cfg, rng_seed=corpus_seed(args.seed, i)))
        sid = dataio.sample_id(i)
        dataio.write_sample(args.out, sid, scene)
        ids.append(sid)
    echo = {"width": w, "height": h, "count": args.count,
            "instances": list(args.instances), "seed": args.seed,
            "plus": args.plus}
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump({"schema_version": dataio.SCHEMA_VERSION, "ids": ids,
                   "config": echo}, fh, indent=1, sort_keys=True)
    print("wrote %d scenes to %s" % (args.count, args.out))
    return 0


def cmd_gtgen(args):
    manifest = dataio.read_manifest(args.data)
    for sid in manifest["ids"]:
        sample = dataio.read_sample(args.data, sid)
        gt = generate_ground_truth(sample.instances, sample.depth,
                                   window_radius=args.window,
                                   threshold=args.threshold,
                                   pseudo=args.pseudo_depth)
        dataio.write_ground_truth(args.data, sid, gt)
    print("wrote ground truth for %d samples in %s"
          % (len(manifest["ids"]), args.data))
    return 0


def cmd_train(args):
    arch_cfg, filters = resolve_arch(args.arch)
    data = dataio.read_dataset(args.data)
    samples = [s for _, s in data]
    cfg = TrainConfig(arch=arch_cfg, filters=filters, crop_size=args.crop,
                      batch_size=args.batch, epochs=args.epochs, lr=args.lr,
                      weight_decay=args.weight_decay, seed=args.seed,
                      pseudo_depth=args.pseudo_depth, plus_mode=args.plus,
                      gt_window=args.window, gt_threshold=args.threshold)
    if args.no_offline_aug:
        cfg.offline_flips = False
    graph, state, log = train(cfg, samples, log_path=args.loss_log)
    save_checkpoint(args.out, graph, state, epoch=cfg.epochs)
    if log:
        print("trained %d iterations; final total loss %.6f"
              % (len(log), log[-1]["total"]))
    print("checkpoint written to %s" % args.out)
    return 0


def cmd_eval(args):
    graph, _, _ = load_checkpoint(args.ckpt)
    data = dataio.read_dataset(args.data)
    tau = args.tau
    if args.tau_auto:
        h, w = data[0][1].instances.shape
        tau = mt.tolerance(w, h)
    eval_cfg = mt.EvalConfig(tau=tau)
    results = evaluate(graph, data, eval_cfg, gt_window=args.window,
                       gt_threshold=args.threshold,
                       pseudo_depth=args.pseudo_depth)
    os.makedirs(args.out, exist_ok=True)
    summary = {"tau": tau, "heads": {}}
    for name, (curve, summ) in results.items():
        mt.write_curve(os.path.join(args.out, "curve_%s.txt" % name), curve)
        summary["heads"][name] = summ
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    _print_summary(summary)
    return 0


def _print_summary(summary):
    print("tau = %.4f" % summary["tau"])
    print("%-20s %8s %8s %8s" % ("head", "ODS", "AP", "AP60"))
    for name in sorted(summary["heads"]):
        s = summary["heads"][name]
        print("%-20s %8.3f %8.3f %8.3f" % (name, s["ods"], s["ap"], s["ap60"]))


OVERLAY_COLORS = {"boundary": (40, 60, 255), "occlusion": (255, 150, 30)}


def cmd_infer(args):
    graph, _, _ = load_checkpoint(args.ckpt)
    rgb = np.asarray(Image.open(args.image).convert("RGB"))
    maps = infer(graph, rgb)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    for name, prob in maps.items():
        gray = np.clip(np.rint(prob * 255), 0, 255).astype(np.uint8)
        Image.fromarray(gray).save(os.path.join(args.out,
                                                "%s_%s.png" % (stem, name)))
    overlay = rgb.copy()
    seg_only = all(head_kind(n) == "segmentation" for n in maps)
    for name, prob in maps.items():
        kind = head_kind(name)
        mask = prob >= 0.5
        if kind in OVERLAY_COLORS:
            overlay[mask] = OVERLAY_COLORS[kind]
        elif seg_only and name == "segmentation":
            overlay[mask] = (0.5 * overlay[mask]
                             + 0.5 * np.array([60, 220, 60])).astype(np.uint8)
    Image.fromarray(overlay).save(os.path.join(args.out, stem + "_overlay.png"))
    print("wrote %d probability maps and an overlay to %s"
          % (len(maps), args.out))
    return 0


def cmd_params(args):
    cfg, filters = resolve_arch(args.arch)
    graph = build_multicameral(cfg, filters)
    print("%s: %s parameters" % (args.arch, format(count_parameters(graph), ",")))
    return 0


def cmd_report(args):
    path = os.path.join(args.eval, "summary.json")
    with open(path) as fh:
        summary = json.load(fh)
    _print_summary(summary)
    for name in sorted(summary["heads"]):
        curve_path = os.path.join(args.eval, "curve_%s.txt" % name)
        if not os.path.exists(curve_path):
            continue
        rows = np.loadtxt(curve_path, comments="#", ndmin=2)
        print("\nPR table (%s):" % name)
        print("%8s %10s %10s %10s" % ("thresh", "precision", "recall", "F"))
        for t, p, r, f in rows[:: max(1, len(rows) // 20)]:
            print("%8.2f %10.4f %10.4f %10.4f" % (t, p, r, f))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="mcseg",
        description="Occlusion-aware instance segmentation toolkit: synthetic "
                    "dense-pile data, multicameral networks, training and "
                    "boundary-detection metrics.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a dense-pile dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=_parse_size, default=(640, 512),
                   help="image size WxH (default 640x512)")
    g.add_argument("--instances", type=_parse_range, default=(15, 25),
                   help="instance count range LO..HI (default 15..25)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--plus", action="store_true",
                   help="enable the extended photometric augmentation mode")
    g.set_defaults(func=cmd_gen)

    g = sub.add_parser("gtgen", help="derive B/O/Y ground-truth maps")
    g.add_argument("--data", required=True)
    g.add_argument("--window", type=int, default=2,
                   help="occlusion window radius (default 2)")
    g.add_argument("--threshold", type=float, default=0.95,
                   help="unoccluded perimeter ratio threshold (default .95)")
    g.add_argument("--pseudo-depth", action="store_true",
                   help="use per-instance depth ranks instead of metric depth")
    g.set_defaults(func=cmd_gtgen)

    g = sub.add_parser("train", help="train an architecture on a dataset")
    g.add_argument("--data", required=True)
    g.add_argument("--arch", default="mc6d",
                   help="preset name (%s) or JSON config path"
                        % ", ".join(PRESET_NAMES))
    g.add_argument("--out", required=True, help="checkpoint output path")
    g.add_argument("--epochs", type=int, default=1)
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--crop", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--weight-decay", type=float, default=1e-4)
    g.add_argument("--window", type=int, default=2)
    g.add_argument("--threshold", type=float, default=0.95)
    g.add_argument("--pseudo-depth", action="store_true")
    g.add_argument("--plus", action="store_true")
    g.add_argument("--no-offline-aug", action="store_true")
    g.add_argument("--loss-log", default=None, help="CSV loss log path")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    g.add_argument("--data", required=True)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--out", required=True, help="report output directory")
    g.add_argument("--tau", type=float, default=0.0,
                   help="matching tolerance in pixels (default 0: exact)")
    g.add_argument("--tau-auto", action="store_true",
                   help="use 0.0075*sqrt(W^2+H^2) instead of --tau")
    g.add_argument("--window", type=int, default=2)
    g.add_argument("--threshold", type=float, default=0.95)
    g.add_argument("--pseudo-depth", action="store_true")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("infer", help="run a checkpoint on one image")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_infer)

    g = sub.add_parser("params", help="print an architecture's parameter count")
    g.add_argument("--arch", required=True)
    g.set_defaults(func=cmd_params)

    g = sub.add_parser("report", help="render tables from an eval directory")
    g.add_argument("--eval", required=True)
    g.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

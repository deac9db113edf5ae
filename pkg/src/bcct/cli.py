"""Command-line entry point.

Subcommands: gen-data, pretrain, train-bc, train, eval, sweep, render,
selftest. Every artifact-writing run records a manifest with the resolved
config, seed, and a content hash of its inputs; rerunning into the same
--out switches to a suffixed sibling directory instead of overwriting.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .evalkit import Box, evaluate, sweep_table, sweep_threshold
from .nets import BCNet, CTNet
from .pnm import write_pgm, write_ppm
from .saliency import gradient_map_to_pgm_bytes, mask_for_batch, mask_to_pgm_bytes, gradient_map
from .synthdata import DatasetError, generate_dataset, load_dataset
from .trainer import eval_view, pretrain_backbone, train_bc, train_bcct


class CliError(ValueError):
    """User-facing validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _build_parser():
    p = _Parser(prog="bcct", description=__doc__,
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"bcct {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp, data=True, out=True, config=True):
        sp.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
        if config:
            sp.add_argument("--config", default=None, help="JSON config file")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=1,
                        help="worker threads (1 = deterministic single-thread mode)")
        sp.add_argument("--precision", choices=("f32", "f64"), default=None,
                        help="numeric precision (overrides config)")

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sp.add_argument("--seed", type=int, default=1, help="generator seed")
    sp.add_argument("--classes", type=int, default=8, help="number of classes")
    sp.add_argument("--train", type=int, default=2000, help="training images")
    sp.add_argument("--test", type=int, default=400, help="test images")
    sp.add_argument("--background", type=int, default=60, help="background images")
    sp.add_argument("--size", default="64x64", help="image size HxW")
    sp.add_argument("--out", required=True, help="dataset directory")

    sp = sub.add_parser("pretrain", help="pretrain the backbone on shape classification",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(sp)

    sp = sub.add_parser("train-bc", help="train the background-vs-target head",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(sp)
    sp.add_argument("--backbone", required=True, help="backbone checkpoint from pretrain")

    sp = sub.add_parser("train", help="joint BC-CT training",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(sp)
    sp.add_argument("--backbone", required=True, help="backbone checkpoint from pretrain")
    sp.add_argument("--bc", required=True, help="BC checkpoint from train-bc")
    sp.add_argument("--lambda-mask", type=float, default=None,
                    help="mask loss weight (overrides config; 0 = plain-CAM baseline)")

    sp = sub.add_parser("eval", help="localization evaluation on the test split",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="CT checkpoint")
    sp.add_argument("--bc-checkpoint", default=None, help="BC checkpoint for the BC* metric")
    sp.add_argument("--tau", type=float, default=None,
                    help="CAM binarization threshold (overrides config; default: config delta)")

    sp = sub.add_parser("sweep", help="threshold sweep over delta values",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="CT checkpoint")
    sp.add_argument("--deltas", default="0.7,0.75,0.8,0.85,0.9",
                    help="comma-separated thresholds")

    sp = sub.add_parser("render", help="write gradient-map/mask/overlay images",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="CT checkpoint")
    sp.add_argument("--bc-checkpoint", default=None, help="BC checkpoint for gradient maps")
    sp.add_argument("--count", type=int, default=8, help="number of test images to render")
    sp.add_argument("--tau", type=float, default=None, help="CAM threshold for predicted boxes")

    sp = sub.add_parser("selftest", help="run the fast invariant suite",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sp.add_argument("--seed", type=int, default=0, help="seed for the randomized checks")
    return p


# ---------------------------------------------------------------------------
# run manifests


def _resolve_out_dir(path):
    """Pick a directory that does not already hold a run manifest."""
    candidate = path
    k = 2
    while os.path.exists(os.path.join(candidate, "run_manifest.json")):
        candidate = f"{path}-{k}"
        k += 1
    os.makedirs(candidate, exist_ok=True)
    return candidate


def _content_hash(paths):
    h = hashlib.sha1()
    for p in sorted(paths):
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as f:
            while True:
                chunk = f.read(1 << 20)
                if not chunk:
                    break
                h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, cfg, seed, inputs, outputs, t0, threads=1):
    manifest = {
        "command": command,
        "config": cfg.to_dict() if isinstance(cfg, TrainConfig) else cfg,
        "seed": seed,
        "input_hash": _content_hash([p for p in inputs if p and os.path.exists(p)]),
        "tool_version": __version__,
        "threads": threads,
        "mode": "single-thread",
        "wall_ms": int((time.perf_counter() - t0) * 1000),
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path


def _resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    doc = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "precision", None) is not None:
        doc["precision"] = args.precision
    if getattr(args, "lambda_mask", None) is not None:
        doc["lambda_mask"] = args.lambda_mask
    if getattr(args, "tau", None) is not None:
        doc["eval_tau"] = args.tau
    from .config import config_from_dict
    return config_from_dict(doc)


def _load_bundle(data_dir, splits=("train", "test", "background")):
    out = {}
    for split in splits:
        manifest = load_dataset(os.path.join(data_dir, f"{split}.jsonl"))
        out[split] = manifest
    meta = out[next(iter(out))].meta
    if not meta:
        raise CliError(f"{data_dir}: missing meta.json (generate the dataset with gen-data)")
    stats = (np.asarray(meta["channel_mean"]), np.asarray(meta["channel_std"]))
    return out, meta, stats


def _note_threads(args):
    if getattr(args, "threads", 1) and args.threads > 1:
        print("note: parallel mode is not built; running deterministic single-thread mode")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args):
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise CliError(f"--size must look like 64x64, got '{args.size}'")
    t0 = time.perf_counter()
    out_dir = _resolve_out_dir(args.out)
    meta = generate_dataset(out_dir, seed=args.seed, n_classes=args.classes,
                            n_train=args.train, n_test=args.test,
                            n_background=args.background, h=h, w=w)
    outputs = [os.path.join(out_dir, f"{s}.jsonl") for s in ("train", "test", "background")]
    outputs.append(os.path.join(out_dir, "meta.json"))
    _write_manifest(out_dir, "gen-data", {"classes": args.classes, "train": args.train,
                                          "test": args.test, "background": args.background,
                                          "size": f"{h}x{w}"},
                    args.seed, [], outputs, t0)
    print(f"dataset written to {out_dir} "
          f"({meta['counts']['train']}/{meta['counts']['test']}/{meta['counts']['background']} images)")
    return 0


def _cmd_pretrain(args):
    cfg = _resolve_config(args)
    _note_threads(args)
    t0 = time.perf_counter()
    bundle, meta, stats = _load_bundle(args.data)
    train_set = bundle["train"].load_all()
    test_set = bundle["test"].load_all()
    arrays, report = pretrain_backbone(cfg, train_set, test_set, stats, meta["n_classes"])
    out_dir = _resolve_out_dir(args.out)
    ckpt = os.path.join(out_dir, "backbone.ckpt")
    save_checkpoint(ckpt, arrays)
    rpt = os.path.join(out_dir, "pretrain_report.json")
    with open(rpt, "w") as f:
        json.dump(report, f, indent=2)
    _write_manifest(out_dir, "pretrain", cfg, cfg.seed,
                    [args.config, os.path.join(args.data, "train.jsonl")],
                    [ckpt, rpt], t0, args.threads)
    print(f"pretrain done: train acc {report['train_acc']:.3f}, test acc {report['test_acc']:.3f}")
    print(f"backbone checkpoint: {ckpt}")
    return 0


def _cmd_train_bc(args):
    cfg = _resolve_config(args)
    _note_threads(args)
    t0 = time.perf_counter()
    bundle, meta, stats = _load_bundle(args.data)
    train_set = bundle["train"].load_all()
    test_set = bundle["test"].load_all()
    background = bundle["background"].load_all()
    backbone_arrays = load_checkpoint(args.backbone)
    arrays, report = train_bc(cfg, train_set, background, backbone_arrays, stats, test_set)
    out_dir = _resolve_out_dir(args.out)
    ckpt = os.path.join(out_dir, "bc.ckpt")
    save_checkpoint(ckpt, arrays)
    rpt = os.path.join(out_dir, "bc_report.json")
    with open(rpt, "w") as f:
        json.dump(report, f, indent=2)
    _write_manifest(out_dir, "train-bc", cfg, cfg.seed,
                    [args.config, args.backbone, os.path.join(args.data, "train.jsonl")],
                    [ckpt, rpt], t0, args.threads)
    print(f"train-bc done: held-out binary accuracy {report.get('holdout_acc', float('nan')):.3f}")
    print(f"BC checkpoint: {ckpt}")
    return 0


def _cmd_train(args):
    cfg = _resolve_config(args)
    _note_threads(args)
    t0 = time.perf_counter()
    bundle, meta, stats = _load_bundle(args.data)
    train_set = bundle["train"].load_all()
    background = bundle["background"].load_all()
    backbone_arrays = load_checkpoint(args.backbone)
    bc_arrays = load_checkpoint(args.bc)
    arrays, log_rows = train_bcct(cfg, train_set, background, backbone_arrays,
                                  bc_arrays, meta["n_classes"], stats)
    out_dir = _resolve_out_dir(args.out)
    ckpt = os.path.join(out_dir, "ct.ckpt")
    save_checkpoint(ckpt, arrays)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w") as f:
        for row in log_rows:
            f.write(json.dumps(row) + "\n")
    _write_manifest(out_dir, "train", cfg, cfg.seed,
                    [args.config, args.backbone, args.bc,
                     os.path.join(args.data, "train.jsonl")],
                    [ckpt, log_path], t0, args.threads)
    last = log_rows[-1]
    print(f"train done: cls {last['cls_loss']:.4f}, mask {last['mask_loss']:.4f}, "
          f"total {last['total_loss']:.4f}")
    print(f"CT checkpoint: {ckpt}")
    return 0


def _cmd_eval(args):
    cfg = _resolve_config(args)
    _note_threads(args)
    t0 = time.perf_counter()
    bundle, meta, stats = _load_bundle(args.data, splits=("test",))
    test_set = bundle["test"].load_all()
    ct_arrays = load_checkpoint(args.checkpoint)
    bc_arrays = load_checkpoint(args.bc_checkpoint) if args.bc_checkpoint else None
    records, metrics = evaluate(ct_arrays, test_set, stats, cfg.tau,
                                bc_arrays=bc_arrays, batch_size=cfg.batch_size,
                                iou_geq=cfg.iou_geq, dtype=cfg.dtype,
                                grad_reduce=cfg.grad_reduce,
                                grad_blur_radius=cfg.grad_blur_radius,
                                grad_normalize=cfg.grad_normalize)
    metrics["seed"] = cfg.seed
    out_dir = _resolve_out_dir(args.out)
    metrics_path = os.path.join(out_dir, "metrics.json")
    with open(metrics_path, "w") as f:
        json.dump(metrics, f, indent=2)
    records_path = os.path.join(out_dir, "records.jsonl")
    with open(records_path, "w") as f:
        for r in records:
            f.write(json.dumps({
                "image_id": r.image_id, "true_label": r.true_label,
                "top5": r.top5, "boxes": [b.as_tuple() for b in r.boxes],
                "ious": [round(v, 6) for v in r.ious], "gt_box": r.gt_box,
                "top1_correct": r.top1_correct, "top5_correct": r.top5_correct,
            }) + "\n")
    _write_manifest(out_dir, "eval", cfg, cfg.seed,
                    [args.config, args.checkpoint, args.bc_checkpoint,
                     os.path.join(args.data, "test.jsonl")],
                    [metrics_path, records_path], t0, args.threads)
    bc_part = f", BC* err {metrics['bcstar_err']:.2f}%" if metrics["bcstar_err"] is not None else ""
    print(f"eval done: top-1 err {metrics['top1_err']:.2f}%, "
          f"top-5 err {metrics['top5_err']:.2f}%{bc_part} (tau={metrics['tau']})")
    print(f"metrics: {metrics_path}")
    return 0


def _cmd_sweep(args):
    cfg = _resolve_config(args)
    _note_threads(args)
    t0 = time.perf_counter()
    try:
        deltas = [float(v) for v in args.deltas.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--deltas must be comma-separated numbers, got '{args.deltas}'")
    if not deltas:
        raise CliError("--deltas is empty")
    bundle, meta, stats = _load_bundle(args.data, splits=("test",))
    test_set = bundle["test"].load_all()
    ct_arrays = load_checkpoint(args.checkpoint)
    rows = sweep_threshold(ct_arrays, test_set, stats, deltas,
                           batch_size=cfg.batch_size, iou_geq=cfg.iou_geq,
                           dtype=cfg.dtype)
    out_dir = _resolve_out_dir(args.out)
    json_path = os.path.join(out_dir, "sweep.json")
    with open(json_path, "w") as f:
        json.dump(rows, f, indent=2)
    txt_path = os.path.join(out_dir, "sweep.txt")
    table = sweep_table(rows)
    with open(txt_path, "w") as f:
        f.write(table)
    _write_manifest(out_dir, "sweep", cfg, cfg.seed,
                    [args.config, args.checkpoint, os.path.join(args.data, "test.jsonl")],
                    [json_path, txt_path], t0, args.threads)
    print(table, end="")
    print(f"sweep table: {json_path}")
    return 0


def _draw_box(px, box: Box, channel: int):
    """Paint a 1-px box outline into one color plane (0=R, 1=G, 2=B)."""
    x0, y0, x1, y1 = box.as_tuple()
    x1i, y1i = x1 - 1, y1 - 1
    for c in range(3):
        val = 1.0 if c == channel else 0.0
        px[c, y0, x0:x1] = val
        px[c, y1i, x0:x1] = val
        px[c, y0:y1, x0] = val
        px[c, y0:y1, x1i] = val


def _cmd_render(args):
    cfg = _resolve_config(args)
    _note_threads(args)
    t0 = time.perf_counter()
    bundle, meta, stats = _load_bundle(args.data, splits=("test",))
    test = bundle["test"]
    count = min(args.count, len(test))
    if count < 1:
        raise CliError("--count must be >= 1")
    ct_arrays = load_checkpoint(args.checkpoint)
    ct_net = CTNet.from_arrays(ct_arrays)
    bc_net = BCNet.from_arrays(load_checkpoint(args.bc_checkpoint)) if args.bc_checkpoint else None
    out_dir = _resolve_out_dir(args.out)
    from .evalkit import box_from_map, cam_for_class
    from .tensor import Tensor
    outputs = []
    for i in range(count):
        s = test.load(i)
        hw = s.pixels.shape[-2:]
        x = Tensor(eval_view(s.pixels, stats, hw, cfg.dtype)[None])
        logits, score, _ = ct_net.forward(None, x)
        pred = int(np.argmax(logits.data[0]))
        cam = cam_for_class(score.data[0], pred, hw[0], hw[1])
        pred_box = box_from_map(cam, cfg.tau)
        overlay = s.pixels.copy()
        if s.gt_box:
            _draw_box(overlay, Box(*s.gt_box), channel=1)
        _draw_box(overlay, pred_box, channel=0)
        name = s.image_id or f"test_{i:05d}"
        p = os.path.join(out_dir, f"{name}.overlay.ppm")
        write_ppm(p, overlay)
        outputs.append(p)
        p = os.path.join(out_dir, f"{name}.cam.pgm")
        write_pgm(p, np.round(cam * 255).astype(np.uint8))
        outputs.append(p)
        if bc_net is not None:
            clean = x.data[0]
            gm = gradient_map(bc_net, clean, reduce=cfg.grad_reduce,
                              blur_radius=cfg.grad_blur_radius)
            p = os.path.join(out_dir, f"{name}.gradmap.pgm")
            write_pgm(p, gradient_map_to_pgm_bytes(gm))
            outputs.append(p)
            mask = mask_for_batch(bc_net, clean[None], cfg.delta,
                                  reduce=cfg.grad_reduce,
                                  blur_radius=cfg.grad_blur_radius,
                                  normalize=cfg.grad_normalize)[0]
            p = os.path.join(out_dir, f"{name}.mask.pgm")
            write_pgm(p, mask_to_pgm_bytes(mask))
            outputs.append(p)
    _write_manifest(out_dir, "render", cfg, cfg.seed,
                    [args.config, args.checkpoint, args.bc_checkpoint],
                    outputs, t0, args.threads)
    print(f"rendered {count} images to {out_dir}")
    return 0


def _cmd_selftest(args):
    from .checks import run_selftest
    ok, results = run_selftest(seed=args.seed)
    for name, passed, detail in results:
        status = "PASS" if passed else "FAIL"
        suffix = f"  ({detail})" if detail else ""
        print(f"[{status}] {name}{suffix}")
    print(f"selftest: {sum(p for _, p, _ in results)}/{len(results)} checks passed")
    return 0 if ok else 2


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "train-bc": _cmd_train_bc,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "render": _cmd_render,
    "selftest": _cmd_selftest,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            print("error: a subcommand is required", file=sys.stderr)
            return 1
        if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
            raise CliError("--threads must be >= 1")
        return _COMMANDS[args.command](args)
    except (CliError, ConfigError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        # argparse --help and --version exit through here with code 0
        return int(e.code or 0)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

"""Command-line surface: train, eval, synth, visualize, augment-preview, sweep-xi.

Run configuration comes from an optional JSON file plus flat CLI overrides
(overrides win); every knob has a listed default, unknown JSON keys are
rejected, and all validation happens before any compute.  Every command is
reproducible: the same config and seed produce the same output bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import _kernels
from . import data as data_mod
from .augment import build_crop_plan
from .backbone import ViTConfig
from .errors import ConfigError, DavtError
from .has import davt_forward
from .train import (TrainConfig, evaluate, load_checkpoint, run_training,
                    save_checkpoint)

_VIT_KEYS = ("image_size", "patch_size", "hidden_dim", "layers", "heads",
             "mlp_dim", "num_classes", "seed")
_TRAIN_KEYS = ("lr0", "momentum", "batch_size", "total_steps", "theta_c",
               "xi", "fusion", "eval_interval", "checkpoint_interval",
               "has", "crop", "flip", "seed")
_PATH_KEYS = ("train_data", "eval_data", "out_dir")
_KNOWN_KEYS = sorted(set(_VIT_KEYS) | set(_TRAIN_KEYS) | set(_PATH_KEYS))


def _apply_thread_cap():
    raw = os.environ.get("DAVT_THREADS")
    if not raw:
        return
    try:
        cap = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"DAVT_THREADS must be an integer, got {raw!r}")
    if _kernels.BACKEND == "numba":
        import numba
        numba.set_num_threads(min(cap, numba.config.NUMBA_NUM_THREADS))


def _onoff(value):
    if value in ("on", "off"):
        return value == "on"
    raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")


def _add_config_options(parser):
    parser.add_argument("--config", help="JSON run config; flags override it")
    vit = ViTConfig()
    tr = TrainConfig()
    parser.add_argument("--image-size", type=int, default=None,
                        help=f"square input size (default {vit.image_size})")
    parser.add_argument("--patch-size", type=int, default=None,
                        help=f"pixel block size (default {vit.patch_size})")
    parser.add_argument("--hidden-dim", type=int, default=None,
                        help=f"token width (default {vit.hidden_dim})")
    parser.add_argument("--layers", type=int, default=None,
                        help=f"encoder layers (default {vit.layers})")
    parser.add_argument("--heads", type=int, default=None,
                        help=f"attention heads (default {vit.heads})")
    parser.add_argument("--mlp-dim", type=int, default=None,
                        help=f"mlp width (default {vit.mlp_dim})")
    parser.add_argument("--num-classes", type=int, default=None,
                        help="classes (default taken from the dataset)")
    parser.add_argument("--seed", type=int, default=None,
                        help=f"master seed (default {vit.seed})")
    parser.add_argument("--lr0", type=float, default=None,
                        help=f"initial learning rate (default {tr.lr0})")
    parser.add_argument("--momentum", type=float, default=None,
                        help=f"sgd momentum (default {tr.momentum})")
    parser.add_argument("--batch-size", type=int, default=None,
                        help=f"batch size (default {tr.batch_size})")
    parser.add_argument("--total-steps", type=int, default=None,
                        help=f"optimizer steps (default {tr.total_steps})")
    parser.add_argument("--theta-c", type=float, default=None,
                        help=f"crop threshold in [0.4, 0.6] (default {tr.theta_c})")
    parser.add_argument("--xi", type=int, default=None,
                        help="crop-guidance layer (default mid-depth, capped at 5)")
    parser.add_argument("--fusion", choices=("pairwise", "cumulative"),
                        default=None,
                        help=f"attention fusion mode (default {tr.fusion})")
    parser.add_argument("--eval-interval", type=int, default=None,
                        help=f"steps between evals (default {tr.eval_interval})")
    parser.add_argument("--checkpoint-interval", type=int, default=None,
                        help="periodic checkpoint cadence (default 0, final only)")
    parser.add_argument("--has", type=_onoff, default=None, metavar="on|off",
                        help="token selection before the final layer (default on)")
    parser.add_argument("--crop", type=_onoff, default=None, metavar="on|off",
                        help="attention-crop training branch (default on)")
    parser.add_argument("--flip", type=_onoff, default=None, metavar="on|off",
                        help="random horizontal flips (default on)")
    parser.add_argument("--ablate", default=None,
                        help="comma list like has=off,crop=off")


def _parse_ablate(spec):
    out = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"ablation entry {part!r} is not key=on|off")
        key, _, value = part.partition("=")
        if key not in ("has", "crop", "flip"):
            raise ConfigError(f"unknown ablation flag {key!r}")
        if value not in ("on", "off"):
            raise ConfigError(f"ablation value for {key} must be on or off")
        out[key] = value == "on"
    return out


def _merge_run_config(args):
    merged = {}
    if args.config:
        with open(args.config) as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {args.config} is not valid JSON: {e}")
        unknown = sorted(set(loaded) - set(_KNOWN_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; known keys are "
                              f"{_KNOWN_KEYS}")
        merged.update(loaded)
    for key in _KNOWN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if getattr(args, "ablate", None):
        merged.update(_parse_ablate(args.ablate))
    return merged


def _build_configs(merged, num_classes=None):
    vit_kwargs = {k: merged[k] for k in _VIT_KEYS if k in merged}
    if num_classes is not None and "num_classes" not in merged:
        vit_kwargs["num_classes"] = num_classes
    train_kwargs = {k: merged[k] for k in _TRAIN_KEYS if k in merged}
    try:
        return ViTConfig(**vit_kwargs), TrainConfig(**train_kwargs)
    except TypeError as e:
        raise ConfigError(str(e))


def _load_split(path, image_size):
    if not path:
        raise ConfigError("no dataset directory given")
    return data_mod.load_dataset(path, image_size=image_size)


def _check_class_count(vit_config, class_names, where):
    if vit_config.num_classes != len(class_names):
        raise ConfigError(
            f"model has {vit_config.num_classes} classes but {where} "
            f"declares {len(class_names)}")


# ---------------------------------------------------------------------------
# Rendering helpers (PPM artifacts)
# ---------------------------------------------------------------------------

_RED = np.array([1.0, 0.0, 0.0])


def _gray_rgb(gray):
    gray = np.clip(gray, 0.0, 1.0)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _draw_box(image, row_min, row_max, col_min, col_max, thickness=2):
    out = image.copy()
    h, w = out.shape[:2]
    r0, r1 = max(row_min, 0), min(row_max, h - 1)
    c0, c1 = max(col_min, 0), min(col_max, w - 1)
    t = thickness
    out[r0:min(r0 + t, r1 + 1), c0:c1 + 1] = _RED
    out[max(r1 - t + 1, r0):r1 + 1, c0:c1 + 1] = _RED
    out[r0:r1 + 1, c0:min(c0 + t, c1 + 1)] = _RED
    out[r0:r1 + 1, max(c1 - t + 1, c0):c1 + 1] = _RED
    return out


def _draw_token_boxes(image, selections, config):
    out = image.copy()
    grid, patch = config.grid_size, config.patch_size
    picked = sorted({int(i) for sel in selections for i in sel.indices})
    for index in picked:
        r, c = divmod(index - 1, grid)
        out = _draw_box(out, r * patch, (r + 1) * patch - 1,
                        c * patch, (c + 1) * patch - 1, thickness=1)
    return out


def _prepare_image(path, config):
    image = data_mod.load_ppm(path)
    if image.shape[:2] != (config.image_size, config.image_size):
        image = np.clip(
            data_mod.resize_image(image, config.image_size, config.image_size),
            0.0, 1.0)
    return image


def _emit_artifacts(image, out, plan, config, out_dir, stem, preview):
    paths = {}

    def put(tag, array):
        path = os.path.join(out_dir, f"{stem}-{tag}.ppm")
        data_mod.save_ppm(array, path)
        paths[tag] = path

    if preview:
        raw = plan.attention_map.upsampled
        peak = raw.max()
        put("raw-map", _gray_rgb(raw / peak if peak > 0 else raw))
        put("normalized-map", _gray_rgb(plan.normalized))
        put("mask", _gray_rgb(plan.mask.mask.astype(np.float64)))
        put("bbox", _draw_box(image, plan.box.row_min, plan.box.row_max,
                              plan.box.col_min, plan.box.col_max))
        put("cropped", plan.image)
    else:
        put("original", image)
        put("attention", _gray_rgb(plan.normalized))
        put("crop", plan.image)
        dimmed = image * (plan.mask.mask[:, :, None] * 0.75 + 0.25)
        put("masked", dimmed)
        selections = out.selections if out.selections is not None else []
        put("tokens", _draw_token_boxes(image, selections, config))
    return paths


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    samples = data_mod.synth_finegrained(args.seed, args.classes,
                                         args.per_class, args.size,
                                         start_index=args.start_index)
    names = [f"class{i:02d}" for i in range(args.classes)]
    data_mod.write_dataset(samples, names, args.out)
    print(f"wrote {len(samples)} images to {args.out}")
    return 0


def _run_one_training(merged, train_dir, eval_dir, out_dir, resume,
                      quiet=False):
    if resume:
        ckpt = load_checkpoint(resume)
        vit_config, train_config = ckpt.vit, ckpt.train
        params, state, history = ckpt.params, ckpt.state, ckpt.history
    else:
        probe_size = merged.get("image_size", ViTConfig().image_size)
        train_probe, class_names = _load_split(train_dir, probe_size)
        vit_config, train_config = _build_configs(
            merged, num_classes=len(class_names))
        params = state = history = None
    train_samples, class_names = _load_split(train_dir, vit_config.image_size)
    _check_class_count(vit_config, class_names, train_dir)
    eval_samples = None
    if eval_dir:
        eval_samples, eval_names = _load_split(eval_dir, vit_config.image_size)
        _check_class_count(vit_config, eval_names, eval_dir)

    def progress(row):
        if not quiet and row.eval_top1 is not None:
            print(f"step {row.step} lr {row.lr:.6f} "
                  f"loss {row.loss_total:.4f} top1 {row.eval_top1:.4f}")

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        resolved = dict(sorted(merged.items()))
        resolved.update(train_data=train_dir, eval_data=eval_dir,
                        out_dir=out_dir)
        with open(os.path.join(out_dir, "config.json"), "w") as f:
            json.dump(resolved, f, sort_keys=True, indent=2)
            f.write("\n")
    return run_training(train_samples, vit_config, train_config,
                        eval_samples=eval_samples, out_dir=out_dir,
                        params=params, state=state, history=history,
                        progress=progress), vit_config, train_config


def cmd_train(args):
    merged = _merge_run_config(args)
    train_dir = merged.get("train_data", args.train_data)
    eval_dir = merged.get("eval_data", args.eval_data)
    out_dir = merged.get("out_dir", args.out) or "run"
    result, _, train_config = _run_one_training(
        merged, train_dir, eval_dir, out_dir, args.resume)
    last = result.history[-1] if result.history else None
    top1 = next((r.eval_top1 for r in reversed(result.history)
                 if r.eval_top1 is not None), None)
    print(f"completed {result.state.step} of {train_config.total_steps} steps"
          + (f", final top1={top1!r}" if top1 is not None else ""))
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    samples, class_names = _load_split(args.data, ckpt.vit.image_size)
    if ckpt.vit.num_classes != len(class_names):
        raise ConfigError(
            f"checkpoint expects {ckpt.vit.num_classes} classes, dataset "
            f"{args.data} has {len(class_names)}")
    top1, per_label = evaluate(samples, ckpt.params, ckpt.vit,
                               has_enabled=ckpt.train.has,
                               fusion=ckpt.train.fusion)
    per_class = {class_names[label]: correct / total
                 for label, (correct, total) in sorted(per_label.items())}
    print(f"top1={top1!r}")
    report = {"top1": top1, "per_class": per_class, "num_samples": len(samples)}
    with open(args.out, "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    return 0


def _model_for_viz(args):
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        return ckpt.vit, ckpt.train, ckpt.params
    merged = _merge_run_config(args)
    vit_config, train_config = _build_configs(merged)
    from .backbone import init_params
    return vit_config, train_config, init_params(vit_config)


def _viz_common(args, preview):
    vit_config, train_config, params = _model_for_viz(args)
    xi = args.xi if args.xi is not None else train_config.resolved_xi(vit_config)
    theta = args.theta_c if args.theta_c is not None else train_config.theta_c
    if not 1 <= xi <= vit_config.layers - 1:
        raise ConfigError(f"xi {xi} outside 1..{vit_config.layers - 1}")
    os.makedirs(args.out, exist_ok=True)
    for path in args.images:
        image = _prepare_image(path, vit_config)
        out = davt_forward(image, params, vit_config,
                           has_enabled=train_config.has,
                           fusion=train_config.fusion)
        plan = build_crop_plan(image, out.attention, xi, theta, vit_config)
        stem = os.path.splitext(os.path.basename(path))[0]
        paths = _emit_artifacts(image, out, plan, vit_config, args.out, stem,
                                preview)
        print(f"{path}: wrote {len(paths)} files to {args.out}")
    return 0


def cmd_visualize(args):
    return _viz_common(args, preview=False)


def cmd_augment_preview(args):
    return _viz_common(args, preview=True)


def cmd_sweep_xi(args):
    merged = _merge_run_config(args)
    train_dir = merged.get("train_data", args.train_data)
    eval_dir = merged.get("eval_data", args.eval_data)
    out_dir = merged.get("out_dir", args.out) or "sweep"
    os.makedirs(out_dir, exist_ok=True)
    probe_size = merged.get("image_size", ViTConfig().image_size)
    _, class_names = _load_split(train_dir, probe_size)
    base_vit, base_train = _build_configs(merged, num_classes=len(class_names))
    rows = []
    for xi in range(1, base_vit.layers):
        merged_xi = dict(merged)
        merged_xi["xi"] = xi
        result, vit_config, train_config = _run_one_training(
            merged_xi, train_dir, eval_dir,
            os.path.join(out_dir, f"xi-{xi}"), resume=None, quiet=True)
        top1 = next((r.eval_top1 for r in reversed(result.history)
                     if r.eval_top1 is not None), float("nan"))
        rows.append((xi, top1))
        print(f"xi={xi} top1={top1!r}")
    with open(os.path.join(out_dir, "sweep.csv"), "w") as f:
        f.write("method,xi,top1\n")
        for xi, top1 in rows:
            f.write(f"davt,{xi},{top1!r}\n")
    width = max(len("xi"), 4)
    print(f"{'xi':>{width}}  top1")
    for xi, top1 in rows:
        print(f"{xi:>{width}}  {top1:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="davt",
        description="Desk-scale vision transformer with attention-guided "
                    "crop augmentation and hierarchical token selection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fine-grained dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--start-index", type=int, default=0,
                   help="offset sample streams so splits can share a seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_config_options(p)
    p.add_argument("--train-data", default=None, help="training dataset dir")
    p.add_argument("--eval-data", default=None, help="held-out dataset dir")
    p.add_argument("--out", default=None, help="artifact directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize",
                       help="write attention/crop/selection overlays")
    _add_config_options(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("augment-preview",
                       help="write the augmentation chain for inspection")
    _add_config_options(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("sweep-xi",
                       help="train once per guidance layer and tabulate top1")
    _add_config_options(p)
    p.add_argument("--train-data", default=None)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep_xi)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except (DavtError, OSError) as e:
        message = " ".join(str(e).split())
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

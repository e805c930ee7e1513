"""Batch entry points: corpus generation, training, inference, evaluation.

Config files are flat JSON with module-namespaced keys ("training.lr_start");
command-line flags override config-file values and the effective config is
echoed to stdout. Exit codes: 0 success, 1 input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import dataset, evaluation, inference
from .denoiser import UNetConfig, build_finetune_mask, build_unet
from .errors import NumericError, ValidationError
from .training import OptimConfig, train_loop


def _load_config_file(path):
    if not path:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    return doc


def _namespace(cfg: dict, prefix: str) -> dict:
    out = {}
    for key, value in cfg.items():
        ns, _, name = key.partition(".")
        if ns == prefix and name:
            out[name] = value
    return out


def _build_dataclass(cls, values: dict, tuple_fields=()):
    known = {f.name for f in dataclass_fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    coerced = dict(values)
    for name in tuple_fields:
        if name in coerced:
            coerced[name] = tuple(coerced[name])
    return cls(**coerced)


def _load_captions(path):
    if not path:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"captions file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValidationError("captions file must map image ids to captions")
    return {str(k): str(v) for k, v in doc.items()}


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    manifest = dataset.generate_synthetic_corpus(
        args.n, args.seed, args.out,
        image_size=(args.size, args.size), split=args.split,
    )
    print(Path(args.out) / "manifest.json")
    print(f"entries={len(manifest.entries)} "
          f"granularity_bounds={manifest.granularity_bounds}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)

    optim_values = _namespace(cfg, "training")
    run_keys = ("mask_mode", "strategy", "detach_gran_decode", "seed", "steps")
    run = {k: optim_values.pop(k) for k in list(optim_values) if k in run_keys}
    if args.steps is not None:
        run["steps"] = args.steps
    if args.lr_start is not None:
        optim_values["lr_start"] = args.lr_start
    if args.lr_end is not None:
        optim_values["lr_end"] = args.lr_end
    if args.mask is not None:
        run["mask_mode"] = args.mask
    if args.strategy is not None:
        run["strategy"] = args.strategy
    if args.seed is not None:
        run["seed"] = args.seed

    optim = _build_dataclass(OptimConfig, optim_values)
    steps = int(run.get("steps", optim.total_steps))
    if steps < 1:
        raise ValidationError("steps must be >= 1")

    unet_values = _namespace(cfg, "unet")
    if args.base_channels is not None:
        unet_values["base_channels"] = args.base_channels
    unet_cfg = _build_dataclass(
        UNetConfig, unet_values, tuple_fields=("stage_multipliers", "attention_stages")
    )

    augment_values = _namespace(cfg, "augment")
    if args.crop is not None:
        augment_values["crop_size"] = (args.crop, args.crop)
    augment = _build_dataclass(
        dataset.AugmentConfig, augment_values,
        tuple_fields=("crop_size", "scale_choices"),
    )

    seed = int(run.get("seed", 0))
    mask_mode = str(run.get("mask_mode", "partial"))
    strategy = str(run.get("strategy", "encoding"))
    detach = bool(run.get("detach_gran_decode", False))

    effective = {f"training.{f.name}": getattr(optim, f.name)
                 for f in dataclass_fields(OptimConfig)}
    effective.update({f"unet.{k}": v for k, v in unet_cfg.to_dict().items()})
    effective.update({
        "augment.crop_size": list(augment.crop_size),
        "augment.enable_scale": augment.enable_scale,
        "augment.enable_flip": augment.enable_flip,
        "augment.enable_crop": augment.enable_crop,
        "run.steps": steps,
        "run.seed": seed,
        "run.mask_mode": mask_mode,
        "run.strategy": strategy,
        "run.detach_gran_decode": detach,
    })
    print(json.dumps(effective, sort_keys=True))

    manifest = dataset.load_manifest(args.manifest)
    captions = _load_captions(args.captions)

    model = build_unet(unet_cfg, seed=seed)
    mask = build_finetune_mask(model, mask_mode)
    log_path = args.log or (str(args.out) + ".log.jsonl")
    train_loop(
        manifest, model, mask, optim, augment,
        steps=steps, seed=seed, strategy=strategy,
        detach_gran_decode=detach, captions=captions,
        log_path=log_path, checkpoint_path=args.out,
        checkpoint_every=args.checkpoint_every,
    )
    print(f"checkpoint={args.out} log={log_path}")
    return 0


def cmd_infer(args) -> int:
    if (args.g is None) == (args.sweep is None):
        raise ValidationError("exactly one of --g or --sweep is required")
    manifest = dataset.load_manifest(args.manifest)
    captions = _load_captions(args.captions)
    predictor = inference.Predictor.from_checkpoint(args.checkpoint)

    g = None
    if args.g is not None and args.g != "off":
        try:
            g = float(args.g)
        except ValueError as exc:
            raise ValidationError(f"--g must be a float or 'off', got {args.g!r}") from exc

    n_files = 0
    for entry in manifest.entries:
        annotated = dataset.load_annotated_image(manifest, entry)
        caption = captions.get(entry.id, "")
        if args.sweep is not None:
            preds = predictor.sweep(annotated.image, m=args.sweep,
                                    image_id=entry.id, caption=caption)
        else:
            preds = [predictor.predict(annotated.image, g,
                                       image_id=entry.id, caption=caption)]
        for pred in preds:
            inference.save_prediction_png(pred, args.out)
            n_files += 1
    print(f"wrote {n_files} predictions to {args.out}")
    return 0


def _gather_predictions(pred_dir, ids, multi):
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise ValidationError(f"prediction directory not found: {pred_dir}")
    found = {}
    for image_id in ids:
        matches = sorted(pred_dir.glob(f"{image_id}_g*.png"))
        found[image_id] = matches
    missing = [i for i, m in found.items() if not m]
    if missing:
        raise ValidationError(f"missing predictions for ids: {sorted(missing)}")
    if multi is None:
        wrong = {i: len(m) for i, m in found.items() if len(m) != 1}
        if wrong:
            raise ValidationError(
                f"expected exactly one prediction per id, got {wrong}; "
                "use --multi for sweeps"
            )
        return {i: inference.load_prediction_png(m[0]) for i, m in found.items()}
    wrong = {i: len(m) for i, m in found.items() if len(m) != multi}
    if wrong:
        raise ValidationError(f"expected {multi} predictions per id, got {wrong}")
    return {
        i: [inference.load_prediction_png(p) for p in m] for i, m in found.items()
    }


def cmd_eval(args) -> int:
    from PIL import Image

    manifest = dataset.load_manifest(args.manifest)
    gts = {}
    for entry in manifest.entries:
        gts[entry.id] = [
            np.asarray(Image.open(p).convert("L")) > 127
            for p in manifest.annotation_paths(entry)
        ]
    cfg = evaluation.MatchConfig(
        max_dist_frac=args.max_dist_frac,
        n_thresholds=args.thresholds,
        apply_nms=not args.no_nms,
    )
    if args.kernel == "fast":
        from . import fastkernel

        fastkernel.require()

    preds = _gather_predictions(args.pred_dir, list(gts), args.multi)
    if args.multi is None:
        result = evaluation.evaluate(preds, gts, cfg, kernel=args.kernel)
    else:
        result = evaluation.evaluate_multi(preds, gts, cfg, kernel=args.kernel)

    # the kernel choice is deliberately absent: ref and fast must produce
    # byte-identical CSVs
    flags = {
        "apply_nms": not args.no_nms,
        "multi": args.multi if args.multi is not None else 1,
        "max_dist_frac": args.max_dist_frac,
        "n_thresholds": args.thresholds,
        "manifest": str(args.manifest),
        "pred_dir": str(args.pred_dir),
    }
    evaluation.write_results_csv(result, args.out, flags)
    print(f"ODS={result.ods:.6f} OIS={result.ois:.6f} AP={result.ap:.6f}")
    print(f"csv={args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ged", description="granularity-controlled edge prediction pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=192)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr-start", type=float, default=None)
    p.add_argument("--lr-end", type=float, default=None)
    p.add_argument("--mask", choices=("partial", "full"), default=None)
    p.add_argument("--strategy", choices=("encoding", "time_step", "text_prompt"),
                   default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--captions", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict edge maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--g", default=None, help="granularity in [0,1] or 'off'")
    p.add_argument("--sweep", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--captions", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="boundary metrics over a prediction dir")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--no-nms", action="store_true")
    p.add_argument("--multi", type=int, default=None)
    p.add_argument("--kernel", choices=("ref", "fast"), default="ref")
    p.add_argument("--max-dist-frac", type=float, default=0.0075)
    p.add_argument("--thresholds", type=int, default=99)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc} (step={exc.step}, {exc.diagnostics})",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

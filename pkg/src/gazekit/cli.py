"""``gazekit`` command line interface.

Every subcommand accepts ``--config FILE`` (JSON); explicit flags override
values from the file. Exit codes: 0 success, 2 config error, 3 data
error, 4 training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GazekitError, TrainingError

log = logging.getLogger("gazekit")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return cfg


def _merged(args, file_cfg: dict, keys) -> dict:
    """File values, overridden by flags that were given explicitly."""
    out = {k: file_cfg[k] for k in keys if k in file_cfg}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _require(opts: dict, *keys):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(args, file_cfg) -> Path:
    out = args.out or file_cfg.get("out")
    if out is None:
        raise ConfigError("--out is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _section(file_cfg, name, args, mapping) -> dict:
    sec = dict(file_cfg.get(name, {}))
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            sec[key] = v
    if args.seed is not None:
        sec["seed"] = args.seed
    return sec


def _split_val(records, fraction: float, seed: int):
    from .seeding import derive_seed
    perm = np.random.default_rng(derive_seed(seed, "cli-val")).permutation(len(records))
    n_val = int(round(fraction * len(records)))
    val = sorted(perm[:n_val])
    train = sorted(perm[n_val:])
    return [records[i] for i in train], [records[i] for i in val]


def cmd_synth_gen(args, file_cfg):
    from .synth import generate_dataset
    opts = _merged(args, file_cfg, ["count", "height", "width", "subjects", "seed"])
    _require(opts, "count")
    out = _out_dir(args, file_cfg)
    path = generate_dataset(opts["count"], out, seed=opts.get("seed", 0), h=opts.get("height", 36),
                            w=opts.get("width", 60), n_subjects=opts.get("subjects", 5))
    print(path)


def cmd_train_seg(args, file_cfg):
    from .datapipe import load_arrays, load_manifest
    from .segmenter import SegmenterConfig, save_segmenter, train_segmenter
    opts = _merged(args, file_cfg, ["manifest", "val_manifest", "val_fraction"])
    _require(opts, "manifest")
    sec = _section(file_cfg, "segmenter", args, {"epochs": "epochs", "lr": "lr", "batch_size": "batch_size"})
    if args.no_augment:
        sec["augment"] = False
    cfg = SegmenterConfig(**sec)
    out = _out_dir(args, file_cfg)
    records = load_manifest(opts["manifest"])
    if opts.get("val_manifest"):
        train_recs, val_recs = records, load_manifest(opts["val_manifest"])
    else:
        train_recs, val_recs = _split_val(records, opts.get("val_fraction", 0.1), cfg.seed)
    result = train_segmenter(load_arrays(train_recs, require_masks=True),
                             load_arrays(val_recs, require_masks=True), cfg)
    path = save_segmenter(out / "segmenter.ckpt", result)
    (out / "history.json").write_text(json.dumps(result.history, indent=2, sort_keys=True))
    print(path)


def cmd_seg_infer(args, file_cfg):
    import cv2
    from .datapipe import load_arrays, load_manifest, write_manifest
    from .segmenter import binarize_batch, load_segmenter, segment_batch
    opts = _merged(args, file_cfg, ["ckpt", "manifest"])
    _require(opts, "ckpt", "manifest")
    out = _out_dir(args, file_cfg)
    model = load_segmenter(opts["ckpt"])[0]
    records = load_manifest(opts["manifest"])
    data = load_arrays(records)
    masks = binarize_batch(segment_batch(data.images, model))
    (out / "masks").mkdir(exist_ok=True)
    for rec, m in zip(records, masks):
        rec.eyeball_mask = out / "masks" / f"{rec.sample_id}_eyeball.png"
        rec.iris_mask = out / "masks" / f"{rec.sample_id}_iris.png"
        cv2.imwrite(str(rec.eyeball_mask), (m[0] * 255).astype(np.uint8))
        cv2.imwrite(str(rec.iris_mask), (m[1] * 255).astype(np.uint8))
        rec.image = Path(rec.image).resolve()
    print(write_manifest(records, out / "manifest.jsonl"))


def cmd_ssl_pretrain(args, file_cfg):
    from .augment import AugmentSpec
    from .datapipe import load_arrays, load_manifest
    from .ssl import SSLConfig, pretrain, save_encoder
    opts = _merged(args, file_cfg, ["manifest"])
    _require(opts, "manifest")
    sec = _section(file_cfg, "ssl", args, {"epochs": "epochs", "lr": "lr", "batch_size": "batch_size"})
    cfg = SSLConfig(**sec)
    out = _out_dir(args, file_cfg)
    data = load_arrays(load_manifest(opts["manifest"]))
    if args.preview:
        spec = AugmentSpec.from_dict(cfg.augment_spec)
        rng = np.random.default_rng(cfg.seed)
        print(write_preview(data.images[:8], spec, rng, out / "augment_preview.png"))
        return
    result = pretrain(data, cfg)
    path = save_encoder(out / "encoder.ckpt", result)
    (out / "history.json").write_text(json.dumps(result.history, indent=2, sort_keys=True))
    print(path)


def write_preview(images, spec, rng, path, views: int = 6) -> Path:
    """Grid: one row per source image, source first then augmented views."""
    import cv2
    from .augment import apply_random
    rows = [np.concatenate([im] + [apply_random(im, spec, rng) for _ in range(views)], axis=1) for im in images]
    grid = np.concatenate(rows, axis=0) if rows else np.zeros((36, 60))
    cv2.imwrite(str(path), np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8))
    return Path(path)


def cmd_train_gaze(args, file_cfg):
    from .datapipe import load_arrays, load_manifest
    from .gaze import GazeTrainConfig, masks_for, save_gaze, train_gaze
    from .segmenter import load_segmenter
    opts = _merged(args, file_cfg, ["manifest", "val_manifest", "val_fraction", "ssl_ckpt", "seg_ckpt"])
    _require(opts, "manifest")
    sec = _section(file_cfg, "gaze", args, {"epochs": "epochs_total", "freeze_epochs": "freeze_epochs",
                                            "lr": "lr", "batch_size": "batch_size"})
    cfg = GazeTrainConfig(**sec)
    out = _out_dir(args, file_cfg)
    records = load_manifest(opts["manifest"])
    if opts.get("val_manifest"):
        train_recs, val_recs = records, load_manifest(opts["val_manifest"])
    else:
        train_recs, val_recs = _split_val(records, opts.get("val_fraction", 0.1), cfg.seed)
    seg = load_segmenter(opts["seg_ckpt"])[0] if opts.get("seg_ckpt") else None
    train = load_arrays(train_recs, require_gaze=True)
    val = load_arrays(val_recs, require_gaze=True)
    train.masks = masks_for(train, seg)
    if len(val):
        val.masks = masks_for(val, seg)
    result = train_gaze(train, val, cfg, ssl_ckpt=opts.get("ssl_ckpt"))
    path = save_gaze(out / "gaze.ckpt", result)
    (out / "history.json").write_text(json.dumps(result.history, indent=2, sort_keys=True))
    print(path)


def cmd_predict(args, file_cfg):
    from .gaze import predict_batch
    opts = _merged(args, file_cfg, ["ckpt", "manifest", "seg_ckpt"])
    _require(opts, "ckpt", "manifest")
    out = _out_dir(args, file_cfg)
    print(predict_batch(opts["ckpt"], opts["manifest"], out / "predictions.jsonl",
                        seg_ckpt=opts.get("seg_ckpt"), use_gt_masks=not args.no_gt_masks))


def _experiment_config(args, file_cfg):
    from .harness import ExperimentConfig
    d = {k: v for k, v in file_cfg.items() if k not in ("out", "fractions")}
    for flag in ("manifest", "protocol", "k", "label_fraction", "seg_ckpt"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    if args.use_ssl is not None:
        d["use_ssl"] = args.use_ssl
    if args.seeds is not None:
        d["seeds"] = args.seeds
    if args.seed is not None:
        d["seeds"] = [args.seed]
    d["out_dir"] = str(_out_dir(args, file_cfg))
    _require(d, "manifest")
    cfg = ExperimentConfig.from_dict(d)
    cfg.validate()
    return cfg


def _fail_on_failed_folds(report):
    n = report["aggregate"]["n_failed"]
    if n:
        raise TrainingError(f"{n} fold(s) failed; partial results kept in the report")


def cmd_eval(args, file_cfg):
    from .harness import run_experiment
    cfg = _experiment_config(args, file_cfg)
    report = run_experiment(cfg)
    print(Path(cfg.out_dir) / "report.json")
    _fail_on_failed_folds(report)


def cmd_ablate(args, file_cfg):
    from .harness import LABEL_FRACTIONS, run_label_ablation
    cfg = _experiment_config(args, file_cfg)
    fractions = args.fractions or file_cfg.get("fractions") or LABEL_FRACTIONS
    report = run_label_ablation(cfg, fractions)
    print(Path(cfg.out_dir) / "report.json")
    _fail_on_failed_folds(report)


def cmd_report(args, file_cfg):
    from .harness import emit_plots, load_report, render_markdown
    src = args.report or file_cfg.get("report")
    if src is None:
        raise ConfigError("--report is required")
    report = load_report(src)
    out = _out_dir(args, file_cfg)
    (out / "report.md").write_text(render_markdown(report))
    for p in emit_plots(report, out):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazekit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("synth-gen", cmd_synth_gen, "render a synthetic eye dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--subjects", type=int)

    p = add("train-seg", cmd_train_seg, "train the eye-region segmenter")
    p.add_argument("--manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-augment", action="store_true")

    p = add("seg-infer", cmd_seg_infer, "write predicted masks and a new manifest")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")

    p = add("ssl-pretrain", cmd_ssl_pretrain, "contrastive pretraining of the eye encoder")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--preview", action="store_true", help="only dump a grid of augmented views")

    p = add("train-gaze", cmd_train_gaze, "train the multistream gaze regressor")
    p.add_argument("--manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--ssl-ckpt")
    p.add_argument("--seg-ckpt")
    p.add_argument("--epochs", type=int)
    p.add_argument("--freeze-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    p = add("predict", cmd_predict, "predict gaze for a manifest")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--seg-ckpt")
    p.add_argument("--no-gt-masks", action="store_true", help="always use segmenter masks")

    for name, fn, help_ in (("eval", cmd_eval, "cross-validated experiment"),
                            ("ablate", cmd_ablate, "label-fraction ablation")):
        p = add(name, fn, help_)
        p.add_argument("--manifest")
        p.add_argument("--protocol", choices=["LOSO", "KFOLD"])
        p.add_argument("--k", type=int)
        p.add_argument("--label-fraction", type=float)
        p.add_argument("--seg-ckpt")
        p.add_argument("--seeds", type=int, nargs="+")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--use-ssl", dest="use_ssl", action="store_true", default=None)
        g.add_argument("--no-ssl", dest="use_ssl", action="store_false")
        if name == "ablate":
            p.add_argument("--fractions", type=float, nargs="+")

    p = add("report", cmd_report, "render plots and a markdown table from a report")
    p.add_argument("--report", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, _load_config(args.config))
    except GazekitError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        log.error("configuration error: %s", exc)
        return ConfigError.exit_code
    except OSError as exc:
        log.error("data error: %s", exc)
        return DataError.exit_code
    except RuntimeError as exc:
        log.error("training failed: %s", exc)
        return TrainingError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

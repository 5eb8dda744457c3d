"""Command-line entry point: synth / train / eval / predict / gradcheck /
ablate.  Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data as dp
from .losses import LossConfig
from .metrics import METRIC_CSV_COLUMNS, metrics_csv_row
from .model import (CheckpointError, ModelConfig, build, load_checkpoint,
                    save_checkpoint)
from .tensor import Tensor
from .training import (METRIC_LOG_COLUMNS, TABLE1_GRID, PlateauConfig,
                       TrainConfig, ablation_grid, evaluate_model, train)
from .verification import run_gradcheck_suite


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "model": {"depth": 4, "base_channels": 16, "timesteps": 2,
              "use_attention": True, "use_residual": True,
              "attend_first_skip": False, "in_channels": 1, "kernel_size": 3},
    "loss": {"kind": "focal_tversky", "wbce_weight": 0.5, "alpha": 0.3,
             "beta": 0.7, "gamma": 0.75, "eps": 1e-6, "prob_clip": 1e-7},
    "train": {"epochs": 20, "batch_size": 4, "lr": 1e-4, "decay": 1e-5,
              "plateau": {"patience": 3, "factor": 0.5, "min_lr": 1e-6},
              "top_k": 1, "early_stop_dice": None},
    "augment": None,
    "data": {"size": 256, "val_fraction": 0.15},
}

_AUGMENT_DEFAULTS = {"flip_h": 0.5, "flip_v": 0.5, "rotate": 30.0,
                     "shift": 0.1, "zoom": [0.9, 1.1], "shear": 10.0,
                     "elastic": False, "elastic_alpha": 8.0,
                     "elastic_sigma": 4.0, "seed": 0}


def _merge_validate(defaults, given, path=""):
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"{here}: unknown field")
        ref = defaults[key]
        if isinstance(ref, dict) and isinstance(value, dict):
            out[key] = _merge_validate(ref, value, here)
        elif ref is not None and value is not None and \
                not isinstance(value, type(ref)) and \
                not (isinstance(ref, float) and isinstance(value, int)) and \
                not (isinstance(ref, (list, tuple)) and isinstance(value, list)):
            raise ConfigError(
                f"{here}: expected {type(ref).__name__}, got {type(value).__name__}")
        else:
            out[key] = value
    return out


def load_run_config(path=None):
    given = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    aug_given = given.pop("augment", None) if isinstance(given, dict) else None
    cfg = _merge_validate(DEFAULT_CONFIG, given)
    if aug_given is not None:
        cfg["augment"] = _merge_validate(_AUGMENT_DEFAULTS, aug_given, "augment")
    if "R2AU_SEED" in os.environ:
        cfg["seed"] = int(os.environ["R2AU_SEED"])
    return cfg


def _build_configs(cfg):
    try:
        model_cfg = ModelConfig(**cfg["model"])
        loss_cfg = LossConfig(**cfg["loss"])
        tr = dict(cfg["train"])
        plateau = PlateauConfig(**tr.pop("plateau"))
        train_cfg = TrainConfig(loss=loss_cfg, plateau=plateau, **tr)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    if cfg.get("augment"):
        aug = dict(cfg["augment"])
        aug["zoom"] = tuple(aug["zoom"])
        train_cfg.augment = dp.AugmentConfig(**aug)
    return model_cfg, loss_cfg, train_cfg


def _atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path, rows, columns):
    import io
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    _atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def _load_splits(data_dir, size, val_fraction, seed, manifest=None):
    samples = dp.load_dsb2018(data_dir, size=size)
    by_id = {s.id: s for s in samples}
    if manifest is not None and Path(manifest).exists():
        split = dp.read_manifest(manifest)
    else:
        split = dp.make_split(by_id.keys(), val_fraction, seed)
    return ({"train": [s for s in samples if split.get(s.id) == "train"],
             "val": [s for s in samples if split.get(s.id) == "val"]}, split)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    samples = dp.synth_blobs(args.n, image_size=args.size,
                             imbalance_target=args.imbalance, seed=args.seed)
    dp.save_dsb2018(samples, args.out)
    split = dp.make_split([s.id for s in samples], seed=args.seed)
    dp.write_manifest(Path(args.out) / "manifest.json", split)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config)
    model_cfg, _, train_cfg = _build_configs(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits, split = _load_splits(args.data, cfg["data"]["size"],
                                 cfg["data"]["val_fraction"], cfg["seed"],
                                 Path(args.data) / "manifest.json")
    dp.write_manifest(out / "manifest.json", split)
    model = build(model_cfg, seed=cfg["seed"], dtype=np.float32)
    model, registry, log = train(model, splits, train_cfg, seed=cfg["seed"])
    _write_csv(out / "metrics.csv", log, METRIC_LOG_COLUMNS)
    for entry in registry.entries:
        name = f"ckpt_e{entry['epoch']}_d{entry['val_metric']:.4f}.r2au"
        snap = build(model_cfg, seed=0, dtype=np.float32)
        snap.load_arrays(entry["arrays"])
        tmp = out / f".{name}.tmp"
        save_checkpoint(tmp, snap)
        os.replace(tmp, out / name)
    best = registry.best
    save_checkpoint(out / ".best.tmp", model)
    os.replace(out / ".best.tmp", out / "best.r2au")
    print(f"best val dice {best['val_metric']:.4f} at epoch {best['epoch']}; "
          f"artifacts in {out}")
    return 0


def cmd_eval(args):
    if not Path(args.ckpt).exists():
        raise ConfigError(f"checkpoint not found: {args.ckpt}")
    model = load_checkpoint(args.ckpt)
    splits, _ = _load_splits(args.data, args.size, 0.15, 0,
                             args.manifest or Path(args.data) / "manifest.json")
    samples = splits.get(args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} is empty")
    values = evaluate_model(model, samples, per_image=args.per_image)
    row = metrics_csv_row(Path(args.data).name, model.config.variant_name(),
                          None, values)
    writer = csv.DictWriter(sys.stdout, fieldnames=METRIC_CSV_COLUMNS,
                            extrasaction="ignore")
    writer.writeheader()
    writer.writerow(row)
    return 0


def cmd_predict(args):
    if not Path(args.ckpt).exists():
        raise ConfigError(f"checkpoint not found: {args.ckpt}")
    model = load_checkpoint(args.ckpt)
    image = dp.load_image_png(args.image)
    if args.size:
        image = dp.resize_image(image, args.size)
    stride = 2 ** model.config.depth
    h, w = image.shape
    if h % stride or w % stride:
        raise ConfigError(
            f"image {h}x{w} not divisible by {stride}; pass --size")
    from .model import predict_mask
    mask = predict_mask(model, Tensor(image[None, None].astype(np.float32)),
                        args.threshold)
    import io
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(mask[0, 0] * np.uint8(255), mode="L").save(buf, format="PNG")
    _atomic_write_bytes(args.out, buf.getvalue())
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    failed = False
    for seed in range(args.seeds):
        for res in run_gradcheck_suite(seed=seed, depth=args.depth,
                                       size=args.size):
            status = "PASS" if res.passed else "FAIL"
            print(f"seed {seed} {res.name}: max_rel_err={res.max_rel_error:.3e} "
                  f"(tol {res.tolerance:.0e}) {status}")
            failed = failed or not res.passed
    return 1 if failed else 0


def cmd_ablate(args):
    cfg = load_run_config(args.config)
    model_cfg, _, train_cfg = _build_configs(cfg)
    if args.grid == "table1":
        grid = list(TABLE1_GRID)
    else:
        try:
            entries = json.loads(Path(args.grid).read_text())
            grid = [LossConfig(**e) for e in entries]
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid file {args.grid}: {exc}")
    if args.subset:
        grid = grid[:args.subset]
    splits, _ = _load_splits(args.data, cfg["data"]["size"],
                             cfg["data"]["val_fraction"], cfg["seed"],
                             Path(args.data) / "manifest.json")
    rows = ablation_grid(splits, model_cfg, grid, train_cfg, seed=cfg["seed"],
                         dataset_name=Path(args.data).name)
    _write_csv(args.out, rows, METRIC_CSV_COLUMNS + ["error"])
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def make_parser():
    p = argparse.ArgumentParser(prog="r2aunet")
    p.add_argument("--print-config", action="store_true",
                   help="dump the default run config as JSON and exit")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="generate a synthetic blob dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--imbalance", type=float, default=0.08)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", default=None)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val", choices=["train", "val"])
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--manifest", default=None)
    s.add_argument("--per-image", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="segment one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--size", type=int, default=None)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient report")
    s.add_argument("--depth", type=int, default=2)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--seeds", type=int, default=3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="run a loss-configuration grid")
    s.add_argument("--config", default=None)
    s.add_argument("--data", required=True)
    s.add_argument("--grid", default="table1")
    s.add_argument("--out", default="ablation.csv")
    s.add_argument("--subset", type=int, default=None,
                   help="run only the first N grid rows")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(json.dumps(DEFAULT_CONFIG, indent=2))
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

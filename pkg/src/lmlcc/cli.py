"""Single-binary pipeline CLI.

Subcommands: phantom, label, preprocess, train, pseudolabel, evaluate,
gradcam. Settings resolve as defaults < config file (--config, flat
"key = value" lines) < explicit flags; every command echoes its resolved
configuration and writes it next to its outputs. All randomness flows from
one seed (--seed, else the LMLCC_SEED environment variable, else 0).

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, ingest, labeling, metrics, phantom, preprocess, semisup, training
from .errors import ConfigError, DataError, NumericalError, PipelineError
from .network import (
    BackboneConfig,
    LmlccConfig,
    build_backbone,
    build_lmlcc,
    grad_cam,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# Keys a config file may set, mirroring the train/model flags.
CONFIG_KEYS = {
    "mode": str,
    "scale": str,
    "branches": int,
    "init": str,
    "cuts": str,
    "include_original": str,
    "side": int,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "seed": int,
    "threshold": float,
    "max_rounds": int,
    "min_new": int,
    "augment": str,
}


def _read_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    values: dict = {}
    for line_no, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{p} line {line_no}: expected 'key = value'")
        key, raw = (t.strip() for t in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{p} line {line_no}: unknown config key '{key}'")
        try:
            values[key] = CONFIG_KEYS[key](raw)
        except ValueError:
            raise ConfigError(f"{p} line {line_no}: bad value for '{key}'") from None
    return values


def _resolve(args, key: str, default, file_values: dict):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_values:
        return file_values[key]
    return default


def _resolve_seed(args, file_values: dict) -> int:
    seed = _resolve(args, "seed", None, file_values)
    if seed is not None:
        return int(seed)
    env = os.environ.get("LMLCC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"LMLCC_SEED must be an integer, got {env!r}") from None
    return 0


def _bool_flag(value: str, name: str) -> bool:
    if value not in ("true", "false"):
        raise ConfigError(f"--{name} must be true or false, got {value!r}")
    return value == "true"


def _echo_config(resolved: dict, out_dir: Path) -> None:
    lines = "".join(f"{k} = {v}\n" for k, v in sorted(resolved.items()))
    sys.stdout.write(lines)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.txt").write_text(lines)


def _build_model(resolved: dict, seed: int):
    scale = resolved["scale"]
    side = resolved["side"]
    backbone_cfg = BackboneConfig.full(side) if scale == "full" else BackboneConfig.desk(side)
    if resolved["mode"] == "backbone":
        return build_backbone(backbone_cfg, seed=seed)
    cfg = LmlccConfig(
        n_branches=resolved["branches"],
        include_original=resolved["include_original"],
        cuts_mode=resolved["cuts"],
        init=resolved["init"],
        backbone=backbone_cfg,
    )
    return build_lmlcc(cfg, seed=seed)


def _load_split_patches(cache_dir: str, manifest_path: str):
    patches = preprocess.read_patch_cache(cache_dir)
    split, labels = labeling.read_split_manifest(manifest_path)
    return patches, split, labels


def _stack(patch_list):
    return np.stack([p.voxels for p in patch_list]).astype(np.float32)


def _training_sets(patches, split, labels):
    train_patches = [p for p in patches if p.nodule_id in split.train_ids]
    val_patches = [p for p in patches if p.nodule_id in split.val_ids and p.augmentation_tag == "orig"]
    if not train_patches or not val_patches:
        raise DataError("manifest selected an empty train or val set from the cache")
    train_y = np.array([labels[p.nodule_id] for p in train_patches], dtype=np.float64)
    val_y = np.array([labels[p.nodule_id] for p in val_patches], dtype=np.float64)
    return _stack(train_patches), train_y, _stack(val_patches), val_y


def _model_flags(parser: _Parser) -> None:
    parser.add_argument("--mode", choices=("backbone", "lmlcc"))
    parser.add_argument("--scale", choices=("desk", "full"))
    parser.add_argument("--branches", type=int)
    parser.add_argument("--init", choices=("constant", "random"))
    parser.add_argument("--cuts", choices=("learnable", "fixed"))
    parser.add_argument("--include-original", dest="include_original", choices=("true", "false"))
    parser.add_argument("--side", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--config")
    parser.add_argument("--seed", type=int)


def _resolve_model_settings(args) -> tuple[dict, int]:
    file_values = _read_config_file(args.config) if args.config else {}
    seed = _resolve_seed(args, file_values)
    mode = _resolve(args, "mode", "backbone", file_values)
    resolved = {
        "mode": mode,
        "scale": _resolve(args, "scale", "desk", file_values),
        "side": _resolve(args, "side", None, file_values),
        "epochs": _resolve(args, "epochs", 200, file_values),
        "batch_size": _resolve(args, "batch_size", 68, file_values),
        "lr": _resolve(args, "lr", 1e-4, file_values),
        "seed": seed,
    }
    if resolved["side"] is None:
        resolved["side"] = 32 if resolved["scale"] == "full" else 16
    branch_flags = {
        "branches": _resolve(args, "branches", None, file_values),
        "init": _resolve(args, "init", None, file_values),
        "cuts": _resolve(args, "cuts", None, file_values),
        "include_original": _resolve(args, "include_original", None, file_values),
    }
    if mode == "backbone":
        given = [k for k, v in branch_flags.items() if v is not None]
        if given:
            raise ConfigError(
                f"--{given[0].replace('_', '-')} only applies to --mode lmlcc"
            )
    else:
        resolved["branches"] = branch_flags["branches"] if branch_flags["branches"] is not None else 3
        resolved["init"] = branch_flags["init"] or "constant"
        resolved["cuts"] = branch_flags["cuts"] or "learnable"
        io = branch_flags["include_original"]
        resolved["include_original"] = _bool_flag(io, "include-original") if io is not None else False
    return resolved, seed


def _train_config(resolved: dict) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr_init=resolved["lr"],
        seed=resolved["seed"],
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    seed = _resolve_seed(args, {})
    dataset = phantom.generate_dataset(
        n_benign=args.n_benign,
        n_malignant=args.n_malignant,
        side=args.side if args.side is not None else 16,
        seed=seed,
        n_ambiguous=args.n_ambiguous,
    )
    out_dir = Path(args.out)
    dataset.write(out_dir)
    _echo_config(
        {
            "n_benign": args.n_benign,
            "n_malignant": args.n_malignant,
            "n_ambiguous": args.n_ambiguous,
            "side": args.side if args.side is not None else 16,
            "seed": seed,
            "out": out_dir,
        },
        out_dir,
    )
    print(f"wrote {len(dataset.items)} phantom volumes to {out_dir}")
    return EXIT_OK


def cmd_label(args) -> int:
    seed = _resolve_seed(args, {})
    records = ingest.read_ratings(args.ratings)
    labeled = []
    ambiguous = []
    label_map: dict[str, int] = {}
    for rec in records:
        lab = labeling.consensus_label(rec.ratings)
        if lab is labeling.MalignancyLabel.AMBIGUOUS:
            ambiguous.append(rec.nodule_id)
        else:
            labeled.append((rec.nodule_id, lab.value))
            label_map[rec.nodule_id] = lab.value
    split = labeling.split_by_nodule(labeled, seed=seed, unlabeled_ids=ambiguous)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    labeling.write_split_manifest(out, split, label_map)
    _echo_config({"ratings": args.ratings, "out": out, "seed": seed}, out.parent)
    n_benign = sum(1 for _, lab in labeled if lab == 0)
    n_malignant = len(labeled) - n_benign
    print(
        f"labeled {len(labeled)} nodules ({n_benign} benign, {n_malignant} malignant), "
        f"{len(ambiguous)} ambiguous; splits train={len(split.train_ids)} "
        f"val={len(split.val_ids)} test={len(split.test_ids)}"
    )
    return EXIT_OK


def cmd_preprocess(args) -> int:
    file_values = _read_config_file(args.config) if args.config else {}
    side = _resolve(args, "side", 16, file_values)
    augment = args.augment or file_values.get("augment") == "true"
    spacing = tuple(args.spacing) if args.spacing else (0.7, 0.7, 1.0)
    records = ingest.read_ratings(args.ratings)
    split, labels = labeling.read_split_manifest(args.manifest)
    volumes_dir = Path(args.volumes)
    if not volumes_dir.is_dir():
        raise DataError(f"volumes directory not found: {volumes_dir}")

    by_series: dict[str, list] = {}
    for rec in sorted(records, key=lambda r: r.nodule_id):
        by_series.setdefault(rec.series_id, []).append(rec)

    patches = []
    for series_id in sorted(by_series):
        header = volumes_dir / f"{series_id}.mhd"
        volume = ingest.read_mhd_volume(header)
        normalized = preprocess.clip_normalize(volume)
        resampled = preprocess.resample_trilinear(normalized, spacing)
        for rec in by_series[series_id]:
            patch = preprocess.extract_patch(
                resampled, rec.center_world, side,
                nodule_id=rec.nodule_id, label=labels.get(rec.nodule_id),
            )
            if augment and rec.nodule_id in split.train_ids:
                patches.extend(preprocess.rotate_augment(patch))
            else:
                patches.append(patch)
    out_dir = Path(args.out)
    preprocess.write_patch_cache(out_dir, patches)
    _echo_config(
        {
            "volumes": volumes_dir,
            "ratings": args.ratings,
            "manifest": args.manifest,
            "side": side,
            "spacing": " ".join(f"{s:g}" for s in spacing),
            "augment": augment,
            "out": out_dir,
        },
        out_dir,
    )
    print(f"wrote {len(patches)} patches to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    resolved, seed = _resolve_model_settings(args)
    patches, split, labels = _load_split_patches(args.cache, args.manifest)
    train_x, train_y, val_x, val_y = _training_sets(patches, split, labels)
    model = _build_model(resolved, seed)
    tc = _train_config(resolved)
    result = training.train(model, train_x, train_y, val_x, val_y, tc)
    out = Path(args.out)
    training.save_model(out, model)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    training.write_epoch_log(log_path, result.log)
    resolved.update({"cache": args.cache, "manifest": args.manifest, "out": out})
    _echo_config(resolved, out.parent if out.parent != Path("") else Path("."))
    last = result.log[-1]
    print(
        f"trained {resolved['mode']} for {len(result.log)} epochs; "
        f"best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch}; "
        f"final val acc {last.val_acc:.4f}"
    )
    return EXIT_OK


def cmd_pseudolabel(args) -> int:
    resolved, seed = _resolve_model_settings(args)
    file_values = _read_config_file(args.config) if args.config else {}
    threshold = _resolve(args, "threshold", semisup.DEFAULT_THRESHOLD, file_values)
    max_rounds = _resolve(args, "max_rounds", semisup.DEFAULT_MAX_ROUNDS, file_values)
    min_new = _resolve(args, "min_new", semisup.DEFAULT_MIN_NEW, file_values)

    patches, split, labels = _load_split_patches(args.cache, args.manifest)
    orig = {p.nodule_id: p.voxels.astype(np.float32) for p in patches if p.augmentation_tag == "orig"}
    train_labels = {i: labels[i] for i in split.train_ids}
    val_labels = {i: labels[i] for i in split.val_ids}
    unlabeled = sorted(split.unlabeled_ids)
    tc = _train_config(resolved)

    result = semisup.semisup_loop(
        build_model=lambda round_index: _build_model(resolved, seed + round_index),
        patches=orig,
        train_labels=train_labels,
        val_labels=val_labels,
        unlabeled_ids=unlabeled,
        tc=tc,
        threshold=threshold,
        max_rounds=max_rounds,
        min_new=min_new,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    training.save_model(out_dir / "model.ckpt", result.model)
    semisup.write_round_history(out_dir / "rounds.csv", result.rounds)
    remaining = [i for i in unlabeled if i not in result.pseudo_labels]
    semisup.write_pseudo_manifest(
        out_dir / "pseudo_manifest.csv", train_labels, result.pseudo_labels, remaining
    )
    resolved.update(
        {"cache": args.cache, "manifest": args.manifest, "threshold": threshold,
         "max_rounds": max_rounds, "min_new": min_new, "out_dir": out_dir}
    )
    _echo_config(resolved, out_dir)
    print(
        f"pseudo-labeling finished after {len(result.rounds)} rounds; "
        f"{len(result.pseudo_labels)} pseudo-labels accepted, {len(remaining)} remain unlabeled"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = training.load_model(args.ckpt)
    patches, split, labels = _load_split_patches(args.cache, args.manifest)
    wanted = {"train": split.train_ids, "val": split.val_ids, "test": split.test_ids}[args.split]
    eval_patches = [p for p in patches if p.nodule_id in wanted and p.augmentation_tag == "orig"]
    if not eval_patches:
        raise DataError(f"no '{args.split}' patches found in cache")
    x = _stack(eval_patches)
    y = np.array([labels[p.nodule_id] for p in eval_patches], dtype=np.int64)
    probs = training.predict(model, x)
    cuts = model.cuts().tolist() if hasattr(model, "cuts") else None
    report = metrics.evaluate_probs(y, probs, learned_cuts=cuts)
    out_dir = Path(args.out)
    metrics.write_report_csv(report, out_dir)
    _echo_config(
        {"ckpt": args.ckpt, "cache": args.cache, "manifest": args.manifest,
         "split": args.split, "out": out_dir},
        out_dir,
    )
    print(metrics.format_report(report))
    return EXIT_OK


def cmd_gradcam(args) -> int:
    model = training.load_model(args.ckpt)
    patches = preprocess.read_patch_cache(args.cache)
    match = [
        p for p in patches
        if p.nodule_id == args.nodule_id and p.augmentation_tag == "orig"
    ]
    if not match:
        raise DataError(f"nodule '{args.nodule_id}' not found in cache {args.cache}")
    patch = match[0]
    heatmap = grad_cam(model, patch.voxels.astype(np.float32))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    volume = ingest.CtVolume(
        series_id=out.stem,
        dims=(patch.side,) * 3,
        spacing=(1.0, 1.0, 1.0),
        origin=(0.0, 0.0, 0.0),
        voxels=heatmap.astype(np.float64),
    )
    ingest.write_mhd_volume(volume, out, element_type="MET_FLOAT")
    _echo_config(
        {"ckpt": args.ckpt, "cache": args.cache, "nodule_id": args.nodule_id, "out": out},
        out.parent,
    )
    print(f"wrote heatmap for '{args.nodule_id}' to {out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="lmlcc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-benign", dest="n_benign", type=int, default=20)
    p.add_argument("--n-malignant", dest="n_malignant", type=int, default=20)
    p.add_argument("--n-ambiguous", dest="n_ambiguous", type=int, default=0)
    p.add_argument("--side", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("label", help="consensus-label ratings and split by nodule")
    p.add_argument("--ratings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("preprocess", help="normalize, resample, and cut patches")
    p.add_argument("--volumes", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int)
    p.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"))
    p.add_argument("--augment", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the backbone or multi-branch model")
    p.add_argument("--cache", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudolabel", help="semi-supervised pseudo-labeling loop")
    p.add_argument("--cache", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-rounds", dest="max_rounds", type=int)
    p.add_argument("--min-new", dest="min_new", type=int)
    _model_flags(p)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcam", help="write an activation heatmap for one nodule")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--nodule-id", dest="nodule_id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"lmlcc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"lmlcc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"lmlcc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PipelineError as exc:
        print(f"lmlcc: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

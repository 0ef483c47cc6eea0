"""Command-line entry point: ``vesselseg <command> ...``.

Commands: phantom, preprocess, enhance, train, predict, evaluate, gradcheck.
Each writes its outputs plus ``manifest.json`` (config, input hashes, output
paths, wall time) into ``--out``; the default output directory comes from
``VESSELSEG_OUTPUT_DIR`` or the current directory.

Image directories pair files by stem: ``x.png`` is the image, ``x_label.png``
its vessel label and ``x_fov.png`` its field-of-view mask.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 tolerance failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, imageio
from .config import ConfigFileError, RunConfig, RunManifest, effective_config
from .dpcn import DeformConvLayer, contrast_gap, dpcn_run
from .gradsuite import run_suite
from .m2net import Sample, build, predict, train
from .metrics import aggregate, confusion, evaluate_image
from .phantom import GenerationError, dataset
from .preprocess import preprocess_pipeline
from .tensor import ContractError, DimensionError, no_grad

log = logging.getLogger("vesselseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TOLERANCE = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".gif"}
ROLE_SUFFIXES = ("_label", "_fov", "_prob", "_mask")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ToleranceFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ files


def _find_role(directory: Path, stem: str, role: str) -> Optional[Path]:
    for suffix in sorted(IMAGE_SUFFIXES):
        p = directory / f"{stem}{role}{suffix}"
        if p.exists():
            return p
    return None


def list_images(directory: Path) -> list[Path]:
    """Plain images in ``directory`` (labels, masks and predictions excluded), sorted by name."""
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(
        p
        for p in directory.iterdir()
        if p.suffix.lower() in IMAGE_SUFFIXES and not p.stem.endswith(ROLE_SUFFIXES)
    )


def _expand_images(paths: Sequence[str]) -> list[Path]:
    out: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out.extend(list_images(p))
        elif p.exists():
            out.append(p)
        else:
            raise DataError(f"no such file: {p}")
    return out


def _read(path: Path, reader=imageio.read_image) -> np.ndarray:
    try:
        return reader(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --------------------------------------------------------------- commands


def cmd_phantom(args, cfg: RunConfig, manifest: RunManifest) -> int:
    out = Path(args.out)
    spec = cfg.phantom()
    try:
        data = dataset(spec, args.count, cfg.seed, train_fraction=args.train_fraction)
    except (GenerationError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    rows = []
    for split, samples in (("train", data.train), ("test", data.test)):
        folder = out / split
        folder.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            stem = f"phantom_{i:04d}"
            paths = [folder / f"{stem}.png", folder / f"{stem}_label.png", folder / f"{stem}_fov.png"]
            imageio.write_gray(paths[0], s.image)
            imageio.write_mask(paths[1], s.label)
            imageio.write_mask(paths[2], s.fov)
            manifest.outputs.extend(str(p) for p in paths)
            rel = [str(p.relative_to(out)) for p in paths]
            rows.append([split, *rel, s.seed, _fmt(s.vessel_fraction)])
    csv_path = out / "phantoms.csv"
    _write_csv(csv_path, ["split", "image", "label", "fov", "seed", "vessel_fraction"], rows)
    manifest.outputs.append(str(csv_path))
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pcfg = cfg.preprocess()
    images = list_images(Path(args.in_dir))
    failed = []
    for path in images:
        try:
            img = _read(path)
        except DataError as exc:
            log.error("%s", exc)
            failed.append(str(path))
            continue
        manifest.add_input(path)
        mixed, equalized, corrected = preprocess_pipeline(img, pcfg, return_stages=True)
        target = out / f"{path.stem}.png"
        imageio.write_gray(target, corrected)
        manifest.outputs.append(str(target))
        if args.save_stages:
            for tag, stage in (("mix", mixed), ("clahe", equalized), ("gamma", corrected)):
                stage_path = out / "stages" / f"{path.stem}_{tag}.png"
                stage_path.parent.mkdir(exist_ok=True)
                imageio.write_gray(stage_path, stage)
                manifest.outputs.append(str(stage_path))
    manifest.errors.extend(f"unreadable: {p}" for p in failed)
    return EXIT_DATA if failed else EXIT_OK


def _load_model(ckpt: Optional[str], cfg: RunConfig):
    model = build(cfg.model(), cfg.seed)
    if ckpt is not None:
        try:
            model.load_state_dict(checkpoint.load(ckpt))
        except (OSError, checkpoint.CheckpointError, ContractError) as exc:
            raise DataError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    return model


def cmd_enhance(args, cfg: RunConfig, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.image)
    img = _read(path)
    manifest.add_input(path)
    gray = imageio.read_gray(path) if args.raw else preprocess_pipeline(img, cfg.preprocess())
    if args.checkpoint:
        layer = _load_model(args.checkpoint, cfg).dpcn_layer
        manifest.add_input(args.checkpoint)
        if layer is None:
            raise UsageError("the configured model has no DPCN layer")
    else:
        layer = DeformConvLayer.create()
    with no_grad():
        seq = dpcn_run(gray, cfg.dpcn(), layer)
    for n, y in enumerate(seq, start=1):
        p = out / f"iter_{n:03d}.png"
        imageio.write_gray(p, y.data[0])
        manifest.outputs.append(str(p))
    if args.label:
        label = _read(Path(args.label), imageio.read_mask)
        manifest.add_input(args.label)
        if label.shape != gray.shape:
            raise DataError(f"label {label.shape} does not match image {gray.shape}")
        try:
            base = contrast_gap(gray, label)
            rows = [[n, _fmt(contrast_gap(y.data[0], label))] for n, y in enumerate(seq, start=1)]
        except ContractError as exc:
            raise DataError(str(exc)) from exc
        csv_path = out / "contrast.csv"
        _write_csv(csv_path, ["iteration", "contrast_gap"], rows)
        manifest.outputs.append(str(csv_path))
        manifest.notes["input_contrast_gap"] = base
    return EXIT_OK


def load_samples(directory: Path, cfg: RunConfig, manifest: Optional[RunManifest] = None) -> list[Sample]:
    pcfg = cfg.preprocess()
    samples = []
    for path in list_images(directory):
        label_path = _find_role(directory, path.stem, "_label")
        if label_path is None:
            raise DataError(f"no label for {path.name} (expected {path.stem}_label.png)")
        fov_path = _find_role(directory, path.stem, "_fov")
        image = preprocess_pipeline(_read(path), pcfg)
        label = _read(label_path, imageio.read_mask)
        fov = _read(fov_path, imageio.read_mask) if fov_path else None
        if label.shape != image.shape or (fov is not None and fov.shape != image.shape):
            raise DataError(f"{path.name}: image, label and fov sizes differ")
        if manifest is not None:
            for p in (path, label_path, fov_path):
                if p is not None:
                    manifest.add_input(p)
        samples.append(Sample(image, label, fov))
    return samples


def cmd_train(args, cfg: RunConfig, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = load_samples(Path(args.dataset_dir), cfg, manifest)
    if not samples:
        raise DataError(f"no training images in {args.dataset_dir}")
    model = build(cfg.model(), cfg.seed)
    log_path = out / "train_log.csv"
    rows: list[list] = []

    def record(entry: dict) -> None:
        rows.append([entry["epoch"], _fmt(entry["mean_loss"]), _fmt(entry["lr"])])
        _write_csv(log_path, ["epoch", "mean_loss", "lr"], rows)

    try:
        train(model, samples, cfg.loss(), cfg.train(), callback=record)
    except DimensionError as exc:
        raise DataError(str(exc)) from exc
    _write_csv(log_path, ["epoch", "mean_loss", "lr"], rows)
    ckpt = out / "model.ckpt"
    checkpoint.save(model.state_dict(), ckpt)
    cfg_path = out / "config.json"
    cfg_path.write_text(cfg.to_json() + "\n")
    manifest.outputs.extend([str(ckpt), str(log_path), str(cfg_path)])
    manifest.notes["parameter_count"] = model.parameter_count()
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.checkpoint, cfg)
    manifest.add_input(args.checkpoint)
    threshold = cfg.threshold
    for path in _expand_images(args.images):
        img = _read(path)
        manifest.add_input(path)
        try:
            prob, mask = predict(model, preprocess_pipeline(img, cfg.preprocess()), threshold)
        except DimensionError as exc:
            raise DataError(f"{path.name}: {exc}") from exc
        prob_path, mask_path = out / f"{path.stem}_prob.png", out / f"{path.stem}_mask.png"
        imageio.write_gray(prob_path, prob)
        imageio.write_mask(mask_path, mask)
        if args.save_npy:
            np.save(out / f"{path.stem}_prob.npy", prob)
            manifest.outputs.append(str(out / f"{path.stem}_prob.npy"))
        manifest.outputs.extend([str(prob_path), str(mask_path)])
    return EXIT_OK


METRIC_HEADER = ["image", "tp", "fp", "tn", "fn", "acc", "sen", "spe", "f1", "auc"]


def cmd_evaluate(args, cfg: RunConfig, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    fov_dir = Path(args.fov_dir) if args.fov_dir else gt_dir
    results = []
    for gt_path in list_images(gt_dir):
        stem = gt_path.stem
        label_path = _find_role(gt_dir, stem, "_label")
        if label_path is None:
            continue
        prob_npy = pred_dir / f"{stem}_prob.npy"
        prob_path = prob_npy if prob_npy.exists() else _find_role(pred_dir, stem, "_prob")
        if prob_path is None:
            raise DataError(f"no prediction for {stem} in {pred_dir}")
        prob = np.load(prob_path) if prob_path.suffix == ".npy" else _read(prob_path, imageio.read_gray)
        mask_path = _find_role(pred_dir, stem, "_mask")
        label = _read(label_path, imageio.read_mask)
        fov = None
        fov_path = None if args.no_fov else _find_role(fov_dir, stem, "_fov")
        if fov_path is not None:
            fov = _read(fov_path, imageio.read_mask)
        for p in (prob_path, mask_path, label_path, fov_path):
            if p is not None:
                manifest.add_input(p)
        try:
            result = evaluate_image(prob, label, fov, cfg.threshold, name=stem)
            if mask_path is not None:
                # the written mask is authoritative for the counts
                mask = _read(mask_path, imageio.read_mask)
                result = replace(result, counts=confusion(mask, label, fov))
        except (ContractError, DimensionError) as exc:
            raise DataError(f"{stem}: {exc}") from exc
        results.append(result)
    if not results:
        raise DataError(f"no labelled images in {gt_dir}")
    summary = aggregate(results, args.mode)
    reports = [(r.name, r.report()) for r in results] + [(args.mode, summary)]
    rows = [[name, *(rep.as_row()[k] for k in METRIC_HEADER[1:])] for name, rep in reports]
    csv_path = out / "metrics.csv"
    _write_csv(csv_path, METRIC_HEADER, [[_fmt(v) for v in row] for row in rows])
    manifest.outputs.append(str(csv_path))
    print(f"{args.mode}: f1={_fmt(summary.f1)} auc={_fmt(summary.auc)} acc={_fmt(summary.acc)}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = run_suite(range(args.seeds), args.eps)
    rows = [[name, repr(err), "pass" if err < args.tol else "fail"] for name, err in errors.items()]
    for row in rows:
        print(f"{row[0]:<22} {float(row[1]):.3e} {row[2]}")
    csv_path = out / "gradcheck.csv"
    _write_csv(csv_path, ["op", "max_rel_error", "status"], rows)
    manifest.outputs.append(str(csv_path))
    if any(row[2] == "fail" for row in rows):
        raise ToleranceFailure(f"gradient check above {args.tol}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get("VESSELSEG_OUTPUT_DIR", ".")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--out", default=default_out, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vesselseg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate synthetic phantoms")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", parents=[common], help="channel mix, CLAHE and gamma")
    p.add_argument("in_dir")
    p.add_argument("--save-stages", action="store_true", help="also write each intermediate stage")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("enhance", parents=[common], help="run the DPCN and write each iteration")
    p.add_argument("image")
    p.add_argument("--label", help="vessel label; enables contrast.csv")
    p.add_argument("--checkpoint", help="take the linking layer from a trained model")
    p.add_argument("--raw", action="store_true", help="skip preprocessing (gray input as is)")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train", parents=[common], help="train the segmentation network")
    p.add_argument("dataset_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="probability map and mask per image")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+", help="image files or directories")
    p.add_argument("--threshold", type=float)
    p.add_argument("--save-npy", action="store_true", help="also keep the unquantized probabilities")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="confusion-based metrics and AUC")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--fov-dir", help="directory of *_fov masks (default: gt_dir)")
    p.add_argument("--no-fov", action="store_true", help="score every pixel")
    p.add_argument("--mode", choices=["pooled", "mean"], default="pooled")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _flag_overrides(args) -> list[str]:
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    for flag, key in (("epochs", "train.epochs"), ("batch_size", "train.batch_size"), ("lr", "train.lr"), ("threshold", "threshold")):
        value = getattr(args, flag, None)
        if value is not None:
            sets.append(f"{key}={json.dumps(value)}")
    return sets


def _default_config_path(args) -> Optional[str]:
    # predict and enhance reuse the config a training run stored next to its checkpoint
    if args.config:
        return args.config
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        candidate = Path(ckpt).with_name("config.json")
        if candidate.exists():
            return str(candidate)
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(_default_config_path(args), _flag_overrides(args))
    except ConfigFileError as exc:
        print(f"vesselseg: {exc}", file=sys.stderr)
        return EXIT_USAGE

    manifest = RunManifest(command=args.command, config=effective_config(cfg))
    start = time.perf_counter()
    code = EXIT_OK
    try:
        code = args.func(args, cfg, manifest)
    except (UsageError, ConfigFileError) as exc:
        manifest.errors.append(str(exc))
        code = EXIT_USAGE
    except DataError as exc:
        manifest.errors.append(str(exc))
        code = EXIT_DATA
    except ToleranceFailure as exc:
        manifest.errors.append(str(exc))
        code = EXIT_TOLERANCE
    manifest.wall_time = time.perf_counter() - start
    manifest.status = {EXIT_OK: "ok", EXIT_USAGE: "usage-error", EXIT_DATA: "data-error"}.get(code, "tolerance-failure")
    for err in manifest.errors:
        print(f"vesselseg: {err}", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())

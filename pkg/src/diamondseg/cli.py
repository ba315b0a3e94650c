"""Command-line entry point: ``diamondseg [global flags] <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 declared runtime shortfall.
Outputs go under ``--out`` in ``datasets/``, ``models/``, ``reports/`` and ``logs/``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_SHORTFALL = 0, 2, 3
SEEDED = ("synth", "train", "pipeline", "grid")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class Shortfall(Exception):
    pass


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="key-value (INI) config file")
    parser.add_argument("--seed", type=int, default=d(None), help="master seed (required for synth/train/pipeline/grid)")
    parser.add_argument("--out", default=d("out"), help="output root (default: out)")
    parser.add_argument("--threads", type=int, default=d(1), help="worker processes for grid cells (default: 1)")
    parser.add_argument("--deterministic", action="store_true", default=d(False),
                        help="single-threaded reductions and timing-free outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diamondseg", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic growth runs")
    p.add_argument("--spec", help="run spec file ([synth] section); overrides config")
    p.add_argument("--runs", type=int, default=1, help="number of runs; >1 draws randomized run specs")
    p.add_argument("--frames", type=int, help="frames per run")
    p.add_argument("--name", default="synth", help="dataset name under datasets/")

    p = sub.add_parser("preprocess", parents=[common], help="resample, filter, crop, resize, denoise and split")
    p.add_argument("--input", required=True, help="raw dataset directory")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--name", default="processed")

    p = sub.add_parser("train", parents=[common], help="train one model on a processed dataset")
    p.add_argument("--dataset", required=True, help="processed dataset directory (train/test tags)")
    p.add_argument("--family", default="deeplabv3plus", choices=("fcn8", "deeplabv3", "deeplabv3plus"))
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=("focal", "cross_entropy"))
    p.add_argument("--augment-rate", type=int, default=1, help="dataset size multiplier (1 = no augmentation)")
    p.add_argument("--name", help="model name (default: <family>_<resolution>)")

    p = sub.add_parser("eval", parents=[common], help="Table-I style metrics on a dataset split")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "pool", "all"))
    p.add_argument("--name", help="report name (default: weights stem)")

    p = sub.add_parser("features", parents=[common], help="derived features (area, gap, shape) over a run")
    p.add_argument("--run", required=True, help="dataset directory with frames of one or more runs")
    p.add_argument("--weights", help="predict masks with this model instead of using ground truth")
    p.add_argument("--svg", action="store_true", help="also write an area-vs-time SVG chart")
    p.add_argument("--name", default="features")

    p = sub.add_parser("pipeline", parents=[common], help="baseline + final human-in-the-loop phases")
    p.add_argument("--corpus", help="processed dataset (train = pool, test = validation); default: toy corpus")
    p.add_argument("--samples", type=int, default=300, help="toy corpus size when --corpus is absent")

    p = sub.add_parser("grid", parents=[common], help="families x resolutions x augmentation rates")
    p.add_argument("--base-samples", type=int, help="synthetic base images before the 90:10 split")
    p.add_argument("--epochs", type=int)
    p.add_argument("--base-width", type=int)
    return parser


# ------------------------------------------------------------------ helpers


def _layout(out: Path) -> dict[str, Path]:
    dirs = {k: out / k for k in ("datasets", "models", "reports", "logs")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _section(args, name: str) -> dict[str, str]:
    if not args.config:
        return {}
    from .config import load_config

    return load_config(args.config).get(name, {})


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ----------------------------------------------------------------- commands


def cmd_synth(args, dirs) -> int:
    from .config import coerce, load_config
    from .imaging import write_dataset
    from .synthgen import GrowthRunSpec, generate_run, random_run_spec, validate_spec

    raw = dict(_section(args, "synth"))
    if args.spec:
        raw.update(load_config(args.spec).get("synth", {}))
    raw["seed"] = str(args.seed)
    if args.frames is not None:
        raw["frames"] = str(args.frames)
    spec = coerce(GrowthRunSpec, raw)
    validate_spec(spec)
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    if args.runs == 1:
        specs = [spec]
    else:
        overrides = {k: v for k, v in dataclass_dict(spec).items() if k in raw and k not in ("seed", "frames")}
        specs = [random_run_spec(args.seed * 1000 + k, spec.frames, **overrides) for k in range(args.runs)]
    samples = []
    for s in specs:
        samples.extend(generate_run(s))
    root = dirs["datasets"] / args.name
    write_dataset(samples, root)
    kinds = [s.meta.get("frame_kind", "clean") for s in samples]
    print(f"synth: {len(samples)} frames in {len(specs)} run(s); blackout={kinds.count('blackout')} "
          f"noise={kinds.count('noise')} -> {root}")
    return EXIT_OK


def dataclass_dict(obj) -> dict:
    import dataclasses

    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def cmd_preprocess(args, dirs) -> int:
    from .config import coerce
    from .imaging import read_dataset, write_dataset
    from .preprocess import PreprocessConfig, preprocess_dataset, write_reject_report

    config = coerce(PreprocessConfig, _section(args, "preprocess"))
    samples = read_dataset(args.input)
    result = preprocess_dataset(samples, args.resolution, config)
    root = dirs["datasets"] / args.name
    write_dataset(result.train + result.test, root)
    write_reject_report(result.rejected, dirs["reports"] / f"{args.name}_rejects.csv")
    print(f"preprocess: {len(result.train)} train / {len(result.test)} test, {len(result.rejected)} rejected -> {root}")
    return EXIT_OK


def _split(samples, tag):
    return samples if tag == "all" else [s for s in samples if s.split_tag == tag]


def cmd_train(args, dirs) -> int:
    from .augment import AugmentPlan, augment_dataset
    from .config import coerce
    from .errors import EmptyDataset
    from .imaging import read_dataset
    from .models import ArchConfig, TrainConfig, build, save_model, train

    cfg = dict(_section(args, "train"))
    for key in ("epochs", "batch_size", "lr", "loss"):
        if getattr(args, key) is not None:
            cfg[key] = str(getattr(args, key))
    cfg["seed"] = str(args.seed)
    tconf = coerce(TrainConfig, cfg)
    arch = ArchConfig(args.family, args.base_width, input_resolution=args.resolution, seed=args.seed)
    samples = read_dataset(args.dataset)
    originals = _split(samples, "train")
    if not originals:
        raise EmptyDataset(f"no train-tagged samples in {args.dataset}")
    if any(s.image.shape[:2] != (args.resolution, args.resolution) for s in originals):
        raise UsageError(f"dataset frames are not {args.resolution}x{args.resolution}; preprocess first")
    train_set = augment_dataset(originals, AugmentPlan(rate=args.augment_rate, seed=args.seed))
    model = build(arch)
    _, history = train(model, train_set, originals, tconf, log=_log)
    name = args.name or f"{args.family}_{args.resolution}"
    digest = save_model(model, dirs["models"] / f"{name}.dsgw")
    history.to_csv(dirs["reports"] / f"{name}_history.csv", with_timing=not args.deterministic)
    print(f"train: {name} best epoch {history.best_epoch} val mIoU {max(history.val_miou):.4f} sha256 {digest[:12]}")
    return EXIT_OK


def cmd_eval(args, dirs) -> int:
    from .errors import EmptyDataset
    from .imaging import read_dataset
    from .metrics import report_json, rows_to_csv, table_row
    from .models import evaluate, load_model

    model = load_model(args.weights)
    samples = _split(read_dataset(args.dataset), args.split)
    if not samples:
        raise EmptyDataset(f"no '{args.split}' samples in {args.dataset}")
    cm = evaluate(model, samples)
    name = args.name or Path(args.weights).stem
    row = table_row(model.config.family, f"{Path(args.dataset).name}:{args.split}", model.config.input_resolution, cm)
    (dirs["reports"] / f"{name}_eval.csv").write_text(rows_to_csv([row]))
    (dirs["reports"] / f"{name}_eval.json").write_text(report_json(cm, model=model.config.family, split=args.split))
    print(f"eval: {name} mIoU {row['miou']}% on {len(samples)} {args.split} images")
    return EXIT_OK


def cmd_features(args, dirs) -> int:
    from .geometry import area_chart_svg, features_to_csv, growth_slope, run_features
    from .imaging import read_dataset
    from .models import load_model, predict_mask
    from .preprocess import PreprocessConfig, denoise, frame_defect, normalize, resize

    samples = sorted(read_dataset(args.run), key=lambda s: (s.run_id, s.timestamp_min, s.id))
    if args.weights:
        model = load_model(args.weights)
        r = model.config.input_resolution
        masks = []
        for s in samples:
            small = resize(s.with_(mask=None), r)
            masks.append(predict_mask(model, normalize(denoise(small.image)))[0])
    else:
        if any(s.mask is None for s in samples):
            raise UsageError("ground-truth mode needs masks; pass --weights to predict them")
        masks = [s.mask for s in samples]
    runs: dict[str, list] = {}
    for s, m in zip(samples, masks):
        defect = frame_defect(s.image, PreprocessConfig())
        runs.setdefault(s.run_id, []).append((s.timestamp_min, m, [defect] if defect else []))
    per_run = {run_id: run_features(items) for run_id, items in sorted(runs.items())}
    (dirs["reports"] / f"{args.name}.csv").write_text(features_to_csv(per_run))
    if args.svg:
        for run_id, rows in per_run.items():
            suffix = "" if len(per_run) == 1 else f"_{run_id}"
            (dirs["reports"] / f"{args.name}{suffix}.svg").write_text(area_chart_svg(rows, title=run_id))
    for run_id, rows in per_run.items():
        print(f"features: {run_id} {len(rows)} frames, area slope {growth_slope(rows):.3f} px/min")
    return EXIT_OK


def cmd_pipeline(args, dirs) -> int:
    from .config import coerce
    from .imaging import read_dataset
    from .pipeline import (
        PipelineConfig, effort_csv, relabel_csv, run_pipeline, store_model, toy_corpus,
    )
    from .synthgen import AnnotatorNoiseSpec

    raw = dict(_section(args, "pipeline"))
    raw["seed"] = str(args.seed)
    noise = coerce(AnnotatorNoiseSpec, _section(args, "noise"))
    config = coerce(PipelineConfig, raw, PipelineConfig(noise=noise))
    if args.corpus:
        samples = read_dataset(args.corpus)
        pool = [s.with_(split_tag="pool") for s in samples if s.split_tag == "train"]
        validation = [s for s in samples if s.split_tag == "test"]
    else:
        pool, validation = toy_corpus(args.samples, seed=args.seed, resolution=config.resolution)
    result = run_pipeline(pool, validation, config)
    (dirs["logs"] / "audit.jsonl").write_text(result.audit.text())
    (dirs["reports"] / "effort.csv").write_text(effort_csv(result.effort))
    (dirs["reports"] / "relabel.csv").write_text(relabel_csv(result.reports))
    summary = {"exhausted": result.exhausted, "baseline_best_val_miou": result.baseline.best_miou}
    store = dirs["models"] / "store"
    if result.baseline.model is not None and not result.exhausted:
        summary["baseline_model"] = store_model(result.baseline.model, store).name
    if result.final is not None:
        summary.update(final_best_val_miou=result.final.best_miou, final_reached=result.final.reached,
                       final_model=store_model(result.final.model, store).name)
    (dirs["reports"] / "pipeline_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if result.exhausted:
        raise Shortfall("pool exhausted before the MAL gate passed; see logs/audit.jsonl")
    print(f"pipeline: baseline {result.baseline.best_miou:.4f}, final {result.final.best_miou:.4f} "
          f"(threshold reached: {result.final.reached})")
    return EXIT_OK


def cmd_grid(args, dirs) -> int:
    from .grid import GridConfig, run_grid, trend_report
    from .config import coerce
    from .metrics import rows_to_csv

    raw = dict(_section(args, "grid"))
    for key in ("base_samples", "epochs", "base_width"):
        if getattr(args, key) is not None:
            raw[key] = str(getattr(args, key))
    raw["seed"] = str(args.seed)
    config = coerce(GridConfig, raw)
    threads = 1 if args.deterministic else max(1, args.threads)
    rows = run_grid(config, threads=threads, log=_log, timing=not args.deterministic)
    from .grid import GRID_COLUMNS

    (dirs["reports"] / "grid.csv").write_text(rows_to_csv(rows, GRID_COLUMNS))
    (dirs["reports"] / "grid_trend.json").write_text(json.dumps(trend_report(rows), indent=2, sort_keys=True) + "\n")
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"grid: {len(rows)} cells, {failed} failed -> {dirs['reports'] / 'grid.csv'}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
    "features": cmd_features, "pipeline": cmd_pipeline, "grid": cmd_grid,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.deterministic or args.threads == 1:
        for var in THREAD_VARS:
            os.environ.setdefault(var, "1")

    from .errors import DiamondSegError, ExhaustedPool

    if args.command in SEEDED and args.seed is None:
        _log(f"error: --seed is required for '{args.command}'")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, _layout(Path(args.out)))
    except (Shortfall, ExhaustedPool) as exc:
        _log(f"shortfall: {exc.args[0] if exc.args else exc}")
        return EXIT_SHORTFALL
    except (UsageError, DiamondSegError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

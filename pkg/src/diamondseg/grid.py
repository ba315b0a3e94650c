"""The families x resolutions x augmentation-rates experiment grid."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .augment import AugmentPlan, augment_dataset
from .metrics import TABLE_COLUMNS, table_row
from .models import FAMILIES, ArchConfig, TrainConfig, build, evaluate, train
from .preprocess import PreprocessConfig, prepare_split
from .synthgen import make_corpus

GRID_COLUMNS = TABLE_COLUMNS + ("rate", "train_size", "seconds", "status")


@dataclass(frozen=True)
class GridConfig:
    seed: int = 0
    base_samples: int = 100
    frames_per_run: int = 20
    families: tuple[str, ...] = FAMILIES
    resolutions: tuple[int, ...] = (64, 128)
    rates: tuple[int, ...] = (2, 5, 10)
    epochs: int = 10
    base_width: int = 16
    batch_size: int = 20
    lr: float = 3e-4
    loss: str = "focal"


def grid_data(config: GridConfig, resolution: int):
    runs = -(-config.base_samples // config.frames_per_run)
    raw = make_corpus(runs, config.frames_per_run, seed=config.seed)[: config.base_samples]
    train_set, test_set, _ = prepare_split(raw, resolution, PreprocessConfig())
    return train_set, test_set


def run_cell(config: GridConfig, family: str, resolution: int, rate: int, data=None, timing: bool = True) -> dict:
    """Train and test one grid cell; failures become a status string instead of an exception."""
    start = time.perf_counter()
    base = {"rate": rate, "model": family, "resolution": resolution}
    try:
        originals, test_set = data if data is not None else grid_data(config, resolution)
        train_set = augment_dataset(originals, AugmentPlan(rate=rate, seed=config.seed))
        model = build(ArchConfig(family, config.base_width, input_resolution=resolution, seed=config.seed))
        tconf = TrainConfig(config.epochs, config.batch_size, config.lr, config.loss, seed=config.seed)
        train(model, train_set, originals, tconf)
        row = table_row(family, f"{rate}x ({len(train_set)})", resolution, evaluate(model, test_set))
        row.update(base, train_size=len(train_set), status="ok")
    except Exception as exc:  # recorded per cell; the grid carries on
        row = {c: "" for c in GRID_COLUMNS}
        row.update(base, dataset=f"{rate}x", train_size="", status=f"error: {type(exc).__name__}: {exc}")
    row["seconds"] = f"{time.perf_counter() - start:.1f}" if timing else "0"
    return row


def grid_cells(config: GridConfig):
    return [(f, r, k) for f in config.families for r in config.resolutions for k in config.rates]


def run_grid(config: GridConfig, threads: int = 1, log=None, timing: bool = True) -> list[dict]:
    """All cells in family, resolution, rate order; ``threads > 1`` runs cells in worker processes."""
    cells = grid_cells(config)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_cell, config, f, r, k, None, timing) for f, r, k in cells]
            return [fut.result() for fut in futures]
    data = {r: grid_data(config, r) for r in config.resolutions}
    rows = []
    for f, r, k in cells:
        rows.append(run_cell(config, f, r, k, data[r], timing))
        if log is not None:
            log(f"grid: {f} {r}px {k}x -> mIoU {rows[-1]['miou'] or '-'} ({rows[-1]['status']})")
    return rows


def trend_report(rows: list[dict]) -> dict:
    """Whether the largest augmentation rate beat the smallest, per family and resolution."""
    out = {}
    for row in rows:
        out.setdefault(f"{row['model']}@{row['resolution']}", {})[int(row["rate"])] = row["miou"]
    report = {}
    for key, by_rate in sorted(out.items()):
        lo, hi = min(by_rate), max(by_rate)
        a, b = by_rate[lo], by_rate[hi]
        report[key] = {
            f"miou_{lo}x": a, f"miou_{hi}x": b,
            "larger_dataset_better": (float(b) >= float(a)) if a != "" and b != "" else None,
        }
    return report

"""Human-in-the-loop labeling and training loop.

Two phases share one loop.  The baseline phase labels batches from scratch until a model
clears the model-assisted-labeling gate; the final phase lets that baseline pre-annotate the
remaining batches and keeps training until the final threshold or the caps are hit.  After
every training step a selective-augmentation round adds copies of the images the model still
gets wrong and flags the ones that stay wrong.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import augment_copies
from .errors import DatasetTooSmall, EmptyPool, ExhaustedPool, InvalidConfig, MissingPreannotations
from .imaging import BACKGROUND, Sample
from .metrics import confusion, mean_iou
from .models import ArchConfig, SegmentationModel, TrainConfig, build, evaluate, model_hash, predict_samples, save_model, train
from .preprocess import PreprocessConfig, prepare_split
from .synthgen import AnnotatorNoiseSpec, consensus, make_corpus, simulate_annotator

STRATEGIES = ("temporal_stratified", "entropy_topk")
SCRATCH_MINUTES = 13.0
MAL_FLOOR_MINUTES = 3.2


@dataclass(frozen=True)
class SelectionPolicy:
    strategy: str = "entropy_topk"
    batch_size: int = 100

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"strategy must be one of {STRATEGIES}")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    family: str = "deeplabv3plus"
    resolution: int = 64
    base_width: int = 16
    batch_size: int = 100
    annotators: int = 3
    noise: AnnotatorNoiseSpec = AnnotatorNoiseSpec()
    baseline_threshold: float = 0.80
    final_threshold: float = 0.95
    sal_max_rounds: int = 5
    sal_low_threshold: float = 0.80
    sal_copies: int = 4
    max_iterations: int = 8
    epochs_per_round: int = 10
    train_batch_size: int = 20
    lr: float = 3e-4
    loss: str = "focal"

    def __post_init__(self):
        for name in ("baseline_threshold", "final_threshold", "sal_low_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must lie in (0, 1)")
        if self.annotators < 1 or self.sal_max_rounds < 0 or self.sal_copies < 0 or self.max_iterations < 1:
            raise InvalidConfig("annotators, max_iterations >= 1; sal rounds and copies >= 0")

    def arch(self) -> ArchConfig:
        return ArchConfig(self.family, self.base_width, input_resolution=self.resolution, seed=self.seed)

    def train_config(self, iteration: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs_per_round, batch_size=self.train_batch_size, lr=self.lr,
            loss=self.loss, seed=self.seed * 1000 + iteration,
        )


@dataclass
class RelabelReport:
    iteration: int
    entries: list[tuple[str, float, int]] = field(default_factory=list)  # (id, mIoU, persistent-low count)


@dataclass
class EffortRecord:
    phase: str
    iteration: int
    mode: str
    images: int
    corrected_pixel_fraction: float
    proxy_minutes: float


@dataclass
class LoopState:
    phase: str = "baseline"
    iteration: int = 0
    sal_rounds: int = 0
    gate_passed: bool = False
    labeled: list[Sample] = field(default_factory=list)
    pool: list[Sample] = field(default_factory=list)
    sal_extra: list[Sample] = field(default_factory=list)
    aug_count: dict[str, int] = field(default_factory=dict)
    low_streak: dict[str, int] = field(default_factory=dict)
    val_miou: list[float] = field(default_factory=list)
    effort: list[EffortRecord] = field(default_factory=list)
    reports: list[RelabelReport] = field(default_factory=list)
    model: SegmentationModel | None = None
    gated_model_hash: str | None = None

    def training_set(self) -> list[Sample]:
        return self.labeled + self.sal_extra


class AuditLog:
    """One JSON object per line; no wall-clock fields so two runs compare byte for byte."""

    def __init__(self):
        self.lines: list[str] = []

    def event(self, name: str, **payload) -> None:
        self.lines.append(json.dumps({"event": name, **payload}, sort_keys=True))

    def text(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.lines else "")


def _stable_id_seed(seed: int, sample_id: str, k: int) -> list[int]:
    return [seed, zlib.crc32(sample_id.encode()), k]


# --------------------------------------------------------------- selection


def _temporal_stratified(pool: list[Sample], n: int) -> list[Sample]:
    runs: dict[str, list[Sample]] = {}
    for s in pool:
        runs.setdefault(s.run_id, []).append(s)
    names = sorted(runs)
    sizes = np.array([len(runs[r]) for r in names], dtype=np.float64)
    exact = sizes * n / sizes.sum()
    quota = np.floor(exact).astype(int)
    # largest remainder, ties broken by run id order
    for i in sorted(range(len(names)), key=lambda i: (-(exact[i] - quota[i]), names[i]))[: n - quota.sum()]:
        quota[i] += 1
    picked = []
    for name, q in zip(names, quota):
        frames = sorted(runs[name], key=lambda s: (s.timestamp_min, s.id))
        m = len(frames)
        picked.extend(frames[int((i + 0.5) * m / q)] for i in range(q))
    return picked


def pixel_entropy(probs: np.ndarray) -> np.ndarray:
    """Mean per-pixel softmax entropy (nats) for ``(N, C, H, W)`` probabilities."""
    p = np.clip(probs.astype(np.float64), 1e-12, 1.0)
    return -(p * np.log(p)).sum(axis=1).mean(axis=(1, 2))


def rank_by_entropy(samples: list[Sample], entropy: np.ndarray, n: int) -> list[Sample]:
    order = sorted(range(len(samples)), key=lambda i: (-float(entropy[i]), samples[i].id))
    return [samples[i] for i in order[:n]]


def select_batch(pool: list[Sample], model: SegmentationModel | None, policy: SelectionPolicy) -> list[Sample]:
    """Stratified over run timelines without a model, else the highest-entropy samples."""
    if not pool:
        raise EmptyPool("no samples left to select")
    n = min(policy.batch_size, len(pool))
    if n == len(pool):
        return sorted(pool, key=lambda s: s.id)
    if model is None or policy.strategy == "temporal_stratified":
        return _temporal_stratified(pool, n)
    _, probs = predict_samples(model, pool)
    return rank_by_entropy(pool, pixel_entropy(probs), n)


# -------------------------------------------------------------- annotation


def proxy_minutes(fraction: float) -> float:
    return MAL_FLOOR_MINUTES + (SCRATCH_MINUTES - MAL_FLOOR_MINUTES) * fraction


def corrected_fraction(pre: np.ndarray, truth: np.ndarray) -> float:
    """Disagreeing pixels as a share of the non-background ``truth`` pixels, capped at 1."""
    wrong = int((pre != truth).sum())
    total = int((truth != BACKGROUND).sum())
    if total == 0:
        return 0.0 if wrong == 0 else 1.0
    return min(1.0, wrong / total)


def annotate_batch(batch: list[Sample], annotators: int, noise: AnnotatorNoiseSpec, seed: int,
                   preannotations: list[np.ndarray] | None = None, mode: str = "scratch"):
    """Simulated labeling: ``(labeled samples, per-image corrected fractions, mode)``.

    Each image's label is the consensus of ``annotators`` noisy readings of the ground truth.
    In MAL mode the labelers start from ``preannotations`` and only touch disagreeing pixels,
    so the stored label is still the consensus; only the effort differs.
    """
    if mode == "mal" and preannotations is None:
        raise MissingPreannotations("MAL mode needs model pre-annotations")
    labeled, fractions = [], []
    for i, s in enumerate(batch):
        readings = [simulate_annotator(s.mask, noise, _stable_id_seed(seed, s.id, k)) for k in range(annotators)]
        label = consensus(readings)
        if mode == "mal":
            pre = preannotations[i]
            label = np.where(pre == label, pre, label).astype(np.uint8)
            fractions.append(corrected_fraction(pre, label))
        else:
            fractions.append(1.0)
        labeled.append(s.with_(mask=label, split_tag="train", meta={**s.meta, "annotation": mode}))
    return labeled, fractions


def effort_record(phase: str, iteration: int, mode: str, fractions: list[float]) -> EffortRecord:
    mean = float(np.mean(fractions)) if fractions else 0.0
    minutes = SCRATCH_MINUTES if mode == "scratch" else proxy_minutes(mean)
    return EffortRecord(phase, iteration, mode, len(fractions), mean, minutes)


# ------------------------------------------------------------ gate and SAL


def mal_gate(model: SegmentationModel, validation: list[Sample], threshold: float = 0.80) -> tuple[bool, float]:
    score = mean_iou(evaluate(model, validation))
    return score >= threshold, score


def per_image_miou(model: SegmentationModel, samples: list[Sample]) -> list[float]:
    preds, _ = predict_samples(model, samples)
    return [mean_iou(confusion(p, s.mask)) for p, s in zip(preds, samples)]


def sal_round(state: LoopState, scores: dict[str, float], config: PipelineConfig) -> tuple[list[Sample], RelabelReport | None]:
    """Append ``sal_copies`` augmented copies of every low image; report persistent lows.

    Returns the new copies and the relabel report (``None`` when nothing is persistently low).
    """
    state.sal_rounds += 1
    low = sorted(sid for sid, v in scores.items() if v < config.sal_low_threshold)
    for sid in scores:
        state.low_streak[sid] = state.low_streak.get(sid, 0) + 1 if sid in low else 0
    by_id = {s.id: s for s in state.labeled}
    added = []
    for sid in low:
        done = state.aug_count.get(sid, 0)
        added.extend(augment_copies(by_id[sid], config.sal_copies, config.seed, first_copy=done + 1))
        state.aug_count[sid] = done + config.sal_copies
    state.sal_extra.extend(added)
    persistent = [(sid, scores[sid], state.low_streak[sid]) for sid in low if state.low_streak[sid] >= 2]
    report = RelabelReport(state.iteration, persistent) if persistent else None
    if report:
        state.reports.append(report)
    return added, report


# ------------------------------------------------------------------ phases


@dataclass
class PhaseResult:
    model: SegmentationModel
    state: LoopState
    best_miou: float
    reached: bool


def _train_step(state: LoopState, validation: list[Sample], config: PipelineConfig, audit: AuditLog) -> float:
    if state.model is None:
        state.model = build(config.arch())
    train(state.model, state.training_set(), validation, config.train_config(state.iteration))
    score = mean_iou(evaluate(state.model, validation))
    state.val_miou.append(score)
    audit.event(
        "train", phase=state.phase, iteration=state.iteration, train_size=len(state.training_set()),
        val_miou=round(score, 12), weights=model_hash(state.model),
    )
    return score


def _sal_step(state: LoopState, config: PipelineConfig, audit: AuditLog) -> bool:
    """Run one SAL round if the cap allows; True when no image is low (converged)."""
    if state.sal_rounds >= config.sal_max_rounds:
        return False
    originals = sorted(state.labeled, key=lambda s: s.id)
    scores = dict(zip([s.id for s in originals], per_image_miou(state.model, originals)))
    added, report = sal_round(state, scores, config)
    low = sorted({s.meta["source_id"] for s in added})
    audit.event(
        "sal_round", phase=state.phase, iteration=state.iteration, round=state.sal_rounds,
        low_ids=low, copies=len(added),
        relabel=[[sid, round(v, 12), n] for sid, v, n in (report.entries if report else [])],
    )
    return not low


def _take(state: LoopState, batch: list[Sample]) -> None:
    ids = {s.id for s in batch}
    state.pool = [s for s in state.pool if s.id not in ids]


def _check_disjoint(state: LoopState, validation: list[Sample]) -> None:
    held = {s.id for s in validation}
    seen = {s.id for s in state.labeled} | {s.id for s in state.pool}
    if held & seen:
        raise InvalidConfig(f"validation ids leaked into training pools: {sorted(held & seen)[:3]}")


def run_baseline_phase(pool: list[Sample], validation: list[Sample], config: PipelineConfig,
                       audit: AuditLog | None = None) -> PhaseResult:
    """Scratch labeling until the gate passes and SAL settles; raises ExhaustedPool otherwise."""
    audit = audit or AuditLog()
    state = LoopState(phase="baseline", pool=sorted(pool, key=lambda s: s.id))
    gated: SegmentationModel | None = None
    audit.event("phase_start", phase="baseline", pool=len(state.pool), validation=len(validation))
    while state.iteration < config.max_iterations:
        state.iteration += 1
        _check_disjoint(state, validation)
        if state.pool and not (state.gate_passed and state.sal_rounds >= config.sal_max_rounds):
            policy = SelectionPolicy("temporal_stratified" if state.model is None else "entropy_topk", config.batch_size)
            batch = select_batch(state.pool, state.model, policy)
            mode = "mal" if gated is not None else "scratch"
            pre = predict_samples(gated, batch)[0] if gated is not None else None
            labeled, fractions = annotate_batch(batch, config.annotators, config.noise, config.seed, pre, mode)
            _take(state, batch)
            state.labeled.extend(labeled)
            rec = effort_record("baseline", state.iteration, mode, fractions)
            state.effort.append(rec)
            audit.event("select", phase="baseline", iteration=state.iteration, strategy=policy.strategy,
                        ids=[s.id for s in batch])
            audit.event("annotate", phase="baseline", iteration=state.iteration, mode=mode,
                        corrected_fraction=round(rec.corrected_pixel_fraction, 12), proxy_minutes=round(rec.proxy_minutes, 12))
        elif not state.gate_passed:
            audit.event("exhausted", phase="baseline", iteration=state.iteration)
            raise ExhaustedPool("pool drained before the MAL gate passed", state)
        score = _train_step(state, validation, config, audit)
        passed = score >= config.baseline_threshold
        audit.event("gate", phase="baseline", iteration=state.iteration, passed=passed, val_miou=round(score, 12))
        if passed:
            gated = _snapshot(state.model)
            state.gated_model_hash = model_hash(gated)
        state.gate_passed = state.gate_passed or passed
        converged = _sal_step(state, config, audit)
        if state.gate_passed and (converged or state.sal_rounds >= config.sal_max_rounds):
            break
    if not state.gate_passed:
        audit.event("exhausted", phase="baseline", iteration=state.iteration)
        raise ExhaustedPool("iteration cap reached before the MAL gate passed", state)
    audit.event("phase_end", phase="baseline", iterations=state.iteration, sal_rounds=state.sal_rounds,
                gate_model=state.gated_model_hash)
    return PhaseResult(gated, state, max(state.val_miou), True)


def _snapshot(model: SegmentationModel) -> SegmentationModel:
    copy = build(model.config)
    copy.load_state_dict({k: v.copy() for k, v in model.state_dict().items()})
    return copy


def run_final_phase(baseline: PhaseResult, validation: list[Sample], config: PipelineConfig,
                    audit: AuditLog | None = None) -> PhaseResult:
    """Baseline-assisted labeling of the remaining pool until the final threshold or the caps."""
    audit = audit or AuditLog()
    prev = baseline.state
    if baseline.model is None:
        raise MissingPreannotations("final phase needs a gated baseline model")
    state = LoopState(
        phase="final", pool=list(prev.pool), labeled=list(prev.labeled), sal_extra=list(prev.sal_extra),
        aug_count=dict(prev.aug_count), gate_passed=True, model=_snapshot(prev.model),
        gated_model_hash=prev.gated_model_hash,
    )
    annotator = baseline.model
    best, best_state = -1.0, None
    audit.event("phase_start", phase="final", pool=len(state.pool), labeled=len(state.labeled))
    reached = False
    while state.iteration < config.max_iterations:
        state.iteration += 1
        _check_disjoint(state, validation)
        took = False
        if state.pool:
            batch = select_batch(state.pool, state.model, SelectionPolicy("entropy_topk", config.batch_size))
            pre = predict_samples(annotator, batch)[0]
            labeled, fractions = annotate_batch(batch, config.annotators, config.noise, config.seed, pre, "mal")
            _take(state, batch)
            state.labeled.extend(labeled)
            rec = effort_record("final", state.iteration, "mal", fractions)
            state.effort.append(rec)
            took = True
            audit.event("select", phase="final", iteration=state.iteration, strategy="entropy_topk",
                        ids=[s.id for s in batch])
            audit.event("annotate", phase="final", iteration=state.iteration, mode="mal",
                        corrected_fraction=round(rec.corrected_pixel_fraction, 12), proxy_minutes=round(rec.proxy_minutes, 12))
        score = _train_step(state, validation, config, audit)
        if score > best:
            best, best_state = score, {k: v.copy() for k, v in state.model.state_dict().items()}
        if score >= config.final_threshold:
            reached = True
            break
        converged = _sal_step(state, config, audit)
        if not took and not state.pool and (converged or state.sal_rounds >= config.sal_max_rounds):
            break
    final = build(config.arch())
    final.load_state_dict(best_state)
    audit.event("phase_end", phase="final", iterations=state.iteration, sal_rounds=state.sal_rounds,
                best_val_miou=round(best, 12), reached=reached, weights=model_hash(final))
    if not reached:
        audit.event("shortfall", phase="final", best_val_miou=round(best, 12), threshold=config.final_threshold)
    return PhaseResult(final, state, best, reached)


# ------------------------------------------------------------------ driver


def toy_corpus(n_samples: int = 300, seed: int = 0, resolution: int = 64, frames_per_run: int = 30,
               preprocess: PreprocessConfig = PreprocessConfig()) -> tuple[list[Sample], list[Sample]]:
    """Synthetic runs, sanity-filtered and prepared, split 90:10 into (pool, validation)."""
    runs = -(-n_samples // frames_per_run)
    samples = make_corpus(runs, frames_per_run, seed=seed)[:n_samples]
    pool, validation, _ = prepare_split(samples, resolution, preprocess)
    return [s.with_(split_tag="pool") for s in pool], validation


@dataclass
class PipelineResult:
    baseline: PhaseResult
    final: PhaseResult | None
    audit: AuditLog
    effort: list[EffortRecord]
    reports: list[RelabelReport]
    exhausted: bool = False


def run_pipeline(pool: list[Sample], validation: list[Sample], config: PipelineConfig) -> PipelineResult:
    """Both phases; an exhausted baseline pool is reported rather than raised."""
    if not validation:
        raise DatasetTooSmall("validation set is empty")
    audit = AuditLog()
    audit.event("config", **_jsonable(asdict(config)))
    try:
        baseline = run_baseline_phase(pool, validation, config, audit)
    except ExhaustedPool as exc:
        state = exc.args[1] if len(exc.args) > 1 else LoopState()
        phase = PhaseResult(state.model, state, max(state.val_miou, default=0.0), False)
        return PipelineResult(phase, None, audit, state.effort, state.reports, exhausted=True)
    final = run_final_phase(baseline, validation, config, audit)
    effort = baseline.state.effort + final.state.effort
    reports = baseline.state.reports + final.state.reports
    return PipelineResult(baseline, final, audit, effort, reports)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def effort_csv(records: list[EffortRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["phase", "iteration", "mode", "images", "corrected_pixel_fraction", "proxy_minutes"])
    for r in records:
        writer.writerow([r.phase, r.iteration, r.mode, r.images, f"{r.corrected_pixel_fraction:.6f}", f"{r.proxy_minutes:.4f}"])
    return buf.getvalue()


def relabel_csv(reports: list[RelabelReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "id", "miou", "persistent_low"])
    for rep in reports:
        for sid, v, n in rep.entries:
            writer.writerow([rep.iteration, sid, f"{v:.6f}", n])
    return buf.getvalue()


def store_model(model: SegmentationModel, store: Path) -> Path:
    """Save as the next version in ``store`` and point ``LATEST`` at it."""
    store = Path(store)
    store.mkdir(parents=True, exist_ok=True)
    versions = sorted(store.glob("model_v*.dsgw"))
    path = store / f"model_v{len(versions) + 1:03d}.dsgw"
    save_model(model, path)
    (store / "LATEST").write_text(path.name + "\n")
    return path


def latest_model_path(store: Path) -> Path:
    return Path(store) / (Path(store) / "LATEST").read_text().strip()


def replay_audit(text: str) -> dict:
    """Fold an audit log into the loop's final bookkeeping (labeled ids, gate, SAL rounds, weights)."""
    labeled: list[str] = []
    summary = {"gate_passed": False, "sal_rounds": {}, "weights": None, "relabel_ids": []}
    for line in text.splitlines():
        ev = json.loads(line)
        name = ev["event"]
        if name == "select":
            labeled.extend(ev["ids"])
        elif name == "gate" and ev["passed"]:
            summary["gate_passed"] = True
        elif name == "sal_round":
            summary["sal_rounds"][ev["phase"]] = ev["round"]
            summary["relabel_ids"].extend(r[0] for r in ev["relabel"])
        elif name == "phase_end" and ev["phase"] == "final":
            summary["weights"] = ev["weights"]
    summary["labeled_ids"] = sorted(labeled)
    return summary

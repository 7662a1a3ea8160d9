"""
Ablation studies over the synthetic corpus.

Usage:
    coverage_study()                                   # mapping coverage table
    run_study("heads", "data/", seeds=(0, 1, 2))       # train + evaluate variants
    acceptance_checks(study.report, "heads")           # directional checks

Every study trains each variant once per seed on the same dataset, evaluates
on the validation split, and reports the per-variant median across seeds.
The first variant of a study is its baseline.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import polars as pl

from .config import JitterParams, RunConfig, derive_seed
from .errors import InputError
from .gridgeom import GridSpec, RoiGeometry, coverage_fraction
from .gridnet import GridDetector
from .numkit.optim import make_rng
from .scenes import MAX_EXTENT, MIN_EXTENT, ROUND, STRUCTURED, dataset_id, jitter_proposals, read_dataset
from .traineval.detect import detect_samples
from .traineval.evaluate import EvalResult, evaluate_ap, ground_truth_from_samples, nanmean
from .traineval.report import AblationReport, ablation_report
from .traineval.train import train

logger = logging.getLogger(__name__)

STUDIES = ("heads", "points", "fusion", "mapping")
TIE_TOLERANCE = 0.003
COVERAGE_GRIDS = ("2pt", "2x2", "3x3")
COVERAGE_MAPPINGS = ("plain", "enlarged", "extended")
COVERAGE_MIN_EXTENDED = 0.99


@dataclass(frozen=True)
class Variant:
    label: str
    head: str
    model_changes: dict


def study_variants(study: str) -> list[Variant]:
    if study == "heads":
        return [
            Variant("regression", "regression", {}),
            Variant("grid", "grid", {"grid": "3x3", "fusion_order": 2, "mapping": "extended"}),
        ]
    if study == "points":
        return [Variant(g, "grid", {"grid": g}) for g in ("2pt", "2x2", "3x3")]
    if study == "fusion":
        return [Variant(f"fusion{o}", "grid", {"grid": "3x3", "fusion_order": o}) for o in (0, 1, 2)]
    if study == "mapping":
        return [Variant(m, "grid", {"mapping": m}) for m in ("plain", "enlarged", "extended")]
    raise InputError(f"unknown study {study!r}; choose from {STUDIES}")


# =============================================================================
# COVERAGE
# =============================================================================

def random_boxes(count: int, seed: int, image_size: int = 128) -> np.ndarray:
    """Boxes with extents in [MIN_EXTENT, MAX_EXTENT] placed uniformly inside the canvas."""
    rng = make_rng(seed)
    w = rng.uniform(MIN_EXTENT, MAX_EXTENT, count)
    h = rng.uniform(MIN_EXTENT, MAX_EXTENT, count)
    x = rng.uniform(0, image_size - w)
    y = rng.uniform(0, image_size - h)
    return np.stack([x, y, x + w, y + h], axis=1)


def coverage_study(n_proposals: int = 10_000, seed: int = 0, heatmap_size: int = 56,
                   grids: Sequence[str] = COVERAGE_GRIDS,
                   mappings: Sequence[str] = COVERAGE_MAPPINGS) -> pl.DataFrame:
    """
    Mean fraction of ground-truth grid points representable on the heatmap,
    over jittered positive proposals (IoU >= 0.5), per grid and mapping.
    """
    if n_proposals < 1:
        raise InputError(f"coverage_study: n_proposals must be >= 1, got {n_proposals}")
    jitter = JitterParams(min_iou=0.5)
    proposals, gts = [], []
    for k, gt in enumerate(random_boxes(n_proposals, derive_seed(seed, "coverage", "boxes"))):
        proposal = jitter_proposals(gt, 1, derive_seed(seed, "coverage", k), jitter)[0]
        if proposal.iou < 0.5:
            continue
        proposals.append(RoiGeometry.from_box(proposal.box, heatmap_size))
        gts.append(gt)
    logger.info("coverage study: %d of %d proposals are positive", len(proposals), n_proposals)

    rows = []
    for grid in grids:
        spec = GridSpec.from_name(grid)
        for mapping in mappings:
            rows.append({
                "grid": spec.name,
                "mapping": mapping,
                "coverage": coverage_fraction(proposals, gts, spec, mapping),
                "proposals": len(proposals),
            })
    return pl.DataFrame(rows)


def coverage_checks(coverage: pl.DataFrame) -> pl.DataFrame:
    rows = []
    for grid in coverage["grid"].unique(maintain_order=True).to_list():
        by_mapping = {
            r["mapping"]: r["coverage"] for r in coverage.filter(pl.col("grid") == grid).iter_rows(named=True)
        }
        extended, plain = by_mapping.get("extended", math.nan), by_mapping.get("plain", math.nan)
        rows.append({"check": f"{grid}: extended >= {COVERAGE_MIN_EXTENDED}", "value": extended,
                     "passed": extended >= COVERAGE_MIN_EXTENDED})
        rows.append({"check": f"{grid}: extended > plain", "value": extended - plain,
                     "passed": extended > plain})
    return pl.DataFrame(rows)


# =============================================================================
# TRAINED STUDIES
# =============================================================================

@dataclass
class StudyResult:
    study: str
    labels: list[str]
    medians: list[EvalResult]
    per_seed: dict[int, list[EvalResult]]
    loss_curves: dict[str, pl.DataFrame]
    report: AblationReport

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        for label, result in zip(self.labels, self.medians):
            result.save(out_dir / "median", label)
        for seed, results in self.per_seed.items():
            for label, result in zip(self.labels, results):
                result.save(out_dir / f"seed{seed}", label)
        for label, curve in self.loss_curves.items():
            curve.write_csv(out_dir / f"loss_{label}.csv")
        return self.report.write(out_dir)


def median_result(results: Sequence[EvalResult], label: str = "") -> EvalResult:
    """Element-wise median over seeds of every AP entry."""
    if not results:
        raise InputError("median_result: no results")
    first = results[0]

    def med(values) -> float:
        arr = np.asarray(list(values), dtype=np.float64)
        return math.nan if np.isnan(arr).all() else float(np.nanmedian(arr))

    return EvalResult(
        thresholds=first.thresholds,
        ap_by_threshold={t: med(r.ap_by_threshold[t] for r in results) for t in first.thresholds},
        per_category={
            c: {t: med(r.per_category[c][t] for r in results) for t in first.thresholds}
            for c in first.per_category
        },
        ap_small=med(r.ap_small for r in results),
        ap_large=med(r.ap_large for r in results),
        dataset_id=first.dataset_id,
        label=label or first.label,
        meta={"seeds": [r.meta.get("seed") for r in results]},
    )


def run_variant(config: RunConfig, variant: Variant, train_samples, val_samples, data_id: str = "") -> tuple[EvalResult, pl.DataFrame]:
    """Train one variant with ``config.seed`` and evaluate it on ``val_samples``."""
    model_config = replace(config.model, **variant.model_changes)
    model = GridDetector(model_config, variant.head, config.seed)
    result = train(model, train_samples, config.train)
    detections = detect_samples(model, val_samples, config.eval.top_k, config.eval.nms_iou)
    evaluation = evaluate_ap(
        detections,
        ground_truth_from_samples(val_samples),
        config.eval.iou_thresholds,
        config.eval.small_area,
        config.eval.large_area,
        dataset_id=data_id,
        label=variant.label,
    )
    evaluation.meta = {"seed": config.seed, "head": variant.head, "model": model_config.to_dict()}
    return evaluation, result.loss_curve


def run_study(study: str, dataset_dir: Path, seeds: Sequence[int] = (0, 1, 2),
              base: Optional[RunConfig] = None) -> StudyResult:
    variants = study_variants(study)
    if not seeds:
        raise InputError("run_study: at least one seed is required")
    base = base or RunConfig()
    manifest, data = read_dataset(Path(dataset_dir))
    data_id = dataset_id(manifest)

    per_seed: dict[int, list[EvalResult]] = {}
    loss_curves: dict[str, pl.DataFrame] = {}
    for seed in seeds:
        config = base.with_seed(seed)
        per_seed[seed] = []
        for variant in variants:
            logger.info("study %s: training %s (seed %d)", study, variant.label, seed)
            evaluation, curve = run_variant(config, variant, data["train"], data["val"], data_id)
            per_seed[seed].append(evaluation)
            if seed == seeds[0]:
                loss_curves[variant.label] = curve

    labels = [v.label for v in variants]
    medians = [median_result([per_seed[s][k] for s in seeds], label) for k, label in enumerate(labels)]
    return StudyResult(study, labels, medians, per_seed, loss_curves, ablation_report(medians, labels))


# =============================================================================
# CHECKS
# =============================================================================

def _at_least(a: float, b: float, tolerance: float) -> bool:
    return a >= b - tolerance


def _mean_gain(gains: pl.DataFrame, categories: Sequence[str], column: str) -> float:
    rows = gains.filter(pl.col("category").is_in(list(categories)))
    return nanmean(rows[column].to_list()) if column in rows.columns else math.nan


def acceptance_checks(report: AblationReport, study: str, tolerance: float = TIE_TOLERANCE) -> pl.DataFrame:
    """Directional checks for a study report; one row per check with its value and verdict."""
    labels = report.labels
    ap = dict(zip(report.summary["label"].to_list(), report.summary["AP"].to_list()))
    rows = []

    def check(name: str, value: float, passed: bool) -> None:
        rows.append({"check": name, "value": float(value), "passed": bool(passed)})

    if study == "heads":
        grid = labels[-1]
        gain_50, gain_80, gain_90 = (report.delta(grid, t) for t in (0.5, 0.8, 0.9))
        check("grid beats regression at IoU 0.8", gain_80, gain_80 > 0)
        check("grid beats regression at IoU 0.9", gain_90, gain_90 > 0)
        check("gain at 0.9 >= gain at 0.5", gain_90 - gain_50, gain_90 >= gain_50)
        column = "gain@0.8"
        structured = _mean_gain(report.category_gains, STRUCTURED, column)
        rounded = _mean_gain(report.category_gains, ROUND, column)
        check("structured shapes gain more than round shapes at 0.8", structured - rounded, structured > rounded)
    elif study in ("points", "fusion"):
        for lower, higher in zip(labels, labels[1:]):
            check(f"{higher} >= {lower} (AP)", ap[higher] - ap[lower], _at_least(ap[higher], ap[lower], tolerance))
        if study == "fusion":
            best = labels[-1]
            gain_50, gain_75 = report.delta(best, 0.5), report.delta(best, 0.75)
            check(f"{best} gain at 0.75 >= gain at 0.5", gain_75 - gain_50, gain_75 >= gain_50)
    elif study == "mapping":
        check("extended >= plain (AP)", ap["extended"] - ap["plain"], _at_least(ap["extended"], ap["plain"], tolerance))
    else:
        raise InputError(f"unknown study {study!r}; choose from {STUDIES}")
    return pl.DataFrame(rows, schema={"check": pl.String, "value": pl.Float64, "passed": pl.Boolean})

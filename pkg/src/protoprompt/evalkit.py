"""Detection metrics, the meta-testing protocol, ablation grids and reports.

Example:
    >>> iou(Box(x1=0, y1=0, x2=10, y2=10), Box(x1=5, y1=0, x2=15, y2=10))
    0.3333333333333333
"""

import itertools
import logging
import multiprocessing
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field

from protoprompt.config import parse_scalar, with_updates
from protoprompt.dataspec import Dataset, crop_support, load_dataset
from protoprompt.detector import write_detections
from protoprompt.exceptions import ConfigError, SamplingError
from protoprompt.io_utils import atomic_write_csv, atomic_write_yaml, format_float
from protoprompt.models import (
    AnnotationRecord,
    Box,
    ClassSplit,
    DetectionRecord,
    FusionMode,
    GeneratorVariant,
    Interpolation,
    MetricsRow,
    MetricsTable,
    MpgPlacement,
    PromptPosition,
    PrototypePath,
    RunConfig,
)
from protoprompt.trainer import Checkpoint, detector_from_checkpoint, meta_train

logger = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Examples:
        >>> b = Box(x1=0, y1=0, x2=4, y2=4)
        >>> iou(b, b)
        1.0
        >>> iou(b, Box(x1=5, y1=5, x2=6, y2=6))
        0.0
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# =========================================================================
# Average precision
# =========================================================================


def match_detections(
    detections: Sequence[DetectionRecord],
    ground_truths: Sequence[AnnotationRecord],
    threshold: float,
) -> list[bool]:
    """Greedy matching of one class's detections, highest score first.

    Each detection takes the unmatched ground-truth box of its image with the
    highest IoU at or above ``threshold``. Returns the true-positive flag of
    each detection in score order (ties keep input order).
    """
    by_image: dict[int, list[AnnotationRecord]] = defaultdict(list)
    for gt in ground_truths:
        by_image[gt.image_id].append(gt)
    used: set[int] = set()
    flags = []
    for det in _score_order(detections):
        best, best_iou = None, threshold
        for gt in by_image.get(det.image_id, ()):
            if gt.id in used:
                continue
            overlap = iou(det.box, gt.bbox)
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = gt, overlap
        if best is not None:
            used.add(best.id)
        flags.append(best is not None)
    return flags


def _score_order(detections: Sequence[DetectionRecord]) -> list[DetectionRecord]:
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    return [detections[i] for i in order]


def interpolated_precision(
    flags: Sequence[bool],
    num_gt: int,
    interpolation: Interpolation = Interpolation.COCO101,
) -> float:
    """Area under the interpolated precision-recall curve.

    Examples:
        >>> interpolated_precision([True], 1)
        1.0
        >>> interpolated_precision([False, True], 1)
        0.5
        >>> interpolated_precision([], 3)
        0.0
    """
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    if len(tp) == 0:
        return 0.0
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if Interpolation(interpolation) is Interpolation.VOC11:
        points = np.linspace(0.0, 1.0, 11)
        return float(np.mean([envelope[recall >= r].max() if np.any(recall >= r) else 0.0 for r in points]))
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    values = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(np.mean(values))


def average_precision(
    detections: Sequence[DetectionRecord],
    ground_truths: Sequence[AnnotationRecord],
    threshold: float,
    interpolation: Interpolation = Interpolation.COCO101,
) -> float:
    """Mean per-class AP at one IoU threshold, over classes that have ground truth."""
    gts_by_class: dict[int, list[AnnotationRecord]] = defaultdict(list)
    for gt in ground_truths:
        gts_by_class[gt.category_id].append(gt)
    if not gts_by_class:
        return 0.0
    dets_by_class: dict[int, list[DetectionRecord]] = defaultdict(list)
    for det in detections:
        dets_by_class[det.category_id].append(det)
    per_class = [
        interpolated_precision(match_detections(dets_by_class[cid], gts, threshold), len(gts), interpolation)
        for cid, gts in sorted(gts_by_class.items())
    ]
    return float(np.mean(per_class))


def compute_ap(
    detections: Sequence[DetectionRecord],
    ground_truths: Sequence[AnnotationRecord],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    interpolation: Interpolation = Interpolation.COCO101,
    shot: int = 0,
    seed: Optional[int] = None,
    class_set: str = "novel",
) -> MetricsRow:
    """AP averaged over ``iou_thresholds`` plus AP50 and AP75.

    Examples:
        >>> gt = [AnnotationRecord(id=1, image_id=1, category_id=3, bbox=Box(x1=0, y1=0, x2=10, y2=10))]
        >>> det = [DetectionRecord(image_id=1, category_id=3, bbox=[0, 0, 10, 6], score=0.9)]
        >>> row = compute_ap(det, gt)
        >>> row.ap50, row.ap75
        (1.0, 0.0)
    """
    cache: dict[float, float] = {}

    def at(threshold: float) -> float:
        if threshold not in cache:
            cache[threshold] = average_precision(detections, ground_truths, threshold, interpolation)
        return cache[threshold]

    ap = float(np.mean([at(t) for t in iou_thresholds])) if iou_thresholds else 0.0
    ap50, ap75 = at(0.5), at(0.75)
    return MetricsRow(shot=shot, seed=seed, class_set=class_set, ap=ap, ap50=ap50, ap75=ap75)


# =========================================================================
# Meta-testing
# =========================================================================


def sample_novel_support(
    dataset: Dataset,
    classes: Iterable[int],
    shot: int,
    rng: np.random.Generator,
    support_size: int = 64,
    context: int = 16,
) -> tuple[dict[int, list[np.ndarray]], set[int]]:
    """K support crops per class and the ids of the images they come from."""
    by_class = dataset.by_class()
    classes = sorted(classes)
    short = [cid for cid in classes if len(by_class.get(cid, [])) < shot]
    if short:
        raise SamplingError(f"fewer than {shot} novel instances in the test data", classes=short)
    support: dict[int, list[np.ndarray]] = {}
    sources: set[int] = set()
    for cid in classes:
        anns = by_class[cid]
        picked = [anns[int(i)] for i in sorted(rng.choice(len(anns), size=shot, replace=False))]
        support[cid] = [
            crop_support(dataset.image(a.image_id).pixels, a.bbox, context=context, size=support_size)
            for a in picked
        ]
        sources.update(a.image_id for a in picked)
    return support, sources


def _mean_row(rows: list[MetricsRow], shot: int) -> MetricsRow:
    return MetricsRow(
        shot=shot,
        seed=None,
        ap=float(np.mean([r.ap for r in rows])),
        ap50=float(np.mean([r.ap50 for r in rows])),
        ap75=float(np.mean([r.ap75 for r in rows])),
    )


def meta_test(
    checkpoint: Checkpoint,
    dataset: Dataset,
    split: ClassSplit,
    shots: Sequence[int],
    seeds: Sequence[int],
    config: Optional[RunConfig] = None,
    detections_dir: Optional[Path] = None,
) -> MetricsTable:
    """Evaluate novel classes directly from K support images, without parameter updates.

    For every shot and seed, K supports per novel class are drawn with a
    generator seeded by ``(seed, shot)``, prototypes are built once, and every
    test image that did not provide a support crop is searched for every novel
    class. The student path never reads class names; ``eval.prototype_path =
    teacher`` switches to the name-conditioned path for comparison.
    """
    config = config or checkpoint.run_config
    detector = detector_from_checkpoint(checkpoint)
    detector.eval()
    use_teacher = config.eval.prototype_path is PrototypePath.TEACHER
    names = None
    if use_teacher:
        names = {cid: dataset.category_name(cid) for cid in split.novel}
        missing = sorted(cid for cid, name in names.items() if not name)
        if missing:
            raise ConfigError(f"teacher prototype path needs names for novel classes {missing}")

    rows: list[MetricsRow] = []
    for shot in shots:
        per_seed = []
        for seed in seeds:
            rng = np.random.default_rng([seed, shot])
            support, sources = sample_novel_support(
                dataset, split.novel, shot, rng, config.model.support_size, config.model.support_context
            )
            with torch.no_grad():
                prototypes = detector.build_prototypes(support, names=names, use_teacher=use_teacher)
            images = [img for img in dataset.images if img.id not in sources]
            if config.eval.max_images is not None:
                images = images[: config.eval.max_images]
            evaluated = {img.id for img in images}
            records: list[DetectionRecord] = []
            for img in images:
                for det in detector.detect(
                    img.pixels,
                    prototypes,
                    score_threshold=config.eval.score_threshold,
                    nms_threshold=config.eval.nms_threshold,
                    image_id=img.id,
                ):
                    records.append(det.to_record())
            ground_truth = [
                a for a in dataset.annotations if a.image_id in evaluated and a.category_id in split.novel
            ]
            row = compute_ap(records, ground_truth, interpolation=config.eval.interpolation, shot=shot, seed=seed)
            logger.info("%d-shot seed %d: AP %.4f AP50 %.4f AP75 %.4f", shot, seed, row.ap, row.ap50, row.ap75)
            per_seed.append(row)
            if detections_dir is not None:
                write_detections(detections_dir / f"detections_{shot}shot_seed{seed}.json", records)
        rows.extend(per_seed)
        rows.append(_mean_row(per_seed, shot))
    return MetricsTable(rows=rows, seeds=list(seeds), checkpoint_digest=checkpoint.digest)


METRICS_COLUMNS = ["shot", "class_set", "seed", "AP", "AP50", "AP75"]


def write_metrics_report(table: MetricsTable, report_dir: Path) -> None:
    """``metrics.csv`` with every row and ``summary.yaml`` with the mean rows."""
    atomic_write_csv(
        report_dir / "metrics.csv",
        METRICS_COLUMNS,
        (
            {
                "shot": r.shot,
                "class_set": r.class_set,
                "seed": "mean" if r.seed is None else r.seed,
                "AP": format_float(r.ap),
                "AP50": format_float(r.ap50),
                "AP75": format_float(r.ap75),
            }
            for r in table.rows
        ),
    )
    atomic_write_yaml(
        report_dir / "summary.yaml",
        {
            "checkpoint_digest": table.checkpoint_digest,
            "seeds": list(table.seeds),
            "mean": {
                f"{r.shot}-shot": {"AP": r.ap, "AP50": r.ap50, "AP75": r.ap75} for r in table.mean_rows()
            },
        },
    )


# =========================================================================
# Ablation grids
# =========================================================================

AXIS_PATHS = {
    "prompt_len": "mpg.prompt_len",
    "prompt_position": "mpg.prompt_position",
    "generator_variant": "mpg.generator_variant",
    "fusion": "mpg.fusion",
    "mpg_placement": "mpg.placement",
    "seed": "seed",
}

# axes whose values come from a fixed set of choices
AXIS_CHOICES: dict[str, list[Any]] = {
    "prompt_position": [p.value for p in PromptPosition],
    "generator_variant": [v.value for v in GeneratorVariant],
    "fusion": [f.value for f in FusionMode],
    "mpg_placement": [MpgPlacement.RCNN_ONLY.value, MpgPlacement.RPN_AND_RCNN.value, MpgPlacement.NONE.value],
}

AXIS_VALUES: dict[str, list[Any]] = {"prompt_len": [2, 4, 8, 16], **AXIS_CHOICES}


class AblationRow(BaseModel):
    setting: str
    cell: dict[str, Any]
    metrics: list[MetricsRow] = Field(default_factory=list)


class AblationReport(BaseModel):
    """One row per grid cell, holding the cell's mean meta-testing rows."""

    axes: dict[str, list[Any]]
    rows: list[AblationRow] = Field(default_factory=list)

    def columns(self) -> list[str]:
        shots = sorted({m.shot for row in self.rows for m in row.metrics})
        if len(shots) <= 1:
            return ["setting", "AP", "AP50", "AP75"]
        return ["setting"] + [f"{s}shot_{name}" for s in shots for name in ("AP", "AP50", "AP75")]

    def table(self) -> list[dict[str, str]]:
        columns = self.columns()
        single = len(columns) == 4
        out = []
        for row in self.rows:
            entry = {"setting": row.setting}
            for m in row.metrics:
                prefix = "" if single else f"{m.shot}shot_"
                entry[f"{prefix}AP"] = f"{100 * m.ap:.2f}"
                entry[f"{prefix}AP50"] = f"{100 * m.ap50:.2f}"
                entry[f"{prefix}AP75"] = f"{100 * m.ap75:.2f}"
            out.append(entry)
        return out

    def write(self, report_dir: Path, name: str = "ablation") -> None:
        atomic_write_csv(report_dir / f"{name}.csv", self.columns(), self.table())
        atomic_write_yaml(report_dir / f"{name}.yaml", self.model_dump(mode="json"))


def parse_grid(specs: Sequence[str]) -> dict[str, list[Any]]:
    """Parse ``axis=v1,v2`` specs; a bare axis name means all of its values.

    Examples:
        >>> parse_grid(["fusion"])["fusion"]
        ['addition', 'multiplication', 'concatenation']
        >>> parse_grid(["prompt_len=2,4", "seed=0,1"])
        {'prompt_len': [2, 4], 'seed': [0, 1]}
    """
    grid: dict[str, list[Any]] = {}
    for spec in specs:
        axis, _, values = spec.partition("=")
        axis = axis.strip()
        if axis not in AXIS_PATHS:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXIS_PATHS)}")
        if values:
            grid[axis] = [parse_scalar(v.strip()) for v in values.split(",") if v.strip()]
        elif axis in AXIS_VALUES:
            grid[axis] = list(AXIS_VALUES[axis])
        else:
            raise ConfigError(f"axis {axis!r} needs explicit values")
    return grid


def _check_grid(grid: dict[str, list[Any]]) -> None:
    for axis, values in grid.items():
        if axis not in AXIS_PATHS:
            raise ConfigError(f"unknown ablation axis {axis!r}")
        if not values:
            raise ConfigError(f"axis {axis!r} has no values")
        allowed = AXIS_CHOICES.get(axis)
        if allowed is not None:
            bad = [v for v in values if v not in allowed]
            if bad:
                raise ConfigError(f"unknown values {bad} for axis {axis!r}; allowed: {allowed}")


def grid_cells(grid: dict[str, list[Any]]) -> list[dict[str, Any]]:
    """Cartesian product of the grid, in axis order.

    Examples:
        >>> len(grid_cells({"fusion": ["addition", "multiplication", "concatenation"], "seed": [0, 1]}))
        6
    """
    axes = list(grid)
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def cell_config(base: RunConfig, cell: dict[str, Any]) -> RunConfig:
    return with_updates(base, [f"{AXIS_PATHS[axis]}={value}" for axis, value in cell.items()])


def run_cell(
    cell: dict[str, Any],
    base: RunConfig,
    train_data: Dataset,
    test_data: Dataset,
    split: ClassSplit,
) -> AblationRow:
    """Meta-train and meta-test one grid cell."""
    config = cell_config(base, cell)
    checkpoint = meta_train(train_data, split, config, np.random.default_rng(config.seed))
    table = meta_test(checkpoint, test_data, split, config.eval.shots, config.eval.seeds, config)
    setting = ", ".join(f"{axis}={value}" for axis, value in cell.items())
    return AblationRow(setting=setting, cell=cell, metrics=table.mean_rows())


def _run_cell_in_worker(args: tuple) -> AblationRow:
    cell, base_json, manifests, split_json = args
    base = RunConfig.model_validate(base_json)
    train_data = load_dataset(*manifests[0])
    test_data = load_dataset(*manifests[1])
    return run_cell(cell, base, train_data, test_data, ClassSplit.model_validate(split_json))


def run_ablation(
    grid: dict[str, list[Any]],
    base: RunConfig,
    train_data: Dataset,
    test_data: Dataset,
    split: ClassSplit,
    max_workers: int = 1,
    manifests: Optional[tuple[tuple[Path, Path], tuple[Path, Path]]] = None,
) -> AblationReport:
    """Train and meta-test every cell of the grid with shared seeds.

    Args:
        grid: axis name to the values to try
        base: config every cell starts from
        max_workers: worker processes; above 1, ``manifests`` must name the
            (manifest, image root) pairs of the train and test data so workers
            can load them
    """
    _check_grid(grid)
    cells = grid_cells(grid)
    for cell in cells:
        cell_config(base, cell)
    logger.info("Ablation over %s: %d cells", list(grid), len(cells))
    if max_workers > 1 and manifests is not None and len(cells) > 1:
        jobs = [
            (cell, base.model_dump(mode="json"), manifests, split.model_dump(mode="json")) for cell in cells
        ]
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=max_workers, mp_context=context) as pool:
            rows = list(pool.map(_run_cell_in_worker, jobs))
    else:
        rows = [run_cell(cell, base, train_data, test_data, split) for cell in cells]
    return AblationReport(axes=grid, rows=rows)


# =========================================================================
# Overlays
# =========================================================================

TP_COLOR = (255, 220, 0)
FP_COLOR = (230, 30, 30)


def render_overlays(
    records: Sequence[DetectionRecord],
    dataset: Dataset,
    out_dir: Path,
    score_threshold: float = 0.5,
    scale: int = 4,
) -> list[Path]:
    """Draw each image's detections, yellow when they hit a ground-truth box at IoU 0.5, red otherwise.

    Reads only a detection dump and the dataset; returns the written PNG paths.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    kept = [r for r in records if r.score >= score_threshold]
    by_image: dict[int, list[DetectionRecord]] = defaultdict(list)
    for r in kept:
        by_image[r.image_id].append(r)
    written = []
    for image_id in sorted(by_image):
        image = dataset.image(image_id)
        dets = _score_order(by_image[image_id])
        gts = dataset.annotations_for(image_id)
        flags: dict[int, bool] = {}
        for cid in sorted({d.category_id for d in dets}):
            class_dets = [d for d in dets if d.category_id == cid]
            hits = match_detections(class_dets, [g for g in gts if g.category_id == cid], 0.5)
            for d, hit in zip(_score_order(class_dets), hits):
                flags[id(d)] = hit
        canvas = Image.fromarray(image.pixels).resize(
            (image.width * scale, image.height * scale), Image.Resampling.NEAREST
        )
        draw = ImageDraw.Draw(canvas)
        for d in dets:
            b = d.box
            color = TP_COLOR if flags.get(id(d)) else FP_COLOR
            draw.rectangle([b.x1 * scale, b.y1 * scale, b.x2 * scale - 1, b.y2 * scale - 1], outline=color, width=2)
            label = dataset.category_name(d.category_id) or str(d.category_id)
            draw.text((b.x1 * scale + 2, b.y1 * scale + 1), f"{label} {d.score:.2f}", fill=color)
        target = out_dir / f"{image_id:05d}.png"
        canvas.save(target)
        written.append(target)
    logger.info("Wrote %d overlays to %s", len(written), out_dir)
    return written

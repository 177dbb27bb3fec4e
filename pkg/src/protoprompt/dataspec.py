"""Datasets, base/novel splits, episodic sampling and the synthetic toy benchmark.

Everything here is a pure function of its inputs and an explicit
:class:`numpy.random.Generator`; nothing keeps global state.

Example:
    >>> import numpy as np
    >>> ds = generate_toy_dataset(ToyDatasetSpec(num_images=4, seed=3), np.random.default_rng(3))
    >>> len(ds.images), len(ds.categories)
    (4, 12)
    >>> ds.category_name(1)
    'red-square'
"""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Collection, Iterable, Optional

import numpy as np
from PIL import Image, ImageDraw
from pydantic import ValidationError

from protoprompt.exceptions import DatasetValidationError, ManifestParseError, SamplingError
from protoprompt.io_utils import atomic_write_json, atomic_write_yaml, read_yaml
from protoprompt.models import (
    AnnotationRecord,
    Box,
    CategoryRecord,
    ClassSplit,
    DataConfig,
    ImageRecord,
    ToyDatasetSpec,
)

logger = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 90, 230),
    "yellow": (230, 210, 40),
    "purple": (160, 60, 200),
}
BACKGROUND_LEVEL = 70


@dataclass(eq=False)
class ImageEntry:
    """An image of the dataset with its pixels, ``[H, W, 3]`` uint8."""

    id: int
    file_name: str
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(eq=False)
class Dataset:
    """Images, box annotations and categories.

    Equality compares records and pixel arrays, so ``load_dataset`` of a saved
    dataset compares equal to the original.
    """

    images: list[ImageEntry]
    annotations: list[AnnotationRecord]
    categories: list[CategoryRecord]
    _by_id: dict[int, ImageEntry] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_id = {img.id: img for img in self.images}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if [(i.id, i.file_name) for i in self.images] != [(i.id, i.file_name) for i in other.images]:
            return False
        if not all(np.array_equal(a.pixels, b.pixels) for a, b in zip(self.images, other.images)):
            return False
        return self.annotations == other.annotations and self.categories == other.categories

    def validate(self) -> "Dataset":
        """Check every dataset invariant, raising DatasetValidationError on the first violation."""
        if len(self._by_id) != len(self.images):
            raise DatasetValidationError("duplicate image ids")
        class_ids = [c.id for c in self.categories]
        if len(set(class_ids)) != len(class_ids):
            raise DatasetValidationError("duplicate category ids")
        known = set(class_ids)
        for ann in self.annotations:
            img = self._by_id.get(ann.image_id)
            if img is None:
                raise DatasetValidationError(f"annotation {ann.id} references missing image {ann.image_id}")
            if ann.category_id not in known:
                raise DatasetValidationError(
                    f"annotation {ann.id} references missing category {ann.category_id}"
                )
            b = ann.bbox
            if b.x1 < 0 or b.y1 < 0 or b.x2 > img.width or b.y2 > img.height:
                raise DatasetValidationError(
                    f"annotation {ann.id} box {b.as_tuple()} lies outside image {img.id} "
                    f"({img.width}x{img.height})"
                )
        return self

    def image(self, image_id: int) -> ImageEntry:
        return self._by_id[image_id]

    def annotations_for(self, image_id: int) -> list[AnnotationRecord]:
        return [a for a in self.annotations if a.image_id == image_id]

    def category_name(self, class_id: int) -> Optional[str]:
        for c in self.categories:
            if c.id == class_id:
                return c.name
        return None

    def class_ids(self) -> list[int]:
        return sorted(c.id for c in self.categories)

    def class_counts(self) -> dict[int, int]:
        """Annotated instances per class, zero for classes without boxes."""
        counts = {c.id: 0 for c in self.categories}
        for a in self.annotations:
            counts[a.category_id] += 1
        return counts

    def by_class(self) -> dict[int, list[AnnotationRecord]]:
        grouped: dict[int, list[AnnotationRecord]] = defaultdict(list)
        for a in self.annotations:
            grouped[a.category_id].append(a)
        return grouped

    def subset(self, image_ids: Iterable[int], annotations: Optional[list[AnnotationRecord]] = None) -> "Dataset":
        """Restrict to ``image_ids``, keeping either their annotations or the given ones."""
        wanted = set(image_ids)
        images = [img for img in self.images if img.id in wanted]
        if annotations is None:
            annotations = [a for a in self.annotations if a.image_id in wanted]
        return Dataset(images=images, annotations=annotations, categories=list(self.categories))


@dataclass
class QueryImage:
    """A query image and its ground truth, restricted to episode classes."""

    image_id: int
    pixels: np.ndarray
    boxes: list[Box]
    labels: list[int]


@dataclass
class Episode:
    """One N-way K-shot task.

    ``support`` maps every episode class to exactly K crops; ``class_names``
    holds names for base classes only, novel classes never carry one.
    """

    support: dict[int, list[np.ndarray]]
    query: list[QueryImage]
    positive_ids: set[int]
    negative_ids: set[int]
    class_names: dict[int, str] = field(default_factory=dict)
    support_sources: dict[int, list[int]] = field(default_factory=dict)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.support)

    @property
    def shot(self) -> int:
        return len(next(iter(self.support.values())))


# =========================================================================
# Manifest and split I/O
# =========================================================================


def _parse_records(raw: Any, key: str, model: type) -> list:
    entries = raw.get(key)
    if not isinstance(entries, list):
        raise ManifestParseError(f"expected an array named {key!r}")
    parsed = []
    for i, entry in enumerate(entries):
        record = f"{key}[{i}]"
        if not isinstance(entry, dict):
            raise ManifestParseError("expected an object", record=record)
        try:
            if model is AnnotationRecord:
                bbox = entry.get("bbox")
                if not isinstance(bbox, list) or len(bbox) != 4:
                    raise ManifestParseError("'bbox' must be [x, y, w, h]", record=record)
                x, y, w, h = (float(v) for v in bbox)
                if w <= 0 or h <= 0:
                    raise DatasetValidationError(
                        f"{record}: box {bbox} has non-positive width or height"
                    )
                entry = {**entry, "bbox": Box(x1=x, y1=y, x2=x + w, y2=y + h)}
            parsed.append(model.model_validate(entry))
        except (ManifestParseError, DatasetValidationError):
            raise
        except (ValidationError, TypeError, ValueError) as e:
            raise ManifestParseError(str(e).splitlines()[0] if str(e) else repr(e), record=record) from e
    return parsed


def load_dataset(manifest_path: Path, image_root: Path) -> Dataset:
    """Load a COCO-style manifest and its images.

    Args:
        manifest_path: JSON manifest with ``images``, ``annotations`` and ``categories``
        image_root: directory the ``file_name`` entries are relative to

    Returns:
        A validated Dataset, boxes in corner form
    """
    try:
        with open(manifest_path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestParseError(f"invalid JSON at line {e.lineno}: {e.msg}", record=str(manifest_path)) from e
    except OSError as e:
        raise DatasetValidationError(f"cannot read manifest {manifest_path}: {e.strerror or e}") from e
    if not isinstance(raw, dict):
        raise ManifestParseError("manifest must be an object", record=str(manifest_path))

    image_records: list[ImageRecord] = _parse_records(raw, "images", ImageRecord)
    annotations: list[AnnotationRecord] = _parse_records(raw, "annotations", AnnotationRecord)
    categories: list[CategoryRecord] = _parse_records(raw, "categories", CategoryRecord)

    images = []
    for rec in image_records:
        path = image_root / rec.file_name
        try:
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        except OSError as e:
            raise DatasetValidationError(f"image {rec.id}: cannot read {path}: {e}") from e
        if pixels.shape[:2] != (rec.height, rec.width):
            raise DatasetValidationError(
                f"image {rec.id}: manifest says {rec.width}x{rec.height}, file is "
                f"{pixels.shape[1]}x{pixels.shape[0]}"
            )
        images.append(ImageEntry(id=rec.id, file_name=rec.file_name, pixels=pixels))

    dataset = Dataset(images=images, annotations=annotations, categories=categories).validate()
    logger.info(
        "Loaded %d images, %d annotations, %d classes from %s",
        len(images), len(annotations), len(categories), manifest_path,
    )
    return dataset


def save_dataset(dataset: Dataset, manifest_path: Path, image_root: Path) -> None:
    """Write PNG images under ``image_root`` and the manifest (inverse of :func:`load_dataset`)."""
    image_root.mkdir(parents=True, exist_ok=True)
    for img in dataset.images:
        target = image_root / img.file_name
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img.pixels).save(target, format="PNG")
    manifest = {
        "images": [
            {"id": i.id, "file_name": i.file_name, "width": i.width, "height": i.height}
            for i in dataset.images
        ],
        "annotations": [
            {"id": a.id, "image_id": a.image_id, "category_id": a.category_id, "bbox": a.bbox.to_xywh()}
            for a in dataset.annotations
        ],
        "categories": [{"id": c.id, "name": c.name} for c in dataset.categories],
    }
    atomic_write_json(manifest_path, manifest)


def load_split(path: Path) -> ClassSplit:
    """Read a split file with ``base`` and ``novel`` id arrays."""
    raw = read_yaml(path)
    if not isinstance(raw, dict) or "base" not in raw or "novel" not in raw:
        raise ManifestParseError("split file needs 'base' and 'novel' arrays", record=str(path))
    try:
        return ClassSplit(base=frozenset(raw["base"]), novel=frozenset(raw["novel"]))
    except (ValidationError, TypeError) as e:
        raise ManifestParseError(str(e).splitlines()[0], record=str(path)) from e


def save_split(split: ClassSplit, path: Path) -> None:
    atomic_write_yaml(path, {"base": sorted(split.base), "novel": sorted(split.novel)})


def default_split(class_ids: Collection[int], num_novel: int = 4) -> ClassSplit:
    """Spread ``num_novel`` novel classes evenly over the sorted ids.

    With toy classes ordered shape-major, every novel class shares its colour
    word and its shape word with some base class.

    Examples:
        >>> s = default_split(range(1, 13), num_novel=4)
        >>> sorted(s.novel)
        [3, 6, 9, 12]
        >>> len(s.base)
        8
    """
    ids = sorted(class_ids)
    if not 0 < num_novel < len(ids):
        raise SamplingError(f"cannot pick {num_novel} novel classes out of {len(ids)}")
    step = len(ids) // num_novel
    novel = {ids[step * (k + 1) - 1] for k in range(num_novel)}
    return ClassSplit(base=frozenset(set(ids) - novel), novel=frozenset(novel))


# =========================================================================
# Support preprocessing
# =========================================================================


def crop_support(pixels: np.ndarray, box: Box, context: int = 16, size: int = 64) -> np.ndarray:
    """Crop a box padded by ``context`` pixels and resize it to ``size`` x ``size``.

    Examples:
        >>> img = np.zeros((64, 64, 3), dtype=np.uint8)
        >>> crop_support(img, Box(x1=10, y1=10, x2=20, y2=30), size=32).shape
        (32, 32, 3)
    """
    h, w = pixels.shape[:2]
    x1 = max(0, int(np.floor(box.x1)) - context)
    y1 = max(0, int(np.floor(box.y1)) - context)
    x2 = min(w, int(np.ceil(box.x2)) + context)
    y2 = min(h, int(np.ceil(box.y2)) + context)
    region = Image.fromarray(np.ascontiguousarray(pixels[y1:y2, x1:x2]))
    return np.asarray(region.resize((size, size), Image.Resampling.BILINEAR), dtype=np.uint8)


# =========================================================================
# Episodic sampling
# =========================================================================


def _check_counts(dataset: Dataset, classes: Iterable[int], shot: int) -> None:
    counts = dataset.class_counts()
    short = sorted(c for c in classes if counts.get(c, 0) < shot)
    if short:
        raise SamplingError(f"fewer than {shot} annotated instances", classes=short)


def sample_episode(
    dataset: Dataset,
    split: ClassSplit,
    way: int,
    shot: int,
    from_base: bool,
    rng: np.random.Generator,
    *,
    queries: int = 4,
    support_size: int = 64,
    context: int = 16,
    pool: Optional[Collection[int]] = None,
) -> Episode:
    """Sample one N-way K-shot episode.

    One positive class is drawn first and up to ``queries`` images showing it
    become the query set, skipping images that would leave too few classes
    absent for the negatives. Further positives (``way // 2`` in total) are classes
    that also appear in those images; the remaining classes are negatives that
    appear in none of them. Support crops prefer instances outside the query
    images.

    Every query image therefore shows the anchor class and none of the
    negatives, so each query gets a positive and a negative from one shared
    draw rather than a separate draw per query.

    Args:
        dataset: source dataset
        split: base/novel partition
        way: classes per episode
        shot: support crops per class
        from_base: draw from base classes (meta-training) or novel ones (meta-testing)
        rng: seeded generator, the only source of randomness
        pool: explicit class pool, overriding ``from_base``
    """
    classes = sorted(pool) if pool is not None else sorted(split.base if from_base else split.novel)
    if way > len(classes):
        raise SamplingError(f"{way}-way episode requested from {len(classes)} classes", classes=classes)
    _check_counts(dataset, classes, shot)

    by_class = dataset.by_class()
    image_classes: dict[int, set[int]] = defaultdict(set)
    for a in dataset.annotations:
        image_classes[a.image_id].add(a.category_id)

    anchor = classes[int(rng.integers(len(classes)))]
    candidates = sorted({a.image_id for a in by_class[anchor]})
    n_pos = max(1, way // 2)
    pool_set = set(classes)

    def negatives_needed(present: set[int]) -> int:
        return way - 1 - min(n_pos - 1, len(present) - 1)

    # add query images in random order while enough classes stay absent for the negatives
    query_ids: list[int] = []
    present = {anchor}
    for i in rng.permutation(len(candidates)):
        image_id = candidates[int(i)]
        grown = present | (image_classes[image_id] & pool_set)
        if len(pool_set - grown) >= negatives_needed(grown):
            query_ids.append(image_id)
            present = grown
            if len(query_ids) == queries:
                break
    if not query_ids:
        raise SamplingError(
            f"every image of class {anchor} shows too many episode classes for {way - n_pos} negatives"
        )
    query_ids.sort()

    extra = sorted(present - {anchor})
    take = min(n_pos - 1, len(extra))
    positives = {anchor}
    if take:
        positives |= {extra[int(i)] for i in rng.choice(len(extra), size=take, replace=False)}
    absent = sorted(set(classes) - present)
    n_neg = way - len(positives)
    if n_neg > len(absent):
        raise SamplingError(
            f"only {len(absent)} classes are absent from the query images, {n_neg} negatives needed"
        )
    negatives = {absent[int(i)] for i in rng.choice(len(absent), size=n_neg, replace=False)} if n_neg else set()

    query_set = set(query_ids)
    support: dict[int, list[np.ndarray]] = {}
    sources: dict[int, list[int]] = {}
    for cid in sorted(positives | negatives):
        outside = [a for a in by_class[cid] if a.image_id not in query_set]
        pool_anns = outside if len(outside) >= shot else by_class[cid]
        picked = [pool_anns[int(i)] for i in rng.choice(len(pool_anns), size=shot, replace=False)]
        support[cid] = [
            crop_support(dataset.image(a.image_id).pixels, a.bbox, context=context, size=support_size)
            for a in picked
        ]
        sources[cid] = [a.image_id for a in picked]

    query = []
    for image_id in query_ids:
        anns = [a for a in dataset.annotations_for(image_id) if a.category_id in positives]
        query.append(
            QueryImage(
                image_id=image_id,
                pixels=dataset.image(image_id).pixels,
                boxes=[a.bbox for a in anns],
                labels=[a.category_id for a in anns],
            )
        )

    names = {}
    for cid in support:
        name = dataset.category_name(cid)
        if cid in split.base and name:
            names[cid] = name
    return Episode(
        support=support,
        query=query,
        positive_ids=positives,
        negative_ids=negatives,
        class_names=names,
        support_sources=sources,
    )


def build_finetune_set(dataset: Dataset, split: ClassSplit, shot: int, rng: np.random.Generator) -> Dataset:
    """Pick exactly ``shot`` annotations per base and novel class.

    Images keep only the picked annotations, so every class is represented
    by exactly ``shot`` boxes.
    """
    classes = sorted(split.all_ids)
    _check_counts(dataset, classes, shot)
    by_class = dataset.by_class()
    picked: list[AnnotationRecord] = []
    for cid in classes:
        anns = by_class[cid]
        picked.extend(anns[int(i)] for i in sorted(rng.choice(len(anns), size=shot, replace=False)))
    picked.sort(key=lambda a: a.id)
    result = dataset.subset({a.image_id for a in picked}, annotations=picked)
    logger.info("Fine-tuning set: %d classes x %d shots over %d images", len(classes), shot, len(result.images))
    return result


# =========================================================================
# Toy benchmark
# =========================================================================


def toy_class_names(num_classes: int) -> list[str]:
    """Names of the toy classes, shape-major so neighbouring ids share a colour.

    Examples:
        >>> toy_class_names(5)
        ['red-square', 'red-circle', 'red-triangle', 'red-cross', 'green-square']
    """
    colors = list(COLORS)
    return [f"{colors[k // len(SHAPES)]}-{SHAPES[k % len(SHAPES)]}" for k in range(num_classes)]


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, x: int, y: int, s: int) -> None:
    if shape == "square":
        draw.rectangle([x, y, x + s - 1, y + s - 1], fill=255)
    elif shape == "circle":
        draw.ellipse([x, y, x + s - 1, y + s - 1], fill=255)
    elif shape == "triangle":
        draw.polygon([(x + (s - 1) / 2, y), (x, y + s - 1), (x + s - 1, y + s - 1)], fill=255)
    elif shape == "cross":
        t = max(2, s // 3)
        off = (s - t) // 2
        draw.rectangle([x + off, y, x + off + t - 1, y + s - 1], fill=255)
        draw.rectangle([x, y + off, x + s - 1, y + off + t - 1], fill=255)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def _overlaps(box: tuple[int, int, int, int], others: list[tuple[int, int, int, int]]) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 < o[2] and o[0] < x2 and y1 < o[3] and o[1] < y2 for o in others)


def generate_toy_dataset(spec: ToyDatasetSpec, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Render coloured shapes on noise backgrounds, one tight box per shape.

    Class ``k`` (1-based) is the ``k``-th shape-colour pair of
    :func:`toy_class_names`. Objects never overlap, so every box is fully
    visible. Identical seeds give byte-identical pixels.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    names = toy_class_names(spec.num_classes)
    size = spec.image_size
    images: list[ImageEntry] = []
    annotations: list[AnnotationRecord] = []
    ann_id = 1
    for image_id in range(1, spec.num_images + 1):
        canvas = rng.integers(0, BACKGROUND_LEVEL, size=(size, size, 3), dtype=np.uint8)
        placed: list[tuple[int, int, int, int]] = []
        for _ in range(int(rng.integers(1, spec.max_objects + 1))):
            class_index = int(rng.integers(spec.num_classes))
            s = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
            spot = None
            for _attempt in range(20):
                x = int(rng.integers(0, size - s + 1))
                y = int(rng.integers(0, size - s + 1))
                if not _overlaps((x, y, x + s, y + s), placed):
                    spot = (x, y)
                    break
            if spot is None:
                continue
            color_name, shape = names[class_index].split("-")
            mask_im = Image.new("L", (size, size), 0)
            _draw_shape(ImageDraw.Draw(mask_im), shape, spot[0], spot[1], s)
            bbox = mask_im.getbbox()
            if bbox is None:
                continue
            mask = np.asarray(mask_im) > 0
            canvas[mask] = COLORS[color_name]
            placed.append((spot[0], spot[1], spot[0] + s, spot[1] + s))
            annotations.append(
                AnnotationRecord(
                    id=ann_id,
                    image_id=image_id,
                    category_id=class_index + 1,
                    bbox=Box(x1=bbox[0], y1=bbox[1], x2=bbox[2], y2=bbox[3]),
                )
            )
            ann_id += 1
        images.append(ImageEntry(id=image_id, file_name=f"{image_id:05d}.png", pixels=canvas))
    categories = [CategoryRecord(id=k + 1, name=name) for k, name in enumerate(names)]
    return Dataset(images=images, annotations=annotations, categories=categories).validate()


def toy_test_spec(data: DataConfig) -> ToyDatasetSpec:
    """The held-out toy set: same rendering, its own seed and size."""
    return data.toy.model_copy(update={"num_images": data.test_images, "seed": data.toy.seed + 1})


def resolve_datasets(data: DataConfig) -> tuple[Dataset, Dataset, ClassSplit]:
    """Load the configured train/test data and split, generating toy data for anything unset.

    Returns:
        The training dataset, the test dataset and the base/novel split
    """
    if data.manifest is not None:
        train = load_dataset(data.manifest, data.image_root or data.manifest.parent)
    else:
        logger.info("No training manifest configured; generating the toy benchmark (seed %d)", data.toy.seed)
        train = generate_toy_dataset(data.toy)
    if data.test_manifest is not None:
        test = load_dataset(data.test_manifest, data.test_image_root or data.test_manifest.parent)
    else:
        test = generate_toy_dataset(toy_test_spec(data))
    split = load_split(data.split) if data.split is not None else default_split(train.class_ids(), data.num_novel)
    unknown = sorted(split.all_ids - set(train.class_ids()))
    if unknown:
        raise DatasetValidationError(f"split names classes missing from the training data: {unknown}")
    return train, test, split

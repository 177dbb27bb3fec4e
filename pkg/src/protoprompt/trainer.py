"""Episodic meta-training, few-shot fine-tuning and checkpoints."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from tempfile import NamedTemporaryFile
from typing import Any, Callable, Optional

import numpy as np
import torch

from protoprompt.config import config_digest, config_to_dict, validate_config
from protoprompt.dataspec import Dataset, Episode, build_finetune_set, sample_episode
from protoprompt.detector import FROZEN_COMPONENTS, PrototypeSet, SiameseDetector
from protoprompt.encoders import FeatureMap, image_to_tensor, state_digest
from protoprompt.exceptions import CheckpointIntegrityError, ConfigError
from protoprompt.io_utils import CsvMetricsLog, locked_file
from protoprompt.losses import (
    LossBundle,
    assign_anchor_targets,
    assign_proposal_targets,
    contrastive_loss,
    kd_loss,
    rcnn_loss,
    rpn_loss,
    total_loss,
)
from protoprompt.models import ClassSplit, ContrastiveSource, RunConfig, RunMode
from protoprompt.mpg import MpgOutput, MultiModalPrototypeGenerator, pool
from protoprompt.utils.box_ops import boxes_to_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "protoprompt-checkpoint/1"
LOSS_LOG_COLUMNS = ["iteration", "rpn", "rcnn", "kd", "contrastive", "total", "rate"]


@dataclass
class Checkpoint:
    """Model parameters plus the metadata needed to verify and rebuild them."""

    parameters: dict[str, torch.Tensor]
    iteration: int
    config: dict[str, Any]
    config_digest: str
    frozen_digests: dict[str, str]
    warnings: list[str] = field(default_factory=list)
    history: list[dict[str, float]] = field(default_factory=list)

    @property
    def digest(self) -> str:
        return state_digest(self.parameters)

    @property
    def run_config(self) -> RunConfig:
        return validate_config(self.config, source="checkpoint")

    def component_digest(self, component: str) -> str:
        return state_digest(self.parameters, prefix=f"{component}.")


def checkpoint_from_detector(detector: SiameseDetector, config: RunConfig, iteration: int) -> Checkpoint:
    parameters = {name: t.detach().clone() for name, t in detector.state_dict().items()}
    return Checkpoint(
        parameters=parameters,
        iteration=iteration,
        config=config_to_dict(config),
        config_digest=config_digest(config),
        frozen_digests=detector.frozen_digests(),
    )


def detector_from_checkpoint(checkpoint: Checkpoint) -> SiameseDetector:
    """Rebuild the detector a checkpoint was taken from."""
    config = checkpoint.run_config
    detector = SiameseDetector(config.model, config.mpg)
    expected = detector.frozen_digests()
    for name in FROZEN_COMPONENTS:
        if checkpoint.component_digest(name) != expected[name]:
            raise CheckpointIntegrityError(f"frozen component {name!r} differs from its seeded initialisation")
    detector.load_state_dict(checkpoint.parameters)
    return detector


# =========================================================================
# Checkpoint files
# =========================================================================


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    """Write a checkpoint atomically: a flat parameter map plus a metadata block."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "parameters": checkpoint.parameters,
        "metadata": {
            "iteration": checkpoint.iteration,
            "config": checkpoint.config,
            "config_digest": checkpoint.config_digest,
            "frozen_digests": checkpoint.frozen_digests,
            "parameter_digest": checkpoint.digest,
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with locked_file(path):
        tmp_path: Path | None = None
        try:
            with NamedTemporaryFile(dir=path.parent, delete=False, suffix=".tmp") as tmp:
                tmp_path = Path(tmp.name)
                torch.save(payload, tmp)
            tmp_path.replace(path)
        finally:
            if tmp_path is not None and tmp_path.exists():
                tmp_path.unlink()


def load_checkpoint(path: Path, expected_config_digest: Optional[str] = None) -> Checkpoint:
    """Load and verify a checkpoint.

    Raises CheckpointIntegrityError when the file is unreadable or a stored
    digest does not match the stored parameters. A config digest different
    from ``expected_config_digest`` only adds a warning.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointIntegrityError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointIntegrityError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    try:
        meta = payload["metadata"]
        checkpoint = Checkpoint(
            parameters=dict(payload["parameters"]),
            iteration=int(meta["iteration"]),
            config=dict(meta["config"]),
            config_digest=str(meta["config_digest"]),
            frozen_digests=dict(meta["frozen_digests"]),
        )
        stored_digest = meta["parameter_digest"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointIntegrityError(f"{path}: incomplete checkpoint metadata ({e!r})") from e
    if checkpoint.digest != stored_digest:
        raise CheckpointIntegrityError(f"{path}: parameter digest mismatch")
    for name, digest in checkpoint.frozen_digests.items():
        if checkpoint.component_digest(name) != digest:
            raise CheckpointIntegrityError(f"{path}: frozen component {name!r} digest mismatch")
    if expected_config_digest is not None and expected_config_digest != checkpoint.config_digest:
        _warn_config_mismatch(checkpoint, checkpoint.config_digest, expected_config_digest)
    return checkpoint


def _warn_config_mismatch(checkpoint: Checkpoint, stored: str, current: str) -> None:
    message = f"checkpoint config digest {stored[:12]} differs from the current config {current[:12]}"
    logger.warning(message)
    checkpoint.warnings.append(message)


# sections a later stage may change without retraining
STAGE_SECTIONS = ("mode", "finetune", "eval")


def training_digest(config: RunConfig) -> str:
    """Config digest over everything that shapes the trained parameters.

    Examples:
        >>> training_digest(RunConfig()) == training_digest(RunConfig(mode="finetune"))
        True
        >>> training_digest(RunConfig()) == training_digest(RunConfig(seed=99))
        False
    """
    return config_digest(config, exclude=STAGE_SECTIONS)


def check_checkpoint_config(checkpoint: Checkpoint, config: RunConfig) -> bool:
    """Warn when ``config`` would not have trained ``checkpoint``; returns True when they agree.

    Mode, fine-tuning and evaluation settings are ignored, since finetune and
    meta-test legitimately change them.
    """
    stored, current = training_digest(checkpoint.run_config), training_digest(config)
    if stored == current:
        return True
    _warn_config_mismatch(checkpoint, stored, current)
    return False


# =========================================================================
# Episode losses
# =========================================================================


def _prototype_losses(
    mpg: MultiModalPrototypeGenerator,
    out: Optional[MpgOutput],
    protos: PrototypeSet,
    config: RunConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    zero = torch.zeros(())
    if out is None or out.teacher_semantic is None or not protos.named:
        return zero, zero
    rows = [protos.class_ids.index(cid) for cid in protos.named]
    kd = kd_loss(out.student_semantic[rows], out.teacher_semantic)
    pooled = pool(out.visual)
    if config.loss.contrastive_source is ContrastiveSource.TEACHER:
        contrastive = contrastive_loss(
            pooled[rows], mpg.fusion.project(out.teacher_semantic), config.loss.temperature
        )
    else:
        contrastive = contrastive_loss(pooled, mpg.fusion.project(out.student_semantic), config.loss.temperature)
    return kd, contrastive


def episode_loss(
    detector: SiameseDetector,
    episode: Episode,
    config: RunConfig,
    rng: np.random.Generator,
    iteration: Optional[int] = None,
) -> LossBundle:
    """Losses of one episode, with teacher-driven prototypes for named classes."""
    protos = detector.build_prototypes(
        episode.support, names=episode.class_names, use_teacher=True, with_teacher=True
    )
    model = config.model
    rpn_terms, rcnn_terms = [], []
    for query in episode.query:
        image = image_to_tensor(query.pixels).unsqueeze(0)
        values = detector.backbone(image)[0]
        h, w = values.shape[-2:]
        image_size = (int(query.pixels.shape[0]), int(query.pixels.shape[1]))
        anchors = detector.anchors(h, w)
        logits, deltas = detector.rpn(values, protos.rpn)
        labels = torch.as_tensor(query.labels, dtype=torch.long)
        all_gt = boxes_to_tensor(query.boxes)
        fmap = FeatureMap(values=values, stride=detector.backbone.stride)
        for i, cid in enumerate(protos.class_ids):
            gt = all_gt[labels == cid] if len(query.boxes) else all_gt
            anchor_targets = assign_anchor_targets(
                anchors,
                gt,
                rng,
                samples=config.loss.rpn_samples,
                positive_fraction=config.loss.positive_fraction,
                positive_iou=config.loss.rpn_positive_iou,
                negative_iou=config.loss.rpn_negative_iou,
            )
            idx = anchor_targets.indices
            rpn_terms.append(
                rpn_loss(
                    torch.sigmoid(logits[i, idx]),
                    deltas[i, idx],
                    anchor_targets.labels,
                    anchor_targets.target_deltas,
                )
            )
            proposals, _ = detector.propose(logits[i], deltas[i], anchors, image_size, model.top_n_train)
            boxes, targets = assign_proposal_targets(
                proposals,
                gt,
                rng,
                samples=config.loss.rcnn_samples,
                positive_fraction=config.loss.positive_fraction,
                positive_iou=config.loss.rcnn_positive_iou,
            )
            sampled = boxes[targets.indices]
            match_logits, match_deltas = detector.head(detector.backbone.roi_tensor(fmap, sampled), protos.rcnn[i])
            rcnn_terms.append(
                rcnn_loss(torch.sigmoid(match_logits), match_deltas, targets.labels, targets.target_deltas)
            )

    kd_rpn, con_rpn = _prototype_losses(detector.rpn_mpg, protos.rpn_mpg, protos, config)
    kd_rcnn, con_rcnn = _prototype_losses(detector.rcnn_mpg, protos.rcnn_mpg, protos, config)
    return total_loss(
        torch.stack(rpn_terms).mean(),
        torch.stack(rcnn_terms).mean(),
        kd_rpn + kd_rcnn,
        con_rpn + con_rcnn,
        iteration=iteration,
    )


# =========================================================================
# Training loop
# =========================================================================


def train_loop(
    detector: SiameseDetector,
    next_episode: Callable[[], Episode],
    config: RunConfig,
    rng: np.random.Generator,
    log: Optional[CsvMetricsLog] = None,
) -> list[dict[str, float]]:
    """Momentum SGD over accumulated episode batches with one step decay of the rate.

    Returns:
        One row per iteration: the batch-mean loss components and the rate used
    """
    rate, iterations, decay_step = config.schedule()
    params = [p for p in detector.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(
        params,
        lr=rate,
        momentum=config.optimizer.momentum,
        weight_decay=config.optimizer.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=[decay_step], gamma=0.1)
    history: list[dict[str, float]] = []
    detector.train()
    for iteration in range(1, iterations + 1):
        optimizer.zero_grad(set_to_none=True)
        sums = dict.fromkeys(("rpn", "rcnn", "kd", "contrastive", "total"), 0.0)
        for _ in range(config.batch_size):
            bundle = episode_loss(detector, next_episode(), config, rng, iteration=iteration)
            (bundle.total / config.batch_size).backward()
            for key, value in bundle.as_floats().items():
                sums[key] += value / config.batch_size
        current_rate = optimizer.param_groups[0]["lr"]
        optimizer.step()
        scheduler.step()
        row = {"iteration": iteration, **sums, "rate": current_rate}
        history.append(row)
        if log is not None:
            log.append(row)
        if iteration % config.log_every == 0 or iteration in (1, iterations):
            logger.info(
                "iter %d/%d total %.4f (rpn %.4f rcnn %.4f kd %.4f con %.4f) rate %g",
                iteration, iterations, sums["total"], sums["rpn"], sums["rcnn"],
                sums["kd"], sums["contrastive"], current_rate,
            )
            if log is not None:
                log.flush()
    if log is not None:
        log.flush()
    return history


def _check_frozen(detector: SiameseDetector, before: dict[str, str]) -> None:
    after = detector.frozen_digests()
    changed = [name for name in before if before[name] != after[name]]
    if changed:
        raise CheckpointIntegrityError(f"frozen components changed during training: {changed}")


def check_name_lengths(detector: SiameseDetector, names: list[Optional[str]]) -> None:
    """Raise ConfigError unless every teacher sequence (prompt plus name) fits the text encoder."""
    limit = detector.model_config.text_max_len
    prompt_len = detector.mpg_config.prompt_len
    too_long = sorted({name for name in names if name and prompt_len + len(detector.encode_name(name)) > limit})
    if too_long:
        raise ConfigError(
            f"mpg.prompt_len ({prompt_len}) plus the tokens of {too_long} exceeds model.text_max_len ({limit})"
        )


def meta_train(
    dataset: Dataset,
    split: ClassSplit,
    config: RunConfig,
    rng: np.random.Generator,
    run_dir: Optional[Path] = None,
) -> Checkpoint:
    """Episodic training over base classes with both MPG paths.

    Args:
        dataset: training data
        split: base/novel partition; every base class needs a name
        config: run config in meta-train mode
        rng: drives episode and target sampling
        run_dir: if given, ``losses.csv`` is streamed there
    """
    if config.mode is not RunMode.META_TRAIN:
        raise ConfigError(f"meta_train needs mode 'meta-train', got {config.mode.value!r}")
    unnamed = sorted(cid for cid in split.base if not dataset.category_name(cid))
    if unnamed:
        raise ConfigError(f"base classes without names: {unnamed}")
    torch.manual_seed(config.seed)
    detector = SiameseDetector(config.model, config.mpg)
    check_name_lengths(detector, [dataset.category_name(cid) for cid in sorted(split.base)])
    before = detector.frozen_digests()
    episode_rng, target_rng = rng.spawn(2)

    def next_episode() -> Episode:
        return sample_episode(
            dataset,
            split,
            config.way,
            config.shot,
            True,
            episode_rng,
            queries=config.queries_per_episode,
            support_size=config.model.support_size,
            context=config.model.support_context,
        )

    log = CsvMetricsLog(run_dir / "losses.csv", LOSS_LOG_COLUMNS) if run_dir else None
    history = train_loop(detector, next_episode, config, target_rng, log)
    _check_frozen(detector, before)
    checkpoint = checkpoint_from_detector(detector, config, iteration=len(history))
    checkpoint.history = history
    return checkpoint


def finetune(
    checkpoint: Checkpoint,
    dataset: Dataset,
    split: ClassSplit,
    shot: int,
    config: RunConfig,
    rng: np.random.Generator,
    run_dir: Optional[Path] = None,
) -> Checkpoint:
    """Tune heads and MPG parameters on a balanced K-shot set with the backbone frozen."""
    if config.mode is not RunMode.FINETUNE:
        raise ConfigError(f"finetune needs mode 'finetune', got {config.mode.value!r}")
    torch.manual_seed(config.seed)
    detector = detector_from_checkpoint(checkpoint)
    for p in detector.backbone.parameters():
        p.requires_grad_(False)
    before = detector.frozen_digests()
    backbone_before = detector.backbone_digest()

    tuning_set = build_finetune_set(dataset, split, shot, rng)
    episode_rng, target_rng = rng.spawn(2)
    pool_ids = sorted(split.all_ids)
    way = min(config.way, len(pool_ids))

    def next_episode() -> Episode:
        return sample_episode(
            tuning_set,
            split,
            way,
            shot,
            True,
            episode_rng,
            queries=config.queries_per_episode,
            support_size=config.model.support_size,
            context=config.model.support_context,
            pool=pool_ids,
        )

    log = CsvMetricsLog(run_dir / "losses.csv", LOSS_LOG_COLUMNS) if run_dir else None
    history = train_loop(detector, next_episode, config, target_rng, log)
    _check_frozen(detector, before)
    if detector.backbone_digest() != backbone_before:
        raise CheckpointIntegrityError("backbone changed during fine-tuning")
    tuned_config = checkpoint.run_config.model_copy(
        update={"mode": RunMode.FINETUNE, "finetune": config.finetune, "seed": config.seed}
    )
    result = checkpoint_from_detector(detector, tuned_config, iteration=checkpoint.iteration + len(history))
    result.history = history
    return result

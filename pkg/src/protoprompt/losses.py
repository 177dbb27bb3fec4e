"""Training objectives and the target assignment that feeds them.

Example:
    >>> import torch
    >>> kd_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])).item()
    1.4142135381698608
    >>> total_loss(1.0, 2.0, 3.0, 4.0).total
    10.0
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from protoprompt.exceptions import NonFiniteLossError, ShapeMismatchError
from protoprompt.mpg import SemanticPrototype
from protoprompt.utils.box_ops import box_iou, encode_deltas

PROBABILITY_EPS = 1e-7
RPN_SMOOTH_L1_BETA = 1.0 / 9.0
RCNN_SMOOTH_L1_BETA = 1.0

LOSS_COLUMNS = ("rpn", "rcnn", "kd", "contrastive", "total")


@dataclass
class LossBundle:
    """The four training losses and their unweighted sum.

    Fields hold tensors during training and floats once logged.
    """

    rpn: torch.Tensor | float
    rcnn: torch.Tensor | float
    kd: torch.Tensor | float
    contrastive: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in LOSS_COLUMNS}


def total_loss(rpn, rcnn, kd, contrastive, iteration: int | None = None) -> LossBundle:
    """Sum the components, refusing any that is NaN or infinite.

    Examples:
        >>> total_loss(0.0, float("nan"), 0.0, 0.0, iteration=7)
        Traceback (most recent call last):
        ...
        protoprompt.exceptions.NonFiniteLossError: non-finite rcnn loss at iteration 7
    """
    components = {"rpn": rpn, "rcnn": rcnn, "kd": kd, "contrastive": contrastive}
    for name, value in components.items():
        if not math.isfinite(float(value)):
            raise NonFiniteLossError(name, iteration=iteration)
    return LossBundle(total=rpn + rcnn + kd + contrastive, **components)


# =========================================================================
# Detection losses
# =========================================================================


def _detection_loss(
    probabilities: torch.Tensor,
    deltas: torch.Tensor,
    labels: torch.Tensor,
    target_deltas: torch.Tensor,
    beta: float,
) -> torch.Tensor:
    labels = labels.to(probabilities.dtype)
    count = labels.shape[0]
    if count == 0:
        return probabilities.sum() * 0.0
    p = probabilities.clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)
    classification = -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean()
    positive = labels > 0.5
    if not bool(positive.any()):
        return classification
    regression = F.smooth_l1_loss(deltas[positive], target_deltas[positive], beta=beta, reduction="sum") / count
    return classification + regression


def rpn_loss(
    probabilities: torch.Tensor,
    deltas: torch.Tensor,
    labels: torch.Tensor,
    target_deltas: torch.Tensor,
) -> torch.Tensor:
    """Binary cross-entropy over sampled anchors plus smooth-L1 on positive anchors.

    Args:
        probabilities: objectness ``[S]`` of the sampled anchors
        deltas: predicted deltas ``[S, 4]``
        labels: 1 for positive, 0 for negative anchors ``[S]``
        target_deltas: regression targets ``[S, 4]``, read only at positives

    Examples:
        >>> p = torch.full((4,), 0.5)
        >>> z = torch.zeros(4, 4)
        >>> round(rpn_loss(p, z, torch.tensor([1, 0, 0, 0]), z).item(), 4)
        0.6931
    """
    return _detection_loss(probabilities, deltas, labels, target_deltas, RPN_SMOOTH_L1_BETA)


def rcnn_loss(
    probabilities: torch.Tensor,
    deltas: torch.Tensor,
    labels: torch.Tensor,
    target_deltas: torch.Tensor,
) -> torch.Tensor:
    """Binary cross-entropy on match scores plus smooth-L1 on positive proposals."""
    return _detection_loss(probabilities, deltas, labels, target_deltas, RCNN_SMOOTH_L1_BETA)


# =========================================================================
# Target assignment
# =========================================================================


@dataclass
class SampledTargets:
    """Indices of sampled boxes with their labels and regression targets."""

    indices: torch.Tensor
    labels: torch.Tensor
    target_deltas: torch.Tensor


def _sample(
    positive: np.ndarray,
    negative: np.ndarray,
    samples: int,
    positive_fraction: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    n_pos = min(len(positive), int(samples * positive_fraction))
    n_neg = min(len(negative), samples - n_pos)
    pos = np.sort(rng.choice(positive, size=n_pos, replace=False)) if n_pos else positive[:0]
    neg = np.sort(rng.choice(negative, size=n_neg, replace=False)) if n_neg else negative[:0]
    return pos, neg


def _targets(
    boxes: torch.Tensor,
    gt: torch.Tensor,
    matched: torch.Tensor,
    pos: np.ndarray,
    neg: np.ndarray,
) -> SampledTargets:
    indices = torch.as_tensor(np.concatenate([pos, neg]), dtype=torch.long)
    labels = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))])
    target_deltas = torch.zeros((len(indices), 4), dtype=boxes.dtype)
    if len(pos):
        pos_t = torch.as_tensor(pos, dtype=torch.long)
        target_deltas[: len(pos)] = encode_deltas(boxes[pos_t], gt[matched[pos_t]])
    return SampledTargets(indices=indices, labels=labels, target_deltas=target_deltas)


def assign_anchor_targets(
    anchors: torch.Tensor,
    gt: torch.Tensor,
    rng: np.random.Generator,
    samples: int = 64,
    positive_fraction: float = 0.25,
    positive_iou: float = 0.7,
    negative_iou: float = 0.3,
) -> SampledTargets:
    """Label anchors against ground truth of the positive class and sample them.

    An anchor is positive at IoU >= ``positive_iou`` with some box, or when it
    is the best anchor for a box. It is negative at IoU <= ``negative_iou``
    with every box. With no ground truth, every anchor is negative.
    """
    n = anchors.shape[0]
    if gt.shape[0] == 0:
        pos_mask = np.zeros(n, dtype=bool)
        neg_mask = np.ones(n, dtype=bool)
        matched = torch.zeros(n, dtype=torch.long)
    else:
        iou = box_iou(anchors, gt)
        best, matched = iou.max(dim=1)
        pos_t = best >= positive_iou
        best_per_gt = iou.max(dim=0).values
        for g in range(gt.shape[0]):
            if best_per_gt[g] > 0:
                pos_t |= iou[:, g] == best_per_gt[g]
                matched = torch.where(iou[:, g] == best_per_gt[g], torch.full_like(matched, g), matched)
        pos_mask = pos_t.numpy()
        neg_mask = (best <= negative_iou).numpy() & ~pos_mask
    pos, neg = _sample(np.flatnonzero(pos_mask), np.flatnonzero(neg_mask), samples, positive_fraction, rng)
    return _targets(anchors, gt, matched, pos, neg)


def assign_proposal_targets(
    proposals: torch.Tensor,
    gt: torch.Tensor,
    rng: np.random.Generator,
    samples: int = 64,
    positive_fraction: float = 0.25,
    positive_iou: float = 0.5,
) -> tuple[torch.Tensor, SampledTargets]:
    """Append ground truth to the proposals, label them at ``positive_iou`` and sample.

    Returns:
        The proposal boxes including the appended ground truth, and the sampled targets
    """
    boxes = torch.cat([proposals.detach(), gt.to(proposals.dtype)], dim=0)
    if gt.shape[0] == 0:
        matched = torch.zeros(boxes.shape[0], dtype=torch.long)
        pos_mask = np.zeros(boxes.shape[0], dtype=bool)
    else:
        best, matched = box_iou(boxes, gt).max(dim=1)
        pos_mask = (best >= positive_iou).numpy()
    pos, neg = _sample(np.flatnonzero(pos_mask), np.flatnonzero(~pos_mask), samples, positive_fraction, rng)
    return boxes, _targets(boxes, gt, matched, pos, neg)


# =========================================================================
# Prototype losses
# =========================================================================


def _stack(prototypes: Sequence[SemanticPrototype] | Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    if isinstance(prototypes, torch.Tensor):
        return prototypes
    return torch.stack([p.values if isinstance(p, SemanticPrototype) else p for p in prototypes])


def kd_loss(student, teacher) -> torch.Tensor:
    """Mean Euclidean distance between student and teacher semantic prototypes.

    The teacher side is detached: this loss only moves the student.
    """
    s, t = _stack(student), _stack(teacher)
    if s.shape != t.shape or s.shape[0] == 0:
        raise ShapeMismatchError(f"kd_loss needs equal non-empty lists, got {tuple(s.shape)} and {tuple(t.shape)}")
    return torch.linalg.vector_norm(s - t.detach(), dim=1).mean()


def similarity_logits(visual, semantic, temperature: float = 0.01) -> torch.Tensor:
    """Cosine similarities of every visual/semantic pair divided by ``temperature``, ``[N, N]``."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v, s = _stack(visual), _stack(semantic)
    if v.shape != s.shape or v.shape[0] == 0:
        raise ShapeMismatchError(
            f"contrastive_loss needs equal non-empty lists, got {tuple(v.shape)} and {tuple(s.shape)}"
        )
    return F.normalize(v, dim=1) @ F.normalize(s, dim=1).T / temperature


def contrastive_loss(visual, semantic, temperature: float = 0.01) -> torch.Tensor:
    """Symmetric InfoNCE between L2-normalised visual and semantic vectors.

    Both inputs are ``[N, C_v]``: pooled visual prototypes and semantic
    prototypes already mapped to the visual width.

    Examples:
        >>> e = torch.eye(2)
        >>> round(contrastive_loss(e, e, temperature=1.0).item(), 5)
        0.31326
        >>> contrastive_loss(e, e, temperature=0.0)
        Traceback (most recent call last):
        ...
        ValueError: temperature must be positive, got 0.0
    """
    logits = similarity_logits(visual, semantic, temperature)
    target = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))

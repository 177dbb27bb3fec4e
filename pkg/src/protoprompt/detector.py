"""Two-stage class-conditioned detector.

Stage one modulates the query feature map channelwise by a class prototype
and scores anchors for objectness. Stage two compares RoI features of the
surviving proposals with the class's RoI-sized prototype in a class-agnostic
matching head that also regresses box deltas. Classes are detected
independently of each other.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from protoprompt.encoders import (
    Backbone,
    FeatureMap,
    FrozenTextEncoder,
    RoiFeature,
    TokenEmbeddingTable,
    Vocabulary,
    parameter_digest,
)
from protoprompt.exceptions import ManifestParseError, ShapeMismatchError
from protoprompt.io_utils import atomic_write_json
from protoprompt.models import Box, DetectionRecord, ModelConfig, MpgConfig, MpgPlacement
from protoprompt.mpg import MpgOutput, MultiModalPrototypeGenerator
from protoprompt.utils.box_ops import (
    boxes_to_tensor,
    clip_boxes,
    decode_deltas,
    make_anchors,
    nms,
    tensor_to_boxes,
    valid_mask,
)

logger = logging.getLogger(__name__)

FROZEN_COMPONENTS = ("text_encoder", "token_table")


@dataclass
class Proposal:
    box: Box
    objectness: float


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float
    image_id: Optional[int] = None

    def to_record(self, image_id: Optional[int] = None) -> DetectionRecord:
        image = image_id if image_id is not None else self.image_id
        if image is None:
            raise ValueError("detection has no image id")
        return DetectionRecord(
            image_id=image,
            category_id=self.class_id,
            bbox=self.box.to_xywh(),
            score=min(max(self.score, 0.0), 1.0),
        )


@dataclass
class PrototypeSet:
    """Per-class prototypes for both stages, plus the MPG intermediates behind them.

    ``rpn`` is ``[N, C_v, H, W]`` and ``rcnn`` is ``[N, C_v, R, R]``; row ``i``
    belongs to ``class_ids[i]``.
    """

    class_ids: list[int]
    rpn: torch.Tensor
    rcnn: torch.Tensor
    rpn_mpg: Optional[MpgOutput] = None
    rcnn_mpg: Optional[MpgOutput] = None
    named: list[int] = field(default_factory=list)

    def as_mapping(self) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
        return {cid: (self.rpn[i], self.rcnn[i]) for i, cid in enumerate(self.class_ids)}


# =========================================================================
# Heads
# =========================================================================


class ProposalNetwork(nn.Module):
    """Objectness and box deltas over anchors of a prototype-modulated query map."""

    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = nn.Sequential(nn.Conv2d(channels, channels, kernel_size=3, padding=1), nn.ReLU(inplace=True))
        self.objectness = nn.Conv2d(channels, num_anchors, kernel_size=1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, kernel_size=1)
        for layer in (self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, query: torch.Tensor, prototypes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Score anchors for each prototype.

        Args:
            query: query feature map ``[C, H, W]``
            prototypes: stage-one prototypes ``[N, C, h, w]``

        Returns:
            Objectness logits ``[N, H * W * A]`` and deltas ``[N, H * W * A, 4]``,
            ordered like :func:`~protoprompt.utils.box_ops.make_anchors`.
        """
        kernel = prototypes.mean(dim=(-2, -1))
        modulated = query.unsqueeze(0) * kernel[:, :, None, None]
        hidden = self.conv(modulated)
        n, _, h, w = hidden.shape
        logits = self.objectness(hidden).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.deltas(hidden).view(n, self.num_anchors, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, -1, 4)
        return logits, deltas


class MatchingHead(nn.Module):
    """Class-agnostic pairwise matcher with a box regressor."""

    def __init__(self, channels: int, hidden: int = 128):
        super().__init__()
        self.score = nn.Sequential(
            nn.Linear(4 * channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 1),
        )
        self.regress = nn.Sequential(
            nn.Linear(2 * channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 4),
        )
        nn.init.normal_(self.regress[2].weight, std=0.001)
        nn.init.zeros_(self.regress[2].bias)

    def forward(self, rois: torch.Tensor, prototype: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``[P, C, R, R]`` RoIs against one ``[C, R, R]`` prototype -> logits ``[P]``, deltas ``[P, 4]``."""
        r = rois.mean(dim=(-2, -1))
        p = prototype.mean(dim=(-2, -1)).unsqueeze(0).expand_as(r)
        pair = torch.cat([r, p, r * p, (r - p).abs()], dim=1)
        return self.score(pair).squeeze(1), self.regress(torch.cat([r, r * p], dim=1))


# =========================================================================
# Detector
# =========================================================================


class SiameseDetector(nn.Module):
    """Shared backbone, frozen text side, two MPG instances and both detection heads."""

    def __init__(self, model: ModelConfig, mpg: MpgConfig):
        super().__init__()
        self.model_config = model
        self.mpg_config = mpg
        self.placement = MpgPlacement(mpg.placement)
        self.vocabulary = Vocabulary.toy()
        self.text_encoder = FrozenTextEncoder(
            dim=model.text_channels,
            layers=model.text_layers,
            heads=model.text_heads,
            max_len=model.text_max_len,
            seed=model.text_seed,
        )
        self.token_table = TokenEmbeddingTable(len(self.vocabulary), model.text_channels, seed=model.text_seed + 1)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(model.init_seed)
            self.backbone = Backbone.from_config(model)
            self.rpn_mpg = MultiModalPrototypeGenerator(model.visual_channels, model.text_channels, mpg)
            self.rcnn_mpg = MultiModalPrototypeGenerator(model.visual_channels, model.text_channels, mpg)
            self.rpn = ProposalNetwork(model.visual_channels, len(model.anchor_sizes))
            self.head = MatchingHead(model.visual_channels)
        self._anchors: dict[tuple[int, int], torch.Tensor] = {}

    # =========================================================================
    # Bookkeeping
    # =========================================================================

    def frozen_digests(self) -> dict[str, str]:
        return {name: parameter_digest(getattr(self, name)) for name in FROZEN_COMPONENTS}

    def backbone_digest(self) -> str:
        return parameter_digest(self.backbone)

    def encode_name(self, name: str) -> list[int]:
        return self.vocabulary.encode(name)

    def anchors(self, height: int, width: int) -> torch.Tensor:
        key = (height, width)
        if key not in self._anchors:
            self._anchors[key] = make_anchors(height, width, self.backbone.stride, self.model_config.anchor_sizes)
        return self._anchors[key]

    # =========================================================================
    # Prototypes
    # =========================================================================

    def support_maps(self, crops: Sequence[np.ndarray]) -> torch.Tensor:
        """Backbone features ``[K, C, h, w]`` of K support crops (same weights as queries)."""
        return torch.stack([fm.values for fm in self.backbone.encode_batch(crops)])

    def support_roi(self, maps: torch.Tensor) -> torch.Tensor:
        """RoI-sized support feature ``[C, R, R]``: the whole crop through RoI sampling and the final block."""
        size = float(maps.shape[-1] * self.backbone.stride)
        box = torch.tensor([[0.0, 0.0, size, size]], dtype=maps.dtype)
        rois = [self.backbone.roi_tensor(FeatureMap(values=m, stride=self.backbone.stride), box)[0] for m in maps]
        return torch.stack(rois).mean(dim=0)

    def build_prototypes(
        self,
        support: Mapping[int, Sequence[np.ndarray]],
        names: Optional[Mapping[int, str]] = None,
        use_teacher: bool = False,
        with_teacher: bool = False,
    ) -> PrototypeSet:
        """Compute both stages' prototypes for a set of classes.

        Args:
            support: K support crops per class id
            names: class names; only read when the teacher path is requested
            use_teacher: drive detection with the teacher-path prototypes of named classes
            with_teacher: compute the teacher path for named classes (for the losses)
        """
        class_ids = sorted(support)
        if not class_ids:
            raise ShapeMismatchError("no support classes given")
        maps = [self.support_maps(support[cid]) for cid in class_ids]
        rpn_visual = torch.stack([m.mean(dim=0) for m in maps])
        rcnn_visual = torch.stack([self.support_roi(m) for m in maps])

        named: list[int] = []
        name_tokens: list[list[int]] = []
        if (use_teacher or with_teacher) and names:
            for cid in class_ids:
                if names.get(cid):
                    named.append(cid)
                    name_tokens.append(self.encode_name(names[cid]))

        result = PrototypeSet(class_ids=class_ids, rpn=rpn_visual, rcnn=rcnn_visual, named=named)
        stages = []
        if self.placement.uses_rpn:
            stages.append(("rpn", self.rpn_mpg, rpn_visual))
        if self.placement.uses_rcnn:
            stages.append(("rcnn", self.rcnn_mpg, rcnn_visual))
        for stage, mpg, visual in stages:
            out = mpg(visual, self.text_encoder, self.token_table)
            driving = out.student_fused
            if named:
                rows = [class_ids.index(cid) for cid in named]
                teacher = mpg(visual[rows], self.text_encoder, self.token_table, names=name_tokens)
                out.teacher_semantic = teacher.teacher_semantic
                out.teacher_fused = teacher.teacher_fused
                if use_teacher and teacher.teacher_fused is not None:
                    driving = driving.clone()
                    driving[rows] = teacher.teacher_fused
            setattr(result, stage, driving)
            setattr(result, f"{stage}_mpg", out)
        return result

    # =========================================================================
    # Stage one
    # =========================================================================

    def propose(
        self,
        logits: torch.Tensor,
        deltas: torch.Tensor,
        anchors: torch.Tensor,
        image_size: tuple[int, int],
        top_n: int,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode, clip and suppress one class's anchor predictions; returns boxes and objectness."""
        height, width = image_size
        scores = torch.sigmoid(logits.detach())
        boxes = clip_boxes(decode_deltas(anchors, deltas.detach()), height, width)
        keep = valid_mask(boxes, min_size=1.0)
        boxes, scores = boxes[keep], scores[keep]
        kept = nms(boxes, scores, self.model_config.rpn_nms)[:top_n]
        return boxes[kept], scores[kept]

    def generate_proposals(
        self,
        query: FeatureMap,
        prototype: torch.Tensor,
        top_n: int,
        image_size: Optional[tuple[int, int]] = None,
    ) -> list[Proposal]:
        """Class-specific proposals, objectness non-increasing."""
        h, w = query.values.shape[-2:]
        image_size = image_size or (h * query.stride, w * query.stride)
        logits, deltas = self.rpn(query.values, prototype.unsqueeze(0))
        boxes, scores = self.propose(logits[0], deltas[0], self.anchors(h, w), image_size, top_n)
        return [Proposal(box=b, objectness=float(s)) for b, s in zip(tensor_to_boxes(boxes), scores.tolist())]

    # =========================================================================
    # Stage two
    # =========================================================================

    def match_proposals(self, rois: Sequence[RoiFeature], prototype: RoiFeature) -> list[tuple[float, torch.Tensor]]:
        """Match score and box delta per proposal, in proposal order."""
        if not rois:
            return []
        logits, deltas = self.head(torch.stack([r.values for r in rois]), prototype.values)
        return [(float(s), d) for s, d in zip(torch.sigmoid(logits).tolist(), deltas)]

    def detect_class(
        self,
        query: FeatureMap,
        class_id: int,
        rpn_prototype: torch.Tensor,
        rcnn_prototype: torch.Tensor,
        image_size: tuple[int, int],
        score_threshold: float,
        nms_threshold: float,
        top_n: int,
    ) -> list[Detection]:
        h, w = query.values.shape[-2:]
        logits, deltas = self.rpn(query.values, rpn_prototype.unsqueeze(0))
        boxes, _ = self.propose(logits[0], deltas[0], self.anchors(h, w), image_size, top_n)
        if boxes.shape[0] == 0:
            return []
        match_logits, match_deltas = self.head(self.backbone.roi_tensor(query, boxes), rcnn_prototype)
        scores = torch.sigmoid(match_logits)
        refined = clip_boxes(decode_deltas(boxes, match_deltas), *image_size)
        keep = (scores > score_threshold) & valid_mask(refined)
        refined, scores = refined[keep], scores[keep]
        kept = nms(refined, scores, nms_threshold)
        return [
            Detection(box=b, class_id=class_id, score=float(s))
            for b, s in zip(tensor_to_boxes(refined[kept]), scores[kept].tolist())
        ]

    @torch.no_grad()
    def detect(
        self,
        pixels: np.ndarray,
        prototypes: Mapping[int, tuple[torch.Tensor, torch.Tensor]] | PrototypeSet,
        score_threshold: float = 0.05,
        nms_threshold: float = 0.5,
        top_n: Optional[int] = None,
        image_id: Optional[int] = None,
    ) -> list[Detection]:
        """Detect every prototype's class in one query image, each class on its own."""
        for name, value in (("score", score_threshold), ("nms", nms_threshold)):
            if not 0 < value <= 1:
                raise ValueError(f"{name} threshold must be in (0, 1], got {value}")
        mapping = prototypes.as_mapping() if isinstance(prototypes, PrototypeSet) else prototypes
        if not mapping:
            return []
        was_training = self.training
        self.eval()
        try:
            query = self.backbone.encode_image(pixels)
            image_size = (int(pixels.shape[0]), int(pixels.shape[1]))
            top_n = top_n or self.model_config.top_n_test
            detections: list[Detection] = []
            for class_id in sorted(mapping):
                rpn_proto, rcnn_proto = mapping[class_id]
                found = self.detect_class(
                    query, class_id, rpn_proto, rcnn_proto, image_size, score_threshold, nms_threshold, top_n
                )
                for d in found:
                    d.image_id = image_id
                detections.extend(found)
            return detections
        finally:
            self.train(was_training)


def decode_boxes(
    proposals: Sequence[Proposal],
    deltas: Sequence[torch.Tensor] | torch.Tensor,
    image_size: Optional[tuple[int, int]] = None,
) -> list[Box]:
    """Apply box deltas to proposals, clipping to the image when its size is given."""
    if len(proposals) != len(deltas):
        raise ShapeMismatchError(f"{len(proposals)} proposals but {len(deltas)} deltas")
    if not proposals:
        return []
    delta_tensor = deltas if isinstance(deltas, torch.Tensor) else torch.stack([torch.as_tensor(d) for d in deltas])
    boxes = decode_deltas(boxes_to_tensor([p.box for p in proposals], dtype=delta_tensor.dtype), delta_tensor)
    if image_size is not None:
        boxes = clip_boxes(boxes, *image_size)
    return tensor_to_boxes(boxes)


# =========================================================================
# Detection dumps
# =========================================================================


def write_detections(path: Path, records: Sequence[DetectionRecord]) -> None:
    """Write a detection dump: a JSON array of manifest-style records."""
    atomic_write_json(path, [r.model_dump() for r in records])


def read_detections(path: Path) -> list[DetectionRecord]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise ManifestParseError("detection dump must be an array", record=str(path))
    records = []
    for i, entry in enumerate(raw):
        try:
            records.append(DetectionRecord.model_validate(entry))
        except ValueError as e:
            raise ManifestParseError(str(e).splitlines()[0], record=f"detections[{i}]") from e
    return records

"""Tests for the two-stage siamese detector."""

import json

import numpy as np
import pytest
import torch

from protoprompt.dataspec import crop_support
from protoprompt.detector import (
    Proposal,
    SiameseDetector,
    decode_boxes,
    read_detections,
    write_detections,
)
from protoprompt.encoders import RoiFeature
from protoprompt.exceptions import ManifestParseError, ShapeMismatchError
from protoprompt.models import Box, DetectionRecord, ModelConfig, MpgConfig
from protoprompt.utils.box_ops import box_iou, boxes_to_tensor


def tiny_detector(init_seed=0, **mpg):
    model = ModelConfig(
        visual_channels=8,
        text_channels=8,
        text_layers=1,
        text_heads=2,
        top_n_train=8,
        top_n_test=10,
        init_seed=init_seed,
    )
    return SiameseDetector(model, MpgConfig(prompt_len=4, hidden_dim=16, **mpg))


@pytest.fixture(scope="module")
def detector():
    return tiny_detector()


@pytest.fixture(scope="module")
def support(toy_dataset, toy_split):
    by_class = toy_dataset.by_class()
    crops = {}
    for cid in sorted(toy_split.novel):
        anns = by_class[cid][:2]
        crops[cid] = [crop_support(toy_dataset.image(a.image_id).pixels, a.bbox) for a in anns]
    return crops


def test_frozen_components_do_not_depend_on_init_seed():
    a, b = tiny_detector(init_seed=0), tiny_detector(init_seed=1)
    assert a.frozen_digests() == b.frozen_digests()
    assert a.backbone_digest() != b.backbone_digest()
    assert tiny_detector(init_seed=1).backbone_digest() == b.backbone_digest()


def test_prototype_shapes(detector, support):
    protos = detector.build_prototypes(support)
    assert protos.class_ids == sorted(support)
    assert protos.rpn.shape == (2, 8, 8, 8)
    assert protos.rcnn.shape == (2, 8, 7, 7)
    assert protos.rpn_mpg.teacher_semantic is None


def test_student_path_never_reads_names(support):
    det = tiny_detector()
    names = {cid: "red square" for cid in support}
    det.build_prototypes(support, names=names)
    assert det.token_table.lookups == 0
    protos = det.build_prototypes(support, names=names, use_teacher=True)
    assert det.token_table.lookups > 0
    assert protos.named == sorted(support)


def test_teacher_path_skips_unnamed_classes(support):
    det = tiny_detector()
    first = sorted(support)[0]
    protos = det.build_prototypes(support, names={first: "red triangle"}, with_teacher=True)
    assert protos.named == [first]
    assert protos.rcnn_mpg.teacher_semantic.shape == (1, 8)


def test_fused_prototypes_equal_visual_at_init(support):
    plain = tiny_detector(placement="none").build_prototypes(support)
    with_mpg = tiny_detector(placement="rpn+rcnn").build_prototypes(support)
    assert torch.allclose(plain.rpn, with_mpg.rpn, atol=1e-6)
    assert torch.allclose(plain.rcnn, with_mpg.rcnn, atol=1e-6)
    assert plain.rpn_mpg is None and plain.rcnn_mpg is None


def test_rcnn_only_placement(support):
    protos = tiny_detector(placement="rcnn-only").build_prototypes(support)
    assert protos.rpn_mpg is None
    assert protos.rcnn_mpg is not None


def test_empty_support_rejected(detector):
    with pytest.raises(ShapeMismatchError):
        detector.build_prototypes({})


def test_proposals_sorted_and_inside_image(detector, support, toy_dataset):
    protos = detector.build_prototypes(support)
    query = detector.backbone.encode_image(toy_dataset.images[0].pixels)
    with torch.no_grad():
        proposals = detector.generate_proposals(query, protos.rpn[0], top_n=10)
    assert 0 < len(proposals) <= 10
    scores = [p.objectness for p in proposals]
    assert scores == sorted(scores, reverse=True)
    for p in proposals:
        assert 0 <= p.box.x1 < p.box.x2 <= 64
        assert 0 <= p.box.y1 < p.box.y2 <= 64


def test_match_proposals_scores_each_roi_on_its_own(detector, support, toy_dataset):
    protos = detector.build_prototypes(support)
    query = detector.backbone.encode_image(toy_dataset.images[0].pixels)
    boxes = [Box(x1=4, y1=4, x2=30, y2=30), Box(x1=20, y1=10, x2=60, y2=50)]
    with torch.no_grad():
        rois = detector.backbone.roi_features(query, boxes)
        prototype = RoiFeature(values=protos.rcnn[0])
        both = detector.match_proposals(rois, prototype)
        reversed_ = detector.match_proposals(rois[::-1], prototype)
    assert len(both) == 2
    assert all(0 < score < 1 for score, _ in both)
    assert all(delta.shape == (4,) for _, delta in both)
    assert [s for s, _ in reversed_] == pytest.approx([s for s, _ in both][::-1])
    assert detector.match_proposals([], prototype) == []


def test_detect_contract(detector, support, toy_dataset):
    protos = detector.build_prototypes(support)
    image = toy_dataset.images[1]
    dets = detector.detect(image.pixels, protos, score_threshold=0.05, nms_threshold=0.5, image_id=image.id)
    assert {d.class_id for d in dets} <= set(support)
    for cid in support:
        mine = [d for d in dets if d.class_id == cid]
        assert all(d.score > 0.05 for d in mine)
        if len(mine) > 1:
            iou = box_iou(boxes_to_tensor([d.box for d in mine]), boxes_to_tensor([d.box for d in mine]))
            iou.fill_diagonal_(0)
            assert float(iou.max()) < 0.5
    for d in dets:
        assert d.image_id == image.id
        assert 0 <= d.box.x1 < d.box.x2 <= 64


def test_detect_is_deterministic(detector, support, toy_dataset):
    protos = detector.build_prototypes(support)
    pixels = toy_dataset.images[2].pixels
    a = detector.detect(pixels, protos, score_threshold=0.05)
    b = detector.detect(pixels, protos, score_threshold=0.05)
    assert [(d.box, d.score) for d in a] == [(d.box, d.score) for d in b]


def test_detect_threshold_checks(detector, support, toy_dataset):
    protos = detector.build_prototypes(support)
    pixels = toy_dataset.images[0].pixels
    with pytest.raises(ValueError):
        detector.detect(pixels, protos, score_threshold=0.0)
    with pytest.raises(ValueError):
        detector.detect(pixels, protos, nms_threshold=1.5)
    assert detector.detect(pixels, {}) == []


def test_raising_threshold_only_removes_detections(detector, support, toy_dataset):
    protos = detector.build_prototypes(support)
    pixels = toy_dataset.images[3].pixels
    low = detector.detect(pixels, protos, score_threshold=0.05)
    high = detector.detect(pixels, protos, score_threshold=0.5)
    assert len(high) <= len(low)
    assert all(d.score > 0.5 for d in high)


def test_other_classes_never_change_a_class_detections(support, toy_dataset):
    det = tiny_detector(placement="rpn+rcnn")
    with torch.no_grad():
        det.rpn_mpg.fusion.gate.fill_(0.5)
        det.rcnn_mpg.fusion.gate.fill_(0.5)
    protos = det.build_prototypes(support)
    pixels = toy_dataset.images[4].pixels
    everything = det.detect(pixels, protos, score_threshold=0.01)
    for cid in support:
        alone = det.detect(pixels, {cid: protos.as_mapping()[cid]}, score_threshold=0.01)
        assert alone == [d for d in everything if d.class_id == cid]

        rebuilt = det.detect(pixels, det.build_prototypes({cid: support[cid]}), score_threshold=0.01)
        mine = [d for d in everything if d.class_id == cid]
        assert len(rebuilt) == len(mine)
        for a, b in zip(rebuilt, mine):
            assert a.box.as_tuple() == pytest.approx(b.box.as_tuple(), abs=1e-4)
            assert a.score == pytest.approx(b.score, abs=1e-5)


def test_decode_boxes(detector):
    proposals = [Proposal(box=Box(x1=0, y1=0, x2=10, y2=10), objectness=0.9)]
    boxes = decode_boxes(proposals, torch.tensor([[1.0, 0.0, 0.0, 0.0]]), image_size=(64, 64))
    assert boxes[0].as_tuple() == (10.0, 0.0, 20.0, 10.0)
    with pytest.raises(ShapeMismatchError):
        decode_boxes(proposals, torch.zeros(2, 4))


def test_detection_dump_round_trip(tmp_path):
    records = [
        DetectionRecord(image_id=3, category_id=6, bbox=[1.5, 2.0, 10.0, 4.25], score=0.75),
        DetectionRecord(image_id=4, category_id=3, bbox=[0.0, 0.0, 5.0, 5.0], score=0.1),
    ]
    path = tmp_path / "dets.json"
    write_detections(path, records)
    assert read_detections(path) == records


def test_malformed_dump(tmp_path):
    path = tmp_path / "dets.json"
    path.write_text(json.dumps([{"image_id": 1, "category_id": 2, "bbox": [0, 0, 1], "score": 0.5}]))
    with pytest.raises(ManifestParseError, match=r"detections\[0\]"):
        read_detections(path)
    path.write_text(json.dumps({"detections": []}))
    with pytest.raises(ManifestParseError):
        read_detections(path)


def test_support_uses_query_backbone(detector):
    crops = [np.zeros((64, 64, 3), dtype=np.uint8)]
    maps = detector.support_maps(crops)
    query = detector.backbone.encode_image(crops[0])
    assert torch.allclose(maps[0], query.values)

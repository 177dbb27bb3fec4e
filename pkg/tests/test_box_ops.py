"""Tests for box geometry: deltas, clipping, anchors and NMS."""

import numpy as np
import pytest
import torch

from protoprompt.exceptions import ShapeMismatchError
from protoprompt.models import Box
from protoprompt.utils.box_ops import (
    DELTA_SCALE_CLAMP,
    box_iou,
    boxes_to_tensor,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    make_anchors,
    nms,
    tensor_to_boxes,
)


def random_boxes(rng, n, size=64.0):
    xy = rng.uniform(0, size - 8, size=(n, 2))
    wh = rng.uniform(2, 24, size=(n, 2))
    return torch.tensor(np.concatenate([xy, xy + wh], axis=1), dtype=torch.float64)


def greedy_nms(boxes, scores, threshold):
    """Reference greedy suppression written directly from the definition."""
    order = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
    keep = []
    for i in order:
        if all(float(box_iou(boxes[i : i + 1], boxes[j : j + 1])[0, 0]) < threshold for j in keep):
            keep.append(i)
    return keep


def test_decode_inverts_encode():
    rng = np.random.default_rng(0)
    ref, target = random_boxes(rng, 50), random_boxes(rng, 50)
    decoded = decode_deltas(ref, encode_deltas(ref, target))
    assert torch.allclose(decoded, target, atol=1e-9)


def test_zero_deltas_are_identity():
    ref = random_boxes(np.random.default_rng(1), 10)
    assert torch.allclose(decode_deltas(ref, torch.zeros_like(ref)), ref)


def test_decode_clamps_scale():
    ref = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    out = decode_deltas(ref, torch.tensor([[0.0, 0.0, 100.0, 100.0]]))
    assert torch.isfinite(out).all()
    assert float(out[0, 2] - out[0, 0]) == pytest.approx(10.0 * np.exp(DELTA_SCALE_CLAMP), rel=1e-5)


def test_delta_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        decode_deltas(torch.zeros(3, 4), torch.zeros(2, 4))
    with pytest.raises(ShapeMismatchError):
        encode_deltas(torch.zeros(3, 4), torch.zeros(2, 4))


def test_clip_keeps_coordinates_inside():
    boxes = torch.tensor([[-5.0, -3.0, 70.0, 20.0], [10.0, 10.0, 20.0, 80.0]])
    clipped = clip_boxes(boxes, 64, 64)
    assert clipped.min() >= 0
    assert clipped.max() <= 64
    assert clipped[0].tolist() == [0.0, 0.0, 64.0, 20.0]


def test_anchor_layout():
    anchors = make_anchors(2, 3, 8, [4.0, 8.0])
    assert anchors.shape == (12, 4)
    # cell (row 0, column 1), second size
    assert anchors[3].tolist() == [8.0, 0.0, 16.0, 8.0]
    centers = (anchors[:, :2] + anchors[:, 2:]) / 2
    assert torch.equal(centers[0], centers[1])


def test_box_tensor_conversion():
    boxes = [Box(x1=1, y1=2, x2=3, y2=4), Box(x1=0, y1=0, x2=5, y2=5)]
    assert tensor_to_boxes(boxes_to_tensor(boxes)) == boxes
    assert box_iou(boxes_to_tensor([]), boxes_to_tensor(boxes)).shape == (0, 2)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("threshold", [0.3, 0.5, 0.7])
def test_nms_matches_greedy_reference(seed, threshold):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, 40, size=32.0)
    scores = torch.tensor(rng.choice([0.2, 0.5, 0.9], size=40), dtype=torch.float64)
    assert nms(boxes, scores, threshold).tolist() == greedy_nms(boxes, scores, threshold)


def test_nms_suppresses_at_threshold():
    # the second box covers two thirds of the union
    boxes = torch.tensor([[0.0, 0.0, 12.0, 10.0], [4.0, 0.0, 12.0, 10.0]])
    scores = torch.tensor([0.9, 0.8])
    assert float(box_iou(boxes[:1], boxes[1:])[0, 0]) == pytest.approx(2 / 3)
    assert nms(boxes, scores, 2 / 3).tolist() == [0]
    assert nms(boxes, scores, 0.7).tolist() == [0, 1]


def test_nms_survivors_overlap_below_threshold():
    rng = np.random.default_rng(7)
    boxes = random_boxes(rng, 60, size=24.0)
    scores = torch.tensor(rng.uniform(size=60))
    kept = nms(boxes, scores, 0.4)
    iou = box_iou(boxes[kept], boxes[kept])
    iou.fill_diagonal_(0)
    assert float(iou.max()) < 0.4
    assert torch.all(scores[kept][:-1] >= scores[kept][1:])


def test_nms_empty():
    assert nms(torch.zeros((0, 4)), torch.zeros(0), 0.5).numel() == 0

"""Shared utilities for box geometry."""

from protoprompt.utils.box_ops import (
    box_iou,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    make_anchors,
    nms,
)

__all__ = ["box_iou", "clip_boxes", "decode_deltas", "encode_deltas", "make_anchors", "nms"]

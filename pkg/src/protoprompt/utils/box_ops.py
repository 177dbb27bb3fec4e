"""Box geometry shared by the detector, the losses and evaluation.

All tensors hold boxes in corner form ``[N, 4]`` as ``(x1, y1, x2, y2)``.

Example:
    >>> import torch
    >>> ref = torch.tensor([[5.0, 0.0, 15.0, 10.0]])
    >>> decode_deltas(ref, torch.tensor([[0.5, 0.0, 0.0, 0.0]])).tolist()
    [[10.0, 0.0, 20.0, 10.0]]
"""

import math
from typing import Sequence

import torch
from torchvision import ops

from protoprompt.exceptions import ShapeMismatchError
from protoprompt.models import Box

# Largest log-scale change a delta may request; keeps exp() finite.
DELTA_SCALE_CLAMP = math.log(1000.0 / 16)


def boxes_to_tensor(boxes: Sequence[Box], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack boxes into an ``[N, 4]`` tensor.

    Examples:
        >>> boxes_to_tensor([]).shape
        torch.Size([0, 4])
    """
    if not boxes:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def tensor_to_boxes(tensor: torch.Tensor) -> list[Box]:
    return [Box(x1=float(r[0]), y1=float(r[1]), x2=float(r[2]), y2=float(r[3])) for r in tensor.tolist()]


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU matrix ``[N, M]``."""
    if a.numel() == 0 or b.numel() == 0:
        return torch.zeros((a.shape[0], b.shape[0]), dtype=a.dtype)
    return ops.box_iou(a, b)


def encode_deltas(reference: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Center/size deltas that move ``reference`` boxes onto ``target`` boxes.

    Examples:
        >>> ref = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
        >>> encode_deltas(ref, ref).tolist()
        [[0.0, 0.0, 0.0, 0.0]]
    """
    if reference.shape != target.shape:
        raise ShapeMismatchError(f"cannot encode {tuple(target.shape)} against {tuple(reference.shape)}")
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack([(tx - rx) / rw, (ty - ry) / rh, torch.log(tw / rw), torch.log(th / rh)], dim=1)


def decode_deltas(reference: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Apply center/size deltas to reference boxes (inverse of :func:`encode_deltas`)."""
    if reference.shape[0] != deltas.shape[0]:
        raise ShapeMismatchError(
            f"{reference.shape[0]} boxes but {deltas.shape[0]} deltas"
        )
    if reference.shape[0] == 0:
        return reference.new_zeros((0, 4))
    w = reference[:, 2] - reference[:, 0]
    h = reference[:, 3] - reference[:, 1]
    cx = reference[:, 0] + 0.5 * w
    cy = reference[:, 1] + 0.5 * h
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(max=DELTA_SCALE_CLAMP)
    dh = deltas[:, 3].clamp(max=DELTA_SCALE_CLAMP)
    ncx = cx + dx * w
    ncy = cy + dy * h
    nw = w * torch.exp(dw)
    nh = h * torch.exp(dh)
    return torch.stack([ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh], dim=1)


def clip_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Clamp coordinates into ``[0, width] x [0, height]``."""
    return ops.clip_boxes_to_image(boxes, (height, width))


def valid_mask(boxes: torch.Tensor, min_size: float = 1e-3) -> torch.Tensor:
    """Mask of boxes with positive width and height."""
    return ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)


def make_anchors(height: int, width: int, stride: int, sizes: Sequence[float]) -> torch.Tensor:
    """Square anchors centred on every feature cell, ``[height * width * len(sizes), 4]``.

    Anchors are ordered cell-major (row, column), then by size.

    Examples:
        >>> make_anchors(1, 1, 8, [4.0]).tolist()
        [[2.0, 2.0, 6.0, 6.0]]
        >>> make_anchors(8, 8, 8, [12.0, 20.0, 32.0]).shape
        torch.Size([192, 4])
    """
    ys = (torch.arange(height, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(width, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=1)
    half = torch.tensor(sizes, dtype=torch.float32) / 2
    x1 = centers[:, None, 0] - half[None, :]
    y1 = centers[:, None, 1] - half[None, :]
    x2 = centers[:, None, 0] + half[None, :]
    y2 = centers[:, None, 1] + half[None, :]
    return torch.stack([x1, y1, x2, y2], dim=2).reshape(-1, 4)


def stable_order(scores: torch.Tensor) -> torch.Tensor:
    """Indices sorting scores descending, ties broken by original index.

    Examples:
        >>> stable_order(torch.tensor([0.5, 0.9, 0.5])).tolist()
        [1, 0, 2]
    """
    return torch.sort(-scores, stable=True).indices


def nms(boxes: torch.Tensor, scores: torch.Tensor, threshold: float) -> torch.Tensor:
    """Greedy non-maximum suppression; returns kept indices, best score first.

    A box is suppressed when its IoU with an already kept box is at least
    ``threshold``, so survivors overlap strictly less than the threshold.
    Equal scores are visited in input order.

    Examples:
        >>> b = torch.tensor([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]])
        >>> nms(b, torch.tensor([0.8, 0.9, 0.1]), 0.5).tolist()
        [1, 2]
    """
    if boxes.shape[0] == 0:
        return torch.zeros((0,), dtype=torch.long)
    order = stable_order(scores)
    # rank scores make torchvision's ordering match the stable order exactly
    ranks = torch.arange(order.numel(), 0, -1, dtype=torch.float32)
    keep = ops.nms(boxes[order].float(), ranks, math.nextafter(threshold, 0.0))
    return order[keep]

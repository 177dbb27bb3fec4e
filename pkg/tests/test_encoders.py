"""Tests for the backbone, RoI sampling and the frozen text side."""

import copy
import logging
import warnings

import numpy as np
import pytest
import torch

from protoprompt.encoders import (
    UNK_TOKEN,
    Backbone,
    FeatureMap,
    FrozenTextEncoder,
    TokenEmbeddingTable,
    Vocabulary,
    encode_image,
    image_to_tensor,
    parameter_digest,
    roi_features,
    state_digest,
    tokenize,
)
from protoprompt.exceptions import ShapeMismatchError
from protoprompt.models import Box


@pytest.fixture
def backbone():
    torch.manual_seed(0)
    return Backbone(channels=8, roi_size=3, input_sizes=(64,))


def bilinear(fmap, y, x):
    """Bilinear sample of a ``[C, H, W]`` array at an interior point."""
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    ly, lx = y - y0, x - x0
    return (
        fmap[:, y0, x0] * (1 - ly) * (1 - lx)
        + fmap[:, y0, x0 + 1] * (1 - ly) * lx
        + fmap[:, y0 + 1, x0] * ly * (1 - lx)
        + fmap[:, y0 + 1, x0 + 1] * ly * lx
    )


def roi_reference(fmap, box, stride, size):
    """One sample per bin at the bin centre, half-pixel aligned coordinates."""
    x1, y1, x2, y2 = (v / stride - 0.5 for v in box)
    bin_h, bin_w = (y2 - y1) / size, (x2 - x1) / size
    out = np.zeros((fmap.shape[0], size, size))
    for i in range(size):
        for j in range(size):
            out[:, i, j] = bilinear(fmap, y1 + (i + 0.5) * bin_h, x1 + (j + 0.5) * bin_w)
    return out


# =========================================================================
# Tokens
# =========================================================================


def test_tokenize_splits_hyphens_and_spaces():
    assert tokenize("Purple-Triangle") == ["purple", "triangle"]
    assert tokenize("blue  cross") == ["blue", "cross"]


def test_unknown_tokens_map_to_unk(caplog):
    vocab = Vocabulary.toy()
    with caplog.at_level(logging.WARNING):
        ids = vocab.encode("orange-square")
    assert ids[0] == vocab.index(UNK_TOKEN)
    assert "outside the vocabulary" in caplog.text


def test_token_table_is_seeded_and_frozen():
    a = TokenEmbeddingTable(10, 4, seed=3)
    b = TokenEmbeddingTable(10, 4, seed=3)
    assert a.frozen
    assert torch.equal(a.embed([1, 2]), b.embed([1, 2]))
    assert a.lookups == 1
    assert a.embed([]).shape == (0, 4)
    with pytest.raises(IndexError):
        a.embed([10])


# =========================================================================
# Text encoder
# =========================================================================


def test_text_encoder_is_deterministic_and_frozen():
    a = FrozenTextEncoder(dim=8, layers=1, heads=2, max_len=6, seed=5)
    b = FrozenTextEncoder(dim=8, layers=1, heads=2, max_len=6, seed=5)
    assert parameter_digest(a) == parameter_digest(b)
    assert not any(p.requires_grad for p in a.parameters())
    a.train()
    assert not a.training
    x = torch.randn(4, 8)
    assert torch.equal(a(x), b(x))
    assert a(x).shape == (8,)


def test_text_encoder_batches_match_single():
    enc = FrozenTextEncoder(dim=8, layers=1, heads=2, max_len=6, seed=5)
    batch = torch.randn(3, 4, 8)
    out = enc(batch)
    assert out.shape == (3, 8)
    assert torch.allclose(out[1], enc(batch[1]), atol=1e-6)


def test_text_encoder_passes_gradients_to_input():
    enc = FrozenTextEncoder(dim=8, layers=1, heads=2, max_len=6, seed=5)
    x = torch.randn(3, 8, requires_grad=True)
    enc(x).sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None for p in enc.parameters())


@pytest.mark.parametrize("length", [0, 7])
def test_text_encoder_length_limits(length):
    enc = FrozenTextEncoder(dim=8, layers=1, heads=2, max_len=6, seed=5)
    with pytest.raises(ShapeMismatchError):
        enc(torch.zeros(length, 8))


def test_different_seeds_give_different_encoders():
    a = FrozenTextEncoder(dim=8, layers=1, heads=2, seed=1)
    b = FrozenTextEncoder(dim=8, layers=1, heads=2, seed=2)
    assert parameter_digest(a) != parameter_digest(b)


# =========================================================================
# Backbone and RoI features
# =========================================================================


def test_feature_map_shape(backbone):
    pixels = np.random.default_rng(0).integers(0, 255, size=(64, 64, 3), dtype=np.uint8)
    fmap = encode_image(backbone, pixels)
    assert fmap.values.shape == (8, 8, 8)
    assert fmap.stride == 8


def test_backbone_rejects_wrong_sizes(backbone):
    with pytest.raises(ShapeMismatchError):
        backbone.encode_image(np.zeros((48, 48, 3), dtype=np.uint8))
    with pytest.raises(ShapeMismatchError):
        backbone.encode_image(np.zeros((64, 64), dtype=np.uint8))


def test_roi_align_matches_bilinear_reference(backbone):
    rng = np.random.default_rng(1)
    values = torch.tensor(rng.normal(size=(8, 8, 8)), dtype=torch.float32)
    fmap = FeatureMap(values=values, stride=8)
    boxes = [(12.0, 10.0, 40.0, 44.0), (20.5, 18.0, 52.0, 30.0)]
    sampled = backbone.roi_align_features(fmap, torch.tensor(boxes))
    for k, box in enumerate(boxes):
        expected = roi_reference(values.numpy().astype(np.float64), box, 8, 3)
        assert np.allclose(sampled[k].numpy(), expected, atol=1e-5)


def test_roi_features_order_and_empty(backbone):
    fmap = FeatureMap(values=torch.randn(8, 8, 8), stride=8)
    boxes = [Box(x1=0, y1=0, x2=30, y2=30), Box(x1=20, y1=20, x2=60, y2=60)]
    feats = roi_features(backbone, fmap, boxes)
    assert [f.values.shape for f in feats] == [(8, 3, 3)] * 2
    single = roi_features(backbone, fmap, boxes[1:])
    assert torch.allclose(single[0].values, feats[1].values, atol=1e-6)
    assert roi_features(backbone, fmap, []) == []


def test_roi_features_gradcheck(backbone):
    double = copy.deepcopy(backbone).double()
    boxes = torch.tensor([[4.0, 6.0, 40.0, 30.0]], dtype=torch.float64)

    def head(values):
        return double.roi_tensor(FeatureMap(values=values, stride=8), boxes)

    values = torch.randn(8, 8, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(head, (values,), eps=1e-6, atol=1e-4)


def test_state_digest_prefix():
    module = torch.nn.Sequential(torch.nn.Linear(2, 2), torch.nn.Linear(2, 2))
    inner = state_digest(module[1].state_dict())
    assert state_digest(module.state_dict(), prefix="1.") == inner
    assert state_digest(module.state_dict(), prefix="0.") != inner


def test_text_encoder_input_gradient_matches_finite_differences():
    enc = FrozenTextEncoder(dim=8, layers=1, heads=2, max_len=6, seed=5).double()
    x = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(enc, (x,), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_image_to_tensor_accepts_read_only_pixels():
    pixels = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
    pixels.setflags(write=False)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tensor = image_to_tensor(pixels)
    assert tensor.shape == (3, 4, 4)
    assert tensor.dtype == torch.float32
    assert float(tensor[2, 0, 0]) == pytest.approx(2 / 255 - 0.5)
    tensor.add_(1.0)
    assert pixels[0, 0, 2] == 2

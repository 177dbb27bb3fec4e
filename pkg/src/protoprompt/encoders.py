"""Shared visual backbone, RoI feature head, and the frozen text side.

Feature maps are channels-first, ``[C, H, W]``, the layout torch and
torchvision operate on.

Example:
    >>> tokenize("Red-Square")
    ['red', 'square']
    >>> vocab = Vocabulary.toy()
    >>> vocab.encode("red-square") == [vocab.index("red"), vocab.index("square")]
    True
"""

import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torchvision import ops

from protoprompt.dataspec import COLORS, SHAPES
from protoprompt.exceptions import ShapeMismatchError
from protoprompt.models import Box, ModelConfig
from protoprompt.utils.box_ops import boxes_to_tensor

logger = logging.getLogger(__name__)

BACKBONE_STRIDE = 8
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass
class FeatureMap:
    """A ``[C, H, W]`` feature map and its stride in input pixels."""

    values: torch.Tensor
    stride: int

    def __post_init__(self) -> None:
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.values.dim() != 3:
            raise ShapeMismatchError(f"expected [C, H, W], got {tuple(self.values.shape)}")

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])


@dataclass
class RoiFeature:
    """Fixed-size ``[C, R, R]`` feature of one box."""

    values: torch.Tensor


# =========================================================================
# Tokens
# =========================================================================


def tokenize(name: str) -> list[str]:
    """Split a class name on whitespace and hyphens, lowercased.

    Examples:
        >>> tokenize("  blue cross ")
        ['blue', 'cross']
        >>> tokenize("")
        []
    """
    return [t for t in re.split(r"[\s\-]+", name.strip().lower()) if t]


class Vocabulary:
    """Closed token vocabulary; unknown tokens map to ``<unk>``.

    Examples:
        >>> v = Vocabulary(["a", "b"])
        >>> len(v), v.index("b"), v.index("zzz") == v.index(UNK_TOKEN)
        (4, 3, True)
    """

    def __init__(self, tokens: Iterable[str]):
        self.tokens = [PAD_TOKEN, UNK_TOKEN]
        for t in tokens:
            if t not in self.tokens:
                self.tokens.append(t)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def toy(cls) -> "Vocabulary":
        return cls([*COLORS, *SHAPES])

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK_TOKEN])

    def encode(self, name: str) -> list[int]:
        ids = [self.index(t) for t in tokenize(name)]
        if self._ids[UNK_TOKEN] in ids:
            logger.warning("Class name %r has tokens outside the vocabulary", name)
        return ids


class TokenEmbeddingTable(nn.Module):
    """Frozen token embedding table ``[V, C_t]``.

    ``lookups`` counts every call to :meth:`embed`, so callers can assert
    that a code path never reads class-name tokens.
    """

    def __init__(self, vocab_size: int, dim: int, seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embedding = nn.Embedding(vocab_size, dim)
            nn.init.normal_(self.embedding.weight, std=1.0)
        self.embedding.weight.requires_grad_(False)
        self.lookups = 0

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    @property
    def vocab_size(self) -> int:
        return int(self.embedding.num_embeddings)

    @property
    def dim(self) -> int:
        return int(self.embedding.embedding_dim)

    def embed(self, token_ids: Sequence[int]) -> torch.Tensor:
        """Rows of the table for ``token_ids``, ``[L, C_t]``; empty input gives ``[0, C_t]``."""
        self.lookups += 1
        bad = [i for i in token_ids if not 0 <= i < self.vocab_size]
        if bad:
            raise IndexError(f"token ids {bad} out of range for vocabulary of size {self.vocab_size}")
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        return self.embedding(ids)


def embed_tokens(table: TokenEmbeddingTable, token_ids: Sequence[int]) -> torch.Tensor:
    return table.embed(token_ids)


class FrozenTextEncoder(nn.Module):
    """Small self-attention text encoder, seeded once and never trained.

    Input is a token-embedding sequence ``[L, C_t]`` (or a batch
    ``[B, L, C_t]``); output is the mean over positions, ``[C_t]``.
    Gradients reach the input but the parameters stay frozen.
    """

    def __init__(self, dim: int = 32, layers: int = 2, heads: int = 4, max_len: int = 32, seed: int = 1234):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.position = nn.Parameter(torch.randn(max_len, dim) * 0.1)
            layer = nn.TransformerEncoderLayer(
                d_model=dim,
                nhead=heads,
                dim_feedforward=2 * dim,
                dropout=0.0,
                batch_first=True,
            )
            self.encoder = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "FrozenTextEncoder":
        # always stays in inference mode
        return super().train(False)

    def forward(self, sequence: torch.Tensor) -> torch.Tensor:
        single = sequence.dim() == 2
        batch = sequence.unsqueeze(0) if single else sequence
        if batch.dim() != 3 or batch.shape[-1] != self.dim:
            raise ShapeMismatchError(f"expected [L, {self.dim}] input, got {tuple(sequence.shape)}")
        length = batch.shape[1]
        if length == 0:
            raise ShapeMismatchError("text encoder needs at least one token")
        if length > self.max_len:
            raise ShapeMismatchError(f"sequence of {length} tokens exceeds max_len {self.max_len}")
        hidden = self.encoder(batch + self.position[:length].to(batch.dtype))
        pooled = hidden.mean(dim=1)
        return pooled[0] if single else pooled


def text_encode(encoder: FrozenTextEncoder, sequence: torch.Tensor) -> torch.Tensor:
    return encoder(sequence)


# =========================================================================
# Visual backbone
# =========================================================================


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1), nn.ReLU(inplace=True))


def image_to_tensor(pixels: np.ndarray | torch.Tensor) -> torch.Tensor:
    """``[H, W, 3]`` uint8 pixels to a ``[3, H, W]`` float tensor centred on zero."""
    if isinstance(pixels, torch.Tensor):
        return pixels
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeMismatchError(f"expected [H, W, 3] pixels, got {pixels.shape}")
    return torch.from_numpy(np.array(pixels, dtype=np.float32, copy=True)).permute(2, 0, 1) / 255.0 - 0.5


class Backbone(nn.Module):
    """Four conv stages down to stride 8, plus the final block applied after RoI sampling."""

    def __init__(self, channels: int = 64, roi_size: int = 7, input_sizes: Sequence[int] = (64,)):
        super().__init__()
        self.channels = channels
        self.roi_size = roi_size
        self.stride = BACKBONE_STRIDE
        self.input_sizes = tuple(sorted(set(input_sizes)))
        half = max(channels // 2, 1)
        quarter = max(channels // 4, 1)
        self.stages = nn.Sequential(
            _conv(3, quarter, stride=2),
            nn.Sequential(_conv(quarter, half, stride=2), _conv(half, half)),
            nn.Sequential(_conv(half, channels, stride=2), _conv(channels, channels)),
            nn.Sequential(_conv(channels, channels), _conv(channels, channels)),
        )
        self.final_block = nn.Sequential(_conv(channels, channels), _conv(channels, channels))

    @classmethod
    def from_config(cls, config: ModelConfig) -> "Backbone":
        return cls(
            channels=config.visual_channels,
            roi_size=config.roi_size,
            input_sizes=(config.image_size, config.support_size),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``[B, 3, S, S]`` -> ``[B, C_v, S / 8, S / 8]``."""
        size = tuple(images.shape[-2:])
        if images.dim() != 4 or size[0] != size[1] or size[0] not in self.input_sizes:
            raise ShapeMismatchError(
                f"backbone expects square inputs of size {self.input_sizes}, got {tuple(images.shape)}"
            )
        return self.stages(images)

    def encode_image(self, pixels: np.ndarray | torch.Tensor) -> FeatureMap:
        """Encode one ``[H, W, 3]`` image into a stride-8 feature map."""
        x = image_to_tensor(pixels).unsqueeze(0)
        return FeatureMap(values=self(x)[0], stride=self.stride)

    def encode_batch(self, images: Sequence[np.ndarray]) -> list[FeatureMap]:
        x = torch.stack([image_to_tensor(p) for p in images])
        return [FeatureMap(values=v, stride=self.stride) for v in self(x)]

    def roi_align_features(self, fmap: FeatureMap, boxes: torch.Tensor) -> torch.Tensor:
        """Bilinear RoI samples ``[N, C, R, R]`` before the final block."""
        if boxes.shape[0] == 0:
            return fmap.values.new_zeros((0, fmap.channels, self.roi_size, self.roi_size))
        rois = torch.cat([boxes.new_zeros((boxes.shape[0], 1)), boxes], dim=1).to(fmap.values.dtype)
        return ops.roi_align(
            fmap.values.unsqueeze(0),
            rois,
            output_size=self.roi_size,
            spatial_scale=1.0 / fmap.stride,
            sampling_ratio=1,
            aligned=True,
        )

    def roi_tensor(self, fmap: FeatureMap, boxes: torch.Tensor) -> torch.Tensor:
        """RoI features after the final block, ``[N, C, R, R]``."""
        samples = self.roi_align_features(fmap, boxes)
        if samples.shape[0] == 0:
            return samples
        return self.final_block(samples)

    def roi_features(self, fmap: FeatureMap, boxes: Sequence[Box]) -> list[RoiFeature]:
        """One RoiFeature per box, in input order; no boxes gives an empty list."""
        if not boxes:
            return []
        values = self.roi_tensor(fmap, boxes_to_tensor(boxes, dtype=fmap.values.dtype))
        return [RoiFeature(values=v) for v in values]


def encode_image(backbone: Backbone, pixels: np.ndarray | torch.Tensor) -> FeatureMap:
    return backbone.encode_image(pixels)


def roi_features(backbone: Backbone, fmap: FeatureMap, boxes: Sequence[Box]) -> list[RoiFeature]:
    return backbone.roi_features(fmap, boxes)


def state_digest(state: Mapping[str, torch.Tensor], prefix: Optional[str] = None) -> str:
    """SHA-256 over tensor names, shapes, dtypes and bytes.

    Names are hashed relative to ``prefix``, so a submodule's own state and
    the prefixed entries of its parent's state give the same digest.
    """
    h = hashlib.sha256()
    for name, tensor in sorted(state.items()):
        if prefix is not None:
            if not name.startswith(prefix):
                continue
            name = name[len(prefix):]
        data = tensor.detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(data.shape)).encode("utf-8"))
        h.update(str(data.dtype).encode("utf-8"))
        h.update(data.numpy().tobytes())
    return h.hexdigest()


def parameter_digest(module: nn.Module) -> str:
    """Digest of a module's parameters and buffers.

    Examples:
        >>> a, b = nn.Linear(2, 2), nn.Linear(2, 2)
        >>> _ = b.load_state_dict(a.state_dict())
        >>> parameter_digest(a) == parameter_digest(b)
        True
    """
    return state_digest(module.state_dict())

"""Generators with a self-attention layer before or after the affine map."""

import torch
from torch import nn

from protoprompt.generators.base import BasePromptGenerator
from protoprompt.models import GeneratorVariant


def _heads(dim: int) -> int:
    for heads in (4, 2):
        if dim % heads == 0:
            return heads
    return 1


def _attention_layer(dim: int) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        d_model=dim,
        nhead=_heads(dim),
        dim_feedforward=2 * dim,
        dropout=0.0,
        batch_first=True,
    )


class PreTransformerGenerator(BasePromptGenerator):
    """Self-attention over the prototype's spatial cells, then pool and project."""

    variant = GeneratorVariant.PRE_TRANSFORMER

    def __init__(self, visual_dim: int, text_dim: int, prompt_len: int, init_std: float = 0.02, **_: object):
        super().__init__(visual_dim, text_dim, prompt_len, init_std)
        self.attention = _attention_layer(visual_dim)
        self.proj = nn.Linear(visual_dim, prompt_len * text_dim)
        self.reset_parameters()

    def _project_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        attended = self.attention(tokens)
        return self._reshape(self.proj(attended.mean(dim=1)))

    def forward(self, prototypes: torch.Tensor) -> torch.Tensor:
        tokens = prototypes.flatten(2).transpose(1, 2)
        return self._project_tokens(tokens)

    def from_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        # a pooled vector is a single spatial cell
        return self._project_tokens(pooled.unsqueeze(1))


class PostTransformerGenerator(BasePromptGenerator):
    """Affine map to ``M`` tokens, then self-attention among them."""

    variant = GeneratorVariant.POST_TRANSFORMER

    def __init__(self, visual_dim: int, text_dim: int, prompt_len: int, init_std: float = 0.02, **_: object):
        super().__init__(visual_dim, text_dim, prompt_len, init_std)
        self.proj = nn.Linear(visual_dim, prompt_len * text_dim)
        self.attention = _attention_layer(text_dim)
        self.reset_parameters()

    def from_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.attention(self._reshape(self.proj(pooled)))

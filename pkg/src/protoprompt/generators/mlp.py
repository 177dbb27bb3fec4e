"""Affine, two-layer and shared-prompt generators."""

import torch
from torch import nn

from protoprompt.generators.base import BasePromptGenerator
from protoprompt.models import GeneratorVariant


class OneLayerGenerator(BasePromptGenerator):
    """A single affine map ``C_v -> M * C_t`` (the default)."""

    variant = GeneratorVariant.ONE_LAYER

    def __init__(self, visual_dim: int, text_dim: int, prompt_len: int, init_std: float = 0.02, **_: object):
        super().__init__(visual_dim, text_dim, prompt_len, init_std)
        self.proj = nn.Linear(visual_dim, prompt_len * text_dim)
        self.reset_parameters()

    def from_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return self._reshape(self.proj(pooled))


class TwoLayerGenerator(BasePromptGenerator):
    variant = GeneratorVariant.TWO_LAYER

    def __init__(
        self,
        visual_dim: int,
        text_dim: int,
        prompt_len: int,
        init_std: float = 0.02,
        hidden_dim: int = 128,
        **_: object,
    ):
        super().__init__(visual_dim, text_dim, prompt_len, init_std)
        self.mlp = nn.Sequential(
            nn.Linear(visual_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, prompt_len * text_dim),
        )
        self.reset_parameters()
        # He init on the hidden layer
        nn.init.kaiming_uniform_(self.mlp[0].weight, nonlinearity="relu")

    def from_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return self._reshape(self.mlp(pooled))


class SharedPromptGenerator(BasePromptGenerator):
    """One learned prompt shared by every class; ignores the support images."""

    variant = GeneratorVariant.SHARED

    def __init__(self, visual_dim: int, text_dim: int, prompt_len: int, init_std: float = 0.02, **_: object):
        super().__init__(visual_dim, text_dim, prompt_len, init_std)
        self.prompt = nn.Parameter(torch.randn(prompt_len, text_dim) * init_std)

    def from_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.prompt.unsqueeze(0).expand(pooled.shape[0], -1, -1).to(pooled.dtype)

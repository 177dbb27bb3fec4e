"""Base class for soft-prompt generators.

A generator turns a visual prototype into ``M`` soft-prompt tokens of the
text encoder's width. Student and teacher each own a separate instance.

Example:
    >>> import torch
    >>> from protoprompt.generators import OneLayerGenerator
    >>> gen = OneLayerGenerator(visual_dim=16, text_dim=12, prompt_len=8)
    >>> gen.generate(torch.zeros(16)).shape
    torch.Size([8, 12])
"""

import torch
from torch import nn

from protoprompt.exceptions import ShapeMismatchError
from protoprompt.models import GeneratorVariant


class BasePromptGenerator(nn.Module):
    """Base class for prompt generators.

    Subclasses implement :meth:`from_pooled`; variants that look at the
    spatial prototype (rather than its pooled vector) also override
    :meth:`forward`.
    """

    variant: GeneratorVariant

    def __init__(self, visual_dim: int, text_dim: int, prompt_len: int, init_std: float = 0.02):
        super().__init__()
        if prompt_len < 1:
            raise ValueError(f"prompt_len must be at least 1, got {prompt_len}")
        self.visual_dim = visual_dim
        self.text_dim = text_dim
        self.prompt_len = prompt_len
        self.init_std = init_std

    def reset_parameters(self) -> None:
        """Small-variance normal weights, zero biases."""
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, std=self.init_std)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def _reshape(self, flat: torch.Tensor) -> torch.Tensor:
        return flat.reshape(flat.shape[0], self.prompt_len, self.text_dim)

    def from_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        """``[N, C_v]`` pooled prototypes to ``[N, M, C_t]`` prompts."""
        raise NotImplementedError

    def forward(self, prototypes: torch.Tensor) -> torch.Tensor:
        """``[N, C_v, H, W]`` visual prototypes to ``[N, M, C_t]`` prompts."""
        return self.from_pooled(prototypes.mean(dim=(-2, -1)))

    def generate(self, pooled: torch.Tensor) -> torch.Tensor:
        """One prompt ``[M, C_t]`` from one pooled prototype ``[C_v]``."""
        if pooled.dim() != 1 or pooled.shape[0] != self.visual_dim:
            raise ShapeMismatchError(
                f"generator expects a pooled vector of length {self.visual_dim}, got {tuple(pooled.shape)}"
            )
        return self.from_pooled(pooled.unsqueeze(0))[0]

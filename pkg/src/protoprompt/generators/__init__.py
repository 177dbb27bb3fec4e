"""Soft-prompt generator variants."""

from protoprompt.generators.base import BasePromptGenerator
from protoprompt.generators.mlp import OneLayerGenerator, SharedPromptGenerator, TwoLayerGenerator
from protoprompt.generators.transformer import PostTransformerGenerator, PreTransformerGenerator
from protoprompt.models import GeneratorVariant

GENERATORS: dict[GeneratorVariant, type[BasePromptGenerator]] = {
    GeneratorVariant.ONE_LAYER: OneLayerGenerator,
    GeneratorVariant.TWO_LAYER: TwoLayerGenerator,
    GeneratorVariant.PRE_TRANSFORMER: PreTransformerGenerator,
    GeneratorVariant.POST_TRANSFORMER: PostTransformerGenerator,
    GeneratorVariant.SHARED: SharedPromptGenerator,
}


def build_generator(
    variant: GeneratorVariant | str,
    visual_dim: int,
    text_dim: int,
    prompt_len: int,
    init_std: float = 0.02,
    hidden_dim: int = 128,
) -> BasePromptGenerator:
    """Instantiate a generator by variant name.

    Examples:
        >>> type(build_generator("two-layer", 16, 12, 4)).__name__
        'TwoLayerGenerator'
    """
    cls = GENERATORS[GeneratorVariant(variant)]
    return cls(visual_dim, text_dim, prompt_len, init_std=init_std, hidden_dim=hidden_dim)


__all__ = [
    "BasePromptGenerator",
    "OneLayerGenerator",
    "TwoLayerGenerator",
    "SharedPromptGenerator",
    "PreTransformerGenerator",
    "PostTransformerGenerator",
    "GENERATORS",
    "build_generator",
]

"""Multi-modal prototype generation.

A class's visual prototype is the mean of its support feature maps. A prompt
generator turns the pooled prototype into soft-prompt tokens, and the frozen
text encoder turns those into a semantic prototype. The student generator sees
only the support images; the teacher generator's prompt is also joined with
the embedded class name. The semantic vector is mapped to the visual width
and fused into the visual prototype.

Example:
    >>> import torch
    >>> fm = [FeatureMap(values=torch.full((4, 2, 2), v), stride=8) for v in (2.0, 4.0)]
    >>> visual_prototype(fm).values.unique().tolist()
    [3.0]
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from protoprompt.encoders import FeatureMap, FrozenTextEncoder, TokenEmbeddingTable, embed_tokens, text_encode
from protoprompt.exceptions import ShapeMismatchError
from protoprompt.generators import BasePromptGenerator, build_generator
from protoprompt.models import FusionMode, MpgConfig, PromptOrigin, PromptPosition


@dataclass
class VisualPrototype:
    values: torch.Tensor


@dataclass
class SoftPrompt:
    tokens: torch.Tensor
    origin: PromptOrigin


@dataclass
class SemanticPrototype:
    values: torch.Tensor
    origin: PromptOrigin


@dataclass
class MultiModalPrototype:
    values: torch.Tensor


# =========================================================================
# Single-class operations
# =========================================================================


def visual_prototype(features: Sequence[FeatureMap] | torch.Tensor) -> VisualPrototype:
    """Elementwise mean of K support feature maps.

    Examples:
        >>> visual_prototype([])
        Traceback (most recent call last):
        ...
        protoprompt.exceptions.ShapeMismatchError: visual prototype needs at least one support feature map
    """
    if isinstance(features, torch.Tensor):
        stacked = features
    else:
        if not features:
            raise ShapeMismatchError("visual prototype needs at least one support feature map")
        shapes = {tuple(f.values.shape) for f in features}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"support feature maps differ in shape: {sorted(shapes)}")
        stacked = torch.stack([f.values for f in features])
    if stacked.shape[0] == 0:
        raise ShapeMismatchError("visual prototype needs at least one support feature map")
    return VisualPrototype(values=stacked.mean(dim=0))


def pool(prototype: VisualPrototype | torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean, ``[C, H, W]`` -> ``[C]``.

    Examples:
        >>> pool(torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])).tolist()
        [2.5]
    """
    values = prototype.values if isinstance(prototype, VisualPrototype) else prototype
    return values.mean(dim=(-2, -1))


def generate_prompt(
    generator: BasePromptGenerator,
    pooled: torch.Tensor,
    origin: PromptOrigin = PromptOrigin.STUDENT,
) -> SoftPrompt:
    return SoftPrompt(tokens=generator.generate(pooled), origin=origin)


def compose_sequence(
    prompt: torch.Tensor,
    name_embedding: torch.Tensor,
    position: PromptPosition = PromptPosition.PREFIX,
) -> torch.Tensor:
    """Join prompt rows ``[M, C_t]`` and name rows ``[L, C_t]`` per the prompt position.

    Examples:
        >>> p, n = torch.zeros(4, 2), torch.ones(1, 2)
        >>> compose_sequence(p, n, PromptPosition.SURROUND)[:, 0].tolist()
        [0.0, 0.0, 1.0, 0.0, 0.0]
    """
    position = PromptPosition(position)
    if position is PromptPosition.PREFIX:
        parts = [prompt, name_embedding]
    elif position is PromptPosition.SUFFIX:
        parts = [name_embedding, prompt]
    else:
        half = prompt.shape[0] // 2
        parts = [prompt[:half], name_embedding, prompt[half:]]
    return torch.cat([p.to(prompt.dtype) for p in parts], dim=0)


def student_semantic_prototype(encoder: FrozenTextEncoder, prompt: SoftPrompt) -> SemanticPrototype:
    """Encode the prompt rows alone; no class-name tokens are consumed."""
    if prompt.origin is not PromptOrigin.STUDENT:
        raise ValueError("student semantic prototype needs a student prompt")
    return SemanticPrototype(values=text_encode(encoder, prompt.tokens), origin=PromptOrigin.STUDENT)


def teacher_semantic_prototype(
    encoder: FrozenTextEncoder,
    table: TokenEmbeddingTable,
    prompt: SoftPrompt,
    name_tokens: Sequence[int],
    position: PromptPosition = PromptPosition.PREFIX,
) -> SemanticPrototype:
    """Encode the prompt joined with the embedded class name."""
    if prompt.origin is not PromptOrigin.TEACHER:
        raise ValueError("teacher semantic prototype needs a teacher prompt")
    if not name_tokens:
        raise ValueError("teacher semantic prototype needs at least one class-name token")
    sequence = compose_sequence(prompt.tokens, embed_tokens(table, name_tokens), position)
    return SemanticPrototype(values=text_encode(encoder, sequence), origin=PromptOrigin.TEACHER)


# =========================================================================
# Fusion
# =========================================================================


class FusionMap(nn.Module):
    """Learnable semantic-to-visual map and the fusion rule.

    The map is an affine layer ``C_t -> C_v`` scaled by a scalar gate that
    starts at zero, so at initialisation every mode returns the visual
    prototype unchanged.
    """

    def __init__(self, text_dim: int, visual_dim: int, mode: FusionMode | str = FusionMode.ADDITION, init_std: float = 0.02):
        super().__init__()
        self.mode = FusionMode(mode)
        self.affine = nn.Linear(text_dim, visual_dim)
        nn.init.normal_(self.affine.weight, std=init_std)
        nn.init.zeros_(self.affine.bias)
        self.gate = nn.Parameter(torch.zeros(()))
        self.reduce: Optional[nn.Conv2d] = None
        if self.mode is FusionMode.CONCATENATION:
            self.reduce = nn.Conv2d(2 * visual_dim, visual_dim, kernel_size=1)
            with torch.no_grad():
                self.reduce.weight.zero_()
                self.reduce.weight[:, :visual_dim, 0, 0] = torch.eye(visual_dim)
                self.reduce.bias.zero_()

    def project(self, semantic: torch.Tensor) -> torch.Tensor:
        """Ungated affine image of the semantic prototype, ``[..., C_v]``."""
        return self.affine(semantic)

    def mapped(self, semantic: torch.Tensor) -> torch.Tensor:
        return self.gate * self.affine(semantic)

    def forward(self, semantic: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        """Fuse ``[N, C_t]`` semantics into ``[N, C_v, H, W]`` visual prototypes."""
        return combine(self.mode, visual, self.mapped(semantic), self.reduce)


def combine(
    mode: FusionMode | str,
    visual: torch.Tensor,
    mapped: torch.Tensor,
    reduce: Optional[nn.Module] = None,
) -> torch.Tensor:
    """Broadcast ``mapped`` (``[..., C_v]``) over the spatial cells of ``visual`` and combine.

    Examples:
        >>> v = torch.zeros(3, 2, 2)
        >>> combine("addition", v, torch.tensor([1.0, 2.0, 3.0]))[:, 1, 1].tolist()
        [1.0, 2.0, 3.0]
        >>> combine("subtraction", v, torch.zeros(3))
        Traceback (most recent call last):
        ...
        ValueError: 'subtraction' is not a valid FusionMode
    """
    mode = FusionMode(mode)
    broadcast = mapped[..., None, None]
    if mode is FusionMode.ADDITION:
        return visual + broadcast
    if mode is FusionMode.MULTIPLICATION:
        return visual * (1 + broadcast)
    if reduce is None:
        raise ValueError("concatenation fusion needs a channel-reduction layer")
    stacked = torch.cat([visual, broadcast.expand_as(visual)], dim=-3)
    if stacked.dim() == 3:
        return reduce(stacked.unsqueeze(0))[0]
    return reduce(stacked)


def fuse(
    semantic: SemanticPrototype,
    visual: VisualPrototype,
    fusion: FusionMap,
) -> MultiModalPrototype:
    """Fuse one semantic prototype into one visual prototype."""
    fused = fusion(semantic.values.unsqueeze(0), visual.values.unsqueeze(0))[0]
    return MultiModalPrototype(values=fused)


# =========================================================================
# The MPG module
# =========================================================================


@dataclass
class MpgOutput:
    """Everything one MPG pass produces for N classes.

    Teacher fields are None when no class names were given.
    """

    visual: torch.Tensor
    student_fused: torch.Tensor
    student_semantic: torch.Tensor
    teacher_fused: Optional[torch.Tensor] = None
    teacher_semantic: Optional[torch.Tensor] = None


class MultiModalPrototypeGenerator(nn.Module):
    """Student and teacher generators plus the fusion map of one detector stage.

    The frozen text encoder and token table are shared across stages and are
    passed in at call time rather than registered here.
    """

    def __init__(self, visual_dim: int, text_dim: int, config: MpgConfig):
        super().__init__()
        self.config = config
        kwargs = dict(
            visual_dim=visual_dim,
            text_dim=text_dim,
            prompt_len=config.prompt_len,
            init_std=config.generator_init_std,
            hidden_dim=config.hidden_dim,
        )
        self.student = build_generator(config.generator_variant, **kwargs)
        self.teacher = build_generator(config.generator_variant, **kwargs)
        self.fusion = FusionMap(text_dim, visual_dim, config.fusion, init_std=config.generator_init_std)

    def student_semantics(self, visual: torch.Tensor, encoder: FrozenTextEncoder) -> torch.Tensor:
        """``[N, C_v, H, W]`` -> ``[N, C_t]`` without any class-name input."""
        return encoder(self.student(visual))

    def teacher_semantics(
        self,
        visual: torch.Tensor,
        names: Sequence[Sequence[int]],
        encoder: FrozenTextEncoder,
        table: TokenEmbeddingTable,
    ) -> torch.Tensor:
        if len(names) != visual.shape[0]:
            raise ShapeMismatchError(f"{visual.shape[0]} prototypes but {len(names)} class names")
        prompts = self.teacher(visual)
        rows = [
            teacher_semantic_prototype(
                encoder,
                table,
                SoftPrompt(tokens=prompt, origin=PromptOrigin.TEACHER),
                tokens,
                self.config.prompt_position,
            ).values
            for prompt, tokens in zip(prompts, names)
        ]
        return torch.stack(rows)

    def forward(
        self,
        visual: torch.Tensor,
        encoder: FrozenTextEncoder,
        table: TokenEmbeddingTable,
        names: Optional[Sequence[Sequence[int]]] = None,
        with_teacher: Optional[bool] = None,
    ) -> MpgOutput:
        """Run the student path and, when class names are given, the teacher path.

        Args:
            visual: visual prototypes ``[N, C_v, H, W]``
            encoder: the frozen text encoder
            table: the frozen token table, read only by the teacher path
            names: token ids of each class's name
            with_teacher: request the teacher path explicitly; it needs ``names``
        """
        with_teacher = names is not None if with_teacher is None else with_teacher
        if with_teacher and names is None:
            raise ValueError("the teacher path needs class-name tokens")
        student_semantic = self.student_semantics(visual, encoder)
        out = MpgOutput(
            visual=visual,
            student_fused=self.fusion(student_semantic, visual),
            student_semantic=student_semantic,
        )
        if with_teacher and names is not None:
            out.teacher_semantic = self.teacher_semantics(visual, names, encoder, table)
            out.teacher_fused = self.fusion(out.teacher_semantic, visual)
        return out


def mpg_forward(
    mpg: MultiModalPrototypeGenerator,
    support_features: Sequence[Sequence[FeatureMap]],
    encoder: FrozenTextEncoder,
    table: TokenEmbeddingTable,
    names: Optional[Sequence[Sequence[int]]] = None,
) -> MpgOutput:
    """Per-class support feature maps to multi-modal prototypes and their intermediates."""
    visual = torch.stack([visual_prototype(maps).values for maps in support_features])
    return mpg(visual, encoder, table, names=names)

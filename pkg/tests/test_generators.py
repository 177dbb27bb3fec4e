"""Tests for the soft-prompt generator variants."""

import pytest
import torch

from protoprompt.exceptions import ShapeMismatchError
from protoprompt.generators import GENERATORS, SharedPromptGenerator, build_generator
from protoprompt.models import GeneratorVariant

VISUAL, TEXT, PROMPT = 16, 8, 4


@pytest.fixture(params=list(GeneratorVariant), ids=lambda v: v.value)
def generator(request):
    torch.manual_seed(0)
    return build_generator(request.param, VISUAL, TEXT, PROMPT, hidden_dim=32)


def test_every_variant_is_registered():
    assert set(GENERATORS) == set(GeneratorVariant)
    for variant, cls in GENERATORS.items():
        assert cls.variant is variant


def test_prompt_shapes(generator):
    assert generator.generate(torch.randn(VISUAL)).shape == (PROMPT, TEXT)
    assert generator(torch.randn(3, VISUAL, 2, 2)).shape == (3, PROMPT, TEXT)


def test_generate_rejects_wrong_input(generator):
    with pytest.raises(ShapeMismatchError):
        generator.generate(torch.randn(VISUAL + 1))
    with pytest.raises(ShapeMismatchError):
        generator.generate(torch.randn(2, VISUAL))


def test_gradients_reach_generator_parameters(generator):
    generator(torch.randn(2, VISUAL, 3, 3)).pow(2).sum().backward()
    grads = [p.grad for p in generator.parameters() if p.requires_grad]
    assert grads and all(g is not None for g in grads)


@pytest.mark.parametrize("variant", ["one-layer", "two-layer", "post-transformer"])
def test_pooled_and_spatial_paths_agree(variant):
    torch.manual_seed(0)
    gen = build_generator(variant, VISUAL, TEXT, PROMPT, hidden_dim=32)
    prototypes = torch.randn(2, VISUAL, 3, 3)
    pooled = prototypes.mean(dim=(-2, -1))
    assert torch.allclose(gen(prototypes)[1], gen.generate(pooled[1]), atol=1e-6)


def test_shared_prompt_ignores_support():
    gen = SharedPromptGenerator(VISUAL, TEXT, PROMPT)
    a = gen.generate(torch.randn(VISUAL))
    b = gen.generate(torch.randn(VISUAL))
    assert torch.equal(a, b)


def test_small_init_keeps_prompts_small():
    torch.manual_seed(0)
    gen = build_generator("one-layer", VISUAL, TEXT, PROMPT, init_std=0.02)
    assert gen.generate(torch.ones(VISUAL)).abs().max() < 1.0
    assert torch.count_nonzero(gen.proj.bias) == 0


def test_prompt_len_must_be_positive():
    with pytest.raises(ValueError):
        build_generator("one-layer", VISUAL, TEXT, 0)


def test_one_layer_matches_matrix_multiply():
    torch.manual_seed(1)
    gen = build_generator("one-layer", VISUAL, TEXT, PROMPT, init_std=0.5)
    with torch.no_grad():
        gen.proj.bias.normal_()
    x = torch.randn(VISUAL)
    w = gen.proj.weight.detach().numpy().astype("float64")
    b = gen.proj.bias.detach().numpy().astype("float64")
    flat = w @ x.numpy().astype("float64") + b
    prompt = gen.generate(x).detach().numpy()
    for m in range(PROMPT):
        assert abs(prompt[m] - flat[m * TEXT : (m + 1) * TEXT]).max() < 1e-6


@pytest.mark.parametrize("variant", list(GeneratorVariant), ids=lambda v: v.value)
def test_input_gradient_matches_finite_differences(variant):
    torch.manual_seed(0)
    gen = build_generator(variant, VISUAL, TEXT, PROMPT, hidden_dim=16, init_std=0.2).double()
    gen.eval()
    x = torch.randn(2, VISUAL, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(gen, (x,), eps=1e-6, atol=1e-5, rtol=1e-4)

"""End-to-end checks on the toy benchmark.

Most of these train for real and are marked ``slow``; run them with
``pytest -m slow``.
"""

from collections import Counter

import numpy as np
import pytest
import torch
from typer.testing import CliRunner

from protoprompt.cli import app
from protoprompt.config import load_config, with_updates
from protoprompt.dataspec import crop_support, generate_toy_dataset, resolve_datasets, sample_episode
from protoprompt.encoders import RoiFeature
from protoprompt.evalkit import meta_test, run_cell, sample_novel_support
from protoprompt.models import ToyDatasetSpec
from protoprompt.trainer import detector_from_checkpoint, meta_train

from .conftest import TINY_OVERRIDES


def test_default_cell_reproduces_standalone_run(tiny_config):
    train, test, split = resolve_datasets(tiny_config.data)
    row = run_cell({"seed": tiny_config.seed}, tiny_config, train, test, split)
    checkpoint = meta_train(train, split, tiny_config, np.random.default_rng(tiny_config.seed))
    table = meta_test(checkpoint, test, split, tiny_config.eval.shots, tiny_config.eval.seeds, tiny_config)
    assert row.metrics == table.mean_rows()


@pytest.mark.slow
def test_episodes_are_exactly_k_shot(toy_dataset, toy_split):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        episode = sample_episode(toy_dataset, toy_split, 2, 3, True, rng, queries=2)
        assert all(len(crops) == 3 for crops in episode.support.values())
        assert len(episode.support) == 2


@pytest.mark.slow
def test_seeds_change_support_selection(toy_dataset, toy_split):
    differing = 0
    for seed in range(100):
        a = sample_episode(toy_dataset, toy_split, 2, 2, True, np.random.default_rng(seed))
        b = sample_episode(toy_dataset, toy_split, 2, 2, True, np.random.default_rng(seed + 1000))
        differing += a.support_sources != b.support_sources
    assert differing >= 90


@pytest.mark.slow
def test_toy_class_histogram_is_roughly_uniform():
    data = generate_toy_dataset(ToyDatasetSpec(num_images=500), np.random.default_rng(0))
    counts = Counter(a.category_id for a in data.annotations)
    mean = np.mean(list(counts.values()))
    assert len(counts) == 12
    assert all(0.5 * mean <= c <= 1.5 * mean for c in counts.values())


@pytest.mark.slow
def test_cli_runs_are_bitwise_reproducible(tmp_path):
    runner = CliRunner()
    args = [arg for item in TINY_OVERRIDES for arg in ("-o", item)]
    for name in ("a", "b"):
        result = runner.invoke(app, ["meta-train", *args, "--out", str(tmp_path / name)])
        assert result.exit_code == 0, result.output
        ckpt = str(tmp_path / name / "ckpt" / "meta.pt")
        result = runner.invoke(app, ["meta-test", "--checkpoint", ckpt, "--out", str(tmp_path / name / "test")])
        assert result.exit_code == 0, result.output
    for rel in ("losses.csv", "test/report/metrics.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.fixture(scope="module")
def desk_run():
    """Desk-scale meta-training at the default config; shared by the slow checks below."""
    config = load_config(None, ["eval.shots=[1,5]", "eval.seeds=[0,1]"])
    train, test, split = resolve_datasets(config.data)
    checkpoint = meta_train(train, split, config, np.random.default_rng(config.seed))
    return config, train, test, split, checkpoint


@pytest.mark.slow
def test_desk_scale_learning(desk_run):
    config, train, test, split, checkpoint = desk_run
    history = checkpoint.history
    tail = history[-50:]
    assert np.mean([r["total"] for r in tail]) < 0.5 * history[0]["total"]
    assert np.mean([r["kd"] for r in tail]) < 0.2 * history[0]["kd"]

    vision_only = with_updates(config, ["mpg.placement=none"])
    baseline = meta_train(train, split, vision_only, np.random.default_rng(config.seed))
    shots, seeds = config.eval.shots, config.eval.seeds
    multi_modal = meta_test(checkpoint, test, split, shots, seeds, config)
    plain = meta_test(baseline, test, split, shots, seeds, vision_only)
    for shot in shots:
        assert multi_modal.row(shot).ap50 >= plain.row(shot).ap50 - 0.02


@pytest.mark.slow
def test_trained_detector_finds_single_novel_objects(desk_run):
    _config, _train, test, split, checkpoint = desk_run
    detector = detector_from_checkpoint(checkpoint)
    support, sources = sample_novel_support(test, split.novel, 5, np.random.default_rng(0))
    protos = detector.build_prototypes(support)

    candidates = []
    for image in test.images:
        novel = [a for a in test.annotations_for(image.id) if a.category_id in split.novel]
        if len(novel) == 1 and image.id not in sources:
            candidates.append((image, novel[0].category_id))
    candidates = candidates[:50]
    assert len(candidates) >= 20

    found = 0
    for image, cid in candidates:
        dets = detector.detect(image.pixels, protos, score_threshold=0.5)
        found += any(d.class_id == cid for d in dets)
    assert found >= 0.8 * len(candidates)


@pytest.mark.slow
def test_trained_head_prefers_identical_features(desk_run):
    _config, _train, test, _split, checkpoint = desk_run
    detector = detector_from_checkpoint(checkpoint)
    rng = np.random.default_rng(0)
    by_class = test.by_class()
    classes = sorted(by_class)

    def single_shot_prototype(cid):
        ann = by_class[cid][int(rng.integers(len(by_class[cid])))]
        crop = crop_support(test.image(ann.image_id).pixels, ann.bbox)
        return RoiFeature(values=detector.build_prototypes({cid: [crop]}).rcnn[0])

    identical, mismatched = [], []
    with torch.no_grad():
        for _ in range(50):
            cid, other = rng.choice(classes, size=2, replace=False)
            prototype = single_shot_prototype(int(cid))
            decoy = single_shot_prototype(int(other))
            (same, _), (different, _) = detector.match_proposals([prototype, decoy], prototype)
            identical.append(same)
            mismatched.append(different)
    assert np.mean(identical) >= np.mean(mismatched)

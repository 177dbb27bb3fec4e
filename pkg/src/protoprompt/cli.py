"""CLI interface for protoprompt.

Every command writes into a run directory (``--out``) that holds the config
snapshot, ``run.log`` and whatever the command produces:

- ``gen-data``: toy train/test datasets and the class split
- ``meta-train``: ``ckpt/meta.pt`` and ``losses.csv``
- ``finetune``: ``ckpt/finetune.pt`` and ``losses.csv``
- ``meta-test``: ``report/metrics.csv``, ``report/summary.yaml`` and detection dumps
- ``ablate``: ``report/ablation.csv`` and ``report/ablation.yaml``
- ``visualize``: overlay images drawn from a detection dump
"""

import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import typer
from typing_extensions import Annotated

from protoprompt.config import config_digest, load_config, with_updates, write_snapshot
from protoprompt.dataspec import (
    default_split,
    generate_toy_dataset,
    load_dataset,
    resolve_datasets,
    save_dataset,
    save_split,
    toy_test_spec,
)
from protoprompt.detector import read_detections
from protoprompt.evalkit import meta_test, parse_grid, render_overlays, run_ablation, write_metrics_report
from protoprompt.exceptions import ProtopromptError
from protoprompt.models import RunConfig, RunMode
from protoprompt.trainer import (
    Checkpoint,
    check_checkpoint_config,
    finetune,
    load_checkpoint,
    meta_train,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

app = typer.Typer(
    help="protoprompt: Few-shot object detection with multi-modal prototypes",
    pretty_exceptions_enable=False,
    rich_markup_mode=None,
)

ConfigOption = Annotated[
    Optional[Path],
    typer.Option("--config", "-c", help="Path to a YAML run config", exists=True, dir_okay=False),
]
OverrideOption = Annotated[
    Optional[list[str]],
    typer.Option("--override", "-o", help="dotted.key=value applied after the config file (repeatable)"),
]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Replace the config's top-level seed")]
OutOption = Annotated[Path, typer.Option("--out", help="Run directory")]
VerboseOption = Annotated[bool, typer.Option("--verbose", "-v", help="Verbose output")]
CheckpointOption = Annotated[
    Path,
    typer.Option("--checkpoint", help="Checkpoint written by meta-train or finetune", exists=True, dir_okay=False),
]


def _setup_logging(run_dir: Path, verbose: bool) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(logging.DEBUG if verbose else logging.WARNING)
    file_handler = logging.FileHandler(run_dir / "run.log")
    file_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        handlers=[stream, file_handler],
        force=True,
    )


@contextmanager
def _reported_failures() -> Iterator[None]:
    """Turn library errors into a one-line diagnostic and exit status 1."""
    try:
        yield
    except (ProtopromptError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        typer.echo(f"❌ {type(e).__name__}: {e}", err=True)
        raise typer.Exit(code=1) from e


def _with_mode(config: RunConfig, mode: RunMode) -> RunConfig:
    if config.mode is mode:
        return config
    return with_updates(config, [f"mode={mode.value}"])


def _config_from(
    config_path: Optional[Path],
    overrides: Optional[list[str]],
    seed: Optional[int],
    checkpoint: Optional[Checkpoint] = None,
) -> RunConfig:
    """Config file if given, else the checkpoint's own config, else defaults; then overrides."""
    if config_path is None and checkpoint is not None:
        config = with_updates(checkpoint.run_config, overrides or [])
        return with_updates(config, [f"seed={seed}"]) if seed is not None else config
    return load_config(config_path, overrides or [], seed=seed)


def _start_run(config: RunConfig, out: Path) -> None:
    write_snapshot(config, out)
    logger.info("Run directory %s (config digest %s)", out, config_digest(config)[:12])


@app.command()
def gen_data(
    config: ConfigOption = None,
    override: OverrideOption = None,
    seed: SeedOption = None,
    out: OutOption = Path("data"),
    verbose: VerboseOption = False,
):
    """Generate the synthetic shape-and-colour benchmark.

    Writes ``train/`` and ``test/`` (manifest.json plus PNG images) and
    ``split.yaml`` under the run directory.

    Examples:

        protoprompt gen-data --config toy.yaml --out data
    """
    _setup_logging(out, verbose)
    with _reported_failures():
        run_config = _config_from(config, override, seed)
        _start_run(run_config, out)
        data = run_config.data
        train = generate_toy_dataset(data.toy)
        test = generate_toy_dataset(toy_test_spec(data))
        save_dataset(train, out / "train" / "manifest.json", out / "train")
        save_dataset(test, out / "test" / "manifest.json", out / "test")
        split = default_split(train.class_ids(), data.num_novel)
        save_split(split, out / "split.yaml")
    typer.echo(
        f"✅ {len(train.images)} train / {len(test.images)} test images, "
        f"{len(split.base)} base + {len(split.novel)} novel classes in {out}"
    )


@app.command("meta-train")
def meta_train_cmd(
    config: ConfigOption = None,
    override: OverrideOption = None,
    seed: SeedOption = None,
    out: OutOption = Path("run"),
    verbose: VerboseOption = False,
):
    """Meta-train on base classes with both prototype paths.

    Examples:

        protoprompt meta-train --config run.yaml --override optimizer.rate=0.001
    """
    _setup_logging(out, verbose)
    with _reported_failures():
        run_config = _with_mode(_config_from(config, override, seed), RunMode.META_TRAIN)
        _start_run(run_config, out)
        train, _test, split = resolve_datasets(run_config.data)
        checkpoint = meta_train(train, split, run_config, np.random.default_rng(run_config.seed), run_dir=out)
        target = out / "ckpt" / "meta.pt"
        save_checkpoint(checkpoint, target)
    typer.echo(f"✅ {checkpoint.iteration} iterations; checkpoint {target}")


@app.command("finetune")
def finetune_cmd(
    checkpoint_path: CheckpointOption,
    config: ConfigOption = None,
    override: OverrideOption = None,
    seed: SeedOption = None,
    out: OutOption = Path("run-finetune"),
    verbose: VerboseOption = False,
):
    """Fine-tune a meta-trained checkpoint on a balanced K-shot set.

    Without ``--config`` the checkpoint's own config is reused in finetune
    mode; ``finetune.shot`` sets K.

    Examples:

        protoprompt finetune --checkpoint run/ckpt/meta.pt --override finetune.shot=5
    """
    _setup_logging(out, verbose)
    with _reported_failures():
        source = load_checkpoint(checkpoint_path)
        run_config = _with_mode(_config_from(config, override, seed, source), RunMode.FINETUNE)
        check_checkpoint_config(source, run_config)
        _start_run(run_config, out)
        train, _test, split = resolve_datasets(run_config.data)
        tuned = finetune(
            source,
            train,
            split,
            run_config.finetune.shot,
            run_config,
            np.random.default_rng(run_config.seed),
            run_dir=out,
        )
        target = out / "ckpt" / "finetune.pt"
        save_checkpoint(tuned, target)
    typer.echo(f"✅ {run_config.finetune.shot}-shot fine-tuning done; checkpoint {target}")


@app.command("meta-test")
def meta_test_cmd(
    checkpoint_path: CheckpointOption,
    config: ConfigOption = None,
    override: OverrideOption = None,
    seed: SeedOption = None,
    out: OutOption = Path("run-test"),
    dump_detections: Annotated[
        bool,
        typer.Option("--dump-detections/--no-dump-detections", help="Write detection dumps under report/"),
    ] = True,
    verbose: VerboseOption = False,
):
    """Evaluate novel classes from K support images, with no parameter updates.

    Examples:

        protoprompt meta-test --checkpoint run/ckpt/meta.pt --override "eval.shots=[1,5]"
    """
    _setup_logging(out, verbose)
    with _reported_failures():
        checkpoint = load_checkpoint(checkpoint_path)
        run_config = _config_from(config, override, seed, checkpoint)
        check_checkpoint_config(checkpoint, run_config)
        _start_run(run_config, out)
        _train, test, split = resolve_datasets(run_config.data)
        report_dir = out / "report"
        table = meta_test(
            checkpoint,
            test,
            split,
            run_config.eval.shots,
            run_config.eval.seeds,
            run_config,
            detections_dir=report_dir if dump_detections else None,
        )
        write_metrics_report(table, report_dir)
    table.print_summary()
    typer.echo(f"✅ Report written to {report_dir}")


@app.command()
def ablate(
    grid: Annotated[
        list[str],
        typer.Option("--grid", "-g", help="axis=v1,v2 or a bare axis name for all its values (repeatable)"),
    ],
    config: ConfigOption = None,
    override: OverrideOption = None,
    seed: SeedOption = None,
    out: OutOption = Path("run-ablate"),
    workers: Annotated[int, typer.Option("--workers", min=1, help="Worker processes, one cell each")] = 1,
    verbose: VerboseOption = False,
):
    """Meta-train and meta-test every cell of an ablation grid.

    Examples:

        protoprompt ablate --grid fusion
        protoprompt ablate --grid prompt_len=2,4,8 --grid seed=0,1 --workers 2
    """
    _setup_logging(out, verbose)
    with _reported_failures():
        run_config = _with_mode(_config_from(config, override, seed), RunMode.META_TRAIN)
        axes = parse_grid(grid)
        _start_run(run_config, out)
        train, test, split = resolve_datasets(run_config.data)
        data = run_config.data
        manifests = None
        if data.manifest is not None and data.test_manifest is not None:
            manifests = (
                (data.manifest, data.image_root or data.manifest.parent),
                (data.test_manifest, data.test_image_root or data.test_manifest.parent),
            )
        elif workers > 1:
            logger.warning("Worker processes need manifests on disk; running cells in this process")
        report = run_ablation(axes, run_config, train, test, split, max_workers=workers, manifests=manifests)
        report.write(out / "report")
    columns = report.columns()
    typer.echo("\t".join(columns))
    for row in report.table():
        typer.echo("\t".join(row.get(c, "") for c in columns))
    typer.echo(f"✅ {len(report.rows)} settings written to {out / 'report'}")


@app.command()
def visualize(
    detections: Annotated[
        Path,
        typer.Option("--detections", "-d", help="Detection dump (JSON array)", exists=True, dir_okay=False),
    ],
    manifest: Annotated[
        Optional[Path],
        typer.Option("--manifest", help="Manifest of the images the dump refers to", exists=True, dir_okay=False),
    ] = None,
    image_root: Annotated[Optional[Path], typer.Option("--image-root", help="Image directory")] = None,
    config: ConfigOption = None,
    override: OverrideOption = None,
    out: OutOption = Path("overlays"),
    min_score: Annotated[float, typer.Option("--min-score", help="Skip detections below this score")] = 0.5,
    verbose: VerboseOption = False,
):
    """Draw a detection dump over its images: yellow for hits, red for false positives.

    Reads only the dump and the dataset; without ``--manifest`` the toy test
    set of the config is regenerated.

    Examples:

        protoprompt visualize -d run-test/report/detections_1shot_seed0.json --manifest data/test/manifest.json
    """
    _setup_logging(out, verbose)
    with _reported_failures():
        if manifest is not None:
            dataset = load_dataset(manifest, image_root or manifest.parent)
        else:
            dataset = resolve_datasets(_config_from(config, override, None).data)[1]
        written = render_overlays(read_detections(detections), dataset, out, score_threshold=min_score)
    typer.echo(f"✅ {len(written)} overlays written to {out}")


def main():
    """Main entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()

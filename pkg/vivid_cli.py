#!/usr/bin/env python3
"""
vivid CLI

Desk-scale hand/head-aware animation: synthetic data, three-stage training,
generation with pose calibration, metrics and ablations.
"""
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn

from config_manager import ConfigManager, GuidanceConfig, get_config_manager
from enums import TrainingStage
from errors import ConfigError, VividError

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

app = typer.Typer(
    name="vivid",
    help="""vivid - hand and head aware animation at desk scale.

    \b
    Quick Start:
      1. Render datasets:     vivid make-data
      2. Train the codebook:  vivid train --stage codebook
      3. Train the denoiser:  vivid train --stage stage1
      4. Train motion:        vivid train --stage stage2
      5. Generate a clip:     vivid generate --clip 0
      6. Compare variants:    vivid ablate

    \b
    Outputs go to $VIVID_OUTPUT_ROOT (default ./runs).
    For detailed help on any command, use:
      vivid COMMAND --help
    """,
    no_args_is_help=True,
)
console = Console()

_options = {"config": None, "preset": "toy", "overrides": [], "output_root": None, "loaded": False}


def get_config() -> ConfigManager:
    """Config manager for this invocation, with --set overrides applied once."""
    if _options["loaded"]:
        return get_config_manager()
    manager = get_config_manager(_options["config"], preset=_options["preset"], reload=True)
    if _options["overrides"]:
        manager.override(**_parse_overrides(_options["overrides"]))
    if _options["output_root"]:
        manager.override(output_dir=str(_options["output_root"]))
    _options["loaded"] = True
    return manager


def _parse_overrides(pairs: List[str]) -> dict:
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' must look like key=value")
        key, raw = pair.split("=", 1)
        try:
            updates[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            updates[key.strip()] = raw
    return updates


@contextmanager
def cli_errors():
    """Map failures to exit codes: 2 for config problems, 3 for runtime ones."""
    try:
        yield
    except typer.Exit:
        raise
    except (ConfigError, ValidationError) as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(EXIT_CONFIG)
    except VividError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(EXIT_RUNTIME)
    except ValueError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(EXIT_CONFIG)
    except (RuntimeError, OSError) as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(EXIT_RUNTIME)


@contextmanager
def training_progress(label: str):
    with Progress(
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task(label, total=None)

        def update(step: int, total: int) -> None:
            progress.update(task, completed=step, total=total)

        yield update


@app.callback()
def main(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="JSON config overlaid on the preset"),
    preset: str = typer.Option("toy", "--preset", "-p", help="Base preset: toy or full"),
    overrides: List[str] = typer.Option([], "--set", "-s", help="Dotted override, e.g. training.stage1.iterations=100"),
    output_root: Optional[Path] = typer.Option(None, "--output-root", "-o", help="Overrides $VIVID_OUTPUT_ROOT"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    """Global options."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )
    _options.update(config=config, preset=preset, overrides=list(overrides), output_root=output_root, loaded=False)


@app.command("config", help="Show the resolved configuration")
def show_config():
    with cli_errors():
        console.print(get_config().show_config())


@app.command("make-data", help="Render synthetic hand and clip datasets")
def make_data():
    from training_service import make_datasets

    with cli_errors():
        manager = get_config()
        with console.status("[yellow]→ Rendering datasets...[/yellow]"):
            paths = make_datasets(manager.config, manager.output_root())
        console.print(f"[green]✓[/green] Datasets written to {paths.root}")


@app.command("train", help="Train one stage (codebook, stage1 or stage2); resumes when re-run")
def train(
    stage: TrainingStage = typer.Option(..., "--stage", help="codebook, stage1 or stage2"),
):
    from training_service import run_training

    with cli_errors():
        manager = get_config()
        with training_progress(f"train {stage.value}") as update:
            result = run_training(manager.config, stage, manager.output_root(), update)
        note = " (resumed)" if result.resumed else ""
        console.print(f"[green]✓[/green] {stage.value} done at step {result.steps}{note}: {result.checkpoint}")
        if result.metrics:
            from report_generator import TableFormatter
            console.print(TableFormatter.metrics_table(result.metrics, title=f"{stage.value} metrics"))


@app.command("generate", help="Generate a clip from trained checkpoints")
def generate(
    clip: int = typer.Option(0, "--clip", help="Held-out clip providing reference, audio and driving pose"),
    drive_clip: Optional[int] = typer.Option(None, "--drive-clip", help="Held-out clip providing the driving pose"),
    ref_image: Optional[Path] = typer.Option(None, "--ref-image", help="Reference image file"),
    ref_keypoints: Optional[Path] = typer.Option(None, "--ref-keypoints", help="Keypoints of the reference image"),
    drive: Optional[Path] = typer.Option(None, "--drive", help="Driving keypoint file"),
    audio: Optional[Path] = typer.Option(None, "--audio", help="Audio features (.npy, [F, T, D])"),
    rhythm_hz: float = typer.Option(2.0, "--rhythm-hz", help="Synthesized audio rhythm when no --audio"),
    rhythm_amplitude: float = typer.Option(1.0, "--rhythm-amplitude", help="Synthesized audio amplitude"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Sampling seed (defaults to config seed)"),
    no_pct: bool = typer.Option(False, "--no-pct", help="Skip pose calibration"),
    audio_scale: Optional[float] = typer.Option(None, "--audio-scale", help="Audio guidance scale"),
    image_scale: Optional[float] = typer.Option(None, "--image-scale", help="Image guidance scale"),
    out: Optional[Path] = typer.Option(None, "--out", help="Run directory (default <root>/generate)"),
):
    from generation_service import GenerationService, inputs_from_clips, inputs_from_files
    from report_generator import TableFormatter
    from synthetic_data import load_clips
    from training_service import dataset_paths

    with cli_errors():
        manager = get_config()
        config = manager.config
        root = manager.output_root()
        file_inputs = [ref_image, ref_keypoints, drive]
        if any(p is not None for p in file_inputs):
            if not all(p is not None for p in file_inputs):
                raise ConfigError("--ref-image, --ref-keypoints and --drive go together")
            inputs = inputs_from_files(
                config, ref_image, ref_keypoints, drive, audio, rhythm_hz, rhythm_amplitude, config.seed,
            )
        else:
            data = dataset_paths(root)
            data.require(data.clips_heldout)
            inputs = inputs_from_clips(
                load_clips(data.clips_heldout), clip, drive_clip, {"clips_heldout": data.clips_heldout},
            )
        guidance = GuidanceConfig(
            audio_scale=config.guidance.audio_scale if audio_scale is None else audio_scale,
            image_scale=config.guidance.image_scale if image_scale is None else image_scale,
        )
        with console.status("[yellow]→ Sampling...[/yellow]"):
            result = GenerationService(config, root).generate(
                inputs, seed=seed, calibrate=False if no_pct else None, guidance=guidance, run_dir=out,
            )
        for note in result.notes:
            console.print(f"[yellow]Note:[/yellow] {note}")
        console.print(TableFormatter.metrics_table(result.report.scalars(), title="Generation metrics"))
        console.print(f"[green]✓[/green] {result.latents.shape[0]} frames in {result.run_dir}")
        console.print(f"[dim]output hash {result.output_hash}[/dim]")


@app.command("calibrate", help="Align a driving keypoint file to a reference skeleton")
def calibrate(
    ref: Path = typer.Option(..., "--ref", help="Reference keypoint file (frame 0 is used)"),
    drive: Path = typer.Option(..., "--drive", help="Driving keypoint file"),
    out: Path = typer.Option(..., "--out", help="Calibrated keypoint file to write"),
    report: Optional[Path] = typer.Option(None, "--report", help="Per-frame diagnostics CSV"),
):
    from generation_service import run_calibration
    from report_generator import TableFormatter

    with cli_errors():
        threshold = get_config().config.calibration.confidence_threshold
        outcome = run_calibration(ref, drive, out, report, threshold)
        rows = outcome.rows
        summary = {
            "frames": len(rows),
            "segment_error_before": sum(r["segment_error_before"] for r in rows) / len(rows),
            "segment_error_after": sum(r["segment_error_after"] for r in rows) / len(rows),
        }
        console.print(TableFormatter.metrics_table(summary, title="Calibration"))
        console.print(f"[green]✓[/green] Calibrated keypoints written to {outcome.output}")


@app.command("metrics", help="HKV/HMV from keypoints and codebook quality from a checkpoint")
def metrics(
    keypoints: Optional[Path] = typer.Option(None, "--keypoints", help="Keypoint file"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Codebook checkpoint"),
    hands: Optional[Path] = typer.Option(None, "--hands", help="Hand dataset (defaults to held-out hands)"),
):
    from generation_service import evaluate_metrics
    from report_generator import TableFormatter
    from training_service import dataset_paths

    with cli_errors():
        if checkpoint is not None and hands is None:
            hands = dataset_paths(get_config().output_root()).hands_heldout
        report = evaluate_metrics(keypoints, checkpoint, hands)
        console.print(TableFormatter.metrics_table(report.scalars()))


@app.command("ablate", help="Train and compare the ablation variants")
def ablate(
    variants: List[str] = typer.Option([], "--variant", help="Only run this variant (repeatable), e.g. baseline"),
):
    from generation_service import run_ablation_grid
    from report_generator import TableFormatter

    with cli_errors():
        manager = get_config()
        with training_progress("ablation") as update:
            path, rows = run_ablation_grid(manager.config, manager.output_root(), update, variants or None)
        console.print(TableFormatter.rows_table(rows, title="Ablation"))
        console.print(f"[green]✓[/green] Comparison written to {path}")


@app.command("runs", help="List recent runs from the registry")
def runs(
    limit: int = typer.Option(20, "--limit", "-n", help="Number of runs"),
    kind: Optional[str] = typer.Option(None, "--kind", help="Filter: make-data, train, generate, ablate"),
):
    from report_generator import TableFormatter
    from run_manager import list_runs

    with cli_errors():
        found = list_runs(get_config().output_root(), limit, kind)
        if not found:
            console.print("[yellow]No runs found.[/yellow]")
            return
        console.print(TableFormatter.runs_table(found))


if __name__ == "__main__":
    app()

#!/usr/bin/env python3
"""
Engagement Analytics CLI
Turns student–AI-tutor conversation logs into session engagement types and
student-level transition patterns
"""

import os
import sys
from pathlib import Path
from typing import Optional

import typer
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel

sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from errors import InputError, MissingArtifact, StageError
from pipeline import EngagementPipeline, PipelineConfig, Stage, load_config, run_bench
from plots import render_report
from synth import SynthSpec, write_bundle

load_dotenv()

app = typer.Typer()
console = Console()

EXIT_INPUT = 2
EXIT_STAGE = 3


@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Pipeline config (JSON)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed"),
    threads: Optional[int] = typer.Option(None, "--threads", "-t", min=1, help="Worker threads"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
):
    """
    Engagement analytics over tutor conversation logs
    """
    ctx.obj = {"config": config, "seed": seed, "threads": threads, "out": out}


def _fail(code: int, message: str):
    console.print(f"[red]{escape(message)}[/red]")
    raise typer.Exit(code)


def _load(ctx: typer.Context) -> PipelineConfig:
    opts = ctx.obj
    if opts["config"] is None:
        _fail(EXIT_INPUT, "No --config given")
    try:
        return load_config(
            opts["config"],
            seed=opts["seed"],
            threads=opts["threads"],
            output_dir=str(opts["out"]) if opts["out"] else None,
        )
    except InputError as e:
        _fail(EXIT_INPUT, f"Input error: {e}")
    except ValidationError as e:
        _fail(EXIT_INPUT, f"Invalid config {opts['config']}:\n{e}")


def _run_until(ctx: typer.Context, stage: Stage):
    config = _load(ctx)
    console.print(Panel.fit(
        "[bold cyan]Engagement Analytics[/bold cyan]\n"
        f"Config: {ctx.obj['config']}\n"
        f"Stages: ingest → {stage.value}\n"
        f"Output: {config.output_dir}",
        border_style="cyan"
    ))
    try:
        EngagementPipeline(config).run(until=stage)
    except InputError as e:
        _fail(EXIT_INPUT, f"Input error: {e}")
    except StageError as e:
        _fail(EXIT_STAGE, f"Pipeline failed: {e}")
    console.print(f"\n[green]✓ Artifacts written to {config.output_dir}[/green]")


@app.command()
def run(ctx: typer.Context):
    """
    Run the full pipeline: ingest, segment, featurize, cluster, mine, stats
    """
    _run_until(ctx, Stage.STATS)


@app.command()
def segment(ctx: typer.Context):
    """
    Ingest and segment turns into sessions (sessions.csv, segmentation_eval.csv)
    """
    _run_until(ctx, Stage.SEGMENT)


@app.command()
def featurize(ctx: typer.Context):
    """
    Run through feature extraction (features.csv)
    """
    _run_until(ctx, Stage.FEATURIZE)


@app.command()
def cluster(ctx: typer.Context):
    """
    Run through PCA, k-means and stability analysis
    """
    _run_until(ctx, Stage.CLUSTER)


@app.command()
def mine(ctx: typer.Context):
    """
    Run through first-order transition mining, overall and per subgroup
    """
    _run_until(ctx, Stage.MINE)


@app.command()
def stats(ctx: typer.Context):
    """
    Run through the contextual statistics (same as run)
    """
    _run_until(ctx, Stage.STATS)


@app.command()
def report(
    ctx: typer.Context,
    artifacts: Optional[Path] = typer.Argument(None, help="Artifact directory from a previous run"),
):
    """
    Render SVG figures from the CSV artifacts of a run
    """
    artifact_dir = artifacts or ctx.obj["out"]
    if artifact_dir is None:
        artifact_dir = _load(ctx).output_dir
    if not Path(artifact_dir).is_dir():
        _fail(EXIT_INPUT, f"Input error: artifact directory does not exist: {artifact_dir}")

    try:
        result = render_report(Path(artifact_dir))
    except MissingArtifact as e:
        _fail(EXIT_STAGE, f"Report failed: {StageError('report', e)}")

    for notice in result.notices:
        console.print(f"[yellow]Warning: {notice}[/yellow]")
    console.print(f"[green]✓[/green] Wrote {len(result.figures)} figures to {Path(artifact_dir) / 'figures'}")


@app.command()
def synth(
    ctx: typer.Context,
    enrollments: int = typer.Option(50, "--enrollments", "-n", min=1, help="Number of enrollments"),
    classes: int = typer.Option(4, "--classes", min=1, help="Number of classes"),
    boundary_mode: str = typer.Option("mixed", "--boundaries", help="time, topic or mixed"),
    cue_rate: float = typer.Option(0.35, "--cue-rate", help="Share of sessions opening with a lexicon cue"),
):
    """
    Generate a synthetic corpus with gold sidecars (turns.jsonl, context.json, config.json)
    """
    out = ctx.obj["out"] or Path("synth_corpus")
    try:
        spec = SynthSpec(
            seed=ctx.obj["seed"] or 0,
            n_enrollments=enrollments,
            n_classes=classes,
            boundary_mode=boundary_mode,
            cue_rate=cue_rate,
        )
    except ValidationError as e:
        _fail(EXIT_INPUT, f"Invalid synth options:\n{e}")
    paths = write_bundle(spec, out)
    console.print(f"[green]✓[/green] Synthetic corpus written to {out}")
    console.print(f"  [cyan]python main.py --config {paths['config']} run[/cyan] - to analyze it")


@app.command()
def bench(
    ctx: typer.Context,
    enrollments: Optional[int] = typer.Option(
        None, "--synth-enrollments", help="Benchmark on a fresh synthetic corpus of this many enrollments"
    ),
):
    """
    Time every pipeline stage and report rows per second (bench.csv)
    """
    if enrollments is not None:
        corpus_dir = (ctx.obj["out"] or Path("bench_out")) / "corpus"
        paths = write_bundle(SynthSpec(seed=ctx.obj["seed"] or 0, n_enrollments=enrollments), corpus_dir)
        ctx.obj["config"] = paths["config"]
        if ctx.obj["out"] is None:
            ctx.obj["out"] = corpus_dir.parent
    config = _load(ctx)
    try:
        run_bench(config)
    except InputError as e:
        _fail(EXIT_INPUT, f"Input error: {e}")
    except StageError as e:
        _fail(EXIT_STAGE, f"Benchmark failed: {e}")


if __name__ == "__main__":
    app()

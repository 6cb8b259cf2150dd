"""Entry point for the DFBF toolkit: python -m scripts.dfbf <command>"""
import logging
from pathlib import Path
from typing import Callable, List, Optional

import typer
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from src.analysis.plots import plot_filter_counts, plot_image_grid
from src.config import Config, RunConfig
from src.errors import DataFormatError, DFBFError
from src.formats import load_checkpoint, load_image_container, read_manifest
from src.pipeline import DFBFPipeline, comparison_table, rows_table
from src.storage import RunDirectory
from src.synthesis import load_synthetic

logger = logging.getLogger(__name__)

app = typer.Typer(name="dfbf", help="Data-free backbone fine-tuning for pruned convolutional networks.",
                  no_args_is_help=True, add_completion=False)
console = Console()

ConfigOpt = typer.Option(None, "--config", "-c", help="Run configuration JSON")
SeedOpt = typer.Option(None, "--seed", help="Seed propagated into every seeded section")
OutOpt = typer.Option(None, "--out", "-o", help="Run directory (default runs/latest)")
ForceOpt = typer.Option(False, "--force", help="Overwrite existing outputs")
LogOpt = typer.Option("INFO", "--log-level", help="DEBUG, INFO, WARNING or ERROR")


def _guard(body: Callable[[], None]) -> None:
    """Run a command body, mapping toolkit errors to exit codes"""
    try:
        body()
    except DFBFError as e:
        logger.error(f"{type(e).__name__}: {e}")
        console.print(f"[red]error:[/red] {escape(str(e))}")
        raise typer.Exit(code=e.exit_code)


def _pipeline(config: Optional[Path], seed: Optional[int], out: Optional[Path], force: bool,
              log_level: str, fresh_metrics: bool = False) -> DFBFPipeline:
    app_config = Config(log_level=log_level.upper())
    run_cfg = RunConfig.from_file(config).with_seed(seed)
    run_dir = RunDirectory(out or app_config.runs_dir / "latest", force=force)
    return DFBFPipeline(run_cfg, run_dir, app_config, fresh_metrics=fresh_metrics)


def _default(path: Optional[Path], fallback: Path) -> Path:
    return path if path is not None else fallback


def _parse_list(raw: str, cast) -> list:
    try:
        return [cast(item) for item in raw.split(",") if item.strip()]
    except ValueError:
        raise typer.BadParameter(f"cannot parse {raw!r} as a comma-separated list")


def _eval_table(title: str, accuracy: float, per_class: dict) -> Table:
    table = Table(title=title)
    table.add_column("Class")
    table.add_column("Accuracy", justify="right")
    for k, value in per_class.items():
        table.add_row(str(k), f"{100 * value:.2f}")
    table.add_row("all", f"{100 * accuracy:.2f}")
    return table


@app.command()
def train(config: Optional[Path] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[Path] = OutOpt,
          force: bool = ForceOpt, log_level: str = LogOpt):
    """Supervised baseline training; writes checkpoints/baseline.dfbf"""
    def body():
        with _pipeline(config, seed, out, force, log_level) as pipeline:
            _, result = pipeline.run_train()
            console.print(_eval_table("Baseline", result.accuracy, result.per_class))
    _guard(body)


@app.command()
def prune(config: Optional[Path] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[Path] = OutOpt,
          force: bool = ForceOpt, log_level: str = LogOpt,
          checkpoint: Optional[Path] = typer.Option(None, help="Model to prune (default <out>/checkpoints/baseline.dfbf)"),
          ratio: Optional[float] = typer.Option(None, help="Global pruning ratio in [0,1)"),
          strategy: Optional[str] = typer.Option(None, help="l1 or bn_scale"),
          mode: Optional[str] = typer.Option(None, help="uniform or size_weighted"),
          plan_out: Optional[Path] = typer.Option(None, "--plan-out", help="Also write the prune plan here")):
    """Structured filter pruning; writes checkpoints/pruned.dfbf and prune_report.json"""
    def body():
        pipeline = _pipeline(config, seed, out, force, log_level)
        pipeline.run_cfg = pipeline.run_cfg.with_overrides("prune", ratio=ratio, strategy=strategy, mode=mode)
        with pipeline:
            graph = load_checkpoint(_default(checkpoint, pipeline.run_dir.checkpoint("baseline")))
            _, plan, prune_report = pipeline.run_prune(graph)
            if plan_out is not None:
                pipeline.run_dir.write_json(plan_out, plan.to_dict())
            table = Table(title="Pruning report")
            table.add_column("Layer")
            table.add_column("Filters", justify="right")
            for stats in prune_report.layers:
                marker = "" if stats.prunable else " (fixed)"
                table.add_row(stats.layer + marker, f"{stats.filters_before} -> {stats.filters_after}")
            console.print(table)
            console.print(f"removed filters (prunable layers): {prune_report.removed_filters_pct:.2f}%")
            console.print(f"removed filters (backbone): {prune_report.removed_filters_pct_backbone:.2f}%")
            console.print(f"removed params (backbone): {prune_report.removed_params_pct:.2f}%")
    _guard(body)


@app.command()
def synthesize(config: Optional[Path] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[Path] = OutOpt,
               force: bool = ForceOpt, log_level: str = LogOpt,
               checkpoint: Optional[Path] = typer.Option(None, help="Frozen model (default <out>/checkpoints/baseline.dfbf)"),
               num_images: Optional[int] = typer.Option(None, help="Number of synthetic images M"),
               steps: Optional[int] = typer.Option(None, help="Optimization steps per batch")):
    """Synthesize a label-free dataset; writes datasets/synthetic.dfds"""
    def body():
        pipeline = _pipeline(config, seed, out, force, log_level)
        pipeline.run_cfg = pipeline.run_cfg.with_overrides("synth", num_images=num_images, steps=steps)
        with pipeline:
            teacher = load_checkpoint(_default(checkpoint, pipeline.run_dir.checkpoint("baseline")))
            dataset = pipeline.run_synthesize(teacher)
            console.print(f"synthesized {len(dataset)} images, sha256 {dataset.header['pixel_sha256'][:16]}")
    _guard(body)


@app.command()
def finetune(config: Optional[Path] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[Path] = OutOpt,
             force: bool = ForceOpt, log_level: str = LogOpt,
             pruned: Optional[Path] = typer.Option(None, help="Pruned model (default <out>/checkpoints/pruned.dfbf)"),
             teacher: Optional[Path] = typer.Option(None, help="Unpruned model (default <out>/checkpoints/baseline.dfbf)"),
             dataset: Optional[Path] = typer.Option(None, help="Synthetic dataset (default <out>/datasets/synthetic.dfds)"),
             gamma: Optional[float] = typer.Option(None, help="Tap weighting factor"),
             taps: Optional[str] = typer.Option(None, help="all, every_second or output_only")):
    """Fine-tune the pruned backbone; writes checkpoints/finetuned.dfbf"""
    def body():
        pipeline = _pipeline(config, seed, out, force, log_level)
        pipeline.run_cfg = pipeline.run_cfg.with_overrides("distill", gamma=gamma, taps=taps)
        with pipeline:
            run_dir = pipeline.run_dir
            teacher_graph = load_checkpoint(_default(teacher, run_dir.checkpoint("baseline")))
            pruned_graph = load_checkpoint(_default(pruned, run_dir.checkpoint("pruned")))
            data = load_synthetic(_default(dataset, run_dir.dataset("synthetic")), verify_model=teacher_graph)
            head_before = teacher_graph.fingerprint_scope("head")
            model, history = pipeline.run_finetune(pruned_graph, teacher_graph, data.images)
            console.print(f"head sha256 before: {head_before}")
            console.print(f"head sha256 after:  {model.fingerprint_scope('head')}")
            if history:
                console.print(f"L_DFBF {history[0].l_total:.6f} -> {history[-1].l_total:.6f} "
                              f"over {len(history)} steps")
    _guard(body)


@app.command("eval")
def evaluate(config: Optional[Path] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[Path] = OutOpt,
             log_level: str = LogOpt,
             checkpoint: Optional[Path] = typer.Option(None, help="Model (default <out>/checkpoints/finetuned.dfbf)")):
    """Test accuracy and per-class accuracy of a checkpoint"""
    def body():
        pipeline = _pipeline(config, seed, out, False, log_level)
        path = _default(checkpoint, pipeline.run_dir.checkpoint("finetuned"))
        result = pipeline.run_eval(load_checkpoint(path))
        console.print(_eval_table(str(path), result.accuracy, result.per_class))
    _guard(body)


@app.command()
def pipeline(config: Optional[Path] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[Path] = OutOpt,
             force: bool = ForceOpt, log_level: str = LogOpt):
    """train -> prune -> synthesize -> finetune -> eval with a comparison table"""
    def body():
        with _pipeline(config, seed, out, force, log_level, fresh_metrics=True) as runner:
            result = runner.run()
            console.print(comparison_table(result["rows"]))
    _guard(body)


@app.command("sweep-gamma")
def sweep_gamma(config: Optional[Path] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[Path] = OutOpt,
                force: bool = ForceOpt, log_level: str = LogOpt,
                gammas: str = typer.Option("0,1,6", help="Comma-separated gamma values"),
                pruned: Optional[Path] = typer.Option(None, help="Pruned model (default <out>/checkpoints/pruned.dfbf)"),
                teacher: Optional[Path] = typer.Option(None, help="Unpruned model (default <out>/checkpoints/baseline.dfbf)"),
                dataset: Optional[Path] = typer.Option(None, help="Synthetic dataset (default <out>/datasets/synthetic.dfds)")):
    """Fine-tune once per gamma in parallel against a shared teacher"""
    values: List[float] = _parse_list(gammas, float)

    def body():
        with _pipeline(config, seed, out, force, log_level) as runner:
            run_dir = runner.run_dir
            teacher_graph = load_checkpoint(_default(teacher, run_dir.checkpoint("baseline")))
            pruned_graph = load_checkpoint(_default(pruned, run_dir.checkpoint("pruned")))
            data = load_synthetic(_default(dataset, run_dir.dataset("synthetic")), verify_model=teacher_graph)
            rows = runner.sweep_gamma(values, pruned_graph, teacher_graph, data.images)
            console.print(rows_table(rows, "gamma sweep"))
    _guard(body)


@app.command("sweep-ratio")
def sweep_ratio(config: Optional[Path] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[Path] = OutOpt,
                force: bool = ForceOpt, log_level: str = LogOpt,
                ratios: str = typer.Option("0.1,0.2,0.3,0.4", help="Comma-separated prune ratios"),
                teacher: Optional[Path] = typer.Option(None, help="Unpruned model (default <out>/checkpoints/baseline.dfbf)"),
                dataset: Optional[Path] = typer.Option(None, help="Synthetic dataset (default <out>/datasets/synthetic.dfds)")):
    """Prune at several ratios and fine-tune each on the synthetic dataset"""
    values: List[float] = _parse_list(ratios, float)

    def body():
        with _pipeline(config, seed, out, force, log_level) as runner:
            run_dir = runner.run_dir
            teacher_graph = load_checkpoint(_default(teacher, run_dir.checkpoint("baseline")))
            data = load_synthetic(_default(dataset, run_dir.dataset("synthetic")), verify_model=teacher_graph)
            rows = runner.sweep_ratio(values, teacher_graph, data.images)
            console.print(rows_table(rows, "prune ratio sweep"))
    _guard(body)


@app.command("sweep-taps")
def sweep_taps(config: Optional[Path] = ConfigOpt, out: Optional[Path] = OutOpt,
               force: bool = ForceOpt, log_level: str = LogOpt,
               seeds: str = typer.Option("0,1,2,3,4", help="Comma-separated seeds"),
               selections: str = typer.Option("all,every_second,output_only", help="Tap selections to compare")):
    """Tap-selection ablation over several seeds"""
    seed_values: List[int] = _parse_list(seeds, int)
    selection_values: List[str] = _parse_list(selections, str)

    def body():
        with _pipeline(config, None, out, force, log_level) as runner:
            rows = runner.sweep_taps(seed_values, selection_values)
            console.print(rows_table(rows, "tap selection ablation"))
    _guard(body)


@app.command()
def inspect(path: Path = typer.Argument(..., help="A .dfbf checkpoint or .dfds dataset"),
            plot: Optional[Path] = typer.Option(None, "--plot", help="Write a PNG figure here")):
    """Summarize a checkpoint or dataset file"""
    def body():
        if not path.exists():
            raise DataFormatError(f"{path} does not exist")
        with open(path, "rb") as f:
            magic = f.read(4)
        if magic == b"DFBF":
            _inspect_checkpoint(path, plot)
        elif magic == b"DFDS":
            _inspect_dataset(path, plot)
        else:
            raise DataFormatError(f"{path}: unknown magic {magic!r}")
    _guard(body)


def _inspect_checkpoint(path: Path, plot: Optional[Path]) -> None:
    manifest = read_manifest(path)
    graph = load_checkpoint(path)
    table = Table(title=f"{path.name}: {len(manifest['tensors'])} tensors")
    for column in ("id", "kind", "out", "params", "tap", "prunable", "part"):
        table.add_column(column)
    for row in graph.summary():
        table.add_row(*[str(row[c]) for c in ("id", "kind", "out", "params", "tap", "prunable", "part")])
    console.print(table)
    console.print(f"backbone parameters: {graph.num_parameters('backbone')}, "
                  f"head parameters: {graph.num_parameters('head')}")
    console.print(f"fingerprint: {graph.fingerprint()}")
    if plot is not None:
        plot_filter_counts(graph.filter_counts(), plot)


def _inspect_dataset(path: Path, plot: Optional[Path]) -> None:
    images, header, labels = load_image_container(path)
    table = Table(title=f"{path.name}")
    table.add_column("field")
    table.add_column("value")
    table.add_row("images", f"{images.shape[0]} x {images.shape[1]}x{images.shape[2]}x{images.shape[3]}")
    table.add_row("pixel range", f"[{images.min():.4f}, {images.max():.4f}]")
    table.add_row("labels", "yes" if labels is not None else "no")
    for key in sorted(header):
        if key != "synth_config":
            table.add_row(key, str(header[key]))
    console.print(table)
    if plot is not None:
        plot_image_grid(images, plot)


def main():
    """Main entry point"""
    app()


if __name__ == "__main__":
    main()

"""Main pipeline orchestrator: train, prune, synthesize, fine-tune, evaluate"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.table import Table

from src.analysis import plots
from src.architectures import build_model
from src.config import Config, RunConfig
from src.data import load_dataset_pair
from src.distill import BackboneFinetuner, assemble, epoch_means
from src.errors import StructuralError
from src.formats import save_checkpoint
from src.graph import NetworkGraph
from src.models import EvalResult, LabeledDataset, LossRecord, PrunePlan, PruneReport, SynthDataset
from src.pruning import apply_prune, plan_prune, report
from src.storage import MetricsWriter, RunDirectory
from src.synthesis import ImageSynthesizer, save_synthetic
from src.trainer import Trainer, evaluate

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

ROW_BASELINE = "Baseline"
ROW_PRUNED = "w/o fine-tuning"
ROW_ORIGINAL = "orig. img"
ROW_DFBF = "DFBF"


class DFBFPipeline:
    """Runs the compression steps against one run directory.

    Use as a context manager: entering locks the run directory, echoes the
    resolved config and opens the metrics file.
    """

    def __init__(self, run_cfg: Optional[RunConfig] = None, run_dir: Optional[RunDirectory] = None,
                 config: Optional[Config] = None, fresh_metrics: bool = False):
        self.config = config or Config()
        self.run_cfg = run_cfg or RunConfig()
        self.run_dir = run_dir
        self.fresh_metrics = fresh_metrics
        self.metrics: Optional[MetricsWriter] = None
        self._file_handler: Optional[logging.Handler] = None
        self._datasets: Dict[int, Tuple[LabeledDataset, LabeledDataset]] = {}
        self._setup_logging()

    def _setup_logging(self):
        """Setup logging configuration"""
        handlers = [logging.StreamHandler()]

        logging.basicConfig(
            level=getattr(logging, self.config.log_level),
            format=LOG_FORMAT,
            handlers=handlers
        )

    def _attach_file_log(self) -> None:
        path = self.config.log_file or (self.run_dir.log_path if self.run_dir else None)
        if path is None:
            return
        self._file_handler = logging.FileHandler(path, encoding="utf-8")
        self._file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(self._file_handler)

    def __enter__(self) -> "DFBFPipeline":
        if self.run_dir is not None:
            self.run_dir.open()
            try:
                self._attach_file_log()
                self.run_dir.write_config(self.run_cfg.resolved())
                self.metrics = self.run_dir.metrics_writer(fresh=self.fresh_metrics)
            except Exception:
                self.__exit__(None, None, None)
                raise
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self.metrics is not None:
            self.metrics.close()
            self.metrics = None
        if self._file_handler is not None:
            logging.getLogger().removeHandler(self._file_handler)
            self._file_handler.close()
            self._file_handler = None
        if self.run_dir is not None:
            self.run_dir.close()

    # ------------------------------------------------------------------ helpers

    def datasets(self, cfg: Optional[RunConfig] = None) -> Tuple[LabeledDataset, LabeledDataset]:
        cfg = cfg or self.run_cfg
        if cfg.seed not in self._datasets:
            self._datasets[cfg.seed] = load_dataset_pair(cfg.data, cfg.seed)
        return self._datasets[cfg.seed]

    def original_images(self, cfg: Optional[RunConfig] = None) -> np.ndarray:
        """``synth.num_images`` training images drawn without replacement with the run seed"""
        cfg = cfg or self.run_cfg
        train, _ = self.datasets(cfg)
        count = min(cfg.synth.num_images, len(train))
        picked = np.random.default_rng(cfg.seed).choice(len(train), size=count, replace=False)
        return train.images[np.sort(picked)]

    def _save_checkpoint(self, graph: NetworkGraph, name: str) -> None:
        if self.run_dir is not None:
            save_checkpoint(graph, self.run_dir.claim(self.run_dir.checkpoint(name)))

    def _log_metric(self, phase: str, step: int, metric: str, value: float) -> None:
        if self.metrics is not None:
            self.metrics.log(phase, step, metric, value)

    # ------------------------------------------------------------------ steps

    def run_train(self, cfg: Optional[RunConfig] = None, save: bool = True,
                  phase: str = "train") -> Tuple[NetworkGraph, EvalResult]:
        """Supervised baseline on the configured labeled dataset"""
        cfg = cfg or self.run_cfg
        logger.info("Starting baseline training")
        try:
            train, test = self.datasets(cfg)
            graph = build_model(cfg.model)
            Trainer(cfg.train, seed=cfg.seed, metrics=self.metrics, phase=phase).fit(graph, train, test)
            result = self.run_eval(graph, cfg=cfg, phase=f"eval_{phase}")
            if save:
                self._save_checkpoint(graph, "baseline")
            logger.info(f"Baseline test accuracy {result.accuracy:.4f}")
            return graph, result
        except Exception as e:
            logger.error(f"Training failed: {e}")
            raise

    def run_prune(self, graph: NetworkGraph, cfg: Optional[RunConfig] = None,
                  save: bool = True) -> Tuple[NetworkGraph, PrunePlan, PruneReport]:
        cfg = cfg or self.run_cfg
        section = cfg.prune
        logger.info(f"Pruning with {section.strategy}/{section.mode} at ratio {section.ratio}")
        try:
            plan = plan_prune(graph, section.ratio, section.strategy, section.mode)
            pruned = apply_prune(graph, plan)
            prune_report = report(graph, pruned)
            if save and self.run_dir is not None:
                self._save_checkpoint(pruned, "pruned")
                self.run_dir.write_json(self.run_dir.root / "prune_plan.json", plan.to_dict())
                self.run_dir.write_json(self.run_dir.root / "prune_report.json", prune_report.to_dict())
            logger.info(f"Removed {prune_report.removed_filters_pct:.2f}% of prunable filters, "
                        f"{prune_report.removed_params_pct:.2f}% of backbone parameters")
            return pruned, plan, prune_report
        except Exception as e:
            logger.error(f"Pruning failed: {e}")
            raise

    def run_synthesize(self, teacher: NetworkGraph, cfg: Optional[RunConfig] = None,
                       save: bool = True, phase: str = "synthesize") -> SynthDataset:
        cfg = cfg or self.run_cfg
        logger.info("Starting image synthesis")
        try:
            synthesizer = ImageSynthesizer(teacher, cfg.synth, threads=self.config.threads)
            dataset = synthesizer.generate_dataset(self.metrics, phase)
            if save and self.run_dir is not None:
                dataset = save_synthetic(dataset, self.run_dir.claim(self.run_dir.dataset("synthetic")))
            return dataset
        except Exception as e:
            logger.error(f"Synthesis failed: {e}")
            raise

    def run_finetune(self, pruned: NetworkGraph, teacher: NetworkGraph, images: np.ndarray,
                     cfg: Optional[RunConfig] = None, phase: str = "finetune",
                     save_as: Optional[str] = "finetuned") -> Tuple[NetworkGraph, List[LossRecord]]:
        """Fine-tune the pruned backbone and reattach the teacher's head"""
        cfg = cfg or self.run_cfg
        head_before = teacher.tensor_digests("head")
        try:
            backbone, history = BackboneFinetuner(cfg.distill, self.metrics, phase).finetune(pruned, teacher, images)
        except Exception as e:
            logger.error(f"Fine-tuning failed: {e}")
            raise
        model = assemble(backbone, teacher)
        if model.tensor_digests("head") != head_before:
            raise StructuralError("head tensors changed during fine-tuning")
        if history:
            means = epoch_means(history)
            logger.info(f"Mean L_DFBF: first epoch {means[min(means)]:.6f}, last epoch {means[max(means)]:.6f}")
        if save_as is not None:
            self._save_checkpoint(model, save_as)
            if self.run_dir is not None:
                self.run_dir.write_records(self.run_dir.history(phase), [r.to_dict() for r in history])
        return model, history

    def run_eval(self, graph: NetworkGraph, cfg: Optional[RunConfig] = None,
                 test: Optional[LabeledDataset] = None, phase: str = "eval") -> EvalResult:
        cfg = cfg or self.run_cfg
        if test is None:
            _, test = self.datasets(cfg)
        result = evaluate(graph, test, cfg.eval.batch_size)
        self._log_metric(phase, 0, "accuracy", result.accuracy)
        for k, value in result.per_class.items():
            self._log_metric(phase, 0, f"accuracy_class_{k}", value)
        return result

    # ------------------------------------------------------------------ full runs

    def run(self) -> Dict[str, Any]:
        """train -> prune -> synthesize -> finetune -> eval and the comparison report"""
        logger.info("Starting full DFBF pipeline")
        if self.run_dir is not None:
            outputs = [self.run_dir.checkpoint(name) for name in ("baseline", "pruned", "finetuned")]
            outputs += [self.run_dir.dataset("synthetic"), self.run_dir.history("finetune"),
                        self.run_dir.report_json, self.run_dir.report_csv]
            for path in outputs:
                self.run_dir.claim(path)

        try:
            baseline, base_eval = self.run_train()
            teacher_before = baseline.tensor_digests()
            pruned, plan, prune_report = self.run_prune(baseline)
            pruned_eval = self.run_eval(pruned, phase="eval_pruned")
            synthetic = self.run_synthesize(baseline)
            model, history = self.run_finetune(pruned, baseline, synthetic.images)
            dfbf_eval = self.run_eval(model, phase="eval_dfbf")

            original_eval = None
            if self.run_cfg.distill.compare_original_images:
                original_model, _ = self.run_finetune(pruned, baseline, self.original_images(),
                                                      phase="finetune_orig", save_as="finetuned_orig")
                original_eval = self.run_eval(original_model, phase="eval_orig")

            teacher_unchanged = baseline.tensor_digests() == teacher_before
            head_unchanged = model.tensor_digests("head") == baseline.tensor_digests("head")
            if not (teacher_unchanged and head_unchanged):
                raise StructuralError("teacher or head tensors changed during the pipeline")
        except Exception as e:
            logger.error(f"Pipeline failed: {e}")
            raise

        rows = comparison_rows(prune_report, base_eval, pruned_eval, dfbf_eval, original_eval)
        result = {
            "rows": rows,
            "prune": prune_report.to_dict(),
            "evaluations": {name: res.to_dict() for name, res in
                            (("baseline", base_eval), ("pruned", pruned_eval), ("dfbf", dfbf_eval),
                             ("orig_img", original_eval)) if res is not None},
            "finetune_epoch_means": {str(k): v for k, v in epoch_means(history).items()},
            "synthetic_images": len(synthetic),
            "teacher_unchanged": teacher_unchanged,
            "head_unchanged": head_unchanged,
        }
        if self.run_dir is not None:
            self.run_dir.write_json(self.run_dir.report_json, result)
            self.run_dir.write_table(self.run_dir.report_csv, rows)
            if self.run_cfg.eval.plots:
                plots.plot_loss_curves(history, self.run_dir.root / "finetune_loss.png")
                plots.plot_image_grid(synthetic.images, self.run_dir.root / "synthetic_images.png")
        logger.info("Pipeline completed successfully")
        return result

    def sweep_gamma(self, gammas: Sequence[float], pruned: NetworkGraph, teacher: NetworkGraph,
                    images: np.ndarray) -> List[Dict[str, Any]]:
        """Independent fine-tunes per gamma on parallel workers sharing the read-only teacher"""
        logger.info(f"Sweeping gamma over {list(gammas)} with {self.config.threads} worker(s)")

        def work(gamma: float) -> Dict[str, Any]:
            cfg = self.run_cfg.model_copy(update={"distill": self.run_cfg.distill.model_copy(update={"gamma": gamma})})
            model, history = self.run_finetune(pruned, teacher, images, cfg=cfg,
                                               phase=f"finetune[gamma={gamma:g}]", save_as=None)
            result = self.run_eval(model, cfg=cfg, phase=f"eval[gamma={gamma:g}]")
            return {"gamma": gamma, "accuracy": result.accuracy,
                    "final_loss": history[-1].l_total if history else 0.0}

        try:
            with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                rows = list(pool.map(work, gammas))
        except Exception as e:
            logger.error(f"Gamma sweep failed: {e}")
            raise
        self._write_rows("sweep_gamma", rows)
        return rows

    def sweep_ratio(self, ratios: Sequence[float], teacher: NetworkGraph,
                    images: np.ndarray) -> List[Dict[str, Any]]:
        """Prune the teacher at every ratio and fine-tune each pruned copy on the same images"""
        logger.info(f"Sweeping prune ratio over {list(ratios)} with {self.config.threads} worker(s)")
        base_eval = self.run_eval(teacher, phase="eval_baseline")

        def work(ratio: float) -> Dict[str, Any]:
            cfg = self.run_cfg.with_overrides("prune", ratio=ratio)
            pruned, _, prune_report = self.run_prune(teacher, cfg, save=False)
            pruned_eval = self.run_eval(pruned, cfg=cfg, phase=f"eval_pruned[ratio={ratio:g}]")
            model, _ = self.run_finetune(pruned, teacher, images, cfg=cfg,
                                         phase=f"finetune[ratio={ratio:g}]", save_as=None)
            result = self.run_eval(model, cfg=cfg, phase=f"eval[ratio={ratio:g}]")
            return {
                "ratio": ratio,
                "backbone_params": pruned.num_parameters("backbone"),
                "removed_params_pct": prune_report.removed_params_pct,
                "removed_filters_pct": prune_report.removed_filters_pct_backbone,
                "baseline_accuracy": base_eval.accuracy,
                "pruned_accuracy": pruned_eval.accuracy,
                "accuracy": result.accuracy,
                "recovery": recovery(base_eval.accuracy, pruned_eval.accuracy, result.accuracy),
            }

        try:
            with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                rows = list(pool.map(work, ratios))
        except Exception as e:
            logger.error(f"Ratio sweep failed: {e}")
            raise
        self._write_rows("sweep_ratio", rows)
        return rows

    def sweep_taps(self, seeds: Sequence[int],
                   selections: Sequence[str] = ("all", "every_second", "output_only")) -> List[Dict[str, Any]]:
        """Full train/prune/synthesize per seed, then one fine-tune per tap selection"""
        rows = []
        for seed in seeds:
            cfg = self.run_cfg.with_seed(seed)
            logger.info(f"Tap ablation, seed {seed}")
            baseline, base_eval = self.run_train(cfg, save=False, phase=f"train[seed={seed}]")
            pruned, _, _ = self.run_prune(baseline, cfg, save=False)
            pruned_eval = self.run_eval(pruned, cfg=cfg, phase=f"eval_pruned[seed={seed}]")
            synthetic = self.run_synthesize(baseline, cfg, save=False, phase=f"synthesize[seed={seed}]")
            for selection in selections:
                tap_cfg = cfg.model_copy(update={"distill": cfg.distill.model_copy(update={"taps": selection})})
                model, _ = self.run_finetune(pruned, baseline, synthetic.images, cfg=tap_cfg,
                                             phase=f"finetune[seed={seed},taps={selection}]", save_as=None)
                result = self.run_eval(model, cfg=tap_cfg, phase=f"eval[seed={seed},taps={selection}]")
                rows.append({
                    "seed": seed,
                    "taps": selection,
                    "baseline_accuracy": base_eval.accuracy,
                    "pruned_accuracy": pruned_eval.accuracy,
                    "accuracy": result.accuracy,
                    "recovery": recovery(base_eval.accuracy, pruned_eval.accuracy, result.accuracy),
                })
        self._write_rows("sweep_taps", rows)
        return rows

    def _write_rows(self, name: str, rows: List[Dict[str, Any]]) -> None:
        if self.run_dir is not None:
            self.run_dir.write_table(self.run_dir.root / f"{name}.csv", rows)
            self.run_dir.write_json(self.run_dir.root / f"{name}.json", {"rows": rows})


def recovery(baseline: float, pruned: float, recovered: float) -> Optional[float]:
    """Fraction of the pruning-induced accuracy drop regained; None without a drop"""
    drop = baseline - pruned
    if drop <= 0:
        return None
    return (recovered - pruned) / drop


def comparison_rows(prune_report: PruneReport, baseline: EvalResult, pruned: EvalResult,
                    dfbf: EvalResult, original: Optional[EvalResult] = None) -> List[Dict[str, Any]]:
    def row(name: str, result: EvalResult, pruned_model: bool) -> Dict[str, Any]:
        return {
            "model": name,
            "accuracy": result.accuracy,
            "removed_params_pct": prune_report.removed_params_pct if pruned_model else 0.0,
            "removed_filters_pct": prune_report.removed_filters_pct_backbone if pruned_model else 0.0,
        }

    rows = [row(ROW_BASELINE, baseline, False), row(ROW_PRUNED, pruned, True)]
    if original is not None:
        rows.append(row(ROW_ORIGINAL, original, True))
    rows.append(row(ROW_DFBF, dfbf, True))
    return rows


def comparison_table(rows: List[Dict[str, Any]], title: str = "DFBF comparison") -> Table:
    table = Table(title=title)
    table.add_column("Model")
    table.add_column("Accuracy", justify="right")
    table.add_column("Removed Params in %", justify="right")
    table.add_column("Removed Filters in %", justify="right")
    for r in rows:
        table.add_row(r["model"], f"{100 * r['accuracy']:.2f}", f"{r['removed_params_pct']:.2f}",
                      f"{r['removed_filters_pct']:.2f}")
    return table


def rows_table(rows: List[Dict[str, Any]], title: str) -> Table:
    """Generic rich table over homogeneous dict rows"""
    table = Table(title=title)
    columns = list(rows[0]) if rows else []
    for column in columns:
        table.add_column(column)
    for r in rows:
        table.add_row(*[f"{v:.4f}" if isinstance(v, float) else "-" if v is None else str(v)
                        for v in (r[c] for c in columns)])
    return table

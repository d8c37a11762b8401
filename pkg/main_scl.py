import importlib
import logging
import sys
from enum import Enum
from types import ModuleType
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from modules.data import (
    DatasetContainer,
    derive_split,
    generate_synthetic_dataset,
    generator_spec_of,
    read_dataset,
    write_dataset,
)
from modules.data_types import AblationRow, MetricsReport, RunConfig
from modules.errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericalError,
    TrainingAborted,
)
from modules.evaluation import (
    evaluate_model,
    pca_project_2d,
    write_confusion_csv,
    write_embeddings_csv,
    write_projection_csv,
    write_report_json,
)
from modules.model import load_checkpoint, predict, save_checkpoint
from modules.optim import train_loop
from modules.scl_config import DEFAULT_CONFIG_PATH, apply_overrides, get_config, load_run_config
from modules.utils import (
    create_session_logger_id,
    get_logger,
    setup_logging,
    write_csv,
)

app = typer.Typer(no_args_is_help=True, add_completion=False)
console = Console()

ABLATION_HEADER = ("seed", "scl", "accuracy", "macro_recall", "macro_auc", "separation_gap")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


class Projection(str, Enum):
    pca2 = "pca2"


def _run_config(config: Optional[str], overrides: Dict[str, Any]) -> RunConfig:
    """Config file (or the configured default), then flag overrides, validated."""
    path = config or get_config("cli.default_config")
    return apply_overrides(load_run_config(path), overrides)


def _fit_model_to_data(run_cfg: RunConfig, ds: DatasetContainer) -> RunConfig:
    return apply_overrides(
        run_cfg,
        {
            "model.n_classes": ds.n_classes,
            "model.input_height": ds.height,
            "model.input_width": ds.width,
        },
    )


def _check_compatible(ds: DatasetContainer, n_classes: int):
    if ds.n_classes != n_classes:
        raise ContractError(
            f"dataset has {ds.n_classes} classes, model expects {n_classes}"
        )


def _metrics_table(title: str, report: MetricsReport) -> Table:
    table = Table(title=title)
    table.add_column("metric")
    table.add_column("value", justify="right")
    table.add_row("samples", str(report.n_samples))
    table.add_row("accuracy", f"{report.accuracy:.4f}")
    table.add_row("macro recall", f"{report.macro_recall:.4f}")
    if report.macro_ovr_auc is not None:
        table.add_row("macro OvR AUC", f"{report.macro_ovr_auc:.4f}")
    if report.separation is not None:
        table.add_row("separation gap", f"{report.separation.separation_gap:.4f}")
    for pair in report.top_confused_pairs:
        true_name = report.class_names[pair.true_class]
        predicted_name = report.class_names[pair.predicted_class]
        table.add_row(f"confused {true_name} -> {predicted_name}", str(pair.count))
    return table


@app.command("gen-data")
def gen_data(
    out: str = typer.Option(..., "--out", "-o", help="Dataset file to write"),
    classes: Optional[int] = typer.Option(None, "--classes", help="Number of classes K"),
    per_class: Optional[int] = typer.Option(None, "--per-class", help="Images per class"),
    height: Optional[int] = typer.Option(None, "--height", help="Image height in pixels"),
    width: Optional[int] = typer.Option(None, "--width", help="Image width in pixels"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Generator seed (fixes the class codes)"),
    confusable_pairs: Optional[int] = typer.Option(
        None, "--confusable-pairs", help="Class pairs differing in a single band"
    ),
    split: Optional[str] = typer.Option(None, "--split", help="Options: ('train', 'val', 'test')"),
    contrast_gain: Optional[float] = typer.Option(
        None, "--contrast-gain", help="Rod contrast multiplier (domain shift)"
    ),
    intensity_offset: Optional[float] = typer.Option(
        None, "--intensity-offset", help="Rod intensity offset (domain shift)"
    ),
    noise_sigma: Optional[float] = typer.Option(None, "--noise-sigma", help="Pixel noise std"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Run config (JSON or YAML)"),
):
    """Generate a synthetic banded-rod dataset"""
    run_cfg = _run_config(
        config,
        {
            "generator.n_classes": classes,
            "generator.images_per_class": per_class,
            "generator.height": height,
            "generator.width": width,
            "generator.seed": seed,
            "generator.confusable_pairs": confusable_pairs,
            "generator.split": split,
            "generator.contrast_gain": contrast_gain,
            "generator.intensity_offset": intensity_offset,
            "generator.noise_sigma": noise_sigma,
        },
    )
    spec = run_cfg.generator
    ds = generate_synthetic_dataset(spec)
    write_dataset(ds, out)
    get_logger().info(
        f"📂 Wrote {len(ds)} images ({spec.n_classes} classes, {spec.split} split) to {out}"
    )


@app.command()
def train(
    data: str = typer.Option(..., "--data", "-d", help="Training dataset file"),
    out: str = typer.Option(..., "--out", "-o", help="Checkpoint file to write"),
    log: str = typer.Option(..., "--log", "-l", help="Training log CSV to write"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Run config (JSON or YAML)"),
    no_scl: bool = typer.Option(False, "--no-scl", help="Baseline arm: drop the contrastive term"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Training seed"),
    iterations: Optional[int] = typer.Option(None, "--iterations", help="Training iterations"),
    val: Optional[str] = typer.Option(None, "--val", help="Validation dataset to monitor"),
):
    """Train the encoder and classification head"""
    run_cfg = _run_config(
        config,
        {
            "train.scl_enabled": False if no_scl else None,
            "train.seed": seed,
            "train.iterations": iterations,
        },
    )
    train_ds = read_dataset(data)
    val_ds = read_dataset(val) if val else None
    run_cfg = _fit_model_to_data(run_cfg, train_ds)

    params, train_log = train_loop(train_ds, val_ds, run_cfg.model, run_cfg.train)
    save_checkpoint(params, run_cfg.model, out)
    train_log.write_csv(log)
    get_logger().info(f"📂 Wrote checkpoint {out} and log {log}")


@app.command("eval")
def evaluate(
    data: str = typer.Option(..., "--data", "-d", help="Dataset to evaluate on"),
    ckpt: str = typer.Option(..., "--ckpt", help="Checkpoint file"),
    report: str = typer.Option(..., "--report", "-r", help="Metrics report JSON to write"),
    confusion: str = typer.Option(..., "--confusion", help="Confusion matrix CSV to write"),
    seed: int = typer.Option(0, "--seed", help="Seed for sampled separation pairs"),
):
    """Evaluate a checkpoint: accuracy, macro recall, macro AUC, confusion and separation"""
    params, model_cfg = load_checkpoint(ckpt)
    ds = read_dataset(data)
    _check_compatible(ds, model_cfg.n_classes)

    metrics, _ = evaluate_model(ds, params, seed)
    write_report_json(metrics, report)
    write_confusion_csv(metrics, confusion)
    console.print(_metrics_table(f"Evaluation of {ckpt} on {data}", metrics))
    get_logger().info(f"📂 Wrote report {report} and confusion matrix {confusion}")


@app.command()
def embed(
    data: str = typer.Option(..., "--data", "-d", help="Dataset to embed"),
    ckpt: str = typer.Option(..., "--ckpt", help="Checkpoint file"),
    out: str = typer.Option(..., "--out", "-o", help="CSV to write"),
    project: Optional[Projection] = typer.Option(
        None, "--project", help="Write a 2D projection instead of raw embeddings"
    ),
):
    """Export embeddings, or their 2D PCA projection"""
    params, model_cfg = load_checkpoint(ckpt)
    ds = read_dataset(data)
    _check_compatible(ds, model_cfg.n_classes)

    embeddings, _ = predict(ds.images, params)
    if project is Projection.pca2:
        coords, explained = pca_project_2d(embeddings)
        write_projection_csv(out, coords, ds.labels)
        get_logger().info(
            f"📊 PCA explained variance: {explained[0]:.4f}, {explained[1]:.4f}"
        )
    else:
        write_embeddings_csv(out, embeddings, ds.labels)
    get_logger().info(f"📂 Wrote {len(ds)} rows to {out}")


def _ablation_row(seed: str, scl: bool, report: MetricsReport) -> AblationRow:
    return AblationRow(
        seed=seed,
        scl="true" if scl else "false",
        accuracy=report.accuracy,
        macro_recall=report.macro_recall,
        macro_auc=report.macro_ovr_auc,
        separation_gap=report.separation.separation_gap,
    )


def run_ablation(
    train_ds: DatasetContainer,
    test_ds: DatasetContainer,
    run_cfg: RunConfig,
    n_seeds: int,
    external_ds: Optional[DatasetContainer] = None,
    logger=None,
) -> List[AblationRow]:
    """
    Train with and without SCL for each seed, evaluate both on the held-out
    set, and close with a mean-difference row (SCL minus baseline).
    """
    logger = logger or get_logger()
    rows: List[AblationRow] = []
    external_rows: List[AblationRow] = []
    diffs: List[np.ndarray] = []

    for i in range(n_seeds):
        seed = run_cfg.train.seed + i
        arm_rows = {}
        for scl in (True, False):
            logger.info(f"🧪 Ablation seed {seed}, scl={scl}")
            train_cfg = run_cfg.train.model_copy(update={"seed": seed, "scl_enabled": scl})
            params, _ = train_loop(train_ds, None, run_cfg.model, train_cfg, logger)
            report, _ = evaluate_model(test_ds, params, seed)
            arm_rows[scl] = _ablation_row(str(seed), scl, report)
            rows.append(arm_rows[scl])
            if external_ds is not None:
                external_report, _ = evaluate_model(external_ds, params, seed)
                external_rows.append(_ablation_row(f"{seed}:external", scl, external_report))
        diffs.append(_metric_vector(arm_rows[True]) - _metric_vector(arm_rows[False]))

    mean_diff = np.mean(diffs, axis=0)
    summary = AblationRow(
        seed="mean_diff",
        scl="scl-baseline",
        accuracy=mean_diff[0],
        macro_recall=mean_diff[1],
        macro_auc=mean_diff[2],
        separation_gap=mean_diff[3],
    )
    return rows + external_rows + [summary]


def _metric_vector(row: AblationRow) -> np.ndarray:
    return np.array([row.accuracy, row.macro_recall, row.macro_auc, row.separation_gap])


def _ablation_table(rows: Sequence[AblationRow]) -> Table:
    table = Table(title="SCL ablation")
    for column in ABLATION_HEADER:
        table.add_column(column, justify="left" if column in ("seed", "scl") else "right")
    for row in rows:
        table.add_row(
            row.seed,
            row.scl,
            f"{row.accuracy:+.4f}" if row.seed == "mean_diff" else f"{row.accuracy:.4f}",
            f"{row.macro_recall:.4f}",
            f"{row.macro_auc:.4f}",
            f"{row.separation_gap:.4f}",
        )
    return table


@app.command()
def ablate(
    data: str = typer.Option(..., "--data", "-d", help="Training dataset file"),
    out: str = typer.Option(..., "--out", "-o", help="Ablation table CSV to write"),
    seeds: int = typer.Option(3, "--seeds", "-k", min=1, help="Number of seeds"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Run config (JSON or YAML)"),
    test: Optional[str] = typer.Option(
        None, "--test", help="Held-out dataset; regenerated from the training metadata if omitted"
    ),
    external: Optional[str] = typer.Option(
        None, "--external", help="Extra domain-shifted dataset to report on"
    ),
    iterations: Optional[int] = typer.Option(None, "--iterations", help="Training iterations"),
):
    """Train with and without SCL over several seeds and tabulate held-out metrics"""
    run_cfg = _run_config(config, {"train.iterations": iterations})
    train_ds = read_dataset(data)
    run_cfg = _fit_model_to_data(run_cfg, train_ds)

    if test:
        test_ds = read_dataset(test)
    else:
        per_class = generator_spec_of(train_ds).images_per_class
        test_ds = derive_split(train_ds, "test", max(2, per_class // 2))
    external_ds = read_dataset(external) if external else None
    for ds in (test_ds, external_ds):
        if ds is not None:
            _check_compatible(ds, run_cfg.model.n_classes)

    rows = run_ablation(train_ds, test_ds, run_cfg, seeds, external_ds)
    write_csv(
        out,
        ABLATION_HEADER,
        (
            (r.seed, r.scl, r.accuracy, r.macro_recall, r.macro_auc, r.separation_gap)
            for r in rows
        ),
    )
    console.print(_ablation_table(rows))
    get_logger().info(f"📂 Wrote ablation table {out}")


def _click_exceptions(command) -> ModuleType:
    """The exceptions module of the click build the typer command runs on, standalone or vendored."""
    for cls in type(command).__mro__:
        if cls.__name__ == "Command":
            package = cls.__module__.rpartition(".")[0] or cls.__module__
            return importlib.import_module(f"{package}.exceptions")
    raise TypeError(f"{type(command).__name__} is not a click command")


def _configure_logging() -> logging.Logger:
    try:
        return setup_logging(
            create_session_logger_id(),
            get_config("logging.log_dir"),
            get_config("logging.level"),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"Invalid logging settings in {DEFAULT_CONFIG_PATH}: {e}")


def _invoke(argv: Sequence[str], logger: logging.Logger) -> int:
    command = typer.main.get_command(app)
    click_exceptions = _click_exceptions(command)
    try:
        result = command.main(args=list(argv), prog_name="scl", standalone_mode=False)
    except click_exceptions.ClickException as e:
        e.show()
        return EXIT_VALIDATION
    except click_exceptions.Abort:
        logger.error("Aborted")
        return EXIT_VALIDATION
    return result if isinstance(result, int) else EXIT_OK


def run_command(argv: Sequence[str]) -> int:
    """Run one CLI invocation and map its outcome to an exit code."""
    logger = get_logger()
    try:
        logger = _configure_logging()
        return _invoke(argv, logger)
    except (TrainingAborted, NumericalError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (FormatError, FileNotFoundError, OSError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except (ValidationError, ConfigError, ContractError, DimensionError, CapacityError) as e:
        logger.error(f"Validation error: {e}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(run_command(sys.argv[1:]))

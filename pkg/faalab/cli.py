"""
Command-line entry point.

Commands:
    gen-data  - generate a synthetic world and write it to disk
    train     - run the clustering / metric-learning loop, keep the best checkpoint
    eval      - evaluate a checkpoint on the test partition
    ablate    - run the six-configuration ablation grid
    selftest  - gradient checks, metric and loss oracles, shard equivalence
"""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from faalab import metrics
from faalab.ablation import run_ablation, write_ablation
from faalab.config import configure_logging, get_settings
from faalab.errors import ConfigError, FAAError, NonFiniteLossError
from faalab.evalsuite import PROTOCOLS, evaluate_model, write_report
from faalab.runconfig import RunConfig, dump_run_config, load_run_config, parse_run_config
from faalab.selftest import DIFFERENTIABLE_OPS, run_selftest
from faalab.synthworld import generate_world, read_dataset, write_dataset
from faalab.trainer import checkpoint_digest, load_checkpoint, train, write_run_outputs

logger = logging.getLogger(__name__)

PROTOCOL_CHOICES = {
    "all": PROTOCOLS,
    "veri": ("verification",),
    "match": ("matching",),
    "retr": ("retrieval",),
}


def handle_errors(func):
    """Turn library errors into a one-line message and a non-zero exit code."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except FAAError as e:
            raise click.ClickException(str(e))
    return wrapper


def _override_train(config: RunConfig, updates: dict) -> RunConfig:
    """Apply CLI overrides to the train section and re-validate the whole config."""
    if not updates:
        return config
    data = config.canonical_dict()
    data["train"].update(updates)
    return parse_run_config(data)


def _prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


@click.group()
@click.option("--threads", type=click.IntRange(1, 256), default=None,
              help="Worker threads for scoring and clustering (default: FAA_THREADS or 1)")
@click.option("--log-level", default=None, help="Logging level (default: FAA_LOG_LEVEL or INFO)")
@click.pass_context
def cli(ctx, threads: Optional[int], log_level: Optional[str]):
    """Face-voice association lab."""
    settings = get_settings()
    configure_logging(level=log_level or ("DEBUG" if settings.debug else settings.log_level))
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads or settings.threads


@cli.command("gen-data")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run config (YAML)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default=None, help="Dataset directory (default: FAA_DATA_DIR)")
@click.option("--force", is_flag=True, help="Write into a non-empty directory")
@handle_errors
def gen_data(config_path: Optional[str], out_dir: Optional[str], force: bool):
    """Generate a synthetic world and write it to OUT."""
    config = load_run_config(config_path)
    out = Path(out_dir or get_settings().data_dir)
    _prepare_out_dir(out, force)
    dataset = generate_world(config.world)
    write_dataset(dataset, out)

    click.echo(f"{'partition':<10} {'video':>7} {'audio':>7} {'face':>7} {'id':>5}")
    for row in dataset.summary():
        click.echo(f"{row['partition']:<10} {row['video']:>7} {row['audio']:>7} {row['face']:>7} {row['id']:>5}")


@cli.command("train")
@click.option("--data", "data_dir", type=click.Path(file_okay=False),
              default=None, help="Dataset directory (default: FAA_DATA_DIR)")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run config (YAML)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default=None, help="Run output directory (default: FAA_OUTPUT_DIR)")
@click.option("--seed", type=int, default=None, help="Override train.seed")
@click.option("--debug-nan-at-batch", type=int, default=None, help="Force a NaN loss at this global batch index")
@click.option("--dump-clusters", is_flag=True, help="Write clusters_epoch{p}.json files")
@click.pass_context
@handle_errors
def train_cmd(ctx, data_dir: Optional[str], config_path: Optional[str], out_dir: Optional[str], seed: Optional[int],
              debug_nan_at_batch: Optional[int], dump_clusters: bool):
    """Train on DATA and write the best checkpoint and history to OUT."""
    config = load_run_config(config_path)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if debug_nan_at_batch is not None:
        updates["debug_nan_at_batch"] = debug_nan_at_batch
    if dump_clusters:
        updates["dump_clusters"] = True
    config = _override_train(config, updates)

    settings = get_settings()
    dataset = read_dataset(data_dir or settings.data_dir)
    out = Path(out_dir or settings.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(config, out / "config.yaml")
    try:
        result = train(dataset, config.train, config.ablation, config.eval, out_dir=out, threads=ctx.obj["threads"])
    except NonFiniteLossError as e:
        (out / "diagnostic.json").write_text(json.dumps(e.diagnostic(), indent=2, sort_keys=True) + "\n")
        raise
    ckpt = write_run_outputs(result, out)
    metrics.write_metrics(out / "metrics.prom")
    click.echo(
        f"best epoch {result.best.epoch}: val AUC {result.best.val_metric:.4f}; "
        f"final C {result.final_progress.clusters}; checkpoint {ckpt}"
    )


@cli.command("eval")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True, help="Checkpoint file")
@click.option("--data", "data_dir", type=click.Path(file_okay=False),
              default=None, help="Dataset directory (default: FAA_DATA_DIR)")
@click.option("--protocols", type=click.Choice(sorted(PROTOCOL_CHOICES)), default="all", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Report path (JSON)")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run config (YAML)")
@click.option("--scoring", type=click.Choice(["fusion", "cosine"]), default=None,
              help="Pair scorer (default: from ablation.fusion_scoring)")
@click.option("--oracle", is_flag=True, help="Score with ground-truth identities (plumbing check)")
@click.pass_context
@handle_errors
def eval_cmd(ctx, model_path: str, data_dir: Optional[str], protocols: str, out_path: str, config_path: Optional[str],
             scoring: Optional[str], oracle: bool):
    """Evaluate a checkpoint on the test partition of DATA."""
    config = load_run_config(config_path)
    dataset = read_dataset(data_dir or get_settings().data_dir)
    checkpoint = load_checkpoint(model_path)
    if oracle:
        mode = "oracle"
    else:
        mode = scoring or ("fusion" if config.ablation.fusion_scoring else "cosine")
    report = evaluate_model(
        checkpoint.restore(), dataset.partition("test"), config.eval,
        scoring=mode,
        protocols=PROTOCOL_CHOICES[protocols],
        threads=ctx.obj["threads"],
        config_hash=config.config_hash(),
        checkpoint_digest=checkpoint_digest(model_path),
    )
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    for key, value in report.metric_grid().items():
        if value is not None:
            click.echo(f"{key:<10} {value:.4f}")


@cli.command("ablate")
@click.option("--data", "data_dir", type=click.Path(file_okay=False),
              default=None, help="Dataset directory (default: FAA_DATA_DIR)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run config (YAML)")
@click.option("--seed", type=int, default=None, help="Override train.seed")
@click.pass_context
@handle_errors
def ablate_cmd(ctx, data_dir: Optional[str], out_dir: str, config_path: Optional[str], seed: Optional[int]):
    """Run the ablation grid on DATA and write ablation.md / ablation.json to OUT."""
    config = load_run_config(config_path)
    config = _override_train(config, {} if seed is None else {"seed": seed})
    dataset = read_dataset(data_dir or get_settings().data_dir)
    rows = run_ablation(dataset, config, threads=ctx.obj["threads"])
    write_ablation(rows, out_dir, config.config_hash())
    click.echo((Path(out_dir) / "ablation.md").read_text())


@cli.command("selftest")
@click.option("--inject-fault", type=click.Choice(DIFFERENTIABLE_OPS), default=None,
              help="Perturb the backward rule of one op (the run must then fail)")
@click.option("--seed", type=int, default=0, show_default=True)
def selftest_cmd(inject_fault: Optional[str], seed: int):
    """Run gradient checks and oracles; exit 0 only if all pass."""
    report = run_selftest(seed=seed, fault=inject_fault)
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        click.echo(f"[{status}] {check.name} {check.detail}".rstrip())
    click.echo(f"{len(report.checks) - len(report.failures)}/{len(report.checks)} passed in {report.seconds:.1f}s")
    if not report.passed:
        names = ", ".join(c.name for c in report.failures)
        click.echo(f"Failed: {names}", err=True)
        sys.exit(1)


def main():
    cli(obj={})


if __name__ == "__main__":
    main()

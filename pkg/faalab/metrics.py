"""
Prometheus metrics for training, evaluation and self-tests.

Collectors live on a dedicated registry so that several runs inside one
process (ablation grids, tests) do not collide with the global default.
"""
import logging
import time
from pathlib import Path
from typing import Union

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, generate_latest

logger = logging.getLogger(__name__)

REGISTRY = CollectorRegistry(auto_describe=True)

# Training metrics
train_batches_total = Counter(
    'faa_train_batches_total',
    'Mini-batches processed by the trainer',
    ['status'],  # trained, skipped
    registry=REGISTRY,
)

epoch_duration_seconds = Histogram(
    'faa_epoch_duration_seconds',
    'Wall time of one training epoch (clustering + metric learning + validation)',
    buckets=(0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0, 60.0, 120.0),
    registry=REGISTRY,
)

cluster_count = Gauge(
    'faa_cluster_count',
    'Current number of k-means clusters C',
    registry=REGISTRY,
)

val_auc = Gauge(
    'faa_val_auc',
    'Verification AUC on the validation partition after the last epoch',
    registry=REGISTRY,
)

# Evaluation metrics
eval_trials_total = Counter(
    'faa_eval_trials_total',
    'Evaluation trials scored',
    ['protocol'],  # verification, matching, retrieval
    registry=REGISTRY,
)

# Self-test metrics
selftest_checks_total = Counter(
    'faa_selftest_checks_total',
    'Self-test checks executed',
    ['result'],  # passed, failed
    registry=REGISTRY,
)


def track_batch(trained: bool) -> None:
    """
    Count a processed mini-batch.
    """
    train_batches_total.labels(status='trained' if trained else 'skipped').inc()


def track_epoch_start() -> float:
    """
    Track the start of an epoch.
    """
    return time.perf_counter()


def track_epoch_complete(start_time: float, clusters: int, auc: float) -> float:
    """
    Track the end of an epoch; returns its wall time in seconds.
    """
    duration = time.perf_counter() - start_time
    epoch_duration_seconds.observe(duration)
    cluster_count.set(clusters)
    val_auc.set(auc)
    return duration


def track_trials(protocol: str, count: int) -> None:
    """
    Count scored evaluation trials for a protocol.
    """
    eval_trials_total.labels(protocol=protocol).inc(count)


def track_selftest(passed: bool) -> None:
    """
    Count one self-test check.
    """
    selftest_checks_total.labels(result='passed' if passed else 'failed').inc()


def render_metrics() -> bytes:
    """
    Render the registry in Prometheus text exposition format.
    """
    return generate_latest(REGISTRY)


def write_metrics(path: Union[str, Path]) -> None:
    """
    Write the current metrics snapshot to a file.
    """
    Path(path).write_bytes(render_metrics())
    logger.debug(f"Wrote metrics snapshot to {path}")

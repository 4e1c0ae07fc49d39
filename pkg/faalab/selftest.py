"""
Self-test suite: gradient checks, metric and loss oracles, shard equivalence.

Every check is seeded; ``run_selftest`` returns a report whose ``passed``
property drives the CLI exit code. ``fault`` scales the backward rule of one
primitive so that the checks depending on it fail by name.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from sklearn.metrics import average_precision_score, roc_curve

from faalab import metrics
from faalab import numerics as nx
from faalab.errors import ConfigError
from faalab.evalsuite import auc, average_precision, eer
from faalab.fusion import match_scores
from faalab.model import ArchConfig, build_model
from faalab.numerics import Tensor, grad_check
from faalab.objectives import (
    MiningConfig,
    build_match_batch,
    combined_loss,
    matching_ce_loss,
    mine_hard_negatives,
    mine_pairs,
    ms_loss,
    ms_loss_from_similarities,
    ms_loss_reference,
)
from faalab.trainer import gather_global_pool

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
GRAD_STEP = 1e-5
ORACLE_INSTANCES = 1000

DIFFERENTIABLE_OPS = (
    "add", "sub", "mul", "neg", "scale", "add_scalar", "add_bias", "exp", "log", "log1p",
    "relu", "gelu", "clamp", "sum", "reshape", "transpose", "concat", "take", "matmul", "bmm",
    "softmax_rows", "layer_norm", "l2_normalize_rows", "unit_clip",
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SelfTestReport:
    checks: List[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(CheckResult(name, bool(passed), detail))
        metrics.track_selftest(bool(passed))
        if not passed:
            logger.warning(f"Self-test {name} FAILED: {detail}")


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def _away_from(rng: np.random.Generator, shape, points=(0.0,), gap=0.15, spread=1.5) -> np.ndarray:
    """Random values at least ``gap`` from every kink in ``points``."""
    values = rng.uniform(-spread, spread, size=shape)
    for p in points:
        close = np.abs(values - p) < gap
        values[close] = p + np.sign(values[close] - p + 1e-12) * (gap + rng.uniform(0, 0.2, size=close.sum()))
    return values


def op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[Dict[str, Tensor]], Tensor], Dict[str, Tensor]]]:
    """(op name, forward using the params, params) for every primitive."""
    def p(name, data):
        return nx.parameter(np.asarray(data, dtype=np.float64), name)

    def n(*shape):
        return rng.standard_normal(shape)

    return [
        ("add", lambda q: nx.add(q["a"], q["b"]), {"a": p("a", n(3, 4)), "b": p("b", n(3, 4))}),
        ("sub", lambda q: nx.sub(q["a"], q["b"]), {"a": p("a", n(3, 4)), "b": p("b", n(3, 4))}),
        ("mul", lambda q: nx.mul(q["a"], q["b"]), {"a": p("a", n(3, 4)), "b": p("b", n(3, 4))}),
        ("neg", lambda q: nx.neg(q["a"]), {"a": p("a", n(3, 4))}),
        ("scale", lambda q: nx.scale(q["a"], 1.7), {"a": p("a", n(3, 4))}),
        ("add_scalar", lambda q: nx.add_scalar(q["a"], 0.3), {"a": p("a", n(3, 4))}),
        ("add_bias", lambda q: nx.add_bias(q["x"], q["b"]), {"x": p("x", n(3, 4)), "b": p("b", n(4))}),
        ("exp", lambda q: nx.exp(q["a"]), {"a": p("a", rng.uniform(-1, 1, (3, 4)))}),
        ("log", lambda q: nx.log(q["a"]), {"a": p("a", rng.uniform(0.5, 2.0, (3, 4)))}),
        ("log1p", lambda q: nx.log1p(q["a"]), {"a": p("a", rng.uniform(0.0, 2.0, (3, 4)))}),
        ("relu", lambda q: nx.relu(q["a"]), {"a": p("a", _away_from(rng, (3, 4)))}),
        ("gelu", lambda q: nx.gelu(q["a"]), {"a": p("a", n(3, 4))}),
        ("clamp", lambda q: nx.clamp(q["a"], -1.0, 1.0),
         {"a": p("a", _away_from(rng, (3, 4), points=(-1.0, 1.0), gap=0.1, spread=2.0))}),
        ("sum", lambda q: nx.sum(q["a"], axis=1), {"a": p("a", n(3, 4))}),
        ("reshape", lambda q: nx.reshape(q["a"], (2, 6)), {"a": p("a", n(3, 4))}),
        ("transpose", lambda q: nx.transpose(q["a"], (1, 0, 2)), {"a": p("a", n(2, 3, 4))}),
        ("concat", lambda q: nx.concat([q["a"], q["b"]], axis=1), {"a": p("a", n(3, 2)), "b": p("b", n(3, 4))}),
        ("take", lambda q: nx.take(q["a"], [0, 2, 2, 1], axis=0), {"a": p("a", n(3, 4))}),
        ("matmul", lambda q: nx.matmul(q["a"], q["b"]), {"a": p("a", n(3, 4)), "b": p("b", n(4, 5))}),
        ("bmm", lambda q: nx.bmm(q["a"], q["b"]), {"a": p("a", n(2, 3, 4)), "b": p("b", n(2, 4, 2))}),
        ("softmax_rows", lambda q: nx.softmax_rows(q["a"]), {"a": p("a", n(3, 5))}),
        ("layer_norm", lambda q: nx.layer_norm(q["x"], q["g"], q["b"]),
         {"x": p("x", n(3, 4)), "g": p("g", 1.0 + 0.1 * n(4)), "b": p("b", n(4))}),
        ("l2_normalize_rows", lambda q: nx.l2_normalize_rows(q["a"]), {"a": p("a", n(3, 4))}),
        ("unit_clip", lambda q: nx.cosine_similarity_matrix(q["a"], q["b"]),
         {"a": p("a", n(3, 4)), "b": p("b", n(5, 4))}),
    ]


def check_op_gradients(report: SelfTestReport, seed: int = 0) -> None:
    rng = np.random.default_rng([seed, 11])
    for name, forward, params in op_cases(rng):
        weights = nx.constant(rng.standard_normal(forward(params).shape))

        def scalar(forward=forward, params=params, weights=weights):
            return nx.sum(nx.mul(forward(params), weights))

        result = grad_check(scalar, params, tolerance=GRAD_TOLERANCE, step=GRAD_STEP, name=name)
        report.add(f"grad:{name}", result.passed, f"max relative error {result.max_error:.2e}")


def check_objective_gradient(report: SelfTestReport, seed: int = 0) -> None:
    """Grad check of the full combined objective through encoders, fusion and head."""
    arch = ArchConfig(embed_dim=8, encoder_hidden=8, fusion_hidden=8, fusion_layers=1, fusion_heads=2,
                      ffn_mult=2, zero_init_head=False)
    model = build_model(arch, face_dim=6, voice_dim=5, seed=seed)
    rng = np.random.default_rng([seed, 12])
    faces = nx.constant(rng.standard_normal((6, 6)))
    voices = nx.constant(rng.standard_normal((6, 5)))
    labels = np.array([0, 0, 1, 1, 2, 2])
    stacked_labels = np.concatenate([labels, labels])
    mining = MiningConfig()

    # pair selection and negatives are frozen at the starting point
    face_embs = model.encode("face", faces)
    voice_embs = model.encode("voice", voices)
    stacked = nx.concat([face_embs, voice_embs], axis=0)
    selection = mine_pairs(nx.cosine_similarity_matrix(stacked, stacked), stacked_labels, mining)
    match = build_match_batch(labels, labels, mine_hard_negatives(face_embs, voice_embs, labels, labels, 1))

    def objective():
        f = model.encode("face", faces)
        v = model.encode("voice", voices)
        s = nx.concat([f, v], axis=0)
        l_ms = ms_loss_from_similarities(nx.cosine_similarity_matrix(s, s), selection, mining)
        probs = match_scores(nx.take(f, match.face_idx), nx.take(v, match.voice_idx), model.fusion)
        return combined_loss(l_ms, matching_ce_loss(probs, match.targets), 0.9)

    result = grad_check(objective, model.named_parameters(), tolerance=GRAD_TOLERANCE, step=GRAD_STEP,
                        name="objective", max_elements=6, seed=seed)
    report.add("grad:objective", result.passed,
               f"max relative error {result.max_error:.2e} (worst {result.worst})")


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def auc_pair_count(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def eer_sweep(scores: np.ndarray, labels: np.ndarray) -> float:
    """EER from the full ROC sweep, interpolated where miss and false-alarm rates cross."""
    fpr, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    fnr = 1.0 - tpr
    diff = fpr - fnr
    k = int(np.argmax(diff >= 0))
    if k == 0:
        return float(fpr[0])
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))


def _random_binary(rng: np.random.Generator, with_ties: bool) -> Tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(2, 51))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = np.round(rng.uniform(size=n), 1) if with_ties else rng.uniform(size=n)
    return scores, labels


def check_metric_oracles(report: SelfTestReport, seed: int = 0, instances: int = ORACLE_INSTANCES) -> None:
    rng = np.random.default_rng([seed, 13])
    worst_auc = worst_eer = worst_ap = 0.0
    for i in range(instances):
        scores, labels = _random_binary(rng, with_ties=i % 2 == 0)
        worst_auc = max(worst_auc, abs(auc(scores, labels) - auc_pair_count(scores, labels)))
        worst_eer = max(worst_eer, abs(eer(scores, labels) - eer_sweep(scores, labels)))
        relevance = labels.astype(bool)
        worst_ap = max(worst_ap, abs(
            average_precision(relevance) - average_precision_score(relevance, -np.arange(len(relevance)))
        ))
    report.add("oracle:auc", worst_auc <= 1e-12, f"max deviation {worst_auc:.2e}")
    report.add("oracle:eer", worst_eer <= 1e-9, f"max deviation {worst_eer:.2e}")
    report.add("oracle:average_precision", worst_ap <= 1e-12, f"max deviation {worst_ap:.2e}")

    ce = matching_ce_loss(np.array([0.9, 0.2]), [1, 0]).item()
    expected = -(np.log(0.9) + np.log(0.8)) / 2
    report.add("oracle:matching_ce", abs(ce - expected) <= 1e-12, f"{ce:.12f} vs {expected:.12f}")


def check_loss_oracle(report: SelfTestReport, seed: int = 0, instances: int = ORACLE_INSTANCES) -> None:
    rng = np.random.default_rng([seed, 14])
    worst = 0.0
    subset_ok = True
    for _ in range(instances):
        n = int(rng.integers(2, 17)) * 2
        embeddings = rng.standard_normal((n, 8))
        labels = rng.integers(0, max(2, n // 3), size=n)
        config = MiningConfig(rule="ms_original" if rng.random() < 0.5 else "as_paper",
                              epsilon=float(rng.choice([0.0, 0.1, 0.5])))
        fast = ms_loss(nx.constant(embeddings), labels, config).item()
        worst = max(worst, abs(fast - ms_loss_reference(embeddings, labels, config)))
        sims = nx.cosine_similarity_matrix(nx.constant(embeddings), nx.constant(embeddings))
        strict = mine_pairs(sims, labels, config.model_copy(update={"rule": "as_paper"})).positives
        loose = mine_pairs(sims, labels, config.model_copy(update={"rule": "ms_original"})).positives
        subset_ok = subset_ok and not np.any(strict & ~loose)
    report.add("oracle:ms_loss", worst <= 1e-10, f"max deviation {worst:.2e}")
    report.add("invariant:as_paper_subset", subset_ok)


def check_shard_equivalence(report: SelfTestReport, seed: int = 0, pools: int = 100) -> None:
    rng = np.random.default_rng([seed, 15])
    ok = True
    for _ in range(pools):
        size = int(rng.integers(8, 33))
        faces = rng.standard_normal((size, 6))
        voices = rng.standard_normal((size, 6))
        labels = rng.integers(0, 4, size=size)
        labels[0], labels[1] = 0, 1
        k = int(rng.integers(1, 4))
        reference = mine_hard_negatives(faces, voices, labels, labels, k)
        for workers in (1, 2, 4):
            shards = [(faces[s], voices[s], labels[s]) for s in np.array_split(np.arange(size), workers)]
            pool = gather_global_pool(shards)
            ok = ok and mine_hard_negatives(pool.face_embs, pool.voice_embs, pool.labels, pool.labels, k) == reference
    report.add("invariant:shard_equivalence", ok)


def run_selftest(seed: int = 0, fault: Optional[str] = None) -> SelfTestReport:
    """
    Run every check.

    Raises:
        ConfigError: If ``fault`` names an unknown primitive
    """
    if fault is not None and fault not in DIFFERENTIABLE_OPS:
        raise ConfigError(f"unknown op '{fault}' for fault injection; choose from {', '.join(DIFFERENTIABLE_OPS)}")
    started = time.perf_counter()
    report = SelfTestReport()
    if fault is not None:
        logger.info(f"Injecting a backward fault into '{fault}'")
        with nx.inject_fault(fault):
            check_op_gradients(report, seed)
            check_objective_gradient(report, seed)
    else:
        check_op_gradients(report, seed)
        check_objective_gradient(report, seed)
    check_metric_oracles(report, seed)
    check_loss_oracle(report, seed)
    check_shard_equivalence(report, seed)
    report.seconds = time.perf_counter() - started
    logger.info(
        f"Self-test: {len(report.checks) - len(report.failures)}/{len(report.checks)} checks passed "
        f"in {report.seconds:.1f}s"
    )
    return report

"""
Evaluation protocols and metric primitives.

Protocols:
    verification - (face, voice, same-identity?) trials scored by AUC and EER
    matching     - 1:2 matching, probe in one modality against two candidates in the other
    retrieval    - cosine shortlist re-ranked by the fusion score, scored by mAP

Restrictions:
    U - identities drawn freely
    G - every identity in a trial shares the probe's group attribute
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from faalab import metrics
from faalab.errors import ConfigError, DegenerateInputError, ShapeError
from faalab.fusion import cosine_scores, match_scores
from faalab.model import ModelParams
from faalab.numerics import constant
from faalab.synthworld import VideoRecord

logger = logging.getLogger(__name__)

PROTOCOLS = ("verification", "matching", "retrieval")
DIRECTIONS = ("V2F", "F2V", "symmetric")
RESTRICTIONS = ("U", "G")
SCORING_MODES = ("fusion", "cosine", "oracle")
_SCORE_CHUNK = 256


class SampleRef(NamedTuple):
    """One face or voice sample: its video and position inside that video."""

    video_id: int
    index: int


# A scorer maps aligned lists of face refs and voice refs to one score per pair.
Scorer = Callable[[Sequence[SampleRef], Sequence[SampleRef]], np.ndarray]


@dataclass(frozen=True)
class VerificationTrial:
    face: SampleRef
    voice: SampleRef
    label: int


@dataclass(frozen=True)
class MatchingTrial:
    """Probe in one modality, two candidates in the other; ``answer`` indexes the true match."""

    probe: SampleRef
    candidates: Tuple[SampleRef, SampleRef]
    answer: int


@dataclass(frozen=True)
class RetrievalTrial:
    """Probe with the gallery of the other modality; ``relevant`` holds gallery positions."""

    probe: SampleRef
    gallery: Tuple[SampleRef, ...]
    relevant: frozenset


@dataclass
class TrialList:
    protocol: str
    direction: str
    restriction: str
    seed: int
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


class EvalConfig(BaseModel):
    """Trial counts, seeds and the retrieval shortlist size."""

    verification_trials: int = Field(default=1000, ge=1, description="Positive (and negative) verification trials")
    matching_trials: int = Field(default=1000, ge=1, description="1:2 matching trials per direction and restriction")
    shortlist_k: int = Field(default=50, ge=1, description="Cosine shortlist size re-ranked by the fusion score")
    trial_seed: int = Field(default=1234, ge=0, description="Seed of every test trial list")
    val_trial_seed: int = Field(default=4321, ge=0, description="Seed of the validation trial list")
    val_trials: int = Field(default=1000, ge=1, description="Positive (and negative) validation trials")


class EvalReport(BaseModel):
    """
    Test metrics over the verification / matching / retrieval grid.

    Metrics of protocols that were not run stay None.
    """

    auc_u: Optional[float] = None
    auc_g: Optional[float] = None
    eer_u: Optional[float] = None
    acc_v2f_u: Optional[float] = None
    acc_v2f_g: Optional[float] = None
    acc_f2v_u: Optional[float] = None
    acc_f2v_g: Optional[float] = None
    map_v2f: Optional[float] = None
    map_f2v: Optional[float] = None
    random_map_v2f: Optional[float] = None
    random_map_f2v: Optional[float] = None
    trial_counts: Dict[str, int] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    scoring: str = "fusion"
    shortlist_k: int = 50
    config_hash: str = ""
    checkpoint_digest: str = ""

    def metric_grid(self) -> Dict[str, Optional[float]]:
        return {
            "auc_u": self.auc_u, "auc_g": self.auc_g, "eer_u": self.eer_u,
            "acc_v2f_u": self.acc_v2f_u, "acc_v2f_g": self.acc_v2f_g,
            "acc_f2v_u": self.acc_f2v_u, "acc_f2v_g": self.acc_f2v_g,
            "map_v2f": self.map_v2f, "map_f2v": self.map_f2v,
        }


# ---------------------------------------------------------------------------
# Sample bank and scorers
# ---------------------------------------------------------------------------

class SampleBank:
    """Lookup of samples, identities and groups for one partition."""

    def __init__(self, videos: Sequence[VideoRecord]):
        if not videos:
            raise DegenerateInputError("evaluation partition is empty")
        self.videos: Dict[int, VideoRecord] = {v.video_id: v for v in videos}
        self.video_ids = sorted(self.videos)
        self.identity_group: Dict[int, int] = {v.identity_id: v.group for v in videos}
        self.identity_videos: Dict[int, List[int]] = {}
        for vid in self.video_ids:
            self.identity_videos.setdefault(self.videos[vid].identity_id, []).append(vid)
        self.identities = sorted(self.identity_videos)

    def identity(self, ref: SampleRef) -> int:
        return self.videos[ref.video_id].identity_id

    def group(self, identity: int) -> int:
        return self.identity_group[identity]

    def refs(self, modality: str, identity: Optional[int] = None) -> List[SampleRef]:
        ids = self.identity_videos[identity] if identity is not None else self.video_ids
        out = []
        for vid in ids:
            samples = self.videos[vid].faces if modality == "face" else self.videos[vid].voices
            out.extend(SampleRef(vid, i) for i in range(len(samples)))
        return out

    def vectors(self, modality: str, refs: Sequence[SampleRef]) -> np.ndarray:
        if modality == "face":
            return np.stack([self.videos[r.video_id].faces[r.index] for r in refs])
        return np.stack([self.videos[r.video_id].voices[r.index] for r in refs])


class EmbeddingCache:
    """Encoder outputs for every sample of a bank, computed once."""

    def __init__(self, model: ModelParams, bank: SampleBank):
        self.rows: Dict[str, Dict[SampleRef, int]] = {}
        self.embeddings: Dict[str, np.ndarray] = {}
        for modality in ("face", "voice"):
            refs = bank.refs(modality)
            self.rows[modality] = {r: i for i, r in enumerate(refs)}
            self.embeddings[modality] = model.embed_numpy(modality, bank.vectors(modality, refs)).data

    def lookup(self, modality: str, refs: Sequence[SampleRef]) -> np.ndarray:
        rows = self.rows[modality]
        return self.embeddings[modality][[rows[r] for r in refs]]


def _chunked(score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], faces: np.ndarray, voices: np.ndarray,
             threads: int) -> np.ndarray:
    """Score in fixed-size chunks; results are identical for any thread count."""
    starts = list(range(0, len(faces), _SCORE_CHUNK))

    def run(start):
        return score_fn(faces[start:start + _SCORE_CHUNK], voices[start:start + _SCORE_CHUNK])

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0)


def fusion_scorer(model: ModelParams, cache: EmbeddingCache, threads: int = 1) -> Scorer:
    def score(faces: Sequence[SampleRef], voices: Sequence[SampleRef]) -> np.ndarray:
        return _chunked(
            lambda f, v: match_scores(constant(f), constant(v), model.fusion).data,
            cache.lookup("face", faces), cache.lookup("voice", voices), threads,
        )
    return score


def cosine_scorer(cache: EmbeddingCache) -> Scorer:
    def score(faces: Sequence[SampleRef], voices: Sequence[SampleRef]) -> np.ndarray:
        return cosine_scores(constant(cache.lookup("face", faces)), constant(cache.lookup("voice", voices)))
    return score


def oracle_scorer(bank: SampleBank) -> Scorer:
    """1.0 for a same-identity pair, else 0.0 (plumbing checks only)."""
    def score(faces: Sequence[SampleRef], voices: Sequence[SampleRef]) -> np.ndarray:
        return np.array([float(bank.identity(f) == bank.identity(v)) for f, v in zip(faces, voices)])
    return score


# ---------------------------------------------------------------------------
# Trial construction
# ---------------------------------------------------------------------------

def _eligible_identities(bank: SampleBank, restriction: str) -> List[int]:
    if restriction == "U":
        if len(bank.identities) < 2:
            raise ConfigError("restriction U needs at least 2 identities")
        return list(bank.identities)
    by_group: Dict[int, List[int]] = {}
    for identity in bank.identities:
        by_group.setdefault(bank.group(identity), []).append(identity)
    eligible = sorted(i for members in by_group.values() if len(members) >= 2 for i in members)
    if not eligible:
        raise ConfigError("restriction G needs a group with at least 2 identities")
    return eligible


def _other_identity(bank: SampleBank, anchor: int, pool: Sequence[int], restriction: str,
                    rng: np.random.Generator) -> int:
    candidates = [i for i in pool if i != anchor and (restriction == "U" or bank.group(i) == bank.group(anchor))]
    return candidates[int(rng.integers(len(candidates)))]


def _pick(refs: Sequence[SampleRef], rng: np.random.Generator) -> SampleRef:
    return refs[int(rng.integers(len(refs)))]


def _draw_unique(draw: Callable[[], object], count: int, attempts: int = 20) -> list:
    """Draw ``count`` items, retrying duplicates a bounded number of times."""
    seen = set()
    out = []
    for _ in range(count):
        item = draw()
        for _ in range(attempts):
            if item not in seen:
                break
            item = draw()
        seen.add(item)
        out.append(item)
    return out


def build_trials(videos: Sequence[VideoRecord], protocol: str, direction: str, restriction: str,
                 count: int, seed: int) -> TrialList:
    """
    Build a seeded trial list over a partition.

    verification: ``count`` positives followed by ``count`` negatives
    matching: ``count`` trials; the imposter has another identity (same group under G)
    retrieval: one probe per video (its first sample of the probe modality);
        the gallery is every sample of the other modality (same group under G)

    Raises:
        ConfigError: On unknown protocol/direction/restriction or too few identities
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol '{protocol}'")
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction '{direction}'")
    if restriction not in RESTRICTIONS:
        raise ConfigError(f"unknown restriction '{restriction}'")
    if count < 1:
        raise ConfigError(f"trial count must be >= 1, got {count}")

    bank = SampleBank(videos)
    rng = np.random.default_rng([seed, PROTOCOLS.index(protocol), DIRECTIONS.index(direction),
                                 RESTRICTIONS.index(restriction)])
    pool = _eligible_identities(bank, restriction)
    faces = {i: bank.refs("face", i) for i in bank.identities}
    voices = {i: bank.refs("voice", i) for i in bank.identities}
    trials = TrialList(protocol=protocol, direction=direction, restriction=restriction, seed=seed)

    if protocol == "verification":
        def positive():
            identity = pool[int(rng.integers(len(pool)))]
            return VerificationTrial(_pick(faces[identity], rng), _pick(voices[identity], rng), 1)

        def negative():
            a = pool[int(rng.integers(len(pool)))]
            b = _other_identity(bank, a, pool, restriction, rng)
            return VerificationTrial(_pick(faces[a], rng), _pick(voices[b], rng), 0)

        trials.entries = _draw_unique(positive, count) + _draw_unique(negative, count)

    elif protocol == "matching":
        if direction == "symmetric":
            raise ConfigError("matching trials need direction V2F or F2V")
        probes, targets = (voices, faces) if direction == "V2F" else (faces, voices)

        def matching():
            a = pool[int(rng.integers(len(pool)))]
            b = _other_identity(bank, a, pool, restriction, rng)
            answer = int(rng.integers(2))
            true, imposter = _pick(targets[a], rng), _pick(targets[b], rng)
            candidates = (true, imposter) if answer == 0 else (imposter, true)
            return MatchingTrial(_pick(probes[a], rng), candidates, answer)

        trials.entries = _draw_unique(matching, count)

    else:
        if direction == "symmetric":
            raise ConfigError("retrieval trials need direction V2F or F2V")
        probe_modality, target_modality = ("voice", "face") if direction == "V2F" else ("face", "voice")
        eligible = set(pool)
        for vid in bank.video_ids:
            identity = bank.videos[vid].identity_id
            if identity not in eligible:
                continue
            gallery = tuple(
                r for r in bank.refs(target_modality)
                if restriction == "U" or bank.group(bank.identity(r)) == bank.group(identity)
            )
            relevant = frozenset(pos for pos, r in enumerate(gallery) if bank.identity(r) == identity)
            trials.entries.append(RetrievalTrial(SampleRef(vid, 0), gallery, relevant))
        logger.debug(f"Built {len(trials.entries)} retrieval probes ({probe_modality} -> {target_modality})")

    return trials


# ---------------------------------------------------------------------------
# Metric primitives
# ---------------------------------------------------------------------------

def _check_binary(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.all(np.isfinite(s)):
        raise DegenerateInputError("scores contain non-finite values")
    if not set(np.unique(y)) <= {0, 1}:
        raise DegenerateInputError("labels must be 0 or 1")
    if y.min(initial=1) == y.max(initial=0):
        raise DegenerateInputError("both classes must be present")
    return s, y


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic, ties counted 0.5.

    Raises:
        DegenerateInputError: If only one class is present
    """
    s, y = _check_binary(scores, labels)
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    avg_rank = starts + (counts + 1) / 2.0
    ranks = avg_rank[inverse]
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def eer(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Equal error rate: where the false-accept rate meets the false-reject rate,
    linearly interpolated between adjacent operating points.

    Raises:
        DegenerateInputError: If only one class is present
    """
    s, y = _check_binary(scores, labels)
    thresholds = np.unique(s)[::-1]
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    far = np.concatenate([[0.0], (len(neg) - np.searchsorted(neg, thresholds, side="left")) / len(neg)])
    frr = np.concatenate([[1.0], np.searchsorted(pos, thresholds, side="left") / len(pos)])
    diff = far - frr
    k = int(np.argmax(diff >= 0))
    if k == 0:
        return float(far[0])
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + t * (far[k] - far[k - 1]))


def _split_matching(trials: Sequence[MatchingTrial], direction: str):
    faces, voices = [], []
    for trial in trials:
        for candidate in trial.candidates:
            if direction == "V2F":
                faces.append(candidate)
                voices.append(trial.probe)
            else:
                faces.append(trial.probe)
                voices.append(candidate)
    return faces, voices


def matching_1of2(trial: MatchingTrial, scorer: Scorer, direction: str) -> Optional[int]:
    """Index of the higher-scoring candidate, or None on an exact tie."""
    faces, voices = _split_matching([trial], direction)
    first, second = scorer(faces, voices)
    if first == second:
        return None
    return 0 if first > second else 1


def matching_accuracy(trials: TrialList, scorer: Scorer) -> float:
    """Fraction of trials answered correctly; an exact tie earns half credit."""
    if not trials.entries:
        raise DegenerateInputError("no matching trials")
    faces, voices = _split_matching(trials.entries, trials.direction)
    scores = np.asarray(scorer(faces, voices)).reshape(-1, 2)
    answers = np.array([t.answer for t in trials.entries])
    chosen = np.where(scores[:, 0] > scores[:, 1], 0, 1)
    credit = np.where(scores[:, 0] == scores[:, 1], 0.5, (chosen == answers).astype(np.float64))
    metrics.track_trials("matching", len(trials.entries))
    return float(credit.mean())


def average_precision(relevance_in_rank_order: Sequence[bool]) -> float:
    """
    Mean of precision@rank over the ranks of relevant items.

    Raises:
        DegenerateInputError: If nothing is relevant
    """
    rel = np.asarray(relevance_in_rank_order, dtype=bool)
    hits = np.flatnonzero(rel)
    if len(hits) == 0:
        raise DegenerateInputError("average precision needs at least one relevant item")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def rerank(first_stage: np.ndarray, shortlist_scores: Optional[np.ndarray], k: int) -> np.ndarray:
    """
    Final ranking of gallery positions: the top-k by ``first_stage`` re-ordered
    by ``shortlist_scores`` (given for those k, in first-stage order), followed
    by the remaining positions in first-stage order.
    """
    order = np.lexsort((np.arange(len(first_stage)), -first_stage))
    if shortlist_scores is None:
        return order
    head, tail = order[:k], order[k:]
    head = head[np.lexsort((np.arange(len(head)), -np.asarray(shortlist_scores)))]
    return np.concatenate([head, tail])


def retrieval_map(trials: TrialList, first_stage: Scorer, second_stage: Optional[Scorer],
                  shortlist_k: int = 50) -> float:
    """
    Mean average precision of a two-stage ranking (cosine shortlist, then
    re-ranked by ``second_stage``; None keeps the first-stage ranking).
    """
    if shortlist_k < 1:
        raise ConfigError(f"shortlist_k must be >= 1, got {shortlist_k}")
    if not trials.entries:
        raise DegenerateInputError("no retrieval trials")
    clamped = False
    aps = []
    for trial in trials.entries:
        if not trial.gallery:
            raise DegenerateInputError("retrieval gallery is empty")
        k = min(shortlist_k, len(trial.gallery))
        clamped = clamped or k < shortlist_k
        probes = [trial.probe] * len(trial.gallery)
        pair = (list(trial.gallery), probes) if trials.direction == "V2F" else (probes, list(trial.gallery))
        scores = np.asarray(first_stage(*pair), dtype=np.float64)
        shortlist = None
        if second_stage is not None:
            top = np.lexsort((np.arange(len(scores)), -scores))[:k]
            sub = [[pair[0][i] for i in top], [pair[1][i] for i in top]]
            shortlist = np.asarray(second_stage(*sub), dtype=np.float64)
        ranking = rerank(scores, shortlist, k)
        aps.append(average_precision([int(pos) in trial.relevant for pos in ranking]))
    if clamped:
        logger.warning(f"Shortlist K={shortlist_k} exceeds the gallery size; clamped")
    metrics.track_trials("retrieval", len(trials.entries))
    return float(np.mean(aps))


def random_gallery_map(trials: TrialList) -> float:
    """Chance-level retrieval baseline: mean fraction of relevant gallery items."""
    return float(np.mean([len(t.relevant) / len(t.gallery) for t in trials.entries]))


def verification_scores(trials: TrialList, scorer: Scorer) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scorer([t.face for t in trials.entries], [t.voice for t in trials.entries]))
    labels = np.array([t.label for t in trials.entries])
    metrics.track_trials("verification", len(trials.entries))
    return scores, labels


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------

def make_scorers(model: Optional[ModelParams], videos: Sequence[VideoRecord], scoring: str,
                 threads: int = 1) -> Tuple[Scorer, Scorer]:
    """
    (pair scorer, first-stage retrieval scorer) for a scoring mode.

    Raises:
        ConfigError: On an unknown scoring mode or a missing model
    """
    if scoring not in SCORING_MODES:
        raise ConfigError(f"unknown scoring mode '{scoring}'")
    bank = SampleBank(videos)
    if scoring == "oracle":
        oracle = oracle_scorer(bank)
        return oracle, oracle
    if model is None:
        raise ConfigError(f"scoring mode '{scoring}' needs a model")
    cache = EmbeddingCache(model, bank)
    cos = cosine_scorer(cache)
    if scoring == "cosine":
        return cos, cos
    return fusion_scorer(model, cache, threads), cos


def evaluate_model(model: Optional[ModelParams], videos: Sequence[VideoRecord], config: EvalConfig,
                   scoring: str = "fusion", protocols: Sequence[str] = PROTOCOLS, threads: int = 1,
                   config_hash: str = "", checkpoint_digest: str = "") -> EvalReport:
    """
    Run the requested protocols on a partition and collect an EvalReport.

    With ``scoring="cosine"`` every protocol, retrieval included, uses the
    cosine ranking alone.
    """
    pair, first_stage = make_scorers(model, videos, scoring, threads)
    second_stage = None if scoring == "cosine" else pair
    report = EvalReport(
        scoring=scoring,
        shortlist_k=config.shortlist_k,
        config_hash=config_hash,
        checkpoint_digest=checkpoint_digest,
        seeds={"trial_seed": config.trial_seed},
    )

    if "verification" in protocols:
        for restriction in RESTRICTIONS:
            trials = build_trials(videos, "verification", "symmetric", restriction,
                                  config.verification_trials, config.trial_seed)
            scores, labels = verification_scores(trials, pair)
            setattr(report, f"auc_{restriction.lower()}", auc(scores, labels))
            if restriction == "U":
                report.eer_u = eer(scores, labels)
            report.trial_counts[f"verification_{restriction.lower()}"] = len(trials)

    if "matching" in protocols:
        for direction in ("V2F", "F2V"):
            for restriction in RESTRICTIONS:
                trials = build_trials(videos, "matching", direction, restriction,
                                      config.matching_trials, config.trial_seed)
                key = f"{direction.lower()}_{restriction.lower()}"
                setattr(report, f"acc_{key}", matching_accuracy(trials, pair))
                report.trial_counts[f"matching_{key}"] = len(trials)

    if "retrieval" in protocols:
        for direction in ("V2F", "F2V"):
            trials = build_trials(videos, "retrieval", direction, "U", 1, config.trial_seed)
            k = config.shortlist_k if scoring != "oracle" else max(len(t.gallery) for t in trials.entries)
            setattr(report, f"map_{direction.lower()}", retrieval_map(trials, first_stage, second_stage, k))
            setattr(report, f"random_map_{direction.lower()}", random_gallery_map(trials))
            report.trial_counts[f"retrieval_{direction.lower()}"] = len(trials)

    grid = ", ".join(f"{k}={v:.4f}" for k, v in report.metric_grid().items() if v is not None)
    logger.info(f"Evaluation ({scoring}): {grid}")
    return report


def validation_auc(model: ModelParams, videos: Sequence[VideoRecord], count: int, trial_seed: int,
                   scoring: str = "fusion") -> float:
    """Verification AUC (U) on a fixed seeded trial list."""
    pair, _ = make_scorers(model, videos, scoring)
    trials = build_trials(videos, "verification", "symmetric", "U", count, trial_seed)
    scores, labels = verification_scores(trials, pair)
    return auc(scores, labels)


def write_report(report: EvalReport, path: Union[str, Path]) -> None:
    """Write the report as sorted, indented JSON."""
    Path(path).write_text(json.dumps(report.model_dump(), indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote evaluation report to {path}")


def read_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text())

"""
Tests for faalab/evalsuite.py: trial construction, metric primitives and full evaluation.
"""

import logging

import numpy as np
import pytest

from faalab.errors import ConfigError, DegenerateInputError
from faalab.evalsuite import (
    EvalConfig,
    SampleBank,
    average_precision,
    auc,
    build_trials,
    eer,
    evaluate_model,
    make_scorers,
    matching_accuracy,
    oracle_scorer,
    read_report,
    rerank,
    retrieval_map,
    validation_auc,
    write_report,
)


@pytest.fixture
def test_videos(tiny_dataset):
    return tiny_dataset.partition("test")


@pytest.fixture
def eval_config():
    return EvalConfig(verification_trials=60, matching_trials=60, shortlist_k=4)


def _constant(faces, voices):
    return np.full(len(faces), 0.3)


def _noisy_oracle(bank):
    """Same-identity bonus plus a fixed pseudo-random term per (face, voice) pair."""
    def score(faces, voices):
        return np.array([
            float(bank.identity(f) == bank.identity(v))
            + np.random.default_rng([f.video_id, f.index, v.video_id, v.index]).normal()
            for f, v in zip(faces, voices)
        ])
    return score


class TestAUC:

    def test_perfect(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_equal(self):
        assert auc([0.4] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_pair_counting_example(self):
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_single_class(self):
        with pytest.raises(DegenerateInputError):
            auc([0.1, 0.2], [1, 1])

    def test_negated_scores_complement(self):
        rng = np.random.default_rng(5)
        scores = np.round(rng.random(300), 2)
        labels = rng.integers(0, 2, 300)
        assert auc(scores, labels) + auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)

    def test_invariant_to_increasing_transform(self):
        rng = np.random.default_rng(6)
        scores = rng.random(200)
        labels = rng.integers(0, 2, 200)
        assert auc(np.exp(3.0 * scores) + 2.0 * scores, labels) == auc(scores, labels)


class TestEER:

    def test_separable(self):
        assert eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.0

    def test_hand_trace(self):
        assert eer([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == pytest.approx(0.5)

    def test_uninformative_scores(self):
        rng = np.random.default_rng(0)
        scores = rng.random(10000)
        labels = rng.integers(0, 2, 10000)
        assert abs(eer(scores, labels) - 0.5) < 0.05

    def test_single_class(self):
        with pytest.raises(DegenerateInputError):
            eer([0.3, 0.4], [0, 0])

    def test_label_flip_with_negated_scores(self):
        rng = np.random.default_rng(7)
        for rounding in (None, 1):
            scores = rng.normal(size=400)
            if rounding is not None:
                scores = np.round(scores, rounding)
            labels = np.where(scores + rng.normal(size=400) > 0, 1, 0)
            assert eer(scores, labels) == pytest.approx(eer(-scores, 1 - labels), abs=1e-12)


class TestRanking:

    def test_top_hit(self):
        assert average_precision([True, False, False]) == 1.0

    def test_hits_at_one_and_three(self):
        assert average_precision([True, False, True, False]) == pytest.approx((1 + 2 / 3) / 2)

    def test_nothing_relevant(self):
        with pytest.raises(DegenerateInputError):
            average_precision([False, False])

    def test_rerank_moves_only_the_shortlist(self):
        first = np.array([0.9, 0.1, 0.8, 0.5])
        order = rerank(first, np.array([0.2, 0.7]), k=2)
        assert order.tolist() == [2, 0, 3, 1]

    def test_rerank_without_second_stage(self):
        assert rerank(np.array([0.2, 0.5, 0.5]), None, k=2).tolist() == [1, 2, 0]


class TestTrials:

    def test_verification_is_balanced(self, test_videos):
        trials = build_trials(test_videos, "verification", "symmetric", "U", 50, seed=1)
        labels = [t.label for t in trials.entries]
        assert len(labels) == 100
        assert sum(labels) == 50

    def test_same_seed_same_trials(self, test_videos):
        a = build_trials(test_videos, "matching", "V2F", "U", 30, seed=7)
        b = build_trials(test_videos, "matching", "V2F", "U", 30, seed=7)
        assert a.entries == b.entries

    def test_group_restriction(self, test_videos):
        bank = SampleBank(test_videos)
        for trial in build_trials(test_videos, "matching", "F2V", "G", 40, seed=2).entries:
            groups = {bank.group(bank.identity(r)) for r in (trial.probe, *trial.candidates)}
            assert len(groups) == 1
        for trial in build_trials(test_videos, "verification", "symmetric", "G", 40, seed=2).entries:
            assert bank.group(bank.identity(trial.face)) == bank.group(bank.identity(trial.voice))

    def test_matching_answer_points_at_true_identity(self, test_videos):
        bank = SampleBank(test_videos)
        for trial in build_trials(test_videos, "matching", "V2F", "U", 30, seed=3).entries:
            assert bank.identity(trial.candidates[trial.answer]) == bank.identity(trial.probe)
            assert bank.identity(trial.candidates[1 - trial.answer]) != bank.identity(trial.probe)

    def test_retrieval_probe_per_video(self, test_videos):
        trials = build_trials(test_videos, "retrieval", "V2F", "U", 1, seed=0)
        assert len(trials) == len(test_videos)
        assert all(trial.relevant for trial in trials.entries)

    def test_not_enough_identities(self, test_videos):
        one_identity = [v for v in test_videos if v.identity_id == test_videos[0].identity_id]
        with pytest.raises(ConfigError):
            build_trials(one_identity, "verification", "symmetric", "U", 10, seed=0)

    def test_unknown_protocol(self, test_videos):
        with pytest.raises(ConfigError):
            build_trials(test_videos, "ranking", "V2F", "U", 10, seed=0)


class TestMatching:

    def test_oracle(self, test_videos):
        trials = build_trials(test_videos, "matching", "V2F", "U", 40, seed=0)
        assert matching_accuracy(trials, oracle_scorer(SampleBank(test_videos))) == 1.0

    def test_constant_scorer(self, test_videos):
        trials = build_trials(test_videos, "matching", "F2V", "U", 40, seed=0)
        assert matching_accuracy(trials, _constant) == 0.5

    def test_anti_oracle(self, test_videos):
        oracle = oracle_scorer(SampleBank(test_videos))
        trials = build_trials(test_videos, "matching", "V2F", "G", 40, seed=0)
        assert matching_accuracy(trials, lambda f, v: -oracle(f, v)) == 0.0

    def test_invariant_to_increasing_transform(self, test_videos):
        scorer = _noisy_oracle(SampleBank(test_videos))
        trials = build_trials(test_videos, "matching", "F2V", "U", 60, seed=2)
        baseline = matching_accuracy(trials, scorer)
        assert 0.0 < baseline < 1.0
        assert matching_accuracy(trials, lambda f, v: np.exp(scorer(f, v)) + 5.0) == baseline


class TestRetrieval:

    def test_same_second_stage_is_noop(self, test_videos, tiny_model):
        _, cos = make_scorers(tiny_model, test_videos, "cosine")
        trials = build_trials(test_videos, "retrieval", "F2V", "U", 1, seed=0)
        for k in (1, 3, 100):
            assert retrieval_map(trials, cos, cos, k) == retrieval_map(trials, cos, None, k)

    def test_shortlist_clamped_with_warning(self, test_videos, tiny_model, caplog):
        _, cos = make_scorers(tiny_model, test_videos, "cosine")
        trials = build_trials(test_videos, "retrieval", "V2F", "U", 1, seed=0)
        with caplog.at_level(logging.WARNING):
            retrieval_map(trials, cos, cos, shortlist_k=10 ** 6)
        assert "clamped" in caplog.text


class TestEvaluateModel:

    def test_oracle_plumbing(self, test_videos, eval_config):
        report = evaluate_model(None, test_videos, eval_config, scoring="oracle")
        assert report.auc_u == 1.0 and report.auc_g == 1.0
        assert report.eer_u == 0.0
        assert report.acc_v2f_u == report.acc_f2v_g == 1.0
        assert report.map_v2f == report.map_f2v == 1.0
        assert report.random_map_v2f < 1.0

    def test_untrained_symmetric_head(self, test_videos, tiny_model, eval_config):
        report = evaluate_model(tiny_model, test_videos, eval_config, protocols=("verification", "matching"))
        assert report.auc_u == 0.5
        assert report.acc_v2f_u == 0.5
        assert report.map_v2f is None
        assert report.trial_counts["verification_u"] == 120

    def test_cosine_scoring_runs_every_protocol(self, test_videos, tiny_model, eval_config):
        report = evaluate_model(tiny_model, test_videos, eval_config, scoring="cosine")
        assert all(value is not None for value in report.metric_grid().values())
        assert report.scoring == "cosine"

    def test_report_bytes_are_deterministic(self, test_videos, tiny_model, eval_config, tmp_path):
        for name in ("a.json", "b.json"):
            write_report(evaluate_model(tiny_model, test_videos, eval_config, config_hash="h"), tmp_path / name)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert read_report(tmp_path / "a.json").config_hash == "h"

    def test_validation_auc_is_stable(self, tiny_dataset, tiny_model):
        val = tiny_dataset.partition("val")
        assert validation_auc(tiny_model, val, 40, 4321, "cosine") == validation_auc(tiny_model, val, 40, 4321, "cosine")

    def test_model_required(self, test_videos):
        with pytest.raises(ConfigError):
            make_scorers(None, test_videos, "fusion")

"""
Tests for faalab/clustering.py: pooling, k-means, pseudo-labels and the progressive controller.
"""

import json

import numpy as np
import pytest

from faalab.clustering import (
    ProgressState,
    assign_pseudo_labels,
    dense_relabel,
    dump_assignments,
    kmeans,
    labeling_nmi,
    pool_embeddings,
    pool_video,
    pool_videos,
    progressive_step,
)
from faalab.errors import ConfigError, DegenerateInputError
from faalab.model import ArchConfig, build_model
from faalab.synthworld import VideoRecord, WorldConfig, generate_world


class TestPooling:

    def test_average_then_concatenate(self):
        out = pool_embeddings(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[2.0, 2.0]]))
        np.testing.assert_allclose(out, [0.5, 0.5, 2.0, 2.0])

    def test_single_sample_is_concatenation(self):
        out = pool_embeddings(np.array([[0.3, -0.1]]), np.array([[0.7, 0.2]]))
        np.testing.assert_allclose(out, [0.3, -0.1, 0.7, 0.2])

    def test_face_order_does_not_matter(self):
        faces = np.random.default_rng(0).standard_normal((4, 3))
        voices = np.random.default_rng(1).standard_normal((2, 3))
        np.testing.assert_allclose(pool_embeddings(faces, voices), pool_embeddings(faces[::-1], voices))

    def test_empty_modality(self):
        with pytest.raises(DegenerateInputError):
            pool_embeddings(np.zeros((0, 2)), np.ones((1, 2)))

    def test_batched_pooling_matches_per_video(self, tiny_dataset, tiny_model):
        videos = tiny_dataset.partition("train")[:5]
        batched = pool_videos(videos, tiny_model)
        for row, video in zip(batched, videos):
            np.testing.assert_allclose(row, pool_video(video, tiny_model).vector, atol=1e-12)


class TestKMeans:

    def test_well_separated(self):
        points = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]])
        result = kmeans(points, 2, seed=0)
        a = result.assignments
        assert a[0] == a[1] and a[2] == a[3] and a[0] != a[2]

    def test_one_cluster_per_point(self):
        points = np.random.default_rng(2).standard_normal((7, 3))
        result = kmeans(points, 7, seed=1)
        assert len(set(result.assignments.tolist())) == 7
        assert result.inertia == pytest.approx(0.0, abs=1e-12)

    def test_close_to_best_of_restarts(self):
        points = np.random.default_rng(3).standard_normal((200, 8))
        best = min(kmeans(points, 5, seed=s).inertia for s in range(20))
        assert kmeans(points, 5, seed=0).inertia <= 1.05 * best

    def test_inertia_never_increases(self):
        points = np.random.default_rng(4).standard_normal((120, 4))
        history = kmeans(points, 6, seed=2).inertia_history
        assert all(b <= a * (1 + 1e-12) for a, b in zip(history, history[1:]))

    def test_seeded(self):
        points = np.random.default_rng(5).standard_normal((60, 3))
        np.testing.assert_array_equal(kmeans(points, 4, seed=9).assignments, kmeans(points, 4, seed=9).assignments)

    def test_threads_do_not_change_result(self):
        points = np.random.default_rng(6).standard_normal((1200, 3))
        single = kmeans(points, 5, seed=0, threads=1)
        threaded = kmeans(points, 5, seed=0, threads=4)
        np.testing.assert_array_equal(single.assignments, threaded.assignments)
        assert single.inertia == threaded.inertia

    def test_too_many_clusters(self):
        with pytest.raises(ConfigError):
            kmeans(np.zeros((3, 2)), 4, seed=0)

    def test_non_finite_points(self):
        with pytest.raises(DegenerateInputError):
            kmeans(np.array([[0.0], [np.nan]]), 1, seed=0)

    def test_dense_relabel(self):
        np.testing.assert_array_equal(dense_relabel(np.array([4, 4, 1, 7, 1])), [0, 0, 1, 2, 1])


class TestPseudoLabels:

    def test_one_label_per_video(self, tiny_dataset, tiny_model):
        train = tiny_dataset.partition("train")
        labeling = assign_pseudo_labels(train, tiny_model, len(train), seed=0)
        assert labeling.num_clusters == len(train)
        assert sorted(labeling.assignments.values()) == list(range(len(train)))

    def test_clean_world_recovers_identities(self):
        world = WorldConfig(num_identities=24, identity_split=(0.5, 0.25, 0.25), latent_dim=4, face_dim=8,
                            voice_dim=6, videos_per_identity=3, noise_std=0.0, cross_modal_strength=1.0, seed=1)
        dataset = generate_world(world)
        model = build_model(ArchConfig(embed_dim=8, encoder_hidden=12, fusion_hidden=8, fusion_layers=1,
                                       fusion_heads=2), 8, 6, seed=0)
        train = dataset.partition("train")
        labeling = assign_pseudo_labels(train, model, len(dataset.identity_ids("train")), seed=0)
        assert labeling_nmi(labeling, train) == pytest.approx(1.0)

    def test_identical_videos_share_a_label(self, tiny_model):
        rng = np.random.default_rng(7)
        faces, voices = rng.standard_normal((2, 8)), rng.standard_normal((2, 6))
        videos = [VideoRecord(0, 0, 0, faces, voices), VideoRecord(1, 0, 0, faces.copy(), voices.copy())]
        videos += [VideoRecord(i, i, 0, rng.standard_normal((2, 8)), rng.standard_normal((2, 6))) for i in range(2, 6)]
        for seed in range(5):
            labeling = assign_pseudo_labels(videos, tiny_model, 3, seed=seed)
            assert labeling.assignments[0] == labeling.assignments[1]

    def test_input_order_does_not_matter(self, tiny_dataset, tiny_model):
        train = tiny_dataset.partition("train")
        forward = assign_pseudo_labels(train, tiny_model, 5, seed=3)
        backward = assign_pseudo_labels(list(reversed(train)), tiny_model, 5, seed=3)
        assert forward.assignments == backward.assignments

    def test_more_clusters_than_videos(self, tiny_dataset, tiny_model):
        train = tiny_dataset.partition("train")
        with pytest.raises(ConfigError):
            assign_pseudo_labels(train, tiny_model, len(train) + 1, seed=0)

    def test_dump_assignments(self, tiny_dataset, tiny_model, tmp_path):
        labeling = assign_pseudo_labels(tiny_dataset.partition("train"), tiny_model, 4, seed=0, epoch=2)
        dump_assignments(labeling, tmp_path / "clusters.json")
        payload = json.loads((tmp_path / "clusters.json").read_text())
        assert payload["epoch"] == 2
        assert len(payload["assignments"]) == len(tiny_dataset.partition("train"))


class TestProgressiveStep:

    def test_halves_after_patience(self):
        state = ProgressState(clusters=1024, best_val_metric=0.8, epochs_since_improvement=2)
        out = progressive_step(state, 0.7, patience=3)
        assert (out.clusters, out.epochs_since_improvement, out.recluster, out.halvings) == (512, 0, True, 1)

    def test_improvement_resets_counter(self):
        state = ProgressState(clusters=64, best_val_metric=0.6, epochs_since_improvement=2)
        out = progressive_step(state, 0.61, patience=3)
        assert (out.clusters, out.epochs_since_improvement, out.best_val_metric) == (64, 0, 0.61)
        assert not out.recluster

    def test_equal_metric_is_not_improvement(self):
        state = ProgressState(clusters=64, best_val_metric=0.6)
        assert progressive_step(state, 0.6).epochs_since_improvement == 1

    def test_floor(self):
        state = ProgressState(clusters=2, best_val_metric=0.9, epochs_since_improvement=2)
        out = progressive_step(state, 0.5, patience=3)
        assert out.clusters == 2
        assert not out.recluster

    def test_odd_count_rounds_down(self):
        state = ProgressState(clusters=5, best_val_metric=0.9, epochs_since_improvement=0)
        assert progressive_step(state, 0.1, patience=1).clusters == 2

    def test_invalid_state(self):
        with pytest.raises(ConfigError):
            ProgressState(clusters=1, min_clusters=1)
        with pytest.raises(ConfigError):
            progressive_step(ProgressState(clusters=8), 0.5, patience=0)

    def test_dict_round_trip(self):
        state = ProgressState(clusters=32, best_val_metric=0.7, epochs_since_improvement=1, halvings=2)
        assert ProgressState.from_dict(state.to_dict()) == state

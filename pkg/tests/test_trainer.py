"""
Tests for faalab/trainer.py: the training loop, global pool, checkpoints and run outputs.
"""

import json

import numpy as np
import pytest

from faalab.errors import CheckpointFormatError, ConfigError, ContractError, NonFiniteLossError, ShapeError
from faalab.evalsuite import EvalConfig
from faalab.trainer import (
    AblationConfig,
    Checkpoint,
    EpochRecord,
    TrainConfig,
    TrainHistory,
    derive_rng,
    gather_global_pool,
    load_checkpoint,
    resolve_fixed_clusters,
    save_checkpoint,
    train,
    write_run_outputs,
)


@pytest.fixture
def train_config(tiny_arch):
    return TrainConfig(batch_size=8, max_epochs=3, iterations_per_epoch=1, patience=1, arch=tiny_arch, seed=11)


@pytest.fixture
def eval_config():
    return EvalConfig(val_trials=40, verification_trials=40, matching_trials=40, shortlist_k=5)


def _record(epoch):
    return EpochRecord(epoch=epoch, clusters=4, clusters_used=4, loss_ms=0.0, loss_ce=0.0, loss=0.0,
                       val_auc=0.5, batches=1, skipped_batches=0, halved=False, pseudo_label_nmi=0.0)


class TestConfigs:

    def test_desk_defaults(self):
        config = TrainConfig()
        assert (config.batch_size, config.lr, config.delta, config.patience) == (64, 3e-3, 0.9, 3)
        assert (config.max_epochs, config.iterations_per_epoch) == (30, 4)

    def test_full_scale_preset(self):
        config = TrainConfig.full_scale(max_epochs=5)
        assert (config.batch_size, config.lr, config.max_epochs) == (256, 1e-4, 5)
        assert config.iterations_per_epoch == 1
        assert config.arch.embed_dim == 256

    def test_pair_selection_aliases(self):
        assert AblationConfig(pair_selection="fixed-C+random-neg").pair_selection == "fixed_random"
        assert AblationConfig(pair_selection="progressive+hardneg").pair_selection == "progressive_hardneg"

    def test_fixed_clusters_scaled(self):
        assert resolve_fixed_clusters(AblationConfig(), 256) == 15
        assert resolve_fixed_clusters(AblationConfig(), 10) == 2
        assert resolve_fixed_clusters(AblationConfig(fixed_C=7), 256) == 7

    def test_fixed_clusters_too_large(self):
        with pytest.raises(ConfigError):
            resolve_fixed_clusters(AblationConfig(fixed_C=300), 256)

    def test_derived_streams(self):
        assert derive_rng(3, 1, 2).integers(10 ** 9) == derive_rng(3, 1, 2).integers(10 ** 9)
        assert derive_rng(3, 1, 2).integers(10 ** 9) != derive_rng(3, 2, 1).integers(10 ** 9)


class TestGlobalPool:

    def test_single_shard_is_identity(self):
        faces, voices = np.ones((3, 2)), np.zeros((3, 2))
        pool = gather_global_pool([(faces, voices, [0, 1, 2])])
        np.testing.assert_array_equal(pool.face_embs, faces)
        assert pool.labels.tolist() == [0, 1, 2]

    def test_empty_shard_skipped(self):
        a = (np.full((2, 2), 1.0), np.full((2, 2), 2.0), [0, 1])
        empty = (np.zeros((0, 2)), np.zeros((0, 2)), [])
        b = (np.full((1, 2), 3.0), np.full((1, 2), 4.0), [5])
        pool = gather_global_pool([a, empty, b])
        assert pool.labels.tolist() == [0, 1, 5]
        assert pool.shard_offsets == [0, 2]
        assert pool.face_embs[:, 0].tolist() == [1.0, 1.0, 3.0]

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            gather_global_pool([(np.ones((1, 2)), np.ones((1, 2)), [0]), (np.ones((1, 3)), np.ones((1, 3)), [1])])


class TestTrainHistory:

    def test_epochs_must_be_contiguous(self):
        history = TrainHistory()
        history.append(_record(1))
        with pytest.raises(ContractError):
            history.append(_record(3))

    def test_history_has_no_wall_time(self, tmp_path):
        history = TrainHistory()
        history.append(_record(1))
        history.write(tmp_path / "history.jsonl")
        row = json.loads((tmp_path / "history.jsonl").read_text().splitlines()[0])
        assert "wall_time" not in row
        assert row["epoch"] == 1


class TestTrain:

    def test_runs_and_records_every_epoch(self, tiny_dataset, train_config, eval_config):
        result = train(tiny_dataset, train_config, eval_config=eval_config)
        records = result.history.records
        assert [r.epoch for r in records] == [1, 2, 3]
        assert records[0].clusters == len(tiny_dataset.partition("train"))
        assert all(0.0 <= r.val_auc <= 1.0 for r in records)
        assert result.best.val_metric == max(r.val_auc for r in records)
        assert result.model.all_finite()

    def test_halving_is_consistent(self, tiny_dataset, train_config, eval_config):
        result = train(tiny_dataset, train_config.model_copy(update={"max_epochs": 4}), eval_config=eval_config)
        records = result.history.records
        for current, following in zip(records, records[1:]):
            assert following.clusters <= current.clusters
            assert current.halved == (following.clusters < current.clusters)

    def test_deterministic(self, tiny_dataset, train_config, eval_config, tmp_path):
        for name in ("a", "b"):
            write_run_outputs(train(tiny_dataset, train_config, eval_config=eval_config), tmp_path / name)
        for fname in ("model.faac", "history.jsonl", "final_state.json"):
            assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()

    def test_simulated_workers_match_single_worker(self, tiny_dataset, train_config, eval_config):
        single = train(tiny_dataset, train_config.model_copy(update={"max_epochs": 1}), eval_config=eval_config)
        sharded = train(tiny_dataset, train_config.model_copy(update={"max_epochs": 1, "num_simulated_workers": 4}),
                        eval_config=eval_config)
        for name, value in single.best.state.items():
            np.testing.assert_allclose(sharded.best.state[name], value, atol=1e-10)

    def test_nan_loss_aborts_with_diagnostic(self, tiny_dataset, train_config, eval_config):
        config = train_config.model_copy(update={"debug_nan_at_batch": 1})
        with pytest.raises(NonFiniteLossError) as exc:
            train(tiny_dataset, config, eval_config=eval_config)
        diagnostic = exc.value.diagnostic()
        assert diagnostic["epoch"] == 1
        assert diagnostic["batch"] == 1

    def test_fixed_random_keeps_cluster_count(self, tiny_dataset, train_config, eval_config):
        ablation = AblationConfig(pair_selection="fixed_random", fixed_C=3)
        result = train(tiny_dataset, train_config, ablation, eval_config)
        assert {r.clusters for r in result.history.records} == {3}
        assert not any(r.halved for r in result.history.records)

    def test_cosine_only_has_no_matching_loss(self, tiny_dataset, train_config, eval_config):
        ablation = AblationConfig(fusion_scoring=False, loss="contrastive")
        result = train(tiny_dataset, train_config, ablation, eval_config)
        assert all(r.loss_ce == 0.0 for r in result.history.records)

    def test_passes_multiply_batches(self, tiny_dataset, train_config, eval_config):
        counts = []
        for passes in (1, 3):
            config = train_config.model_copy(update={"max_epochs": 1, "iterations_per_epoch": passes})
            record = train(tiny_dataset, config, eval_config=eval_config).history.records[0]
            counts.append(record.batches + record.skipped_batches)
        # 24 training videos in batches of 8
        assert counts == [3, 9]

    def test_dump_clusters(self, tiny_dataset, train_config, eval_config, tmp_path):
        config = train_config.model_copy(update={"max_epochs": 2, "dump_clusters": True})
        train(tiny_dataset, config, eval_config=eval_config, out_dir=tmp_path)
        assert (tmp_path / "clusters_epoch1.json").exists()
        assert (tmp_path / "clusters_epoch2.json").exists()


class TestCheckpoint:

    @pytest.fixture
    def checkpoint(self, tiny_dataset, train_config, eval_config):
        return train(tiny_dataset, train_config.model_copy(update={"max_epochs": 1}), eval_config=eval_config).best

    def test_round_trip_restores_parameters(self, checkpoint, tmp_path):
        save_checkpoint(checkpoint, tmp_path / "model.faac")
        loaded = load_checkpoint(tmp_path / "model.faac")
        assert isinstance(loaded, Checkpoint)
        assert loaded.epoch == checkpoint.epoch
        assert loaded.progress == checkpoint.progress
        restored = loaded.restore()
        for name, tensor in restored.named_parameters().items():
            np.testing.assert_array_equal(tensor.data, checkpoint.state[name])

    def test_bad_magic(self, checkpoint, tmp_path):
        path = tmp_path / "model.faac"
        save_checkpoint(checkpoint, path)
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_version_mismatch(self, checkpoint, tmp_path):
        path = tmp_path / "model.faac"
        save_checkpoint(checkpoint, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated(self, checkpoint, tmp_path):
        path = tmp_path / "model.faac"
        save_checkpoint(checkpoint, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

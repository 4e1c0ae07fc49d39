"""
Tests for faalab/synthworld.py: generation, partition invariants and the on-disk format.
"""

import json

import numpy as np
import pytest
from pydantic import ValidationError

from faalab.errors import ConfigError, DatasetCorruptionError, DatasetFormatError
from faalab.synthworld import (
    PARTITIONS,
    VideoRecord,
    WorldConfig,
    generate_world,
    mixing_oracle_accuracy,
    read_dataset,
    write_dataset,
)


class TestWorldConfig:

    def test_default_partition_sizes(self):
        assert WorldConfig().partition_sizes() == {"train": 64, "val": 16, "test": 16}

    def test_split_must_sum_to_one(self):
        with pytest.raises(ValidationError) as exc:
            WorldConfig(identity_split=(0.5, 0.3, 0.3))
        assert "identity_split" in str(exc.value)

    def test_empty_partition(self):
        config = WorldConfig(num_identities=4, identity_split=(0.9, 0.1, 0.0))
        with pytest.raises(ConfigError):
            config.partition_sizes()
        with pytest.raises(ConfigError):
            generate_world(config)

    def test_feature_dims_cover_latent(self):
        with pytest.raises(ValidationError):
            WorldConfig(latent_dim=16, face_dim=8)
        with pytest.raises(ValidationError):
            WorldConfig(latent_dim=16, voice_dim=8)
        assert WorldConfig(latent_dim=8, face_dim=8, voice_dim=8).face_dim == 8

    def test_dim_bound_is_documented(self):
        fields = WorldConfig.model_fields
        assert "latent_dim" in fields["face_dim"].description
        assert "latent_dim" in fields["voice_dim"].description


class TestGenerateWorld:

    def test_default_world_counts(self):
        dataset = generate_world(WorldConfig())
        rows = {row["partition"]: row for row in dataset.summary()}
        assert rows["train"]["video"] == 256
        assert rows["train"]["face"] == 1024
        assert rows["train"]["audio"] == 512
        assert (rows["val"]["id"], rows["test"]["id"]) == (16, 16)
        for a in PARTITIONS:
            for b in PARTITIONS:
                if a < b:
                    assert not dataset.identity_ids(a) & dataset.identity_ids(b)

    def test_zero_noise_full_strength_is_deterministic_per_identity(self):
        dataset = generate_world(WorldConfig(num_identities=6, identity_split=(0.5, 0.25, 0.25),
                                             latent_dim=4, face_dim=6, voice_dim=5,
                                             cross_modal_strength=1.0, noise_std=0.0))
        by_identity = {}
        for name in PARTITIONS:
            for video in dataset.partition(name):
                by_identity.setdefault(video.identity_id, []).append(video)
        for videos in by_identity.values():
            faces = np.concatenate([v.faces for v in videos])
            voices = np.concatenate([v.voices for v in videos])
            assert np.all(faces == faces[0])
            assert np.all(voices == voices[0])

    def test_no_association_at_zero_strength(self):
        config = WorldConfig(num_identities=200, identity_split=(0.5, 0.25, 0.25), latent_dim=4,
                             face_dim=4, voice_dim=4, videos_per_identity=1, faces_per_video=1,
                             voices_per_video=1, cross_modal_strength=0.0, noise_std=0.0, group_offset=0.0)
        dataset = generate_world(config)
        videos = [v for name in PARTITIONS for v in dataset.partition(name)]
        faces = np.stack([v.faces[0] for v in videos])
        voices = np.stack([v.voices[0] for v in videos])
        for d in range(4):
            r = np.corrcoef(faces[:, d], voices[:, d])[0, 1]
            assert abs(r) < 0.25

    def test_same_seed_same_world(self, tiny_world_config):
        a = generate_world(tiny_world_config)
        b = generate_world(tiny_world_config)
        for name in PARTITIONS:
            for va, vb in zip(a.partition(name), b.partition(name)):
                assert va.video_id == vb.video_id
                np.testing.assert_array_equal(va.faces, vb.faces)
                np.testing.assert_array_equal(va.voices, vb.voices)

    def test_mixing_oracle_is_accurate_on_clean_world(self):
        dataset = generate_world(WorldConfig(noise_std=0.0, cross_modal_strength=1.0))
        assert mixing_oracle_accuracy(dataset) == 1.0


class TestDatasetFiles:

    def test_write_then_read(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json", "test.bin", "train.bin", "val.bin"]
        loaded = read_dataset(tmp_path)
        assert loaded.config == tiny_dataset.config
        for name in PARTITIONS:
            assert len(loaded.partition(name)) == len(tiny_dataset.partition(name))
            for a, b in zip(loaded.partition(name), tiny_dataset.partition(name)):
                assert (a.video_id, a.identity_id, a.group) == (b.video_id, b.identity_id, b.group)
                np.testing.assert_array_equal(a.faces, b.faces)
                np.testing.assert_array_equal(a.voices, b.voices)

    def test_byte_identical_files(self, tiny_world_config, tmp_path):
        write_dataset(generate_world(tiny_world_config), tmp_path / "a")
        write_dataset(generate_world(tiny_world_config), tmp_path / "b")
        for name in ("manifest.json", "train.bin", "val.bin", "test.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_manifest_references_missing_video(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        extra = dict(manifest["partitions"]["train"][0], video_id=99999)
        manifest["partitions"]["train"].append(extra)
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DatasetCorruptionError):
            read_dataset(tmp_path)

    def test_empty_test_partition(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["partitions"]["test"] = []
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ConfigError):
            read_dataset(tmp_path)

    def test_bad_magic(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path)
        blob = tmp_path / "val.bin"
        blob.write_bytes(b"XXXX" + blob.read_bytes()[4:])
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path)

    def test_truncated_blob(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path)
        blob = tmp_path / "train.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(DatasetCorruptionError):
            read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetCorruptionError):
            read_dataset(tmp_path)

    def test_nan_face_rejected(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path)
        blob = tmp_path / "train.bin"
        raw = bytearray(blob.read_bytes())
        # first payload value: row 0 of the first video's faces
        raw[16:20] = np.array([np.nan], dtype="<f4").tobytes()
        blob.write_bytes(bytes(raw))
        with pytest.raises(DatasetCorruptionError) as exc:
            read_dataset(tmp_path)
        assert "train" in str(exc.value)
        assert "face row 0" in str(exc.value)

    def test_infinite_voice_rejected(self, tiny_dataset, tmp_path):
        write_dataset(tiny_dataset, tmp_path)
        blob = tmp_path / "val.bin"
        raw = bytearray(blob.read_bytes())
        # last payload value: final row of the last video's voices
        raw[-4:] = np.array([np.inf], dtype="<f4").tobytes()
        blob.write_bytes(bytes(raw))
        with pytest.raises(DatasetCorruptionError) as exc:
            read_dataset(tmp_path)
        assert "val" in str(exc.value)
        assert "voice row 1" in str(exc.value)


class TestVideoRecord:

    def test_empty_modality(self):
        with pytest.raises(DatasetCorruptionError):
            VideoRecord(0, 0, 0, np.zeros((0, 4)), np.ones((1, 3)))

    def test_non_finite_samples(self):
        faces = np.ones((2, 4))
        faces[1, 2] = np.nan
        with pytest.raises(DatasetCorruptionError):
            VideoRecord(0, 0, 0, faces, np.ones((1, 3)))

"""
Tests for faalab/model.py.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from faalab.errors import ShapeError
from faalab.model import ArchConfig, build_model


class TestArchConfig:

    def test_desk_defaults(self):
        arch = ArchConfig()
        assert arch.embed_dim == 64
        assert arch.fusion_heads == 4
        assert arch.zero_init_head is True

    def test_full_scale_sizes(self):
        arch = ArchConfig.full_scale()
        assert (arch.embed_dim, arch.fusion_hidden, arch.fusion_layers) == (256, 256, 4)

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValidationError):
            ArchConfig(fusion_hidden=10, fusion_heads=4)


class TestModelParams:

    def test_same_seed_same_parameters(self, tiny_arch):
        a = build_model(tiny_arch, 8, 6, seed=5)
        b = build_model(tiny_arch, 8, 6, seed=5)
        for name, tensor in a.named_parameters().items():
            np.testing.assert_array_equal(tensor.data, b.named_parameters()[name].data)

    def test_parameter_names_are_unique_and_ordered(self, tiny_model):
        names = list(tiny_model.named_parameters())
        assert len(names) == len(set(names))
        assert names[0].startswith("face.")
        assert names[-1] == "fusion.head_b"

    def test_clone_is_independent(self, tiny_model):
        copy = tiny_model.clone()
        copy.face.w1.data[...] = 0.0
        assert np.any(tiny_model.face.w1.data != 0.0)

    def test_load_state(self, tiny_model, tiny_arch):
        other = build_model(tiny_arch, 8, 6, seed=9)
        other.load_state({k: v.data for k, v in tiny_model.named_parameters().items()})
        np.testing.assert_array_equal(other.fusion.tok_w.data, tiny_model.fusion.tok_w.data)

    def test_load_state_missing_parameter(self, tiny_model):
        state = {k: v.data for k, v in tiny_model.named_parameters().items()}
        state.pop("voice.wp")
        with pytest.raises(ShapeError):
            tiny_model.load_state(state)

    def test_load_state_wrong_shape(self, tiny_model):
        state = {k: v.data for k, v in tiny_model.named_parameters().items()}
        state["face.b1"] = np.zeros(3)
        with pytest.raises(ShapeError):
            tiny_model.load_state(state)

    def test_embed_numpy_is_unit_norm(self, tiny_model):
        out = tiny_model.embed_numpy("voice", np.random.default_rng(0).standard_normal((3, 6)))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-10)
        assert tiny_model.all_finite()
        assert tiny_model.num_parameters() > 0

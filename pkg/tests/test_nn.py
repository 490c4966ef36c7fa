"""Tests for model specs, initialization, forward passes, masking, and
parameter serialization."""

import numpy as np
import pytest

from metamask import nn
from metamask.autograd import Var
from metamask.errors import ConfigError, ShapeError
from metamask.tensor import Tensor


class TestSpecs:
    def test_mlp_spec_validation(self):
        spec = nn.MlpSpec((4, 8, 2))
        assert spec.d_in == 4
        assert spec.d_out == 2
        with pytest.raises(ConfigError):
            nn.MlpSpec((4,))
        with pytest.raises(ConfigError):
            nn.MlpSpec((4, 0, 2))
        with pytest.raises(ConfigError):
            nn.MlpSpec((4, 2), activation="tanh")

    def test_model_spec_head_width_check(self):
        enc = nn.MlpSpec((6, 4))
        good = nn.MlpSpec((4, 8))
        bad = nn.MlpSpec((5, 8))
        nn.ModelSpec(encoder=enc, cl_head=good, drr_head=good)
        with pytest.raises(ConfigError):
            nn.ModelSpec(encoder=enc, cl_head=bad, drr_head=good)

    def test_default_builder(self):
        spec = nn.ModelSpec.default(d_in=16)
        assert spec.encoder.layer_widths == (16, 32)
        assert spec.cl_head.layer_widths == (32, 64)
        assert spec.drr_head.layer_widths == (32, 64)
        assert spec.repr_dim == 32
        deep = nn.ModelSpec.default(
            d_in=10, repr_dim=8, head_dim=4, encoder_hidden=(32,), head_hidden=(16,)
        )
        assert deep.encoder.layer_widths == (10, 32, 8)
        assert deep.cl_head.layer_widths == (8, 16, 4)


class TestInit:
    def test_deterministic_and_seed_sensitive(self):
        spec = nn.ModelSpec.default(d_in=6, repr_dim=4, head_dim=3)
        p1 = nn.init_params(spec, 0)
        p2 = nn.init_params(spec, 0)
        p3 = nn.init_params(spec, 1)
        for (n1, t1), (n2, t2) in zip(p1.flat_tensors(), p2.flat_tensors()):
            assert n1 == n2
            assert np.array_equal(t1.array, t2.array)
        assert not np.array_equal(p1.theta[0][0].array, p3.theta[0][0].array)

    def test_mask_starts_at_ones_and_biases_zero(self):
        spec = nn.ModelSpec.default(d_in=6, repr_dim=4, head_dim=3)
        params = nn.init_params(spec, 0)
        assert np.all(params.mask.array == 1.0)
        assert params.mask.shape == (4,)
        for name, t in params.flat_tensors():
            if name.endswith(".b"):
                assert np.all(t.array == 0.0)

    def test_weight_bounds(self):
        spec = nn.ModelSpec.default(d_in=9, repr_dim=4, head_dim=3)
        params = nn.init_params(spec, 5)
        w = params.theta[0][0].array
        assert np.all(np.abs(w) <= 1.0 / 3.0)

    def test_flat_tensors_order(self):
        spec = nn.ModelSpec.default(d_in=6, repr_dim=4, head_dim=3)
        names = [n for n, _ in nn.init_params(spec, 0).flat_tensors()]
        assert names == [
            "theta.0.W", "theta.0.b",
            "cl.0.W", "cl.0.b",
            "drr.0.W", "drr.0.b",
            "mask",
        ]


class TestForward:
    def test_mlp_forward_matches_numpy(self):
        rng = np.random.default_rng(0)
        w1, b1 = rng.normal(size=(5, 7)), rng.normal(size=7)
        w2, b2 = rng.normal(size=(7, 3)), rng.normal(size=3)
        layers = [
            (Tensor._wrap(w1), Tensor._wrap(b1)),
            (Tensor._wrap(w2), Tensor._wrap(b2)),
        ]
        x = rng.normal(size=(4, 5))
        out = nn.mlp_forward(nn.mlp_vars(layers), Var.leaf(x)).array
        want = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
        np.testing.assert_allclose(out, want, rtol=1e-14)

    def test_no_activation_after_last_layer(self):
        # a single-layer net must pass negatives through unclipped
        layers = [(Tensor._wrap(-np.eye(3)), Tensor.zeros((3,)))]
        x = np.ones((2, 3))
        out = nn.mlp_forward(nn.mlp_vars(layers), Var.leaf(x)).array
        assert np.all(out == -1.0)

    def test_width_mismatch(self):
        layers = [(Tensor._wrap(np.ones((4, 2))), Tensor.zeros((2,)))]
        with pytest.raises(ShapeError):
            nn.mlp_forward(nn.mlp_vars(layers), Var.leaf(np.ones((3, 5))))

    def test_apply_mask(self):
        h = Var.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
        m = Var.leaf(np.array([0.0, 2.0]))
        out = nn.apply_mask(h, m).array
        assert out.tolist() == [[0.0, 4.0], [0.0, 8.0]]
        with pytest.raises(ShapeError):
            nn.apply_mask(h, Var.leaf(np.array([1.0, 2.0, 3.0])))

    def test_encode_dataset_matches_forward(self):
        spec = nn.ModelSpec.default(d_in=5, repr_dim=3, head_dim=2,
                                    encoder_hidden=(8,))
        params = nn.init_params(spec, 3)
        x = np.random.default_rng(4).normal(size=(6, 5))
        h = nn.encode_dataset(params, x)
        want = nn.encoder_forward(nn.mlp_vars(params.theta), Var.leaf(x)).array
        assert np.array_equal(h, want)
        assert h.shape == (6, 3)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        spec = nn.ModelSpec.default(d_in=7, repr_dim=4, head_dim=3,
                                    encoder_hidden=(6,))
        params = nn.init_params(spec, 9)
        params.mask = Tensor._wrap(np.array([1.0, 0.5, -0.2, 2.0]))
        nn.save_params(tmp_path / "snap", params, spec)
        loaded, loaded_spec = nn.load_params(tmp_path / "snap")
        assert loaded_spec == spec
        for (n1, t1), (n2, t2) in zip(
            params.flat_tensors(), loaded.flat_tensors()
        ):
            assert n1 == n2
            assert np.array_equal(t1.array, t2.array)

    def test_loaded_params_reproduce_representations(self, tmp_path):
        spec = nn.ModelSpec.default(d_in=5, repr_dim=3, head_dim=2)
        params = nn.init_params(spec, 1)
        nn.save_params(tmp_path / "snap", params, spec)
        loaded, _ = nn.load_params(tmp_path / "snap")
        x = np.random.default_rng(2).normal(size=(4, 5))
        assert np.array_equal(
            nn.encode_dataset(params, x), nn.encode_dataset(loaded, x)
        )

"""Tests for the synthetic multi-view generator, minibatching, and dataset
serialization."""

import json

import numpy as np
import pytest

from metamask.data import (
    SyntheticSpec,
    load_dataset,
    make_synthetic,
    minibatches,
    save_dataset,
)
from metamask.errors import ConfigError, ParseError, ShapeError


class TestSyntheticSpec:
    def test_d_in(self):
        spec = SyntheticSpec(d_signal=4, d_confounder=8, d_noise=4)
        assert spec.d_in == 16

    def test_validation(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(d_signal=0)
        with pytest.raises(ConfigError):
            SyntheticSpec(n_classes=1)
        with pytest.raises(ConfigError):
            SyntheticSpec(n_samples=2, n_classes=4)
        with pytest.raises(ConfigError):
            SyntheticSpec(n_views=1)
        with pytest.raises(ConfigError):
            SyntheticSpec(view_noise_sigma=-0.1)
        with pytest.raises(ConfigError):
            SyntheticSpec(confounder_sigma=-1.0)
        with pytest.raises(ConfigError):
            SyntheticSpec(confounder_modes=0)
        with pytest.raises(ConfigError):
            SyntheticSpec(class_sep=0.0)


class TestMakeSynthetic:
    def setup_method(self):
        self.spec = SyntheticSpec(n_samples=200, seed=3)
        self.ds = make_synthetic(self.spec)

    def test_shapes_and_groups(self):
        ds, spec = self.ds, self.spec
        assert ds.n_samples == 200
        assert ds.d_in == spec.d_in
        assert ds.n_views == 2
        assert ds.signal_dims.tolist() == list(range(4))
        assert ds.confounder_dims.tolist() == list(range(4, 12))
        assert ds.noise_dims.tolist() == list(range(12, 16))

    def test_every_class_present(self):
        assert set(self.ds.labels) == set(range(4))

    def test_confounder_identical_across_views(self):
        c0 = self.ds.views[0][:, self.ds.confounder_dims]
        c1 = self.ds.views[1][:, self.ds.confounder_dims]
        assert np.array_equal(c0, c1)

    def test_confounder_drawn_from_prototype_pool(self):
        c = self.ds.views[0][:, self.ds.confounder_dims]
        unique = np.unique(c, axis=0)
        assert unique.shape[0] <= self.spec.confounder_modes
        # the pool is shared across classes, so it cannot encode labels
        for proto in unique:
            members = np.all(c == proto, axis=1)
            assert len(set(self.ds.labels[members])) > 1

    def test_noise_differs_across_views(self):
        n0 = self.ds.views[0][:, self.ds.noise_dims]
        n1 = self.ds.views[1][:, self.ds.noise_dims]
        assert not np.array_equal(n0, n1)

    def test_signal_shared_up_to_view_noise(self):
        s0 = self.ds.views[0][:, self.ds.signal_dims]
        s1 = self.ds.views[1][:, self.ds.signal_dims]
        diff = np.abs(s0 - s1)
        # two independent view-noise draws of sigma 0.25
        assert diff.mean() < 6 * 0.25
        assert diff.mean() > 0.0

    def test_class_separation(self):
        s = self.ds.views[0][:, self.ds.signal_dims]
        centers = np.stack(
            [s[self.ds.labels == c].mean(axis=0) for c in range(4)]
        )
        dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
        off = dists[~np.eye(4, dtype=bool)]
        np.testing.assert_allclose(off, self.spec.class_sep, rtol=0.15)

    def test_deterministic_and_seed_sensitive(self):
        again = make_synthetic(self.spec)
        for v1, v2 in zip(self.ds.views, again.views):
            assert np.array_equal(v1, v2)
        assert np.array_equal(self.ds.labels, again.labels)
        other = make_synthetic(SyntheticSpec(n_samples=200, seed=4))
        assert not np.array_equal(self.ds.views[0], other.views[0])

    def test_views_are_frozen(self):
        with pytest.raises(ValueError):
            self.ds.views[0][0, 0] = 1.0

    def test_more_views(self):
        ds = make_synthetic(SyntheticSpec(n_samples=50, n_views=4, seed=0))
        assert ds.n_views == 4
        for v in ds.views[1:]:
            assert np.array_equal(
                v[:, ds.confounder_dims], ds.views[0][:, ds.confounder_dims]
            )


class TestMinibatches:
    def test_partition_within_epoch(self):
        ds = make_synthetic(SyntheticSpec(n_samples=64, seed=0))
        stream = minibatches(ds, 16, seed=1)
        seen = []
        for _ in range(4):
            batch = next(stream)
            assert batch.n_views == 2
            assert batch.views[0].shape == (16, ds.d_in)
            seen.append(batch.views[0])
        # one epoch covers every sample exactly once
        rows = np.concatenate(seen)
        original = ds.views[0]
        assert rows.shape == original.shape
        order = np.lexsort(rows.T)
        order_orig = np.lexsort(original.T)
        assert np.array_equal(rows[order], original[order_orig])

    def test_deterministic(self):
        ds = make_synthetic(SyntheticSpec(n_samples=64, seed=0))
        s1 = minibatches(ds, 16, seed=7)
        s2 = minibatches(ds, 16, seed=7)
        for _ in range(6):
            b1, b2 = next(s1), next(s2)
            assert np.array_equal(b1.views[0], b2.views[0])
            assert np.array_equal(b1.labels, b2.labels)

    def test_labels_follow_views(self):
        ds = make_synthetic(SyntheticSpec(n_samples=64, seed=0))
        batch = next(minibatches(ds, 32, seed=2))
        for i in range(32):
            matches = np.all(ds.views[0] == batch.views[0][i], axis=1)
            assert ds.labels[np.argmax(matches)] == batch.labels[i]

    def test_oversized_batch_rejected(self):
        ds = make_synthetic(SyntheticSpec(n_samples=16, seed=0))
        with pytest.raises(ConfigError):
            next(minibatches(ds, 17, seed=0))


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        ds = make_synthetic(SyntheticSpec(n_samples=30, seed=5))
        save_dataset(tmp_path / "ds", ds)
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.n_views == ds.n_views
        assert loaded.n_classes == ds.n_classes
        for v1, v2 in zip(ds.views, loaded.views):
            assert np.array_equal(v1, v2)
        assert np.array_equal(ds.labels, loaded.labels)
        # generator ground truth does not survive serialization
        assert loaded.signal_dims.size == 0

    def test_missing_manifest_field(self, tmp_path):
        ds = make_synthetic(SyntheticSpec(n_samples=10, seed=0))
        save_dataset(tmp_path / "ds", ds)
        path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(path.read_text())
        del manifest["n_classes"]
        path.write_text(json.dumps(manifest))
        with pytest.raises(ParseError):
            load_dataset(tmp_path / "ds")

    def test_view_shape_mismatch(self, tmp_path):
        ds = make_synthetic(SyntheticSpec(n_samples=10, seed=0))
        save_dataset(tmp_path / "ds", ds)
        from metamask.tensor import Tensor, save_mmt1

        save_mmt1(tmp_path / "ds" / "view_1.mmt", Tensor.zeros((9, ds.d_in)))
        with pytest.raises(ShapeError):
            load_dataset(tmp_path / "ds")

    def test_label_out_of_range(self, tmp_path):
        ds = make_synthetic(SyntheticSpec(n_samples=10, seed=0))
        save_dataset(tmp_path / "ds", ds)
        from metamask.tensor import Tensor, save_mmt1

        bad = ds.labels.astype(np.float64)
        bad[0] = 99.0
        save_mmt1(tmp_path / "ds" / "labels.mmt", Tensor._wrap(bad))
        with pytest.raises(ParseError):
            load_dataset(tmp_path / "ds")

    def test_non_integer_labels(self, tmp_path):
        ds = make_synthetic(SyntheticSpec(n_samples=10, seed=0))
        save_dataset(tmp_path / "ds", ds)
        from metamask.tensor import Tensor, save_mmt1

        bad = ds.labels.astype(np.float64)
        bad[0] = 0.5
        save_mmt1(tmp_path / "ds" / "labels.mmt", Tensor._wrap(bad))
        with pytest.raises(ParseError):
            load_dataset(tmp_path / "ds")

    def test_unparseable_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            load_dataset(path)

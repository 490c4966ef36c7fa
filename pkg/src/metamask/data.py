"""Multi-view dataset construction and deterministic minibatching.

The synthetic generator plants three kinds of input coordinates:

* signal: class centers plus a per-sample offset, shared across views up
  to view noise -- the only coordinates a classifier can use;
* confounder: a per-sample vector drawn from a small pool of shared
  prototypes and copied bit-exactly into every view. View-invariant but
  class-independent, and because unrelated samples share a prototype it
  makes negatives look alike, confusing instance discrimination;
* noise: redrawn independently for every view.

Labels ride along for evaluation only; training code receives views.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .tensor import load_mmt1, save_mmt1, Tensor


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 2000
    n_classes: int = 4
    d_signal: int = 4
    d_confounder: int = 8
    d_noise: int = 4
    class_sep: float = 6.0
    signal_offset_sigma: float = 0.3
    view_noise_sigma: float = 0.25
    confounder_sigma: float = 5.0
    confounder_modes: int = 2
    n_views: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d_signal < 1:
            raise ConfigError("d_signal must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_samples < self.n_classes:
            raise ConfigError("need at least one sample per class")
        if self.n_views < 2:
            raise ConfigError("need at least 2 views")
        if min(self.d_confounder, self.d_noise) < 0 or self.view_noise_sigma < 0:
            raise ConfigError("negative spec field")
        if self.signal_offset_sigma < 0 or self.confounder_sigma < 0:
            raise ConfigError("negative spec field")
        if self.d_confounder > 0 and self.confounder_modes < 1:
            raise ConfigError("confounder_modes must be >= 1")
        if self.class_sep <= 0:
            raise ConfigError("class_sep must be positive")

    @property
    def d_in(self) -> int:
        return self.d_signal + self.d_confounder + self.d_noise


@dataclass
class Dataset:
    """Views, labels, and the generator's ground-truth coordinate groups
    (empty for externally loaded data)."""

    views: list  # M arrays of shape n_samples x d_in
    labels: np.ndarray
    n_classes: int
    signal_dims: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    confounder_dims: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    noise_dims: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def d_in(self) -> int:
        return self.views[0].shape[1]

    @property
    def n_views(self) -> int:
        return len(self.views)


@dataclass
class MultiViewBatch:
    views: list  # M arrays of shape N x d_in
    labels: np.ndarray

    @property
    def n_views(self) -> int:
        return len(self.views)


def _class_centers(n_classes: int, d_signal: int, class_sep: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Class centers with pairwise distance class_sep (exact when
    n_classes <= d_signal via an orthonormal frame, approximate
    otherwise)."""
    g = rng.normal(size=(max(n_classes, d_signal), d_signal))
    if n_classes <= d_signal:
        q, _ = np.linalg.qr(g.T)
        frame = q.T[:n_classes]
    else:
        frame = g[:n_classes]
        frame /= np.linalg.norm(frame, axis=1, keepdims=True)
    return frame * (class_sep / np.sqrt(2.0))


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n, m = spec.n_samples, spec.n_views
    labels = rng.integers(0, spec.n_classes, size=n)
    # guarantee every class appears
    labels[: spec.n_classes] = np.arange(spec.n_classes)

    centers = _class_centers(spec.n_classes, spec.d_signal, spec.class_sep, rng)
    base_signal = centers[labels] + spec.signal_offset_sigma * rng.normal(
        size=(n, spec.d_signal)
    )
    prototypes = rng.normal(size=(spec.confounder_modes, spec.d_confounder))
    modes = rng.integers(0, spec.confounder_modes, size=n)
    confounder = spec.confounder_sigma * prototypes[modes]

    views = []
    for _ in range(m):
        v = np.empty((n, spec.d_in))
        v[:, : spec.d_signal] = base_signal + spec.view_noise_sigma * rng.normal(
            size=(n, spec.d_signal)
        )
        v[:, spec.d_signal : spec.d_signal + spec.d_confounder] = confounder
        v[:, spec.d_signal + spec.d_confounder :] = rng.normal(size=(n, spec.d_noise))
        v.flags.writeable = False
        views.append(v)

    return Dataset(
        views=views,
        labels=labels.astype(int),
        n_classes=spec.n_classes,
        signal_dims=np.arange(spec.d_signal),
        confounder_dims=np.arange(spec.d_signal, spec.d_signal + spec.d_confounder),
        noise_dims=np.arange(spec.d_signal + spec.d_confounder, spec.d_in),
    )


def minibatches(dataset: Dataset, batch_size: int, seed: int):
    """Endless stream of batches: each epoch is a fresh seeded shuffle
    without replacement; deterministic given the seed."""
    if batch_size > dataset.n_samples:
        raise ConfigError(
            f"batch_size {batch_size} exceeds dataset size {dataset.n_samples}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = dataset.n_samples
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            yield MultiViewBatch(
                views=[v[idx] for v in dataset.views],
                labels=dataset.labels[idx],
            )


def save_dataset(directory, dataset: Dataset) -> None:
    """Write per-view MMT1 tensors, an f64-coded label vector, and the
    JSON manifest naming them."""
    os.makedirs(directory, exist_ok=True)
    view_files = []
    for j, v in enumerate(dataset.views):
        fname = f"view_{j}.mmt"
        save_mmt1(os.path.join(directory, fname), Tensor._wrap(v))
        view_files.append(fname)
    save_mmt1(os.path.join(directory, "labels.mmt"),
              Tensor._wrap(dataset.labels.astype(np.float64)))
    manifest = {
        "views": view_files,
        "labels": "labels.mmt",
        "n_classes": dataset.n_classes,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset manifest, validating view-shape agreement and label
    range."""
    manifest_path = os.fspath(manifest_path)
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.json")
    base = os.path.dirname(manifest_path)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{manifest_path}: {exc}") from exc
    for key in ("views", "labels", "n_classes"):
        if key not in manifest:
            raise ParseError(f"{manifest_path}: missing field {key!r}")
    views = []
    shapes = {}
    for fname in manifest["views"]:
        t = load_mmt1(os.path.join(base, fname))
        if t.ndim != 2:
            raise ShapeError(f"{fname}: views must be rank-2, got {t.shape}")
        views.append(t.array)
        shapes[fname] = t.shape
    first = manifest["views"][0]
    for fname in manifest["views"][1:]:
        if shapes[fname] != shapes[first]:
            raise ShapeError(
                f"view shape mismatch: {first} has {shapes[first]}, "
                f"{fname} has {shapes[fname]}"
            )
    labels_t = load_mmt1(os.path.join(base, manifest["labels"]))
    labels_f = labels_t.array.reshape(-1)
    if labels_f.shape[0] != views[0].shape[0]:
        raise ShapeError(
            f"label count {labels_f.shape[0]} != sample count {views[0].shape[0]}"
        )
    labels = labels_f.astype(int)
    if np.any(labels_f != labels):
        raise ParseError("labels must be integer-valued")
    n_classes = int(manifest["n_classes"])
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParseError(
            f"label out of range [0, {n_classes}): {int(labels_f.min())}..{int(labels_f.max())}"
        )
    return Dataset(views=views, labels=labels, n_classes=n_classes)

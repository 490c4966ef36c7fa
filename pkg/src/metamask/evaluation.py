"""Evaluation and diagnostic protocols: KNN classification, linear
probing, the random- and learned-mask studies, the projection-head
dimensionality sweep, and the conditional-variance checks.

Downstream evaluation always reads the unmasked representation h; the
``eval_on_masked`` switches exist for the physical-masking comparison.
Every study is deterministic given its seed: each trial draws its
randomness from a SeedSequence spawned at (rate_index, trial_index), so
serial and parallel execution agree.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigError, DivergenceError, DomainError, ShapeError
from .meta_opt import TrainConfig, train


@dataclass
class RepresentationSet:
    reps: np.ndarray  # N x D
    labels: np.ndarray  # length N ints

    def __post_init__(self):
        self.reps = np.asarray(self.reps, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.reps.ndim != 2 or self.reps.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"reps {self.reps.shape} do not match {self.labels.shape[0]} labels"
            )


@dataclass
class MaskStudyResult:
    mask_rate: float
    accuracies: list
    baseline: float
    masked_dims: list = field(default_factory=list)  # one dim list per trial


@dataclass
class LearnedMaskReport:
    below_average_dims: np.ndarray
    degenerate_split: bool
    results: list


@dataclass
class SweepRow:
    width: int
    variant: str  # "full" or "no_meta"
    accuracy: float
    final_loss_drr: float
    final_loss_contrast: float


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.5
    steps: int = 400
    seed: int = 0


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe


def knn_eval(train_set: RepresentationSet, test_set: RepresentationSet, k: int = 5) -> float:
    """K-nearest-neighbor accuracy under cosine distance.

    Neighbor order ties break on the lower training index; vote ties break
    on the smaller summed distance, then the lower class index. Zero
    vectors get similarity 0 to everything.
    """
    if train_set.reps.shape[1] != test_set.reps.shape[1]:
        raise ShapeError(
            f"train dim {train_set.reps.shape[1]} != test dim {test_set.reps.shape[1]}"
        )
    n_train = train_set.reps.shape[0]
    if not (1 <= k <= n_train):
        raise ConfigError(f"k={k} must be in [1, {n_train}]")
    dists = 1.0 - _normalize(test_set.reps) @ _normalize(train_set.reps).T
    train_labels = train_set.labels
    tie_index = np.arange(n_train)
    correct = 0
    for row, truth in zip(dists, test_set.labels):
        nearest = np.lexsort((tie_index, row))[:k]
        votes = train_labels[nearest]
        classes, counts = np.unique(votes, return_counts=True)
        tied = classes[counts == counts.max()]
        if tied.size > 1:
            sums = np.array([row[nearest[votes == c]].sum() for c in tied])
            tied = tied[sums == sums.min()]
        if int(tied.min()) == int(truth):
            correct += 1
    return correct / len(test_set.labels)


def linear_probe(train_set: RepresentationSet, test_set: RepresentationSet,
                 cfg: ProbeConfig = ProbeConfig()) -> float:
    """Train a single linear layer with softmax cross-entropy on frozen
    representations by full-batch gradient descent; report test accuracy."""
    if train_set.reps.shape[1] != test_set.reps.shape[1]:
        raise ShapeError("probe train/test dimensionality mismatch")
    x, y = train_set.reps, train_set.labels
    n, d = x.shape
    n_classes = int(max(y.max(), test_set.labels.max())) + 1
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    w = 0.01 * rng.normal(size=(d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for step in range(cfg.steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
        if not np.isfinite(loss):
            raise DivergenceError(f"probe loss diverged at step {step}", step=step)
        g = (p - onehot) / n
        w -= cfg.lr * (x.T @ g)
        b -= cfg.lr * g.sum(axis=0)
    pred = np.argmax(test_set.reps @ w + b, axis=1)
    return float(np.mean(pred == test_set.labels))


def split_representations(reps: np.ndarray, labels: np.ndarray, seed: int,
                          test_fraction: float = 0.5):
    """Seeded shuffle split into (train, test) RepresentationSets."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = reps.shape[0]
    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    test_idx, train_idx = order[:n_test], order[n_test:]
    return (
        RepresentationSet(reps[train_idx], labels[train_idx]),
        RepresentationSet(reps[test_idx], labels[test_idx]),
    )


def _trial_rng(seed: int, rate_index: int, trial_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(rate_index, trial_index))
    )


def random_mask_study(reps: np.ndarray, labels: np.ndarray, mask_rates,
                      trials_per_rate: int, k: int = 5, seed: int = 0,
                      candidate_dims=None, threads: int = 1) -> list:
    """Zero random dimension subsets of a fixed representation and re-run
    KNN at each mask rate.

    ``candidate_dims`` restricts the choice to a subset of dimensions (used
    by the learned-mask study); by default any dimension may be masked.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    d = reps.shape[1]
    pool = np.arange(d) if candidate_dims is None else np.asarray(candidate_dims, dtype=int)
    for rate in mask_rates:
        if not (0.0 <= rate <= 1.0):
            raise ConfigError(f"mask rate {rate} outside [0, 1]")
    train_set, test_set = split_representations(reps, labels, seed)
    baseline = knn_eval(train_set, test_set, k)

    def run_trial(rate_index, trial_index):
        rate = mask_rates[rate_index]
        n_mask = int(np.ceil(rate * pool.size))
        rng = _trial_rng(seed, rate_index, trial_index)
        dims = np.sort(rng.choice(pool, size=n_mask, replace=False)) if n_mask else np.array([], dtype=int)
        tr = train_set.reps.copy()
        te = test_set.reps.copy()
        tr[:, dims] = 0.0
        te[:, dims] = 0.0
        acc = knn_eval(RepresentationSet(tr, train_set.labels),
                       RepresentationSet(te, test_set.labels), k)
        return acc, dims.tolist()

    jobs = [(ri, ti) for ri in range(len(mask_rates)) for ti in range(trials_per_rate)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            outs = list(pool_exec.map(lambda job: run_trial(*job), jobs))
    else:
        outs = [run_trial(*job) for job in jobs]

    results = []
    for ri, rate in enumerate(mask_rates):
        chunk = outs[ri * trials_per_rate : (ri + 1) * trials_per_rate]
        results.append(MaskStudyResult(
            mask_rate=float(rate),
            accuracies=[acc for acc, _ in chunk],
            baseline=baseline,
            masked_dims=[dims for _, dims in chunk],
        ))
    return results


def representations(params: nn.ModelParams, dataset, view: int = 0,
                    masked: bool = False) -> RepresentationSet:
    """Unmasked (default) representations h of one view of a dataset."""
    h = nn.encode_dataset(params, dataset.views[view])
    if masked:
        h = h * params.mask.array[None, :]
    return RepresentationSet(h, dataset.labels)


def learned_mask_study(params: nn.ModelParams, dataset, mask_rates,
                       trials: int, k: int = 5, seed: int = 0,
                       threads: int = 1) -> LearnedMaskReport:
    """Random masking restricted to the dimensions whose learned weight is
    below the mask average (rate 1.0 masks all of them)."""
    omega = params.mask.array
    below = np.flatnonzero(omega < omega.mean())
    degenerate = below.size == 0 or np.ptp(omega) == 0.0
    rep_set = representations(params, dataset)
    if degenerate:
        return LearnedMaskReport(below_average_dims=below, degenerate_split=True,
                                 results=[])
    results = random_mask_study(rep_set.reps, rep_set.labels, mask_rates, trials,
                                k=k, seed=seed, candidate_dims=below, threads=threads)
    return LearnedMaskReport(below_average_dims=below, degenerate_split=False,
                             results=results)


def conditional_variance(features: np.ndarray, labels: np.ndarray,
                         delta: str = "sq_dist", per_dimension: bool = False):
    """Class-frequency-weighted within-class dispersion around the class
    mean feature, under the squared-distance or negative-log-cosine
    discrepancy. ``per_dimension`` applies the scalar discrepancy to each
    coordinate and returns a length-D vector.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {features.shape} vs {labels.shape[0]} labels")
    if labels.size == 0:
        raise ConfigError("conditional variance of an empty set")
    if delta not in ("sq_dist", "neg_log_cos"):
        raise ConfigError(f"unknown delta {delta!r}")
    n = labels.shape[0]
    total = np.zeros(features.shape[1]) if per_dimension else 0.0
    for cls in np.unique(labels):
        members = features[labels == cls]
        weight = members.shape[0] / n
        mean = members.mean(axis=0)
        if per_dimension:
            if delta == "sq_dist":
                disc = (members - mean) ** 2
            else:
                prod = members * mean
                if np.any(prod <= 0.0):
                    raise DomainError(
                        f"nonpositive scalar cosine in class {int(cls)} under neg_log_cos"
                    )
                disc = np.zeros_like(members)  # scalar cosine is exactly 1
            total = total + weight * disc.mean(axis=0)
        else:
            if delta == "sq_dist":
                disc = np.sum((members - mean) ** 2, axis=1)
            else:
                denom = np.linalg.norm(members, axis=1) * np.linalg.norm(mean)
                if np.any(denom == 0.0):
                    raise DomainError("zero-norm feature under neg_log_cos")
                cos = (members @ mean) / denom
                if np.any(cos <= 0.0):
                    raise DomainError(
                        f"feature orthogonal or opposed to its class mean "
                        f"(class {int(cls)})"
                    )
                disc = -np.log(cos)
            total = total + weight * disc.mean()
    return total


@dataclass
class Theorem2Report:
    phi_masked: float
    phi_unmasked: float
    per_dim_masked: np.ndarray
    per_dim_unmasked: np.ndarray
    per_dim_gap: np.ndarray
    delta: str


def theorem2_check(params: nn.ModelParams, dataset, delta: str = "sq_dist",
                   view: int = 0) -> Theorem2Report:
    """Conditional variance of the contrastive-head features computed from
    the masked and the unmasked representation.

    Values are reported, not asserted: the inequality is premised on an
    optimal mask. The per-dimension vectors use the squared scalar
    discrepancy (the scalar cosine is degenerate per coordinate).
    """
    from .autograd import Var
    from .tensor import Tensor

    h = nn.encode_dataset(params, dataset.views[view])
    cl_vars = nn.mlp_vars(params.vartheta_cl)

    def head(x):
        return nn.head_forward(cl_vars, Var.leaf(Tensor._wrap(x))).array

    feats_masked = head(h * params.mask.array[None, :])
    feats_unmasked = head(h)
    phi_m = conditional_variance(feats_masked, dataset.labels, delta)
    phi_u = conditional_variance(feats_unmasked, dataset.labels, delta)
    per_m = conditional_variance(feats_masked, dataset.labels, "sq_dist",
                                 per_dimension=True)
    per_u = conditional_variance(feats_unmasked, dataset.labels, "sq_dist",
                                 per_dimension=True)
    return Theorem2Report(
        phi_masked=float(phi_m),
        phi_unmasked=float(phi_u),
        per_dim_masked=per_m,
        per_dim_unmasked=per_u,
        per_dim_gap=per_m - per_u,
        delta=delta,
    )


def _with_head_width(cfg: TrainConfig, width: int) -> TrainConfig:
    d = cfg.model.repr_dim
    head = nn.MlpSpec((d, *cfg.model.cl_head.layer_widths[1:-1], width))
    model = nn.ModelSpec(encoder=cfg.model.encoder, cl_head=head, drr_head=head)
    return replace(cfg, model=model)


def dimension_sweep(base_cfg: TrainConfig, dataset, head_widths, seed: int,
                    k: int = 5, eval_views: int = 1, eval_splits: int = 1) -> list:
    """Train one model per projection-head width for both the full method
    and the no_meta ablation; KNN-evaluate each on held-out reps.

    With the defaults each row equals a plain train+eval. Raising
    eval_views or eval_splits averages the accuracy over several views and
    shuffle splits, which damps split sensitivity when comparing the two
    variants' accuracy-versus-width curves.
    """
    if not (1 <= eval_views <= dataset.n_views):
        raise ConfigError(f"eval_views must be in [1, {dataset.n_views}]")
    if eval_splits < 1:
        raise ConfigError("eval_splits must be >= 1")
    rows = []
    for width in head_widths:
        if width < 1:
            raise ConfigError(f"head width must be positive, got {width}")
        for variant in ("full", "no_meta"):
            cfg = _with_head_width(base_cfg, int(width))
            if variant == "no_meta":
                cfg = replace(cfg, ablation=replace(cfg.ablation, no_meta=True))
            params, records = train(cfg, dataset, seed)
            accs = []
            for view in range(eval_views):
                rep_set = representations(params, dataset, view=view)
                for split in range(eval_splits):
                    tr, te = split_representations(
                        rep_set.reps, rep_set.labels, seed + 1000 * split
                    )
                    accs.append(knn_eval(tr, te, k))
            rows.append(SweepRow(
                width=int(width),
                variant=variant,
                accuracy=float(np.mean(accs)),
                final_loss_drr=records[-1].loss_drr,
                final_loss_contrast=records[-1].loss_contrast,
            ))
    return rows


def dimension_alignment(params: nn.ModelParams, dataset, view: int = 0) -> dict:
    """Assign each representation dimension to the generator's coordinate
    group (signal / confounder / noise) it reads out most strongly.

    Strength of a group for a representation dimension is the largest
    absolute Pearson correlation between that dimension and any single
    input coordinate in the group. A single-regressor least-squares fit on
    standardized columns has coefficient and R^2 determined by exactly
    this correlation, so the assignment is the best one-coordinate linear
    readout per group. Grouped multi-coordinate fits were tried and found
    degenerate: wide groups soak up variance regardless of alignment.
    """
    if dataset.signal_dims.size == 0:
        raise ConfigError("dataset carries no generator ground truth")
    h = nn.encode_dataset(params, dataset.views[view])
    x = dataset.views[view]
    hz = (h - h.mean(axis=0)) / (h.std(axis=0) + 1e-12)
    xz = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-12)
    corr = np.abs(hz.T @ xz) / h.shape[0]
    groups = {
        "signal": dataset.signal_dims,
        "confounder": dataset.confounder_dims,
        "noise": dataset.noise_dims,
    }
    strength = {
        name: (corr[:, dims].max(axis=1) if dims.size else np.zeros(h.shape[1]))
        for name, dims in groups.items()
    }
    names = list(groups)
    stacked = np.stack([strength[name] for name in names])
    assignment = np.array([names[i] for i in np.argmax(stacked, axis=0)])
    return {"strength": strength, "assignment": assignment}

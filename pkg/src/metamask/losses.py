"""Training objectives: multi-view contrastive loss, cross-correlation
redundancy reduction, and their weighted combination.

The contrastive loss sums over samples i and ordered view pairs (j, j+)
with j < j+; the denominator runs over every candidate (i', j') admitted
by the indicator [i != i' or j != j'], i.e. it excludes only the anchor
itself (and therefore contains the positive pair, as printed -- a flag
exists to drop it). The cross-correlation matrix is the column-pairwise
batch cosine similarity between two views' features, with no mean
centering by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .errors import ConfigError, DomainError, ShapeError


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    similarity: str = "cosine"
    include_positive_in_denominator: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.similarity != "cosine":
            raise ConfigError(f"unsupported similarity {self.similarity!r}")


@dataclass(frozen=True)
class DrrConfig:
    lam: float = 0.005
    standardize: bool = False

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")


def _normalize_rows(z: Var) -> Var:
    norms_sq = ag.vsum(ag.square(z), axis=1)
    if np.any(norms_sq.array == 0.0):
        raise DomainError("zero-norm feature vector: cosine similarity undefined")
    inv = ag.div(ag._const(np.ones(norms_sq.shape)), ag.sqrt(norms_sq))
    return ag.scale_rows(z, inv)


def _masked_row_lse(scaled: Var, admit: np.ndarray) -> Var:
    """Row-wise log-sum-exp of ``scaled`` restricted to entries where the
    constant 0/1 matrix ``admit`` is 1, via max-subtraction.

    The subtracted per-row max is a detached constant, so the identity
    lse = log(sum(admit * exp(s - m))) + m is exact for values and for
    derivatives of any order.
    """
    vals = np.where(admit > 0, scaled.array, -np.inf)
    row_max = np.max(vals, axis=1)
    shifted = ag.sub(scaled, ag._const(np.broadcast_to(row_max[:, None], scaled.shape).copy()))
    masked = ag.mul(ag.exp(shifted), ag._const(admit))
    return ag.add(ag.log(ag.vsum(masked, axis=1)), ag._const(row_max))


def contrastive_loss(z: Var, cfg: ContrastiveConfig = ContrastiveConfig()) -> Var:
    """Multi-view InfoNCE-style loss over features of shape N x M x D'."""
    if z.array.ndim != 3:
        raise ShapeError(f"contrastive_loss expects N x M x D' features, got {z.shape}")
    n, m, _ = z.shape
    if m < 2:
        raise ConfigError(f"contrastive loss needs at least 2 views, got {m}")
    flat = ag.reshape(z, (n * m, z.shape[2]))  # row a = i*M + j
    zn = _normalize_rows(flat)
    scaled = ag.mul(ag.matmul(zn, ag.transpose(zn)), ag._const(1.0 / cfg.temperature))

    total = n * m
    eye = np.eye(total)
    # positives[a, a+] = 1 for each anchor (i, j) and partner (i, j+), j < j+
    positives = np.zeros((total, total))
    for j in range(m - 1):
        for jp in range(j + 1, m):
            idx = np.arange(n)
            positives[idx * m + j, idx * m + jp] = 1.0
    pos_term = ag.vsum(ag.mul(scaled, ag._const(positives)))

    if cfg.include_positive_in_denominator:
        # one denominator per anchor (exclude only the anchor itself),
        # reused across the (M - 1 - j) pairs the anchor participates in
        lse = _masked_row_lse(scaled, 1.0 - eye)
        counts = np.tile(np.arange(m - 1, -1, -1, dtype=np.float64), n)
        den_term = ag.vsum(ag.mul(lse, ag._const(counts)))
    else:
        den_term = None
        for j in range(m - 1):
            for jp in range(j + 1, m):
                admit = 1.0 - eye.copy()
                idx = np.arange(n)
                admit[idx * m + j, idx * m + jp] = 0.0
                anchors = np.zeros(total)
                anchors[idx * m + j] = 1.0
                term = ag.vsum(ag.mul(_masked_row_lse(scaled, admit), ag._const(anchors)))
                den_term = term if den_term is None else ag.add(den_term, term)

    return ag.sub(den_term, pos_term)


def cross_correlation(z_a: Var, z_b: Var, standardize: bool = False) -> Var:
    """Column-pairwise batch cosine similarity C between two feature sets.

    With ``standardize`` the columns are mean-centered and variance-scaled
    first (the common reference practice); the default applies the formula
    to the raw columns.
    """
    if z_a.array.ndim != 2 or z_b.array.ndim != 2 or z_a.shape != z_b.shape:
        raise ShapeError(f"cross_correlation shapes disagree: {z_a.shape} vs {z_b.shape}")
    if standardize:
        z_a = _standardize_cols(z_a)
        z_b = _standardize_cols(z_b)
    numer = ag.matmul(ag.transpose(z_a), z_b)
    norm_a = _col_norms(z_a, "first")
    norm_b = _col_norms(z_b, "second")
    d = z_a.shape[1]
    denom = ag.matmul(ag.reshape(norm_a, (d, 1)), ag.reshape(norm_b, (1, d)))
    return ag.div(numer, denom)


def _col_norms(z: Var, which: str) -> Var:
    sq = ag.vsum(ag.square(z), axis=0)
    zero = np.flatnonzero(sq.array == 0.0)
    if zero.size:
        raise DomainError(f"all-zero column {int(zero[0])} in {which} input")
    return ag.sqrt(sq)


def _standardize_cols(z: Var) -> Var:
    mean = ag.vmean(z, axis=0)
    centered = ag.sub(z, mean)
    var = ag.vmean(ag.square(centered), axis=0)
    if np.any(var.array == 0.0):
        raise DomainError("constant column cannot be standardized")
    return ag.div(centered, ag.sqrt(var))


def drr_loss(zs, cfg: DrrConfig = DrrConfig()) -> Var:
    """Redundancy-reduction loss over all view pairs (j < j+):
    sum_k (1 - C_kk)^2 + lambda * sum_{k != k'} C_kk'^2."""
    zs = list(zs)
    if len(zs) < 2:
        raise ConfigError(f"drr loss needs at least 2 views, got {len(zs)}")
    d = zs[0].shape[1]
    eye = ag._const(np.eye(d))
    off = ag._const(1.0 - np.eye(d))
    ones_d = ag._const(np.ones(d))
    total = None
    for j in range(len(zs) - 1):
        for jp in range(j + 1, len(zs)):
            c = cross_correlation(zs[j], zs[jp], standardize=cfg.standardize)
            diag = ag.vsum(ag.mul(c, eye), axis=1)
            on_term = ag.vsum(ag.square(ag.sub(ones_d, diag)))
            off_term = ag.mul(ag.vsum(ag.mul(ag.square(c), off)), ag._const(cfg.lam))
            pair = ag.add(on_term, off_term)
            total = pair if total is None else ag.add(total, pair)
    return total


def regular_loss(z_drr, z_cl: Var, alpha: float,
                 contrastive_cfg: ContrastiveConfig = ContrastiveConfig(),
                 drr_cfg: DrrConfig = DrrConfig()) -> Var:
    """Combined objective L_drr + alpha * L_contrast.

    ``z_drr`` is the per-view list of redundancy-head features and
    ``z_cl`` the stacked N x M x D' contrastive-head features.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    l_drr = drr_loss(z_drr, drr_cfg)
    l_con = contrastive_loss(z_cl, contrastive_cfg)
    return ag.add(l_drr, ag.mul(ag._const(float(alpha)), l_con))

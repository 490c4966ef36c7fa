"""The two-step training loop: a regular step updating encoder and heads
on the combined objective with the mask frozen, then a meta step updating
only the mask by differentiating the contrastive loss of one-step-lookahead
(trial) weights back to the mask, second derivatives included.

Optimizers: SGD with momentum for encoder and heads, plain SGD for the
mask (momentum on the hypergradient path would entangle meta updates
across steps). The trial update is always plain SGD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Var
from .data import minibatches
from .errors import ConfigError, DivergenceError
from .losses import ContrastiveConfig, DrrConfig, contrastive_loss, drr_loss
from .tensor import Tensor


@dataclass(frozen=True)
class OptimConfig:
    lr_main: float = 3e-5
    lr_trial_theta: float | None = None  # default: current (scheduled) main rate
    lr_trial_vartheta: float | None = None
    lr_mask: float = 0.01
    momentum: float = 0.9
    schedule: str = "cosine_annealing"
    total_steps: int = 1000
    alpha: float = 100.0

    def __post_init__(self):
        for name in ("lr_main", "lr_mask"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.schedule not in ("cosine_annealing", "fixed"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "fixed":
            return self.lr_main
        frac = min(step, self.total_steps) / self.total_steps
        return 0.5 * self.lr_main * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class Ablation:
    no_meta: bool = False
    no_drr: bool = False
    contrastive_only: bool = False
    drr_only: bool = False

    def __post_init__(self):
        if self.contrastive_only and self.drr_only:
            raise ConfigError("contrastive_only and drr_only are mutually exclusive")

    @property
    def skip_meta(self) -> bool:
        return self.no_meta or self.contrastive_only or self.drr_only

    @property
    def drr_coef(self) -> float:
        return 0.0 if (self.no_drr or self.contrastive_only) else 1.0

    def contrast_coef(self, alpha: float) -> float:
        return 0.0 if self.drr_only else float(alpha)


@dataclass(frozen=True)
class TrainConfig:
    model: nn.ModelSpec
    optim: OptimConfig = OptimConfig()
    contrastive: ContrastiveConfig = ContrastiveConfig()
    drr: DrrConfig = DrrConfig()
    ablation: Ablation = Ablation()
    batch_size: int = 64


@dataclass
class TrainState:
    params: nn.ModelParams
    velocity: dict  # name -> momentum buffer (np.ndarray), mask excluded
    step: int = 0

    @classmethod
    def init(cls, spec: nn.ModelSpec, seed: int) -> "TrainState":
        params = nn.init_params(spec, seed)
        velocity = {
            name: np.zeros(t.shape)
            for name, t in params.flat_tensors()
            if name != "mask"
        }
        return cls(params=params, velocity=velocity, step=0)


@dataclass
class StepRecord:
    step: int
    loss_drr: float
    loss_contrast: float
    loss_meta: float | None
    mask_mean: float
    mask_min: float
    mask_max: float
    lr_main: float
    lr_mask: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "loss_drr": self.loss_drr,
            "loss_contrast": self.loss_contrast,
            "loss_meta": self.loss_meta,
            "mask_mean": self.mask_mean,
            "mask_min": self.mask_min,
            "mask_max": self.mask_max,
            "lr_main": self.lr_main,
            "lr_mask": self.lr_mask,
        }


def _bind_params(params: nn.ModelParams):
    return (
        nn.mlp_vars(params.theta),
        nn.mlp_vars(params.vartheta_cl),
        nn.mlp_vars(params.vartheta_drr),
    )


def _forward_views(theta_vars, head_vars, mask_var, batch):
    """Per-view head features g(f(x) * mask) for one head."""
    outs = []
    for x in batch.views:
        h = nn.encoder_forward(theta_vars, Var.leaf(Tensor._wrap(x)))
        outs.append(nn.head_forward(head_vars, nn.apply_mask(h, mask_var)))
    return outs


def regular_step(state: TrainState, batch, cfg: TrainConfig):
    """One update of theta, vartheta_cl, vartheta_drr on
    L_drr + alpha * L_contrast with the mask held constant.

    Both loss paths are always built (ablations zero a coefficient), so a
    switched-off branch contributes an exact-zero gradient rather than no
    gradient. Returns (state, {"drr": ..., "contrast": ...}).
    """
    if batch.n_views < 2:
        raise ConfigError("regular_step needs at least 2 views")
    optim, ab = cfg.optim, cfg.ablation
    theta_vars, cl_vars, drr_vars = _bind_params(state.params)
    mask_var = Var.leaf(state.params.mask)  # frozen: not a grad target

    z_cl = _forward_views(theta_vars, cl_vars, mask_var, batch)
    z_drr = _forward_views(theta_vars, drr_vars, mask_var, batch)
    l_con = contrastive_loss(ag.stack_views(z_cl), cfg.contrastive)
    l_drr = drr_loss(z_drr, cfg.drr)
    loss = ag.add(
        ag.mul(ag.const(ab.drr_coef), l_drr),
        ag.mul(ag.const(ab.contrast_coef(optim.alpha)), l_con),
    )
    if not (math.isfinite(l_drr.item()) and math.isfinite(l_con.item())):
        raise DivergenceError(
            f"non-finite loss at step {state.step}", step=state.step
        )

    leaves = nn.flatten_vars(theta_vars) + nn.flatten_vars(cl_vars) + nn.flatten_vars(drr_vars)
    grads = ag.grad(loss, leaves, create_graph=False)

    lr = optim.lr_at(state.step)
    names = [name for name, _ in state.params.flat_tensors() if name != "mask"]
    updated = {}
    for name, leaf, g in zip(names, leaves, grads):
        buf = optim.momentum * state.velocity[name] + g.array
        state.velocity[name] = buf
        updated[name] = Tensor._wrap(leaf.array - lr * buf)
    _write_back(state.params, updated)
    state.step += 1
    return state, {"drr": l_drr.item(), "contrast": l_con.item()}


def _write_back(params: nn.ModelParams, updated: dict) -> None:
    for group_name, layers in (("theta", params.theta), ("cl", params.vartheta_cl),
                               ("drr", params.vartheta_drr)):
        for i in range(len(layers)):
            layers[i] = (updated[f"{group_name}.{i}.W"], updated[f"{group_name}.{i}.b"])


def _trial_graph(state: TrainState, batch, cfg: TrainConfig, step: int | None = None):
    """Trial weights after one plain-SGD contrastive step, recorded with
    create_graph=True so they stay differentiable functions of the mask.

    Returns (theta_trial, cl_trial, mask_var) where the trial entries are
    (W, b) Var pairs and mask_var is the shared mask leaf.
    """
    optim = cfg.optim
    if step is None:
        step = state.step
    theta_vars, cl_vars, _ = _bind_params(state.params)
    mask_var = Var.leaf(state.params.mask)

    z_cl = _forward_views(theta_vars, cl_vars, mask_var, batch)
    l_con = contrastive_loss(ag.stack_views(z_cl), cfg.contrastive)

    theta_flat = nn.flatten_vars(theta_vars)
    cl_flat = nn.flatten_vars(cl_vars)
    grads = ag.grad(l_con, theta_flat + cl_flat, create_graph=True)

    lr_now = optim.lr_at(step)
    lr_theta = optim.lr_trial_theta if optim.lr_trial_theta is not None else lr_now
    lr_vartheta = (
        optim.lr_trial_vartheta if optim.lr_trial_vartheta is not None else lr_now
    )

    def one_step(flat, gs, lr):
        stepped = [ag.sub(p, ag.mul(ag.const(float(lr)), g)) for p, g in zip(flat, gs)]
        return [(stepped[2 * i], stepped[2 * i + 1]) for i in range(len(flat) // 2)]

    theta_trial = one_step(theta_flat, grads[: len(theta_flat)], lr_theta)
    cl_trial = one_step(cl_flat, grads[len(theta_flat) :], lr_vartheta)
    return theta_trial, cl_trial, mask_var


def trial_weights(state: TrainState, batch, cfg: TrainConfig, step: int | None = None):
    """(theta_trial, vartheta_trial) as graph-live vars; state untouched."""
    theta_trial, cl_trial, _ = _trial_graph(state, batch, cfg, step=step)
    return theta_trial, cl_trial


def meta_step(state: TrainState, batch, cfg: TrainConfig, step: int | None = None):
    """Update only the mask by the exact hypergradient of the lookahead
    contrastive loss. Returns (state, meta_loss_value)."""
    theta_trial, cl_trial, mask_var = _trial_graph(state, batch, cfg, step=step)
    z_meta = _forward_views(theta_trial, cl_trial, mask_var, batch)
    l_meta = contrastive_loss(ag.stack_views(z_meta), cfg.contrastive)
    (g_mask,) = ag.grad(l_meta, [mask_var], create_graph=False)
    if not (math.isfinite(l_meta.item()) and np.all(np.isfinite(g_mask.array))):
        raise DivergenceError(
            f"non-finite hypergradient at step {state.step}", step=state.step
        )
    state.params.mask = Tensor._wrap(
        state.params.mask.array - cfg.optim.lr_mask * g_mask.array
    )
    return state, l_meta.item()


def train(cfg: TrainConfig, dataset, seed: int, report_cb=None):
    """Run the full loop for total_steps iterations.

    Per iteration: sample a minibatch, regular step, then (unless ablated
    away) the trial/meta step on the same minibatch. Deterministic given
    the seed. Returns (params, [StepRecord, ...]); on divergence raises
    DivergenceError with the partial records attached.
    """
    state = TrainState.init(cfg.model, seed)
    stream = minibatches(dataset, cfg.batch_size, seed)
    records = []
    try:
        for _ in range(cfg.optim.total_steps):
            batch = next(stream)
            step_index = state.step
            state, losses = regular_step(state, batch, cfg)
            l_meta = None
            if not cfg.ablation.skip_meta:
                state, l_meta = meta_step(state, batch, cfg, step=step_index)
            mask = state.params.mask.array
            record = StepRecord(
                step=step_index,
                loss_drr=losses["drr"],
                loss_contrast=losses["contrast"],
                loss_meta=l_meta,
                mask_mean=float(mask.mean()),
                mask_min=float(mask.min()),
                mask_max=float(mask.max()),
                lr_main=cfg.optim.lr_at(step_index),
                lr_mask=cfg.optim.lr_mask,
            )
            records.append(record)
            if report_cb is not None:
                report_cb(record)
    except DivergenceError as exc:
        exc.partial_records = records
        raise
    return state.params, records

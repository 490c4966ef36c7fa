"""MetaMask: self-supervised representation learning with a meta-learned
dimensional mask on top of contrastive and redundancy-reduction
objectives, plus the evaluation protocols around it."""

from .autograd import Var, checkpoint, grad
from .data import Dataset, MultiViewBatch, SyntheticSpec, load_dataset, make_synthetic, minibatches, save_dataset
from .errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    LineageError,
    MetaMaskError,
    ParseError,
    ShapeError,
)
from .losses import ContrastiveConfig, DrrConfig, contrastive_loss, cross_correlation, drr_loss, regular_loss
from .meta_opt import Ablation, OptimConfig, TrainConfig, TrainState, meta_step, regular_step, train, trial_weights
from .nn import MlpSpec, ModelParams, ModelSpec, apply_mask, encoder_forward, head_forward, init_params, load_params, save_params
from .tensor import Tensor, load_mmt1, save_mmt1

__all__ = [name for name in dir() if not name.startswith("_")]

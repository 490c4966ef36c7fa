"""Model components: MLP encoder, the two projection heads, and the
learnable dimensional mask applied by Hadamard product.

The mask gates gradient flow during training only; downstream evaluation
always reads the unmasked representation h.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .errors import ConfigError, ShapeError
from .tensor import Tensor, load_mmt1, save_mmt1


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected network: widths input -> hidden... -> output, ReLU
    between layers and no activation after the last."""

    layer_widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError("MlpSpec needs at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ConfigError(f"MlpSpec widths must be positive, got {widths}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.layer_widths[0]

    @property
    def d_out(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class ModelSpec:
    """Encoder plus the two projection heads.

    Both heads consume the masked representation, so their input width
    must equal the encoder output width D, which is also the mask length.
    """

    encoder: MlpSpec
    cl_head: MlpSpec
    drr_head: MlpSpec

    def __post_init__(self):
        d = self.encoder.d_out
        if self.cl_head.d_in != d or self.drr_head.d_in != d:
            raise ConfigError(
                f"head input widths ({self.cl_head.d_in}, {self.drr_head.d_in}) "
                f"must equal encoder output width {d}"
            )

    @property
    def repr_dim(self) -> int:
        return self.encoder.d_out

    @classmethod
    def default(cls, d_in: int, repr_dim: int = 32, head_dim: int = 64,
                encoder_hidden=(), head_hidden=()) -> "ModelSpec":
        enc = MlpSpec((d_in, *encoder_hidden, repr_dim))
        head = MlpSpec((repr_dim, *head_hidden, head_dim))
        return cls(encoder=enc, cl_head=head, drr_head=head)


@dataclass
class ModelParams:
    """The four learnable groups: encoder theta, contrastive head,
    redundancy head, and the per-dimension mask weights omega."""

    theta: list  # list of (W, b) Tensor pairs
    vartheta_cl: list
    vartheta_drr: list
    mask: Tensor

    def flat_tensors(self) -> list:
        """(name, Tensor) pairs in a fixed order, mask last."""
        out = []
        for group, layers in (("theta", self.theta), ("cl", self.vartheta_cl),
                              ("drr", self.vartheta_drr)):
            for i, (w, b) in enumerate(layers):
                out.append((f"{group}.{i}.W", w))
                out.append((f"{group}.{i}.b", b))
        out.append(("mask", self.mask))
        return out


def _init_mlp(spec: MlpSpec, rng: np.random.Generator) -> list:
    layers = []
    widths = spec.layer_widths
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((Tensor._wrap(w), Tensor.zeros((fan_out,))))
    return layers


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Deterministic initialization: weights uniform in
    (-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero, mask all ones."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return ModelParams(
        theta=_init_mlp(spec.encoder, rng),
        vartheta_cl=_init_mlp(spec.cl_head, rng),
        vartheta_drr=_init_mlp(spec.drr_head, rng),
        mask=Tensor.ones((spec.repr_dim,)),
    )


def mlp_vars(layers) -> list:
    """Bind a list of (W, b) tensors as fresh graph leaves."""
    return [(Var.leaf(w), Var.leaf(b)) for w, b in layers]


def flatten_vars(layer_vars) -> list:
    return [v for pair in layer_vars for v in pair]


def mlp_forward(layer_vars, x: Var) -> Var:
    """Run x through linear layers with ReLU between them, none after the
    last."""
    h = x
    last = len(layer_vars) - 1
    for i, (w, b) in enumerate(layer_vars):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(
                f"layer {i} expects input width {w.shape[0]}, got {h.shape[1]}"
            )
        h = ag.add(ag.matmul(h, w), b)
        if i != last:
            h = ag.relu(h)
    return h


def encoder_forward(theta_vars, x: Var) -> Var:
    """h = f_theta(x) for a batch of input rows."""
    return mlp_forward(theta_vars, x)


def head_forward(vartheta_vars, h_tilde: Var) -> Var:
    """z = g(h_tilde), the projection-head features."""
    return mlp_forward(vartheta_vars, h_tilde)


def apply_mask(h: Var, mask: Var) -> Var:
    """Masked representation: h~[i,k] = h[i,k] * omega_k."""
    if h.array.ndim != 2 or mask.array.ndim != 1 or h.shape[1] != mask.shape[0]:
        raise ShapeError(f"mask of length {mask.shape} cannot gate shape {h.shape}")
    return ag.mul(h, mask)


def encode_dataset(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Unmasked representations h for raw input rows (no graph)."""
    h = Var.leaf(Tensor._wrap(np.asarray(x, dtype=np.float64)))
    return encoder_forward(mlp_vars(params.theta), h).array


def save_params(directory, params: ModelParams, spec: ModelSpec) -> None:
    """Write each tensor as an MMT1 file plus a JSON manifest naming them
    and recording the model spec."""
    os.makedirs(directory, exist_ok=True)
    names = []
    for name, tensor in params.flat_tensors():
        fname = name.replace(".", "_") + ".mmt"
        save_mmt1(os.path.join(directory, fname), tensor)
        names.append({"name": name, "file": fname})
    manifest = {
        "tensors": names,
        "spec": {
            "encoder": list(spec.encoder.layer_widths),
            "cl_head": list(spec.cl_head.layer_widths),
            "drr_head": list(spec.drr_head.layer_widths),
        },
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_params(directory):
    """Inverse of :func:`save_params`; returns (params, spec)."""
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    spec = ModelSpec(
        encoder=MlpSpec(tuple(manifest["spec"]["encoder"])),
        cl_head=MlpSpec(tuple(manifest["spec"]["cl_head"])),
        drr_head=MlpSpec(tuple(manifest["spec"]["drr_head"])),
    )
    tensors = {}
    for entry in manifest["tensors"]:
        tensors[entry["name"]] = load_mmt1(os.path.join(directory, entry["file"]))

    def read_mlp(group, mlp_spec):
        layers = []
        for i in range(len(mlp_spec.layer_widths) - 1):
            layers.append((tensors[f"{group}.{i}.W"], tensors[f"{group}.{i}.b"]))
        return layers

    params = ModelParams(
        theta=read_mlp("theta", spec.encoder),
        vartheta_cl=read_mlp("cl", spec.cl_head),
        vartheta_drr=read_mlp("drr", spec.drr_head),
        mask=tensors["mask"],
    )
    return params, spec

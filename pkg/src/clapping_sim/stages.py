"""Stage operators and their analytic vector-Jacobian products.

A model is a chain of stages y_e = a_e(y_{e-1}, w_e) ending in a scalar
loss head. Each stage kind provides a forward map plus the two adjoint
products needed by backpropagation: the input adjoint J_y^T v and the
weight adjoint J_w^T v. All math is float64. Operations accept a single
vector of shape (d,) or a batch of shape (B, d); the batch axis is
carried through unchanged.

Stage kinds:

  linear          y = W x, optionally appending ||w||^2 as a trailing
                  output element (extra flag ``append_sq_norm``), which
                  lets a downstream regularized loss head stay stateless
  affine_bias     y = W x + b
  tanh, relu      elementwise, no parameters (relu subgradient at 0 is 0)
  logistic_loss   scalar z -> log(1 + exp(z))
  regularized_logistic_loss
                  (z, s) -> log(1 + exp(z)) + c_r * s, where s carries a
                  squared parameter norm produced upstream
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, ContractViolation

LINEAR = "linear"
AFFINE_BIAS = "affine_bias"
TANH = "tanh"
RELU = "relu"
LOGISTIC_LOSS = "logistic_loss"
REG_LOGISTIC_LOSS = "regularized_logistic_loss"

STAGE_KINDS = (LINEAR, AFFINE_BIAS, TANH, RELU, LOGISTIC_LOSS, REG_LOGISTIC_LOSS)
LOSS_HEADS = (LOGISTIC_LOSS, REG_LOGISTIC_LOSS)


@dataclass(frozen=True)
class StageSpec:
    """One operator in the chain. ``extra`` holds kind-specific constants
    (``c_r`` for the regularized head, ``append_sq_norm`` for linear)."""

    kind: str
    input_dim: int
    output_dim: int
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ConfigurationError(f"unknown stage kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError("stage dims must be positive")
        if self.kind in (TANH, RELU) and self.input_dim != self.output_dim:
            raise ConfigurationError(f"{self.kind} stage must preserve dimension")
        if self.kind in LOSS_HEADS and self.output_dim != 1:
            raise ConfigurationError("loss heads must have output_dim 1")
        if self.kind == LOGISTIC_LOSS and self.input_dim != 1:
            raise ConfigurationError("logistic_loss takes a single scalar input")
        if self.kind == REG_LOGISTIC_LOSS:
            if self.input_dim != 2:
                raise ConfigurationError(
                    "regularized_logistic_loss takes (value, squared_norm) inputs"
                )
            if "c_r" not in self.extra:
                raise ConfigurationError("regularized_logistic_loss needs extra['c_r']")

    @property
    def matrix_rows(self) -> int:
        """Rows of the weight matrix for parametric kinds."""
        if self.kind == LINEAR and self.extra.get("append_sq_norm", False):
            return self.output_dim - 1
        return self.output_dim

    @property
    def param_dim(self) -> int:
        if self.kind == LINEAR:
            return self.matrix_rows * self.input_dim
        if self.kind == AFFINE_BIAS:
            return self.output_dim * self.input_dim + self.output_dim
        return 0


def _check_vec(name: str, x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != dim:
        raise ContractViolation(f"{name}: expected trailing dim {dim}, got shape {x.shape}")
    return x


def _check_params(x: np.ndarray, dim: int) -> np.ndarray:
    if dim == 0:
        return np.zeros(0)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != dim:
        raise ContractViolation(f"w: expected {dim} parameters, got shape {x.shape}")
    return x


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def stage_forward(stage: StageSpec, y_in: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply a_e(y_in, w). Pure; returns an array of trailing dim output_dim."""
    y = _check_vec("y_in", y_in, stage.input_dim)
    w = _check_params(w, stage.param_dim)
    if stage.kind == LINEAR:
        mat = w.reshape(stage.matrix_rows, stage.input_dim)
        out = y @ mat.T
        if stage.extra.get("append_sq_norm", False):
            sq = np.full(out.shape[:-1] + (1,), float(w @ w))
            out = np.concatenate([out, sq], axis=-1)
        return out
    if stage.kind == AFFINE_BIAS:
        mat = w[: stage.output_dim * stage.input_dim].reshape(stage.output_dim, stage.input_dim)
        bias = w[stage.output_dim * stage.input_dim :]
        return y @ mat.T + bias
    if stage.kind == TANH:
        return np.tanh(y)
    if stage.kind == RELU:
        return np.maximum(y, 0.0)
    if stage.kind == LOGISTIC_LOSS:
        return _softplus(y[..., :1])
    # regularized_logistic_loss
    c_r = float(stage.extra["c_r"])
    return _softplus(y[..., :1]) + c_r * y[..., 1:2]


def stage_backward_input(
    stage: StageSpec, y_in: np.ndarray, w: np.ndarray, v_out: np.ndarray
) -> np.ndarray:
    """Adjoint with respect to the input: J_y(a_e)^T v_out."""
    y = _check_vec("y_in", y_in, stage.input_dim)
    v = _check_vec("v_out", v_out, stage.output_dim)
    w = _check_params(w, stage.param_dim)
    if stage.kind == LINEAR:
        mat = w.reshape(stage.matrix_rows, stage.input_dim)
        return v[..., : stage.matrix_rows] @ mat
    if stage.kind == AFFINE_BIAS:
        mat = w[: stage.output_dim * stage.input_dim].reshape(stage.output_dim, stage.input_dim)
        return v @ mat
    if stage.kind == TANH:
        return v * (1.0 - np.tanh(y) ** 2)
    if stage.kind == RELU:
        return v * (y > 0.0)
    if stage.kind == LOGISTIC_LOSS:
        return _sigmoid(y[..., :1]) * v
    c_r = float(stage.extra["c_r"])
    grad_z = _sigmoid(y[..., :1]) * v
    grad_s = np.full_like(grad_z, c_r) * v
    return np.concatenate([grad_z, grad_s], axis=-1)


def stage_backward_weight(
    stage: StageSpec, y_in: np.ndarray, w: np.ndarray, v_out: np.ndarray
) -> np.ndarray:
    """Adjoint with respect to the parameters: J_w(a_e)^T v_out.

    For a batch input the per-sample weight gradients are summed; callers
    average by batch size themselves.
    """
    y = _check_vec("y_in", y_in, stage.input_dim)
    v = _check_vec("v_out", v_out, stage.output_dim)
    if stage.param_dim == 0:
        return np.zeros(0)
    w = _check_params(w, stage.param_dim)
    batched = y.ndim == 2
    if stage.kind == LINEAR:
        rows = stage.matrix_rows
        v_mat = v[..., :rows]
        if batched:
            grad_mat = v_mat.T @ y
        else:
            grad_mat = np.outer(v_mat, y)
        grad = grad_mat.reshape(-1)
        if stage.extra.get("append_sq_norm", False):
            v_sq = v[..., rows].sum() if batched else v[..., rows]
            grad = grad + 2.0 * float(v_sq) * w
        return grad
    # affine_bias
    if batched:
        grad_mat = v.T @ y
        grad_bias = v.sum(axis=0)
    else:
        grad_mat = np.outer(v, y)
        grad_bias = v
    return np.concatenate([grad_mat.reshape(-1), grad_bias])


@dataclass(frozen=True)
class ModelChain:
    """Ordered stages plus the cut points that place them on workers.

    ``boundaries`` are strictly increasing stage indices; worker e owns
    stages[boundaries[e-1]:boundaries[e]] with implicit 0 and len(stages)
    at the ends. The final stage must emit a scalar.
    """

    stages: tuple[StageSpec, ...]
    boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("chain needs at least one stage")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.output_dim != b.input_dim:
                raise ConfigurationError(
                    f"adjacent stage dims mismatch: {a.output_dim} -> {b.input_dim}"
                )
        if self.stages[-1].output_dim != 1:
            raise ConfigurationError("final stage must produce a scalar loss")
        cuts = tuple(self.boundaries)
        if any(b <= 0 or b >= len(self.stages) for b in cuts):
            raise ConfigurationError("boundaries must cut strictly inside the stage list")
        if any(b >= c for b, c in zip(cuts, cuts[1:])):
            raise ConfigurationError("boundaries must be strictly increasing")

    @property
    def num_workers(self) -> int:
        return len(self.boundaries) + 1

    @property
    def input_dim(self) -> int:
        return self.stages[0].input_dim

    def worker_stages(self, e: int) -> tuple[StageSpec, ...]:
        """Stages owned by worker e (1-based)."""
        cuts = (0,) + tuple(self.boundaries) + (len(self.stages),)
        return self.stages[cuts[e - 1] : cuts[e]]

    def worker_param_dim(self, e: int) -> int:
        return sum(s.param_dim for s in self.worker_stages(e))

    def boundary_dim(self, i: int) -> int:
        """Activation dimension crossing boundary i (0-based, between
        worker i+1 and worker i+2)."""
        return self.stages[self.boundaries[i] - 1].output_dim

    def split_params(self, stages: tuple[StageSpec, ...], w: np.ndarray) -> list[np.ndarray]:
        parts, at = [], 0
        for s in stages:
            parts.append(np.asarray(w[at : at + s.param_dim], dtype=np.float64))
            at += s.param_dim
        if at != len(w):
            raise ContractViolation(f"parameter vector length {len(w)} != expected {at}")
        return parts


def chain_forward(chain: ModelChain, x: np.ndarray, w_all: list[np.ndarray]) -> list[np.ndarray]:
    """Run every stage; returns [y_0, y_1, ..., y_E] with y_0 = x."""
    if len(w_all) != len(chain.stages):
        raise ContractViolation("need one parameter vector per stage")
    ys = [np.asarray(x, dtype=np.float64)]
    for stage, w in zip(chain.stages, w_all):
        ys.append(stage_forward(stage, ys[-1], w))
    return ys


def chain_loss(chain: ModelChain, x: np.ndarray, w_all: list[np.ndarray]) -> float:
    """Scalar loss of the composed chain; batch inputs are averaged."""
    out = chain_forward(chain, x, w_all)[-1]
    return float(np.mean(out))


def logistic_chain(dim: int, c_r: float) -> ModelChain:
    """Two-worker chain for regularized logistic regression: a margin
    stage that also emits its squared parameter norm, then the
    regularized loss head. Inputs are rows of (-label * features, -label)
    so the first stage's weights are (w, b)."""
    margin = StageSpec(LINEAR, dim + 1, 2, {"append_sq_norm": True})
    head = StageSpec(REG_LOGISTIC_LOSS, 2, 1, {"c_r": c_r})
    return ModelChain((margin, head), boundaries=(1,))


def tanh_mlp_chain(dims: tuple[int, ...], boundaries: tuple[int, ...]) -> ModelChain:
    """Small MLP: affine+tanh blocks over ``dims`` then a logistic head.
    ``boundaries`` index the flattened stage list."""
    stage_list: list[StageSpec] = []
    for a, b in zip(dims, dims[1:]):
        stage_list.append(StageSpec(AFFINE_BIAS, a, b))
        stage_list.append(StageSpec(TANH, b, b))
    stage_list.append(StageSpec(AFFINE_BIAS, dims[-1], 1))
    stage_list.append(StageSpec(LOGISTIC_LOSS, 1, 1))
    return ModelChain(tuple(stage_list), boundaries=boundaries)


def chain_gradients(
    chain: ModelChain, x: np.ndarray, w_all: list[np.ndarray]
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Full backpropagation through the chain.

    Returns (loss, weight gradients per stage, activation gradients per
    stage output). The terminal activation gradient is seeded with 1; for
    batch inputs gradients are averaged over the batch.
    """
    ys = chain_forward(chain, x, w_all)
    batched = ys[0].ndim == 2
    scale = 1.0 / ys[0].shape[0] if batched else 1.0
    v = np.ones_like(ys[-1])
    u_all: list[np.ndarray] = [np.zeros(0)] * len(chain.stages)
    v_all: list[np.ndarray] = [np.zeros(0)] * len(chain.stages)
    for i in reversed(range(len(chain.stages))):
        stage, w = chain.stages[i], w_all[i]
        v_all[i] = v * scale
        u_all[i] = stage_backward_weight(stage, ys[i], w, v) * scale
        v = stage_backward_input(stage, ys[i], w, v)
    return float(np.mean(ys[-1])), u_all, v_all

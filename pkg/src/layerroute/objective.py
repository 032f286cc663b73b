"""Training objective: task cross-entropy plus the entropy load-balancing term.

The auxiliary loss is lambda * sum_l wbar_l * log(wbar_l + eps) over the
batch-mean routing weights wbar; minimizing it maximizes the entropy of the
average layer usage. Its value always lies in [-lambda*ln L, lambda*ln(1+eps)].
The coefficient is stage-dependent: a pretrain-only schedule applies it in
stage 1 and drops it in stage 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model, numkit as nk
from .errors import ConfigError, ContractError, DimensionError
from .numkit import Node


@dataclass(frozen=True)
class StageSchedule:
    stage1_lambda: float
    stage2_lambda: float
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.stage1_lambda < 0 or self.stage2_lambda < 0:
            raise ConfigError("load-balance coefficients must be nonnegative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    def coefficient(self, stage: int) -> float:
        if stage == 1:
            return self.stage1_lambda
        if stage == 2:
            return self.stage2_lambda
        raise ConfigError(f"stage must be 1 or 2, got {stage}")


@dataclass
class LossBreakdown:
    task_loss: float
    aux_loss: float
    total: float
    batch_mean_weights: np.ndarray
    batch_entropy: float


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats; zero entries contribute zero."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def batch_mean_weights(weights) -> np.ndarray:
    """Average routing weights across the batch (rows of a matrix or a list)."""
    if isinstance(weights, np.ndarray) and weights.ndim == 2:
        mat = weights
    else:
        rows = list(weights)
        if not rows:
            raise ContractError("batch_mean_weights: empty batch")
        mat = np.stack([np.asarray(r, dtype=np.float64) for r in rows])
    if mat.shape[0] == 0:
        raise ContractError("batch_mean_weights: empty batch")
    if np.any(np.abs(mat.sum(axis=1) - 1.0) > 1e-6) or np.any(mat < -1e-6):
        raise ContractError("batch_mean_weights: rows must lie on the simplex")
    return mat.mean(axis=0)


def load_balance_loss(w_bar, lam: float, eps: float) -> Node:
    """lambda * sum_l wbar_l * log(wbar_l + eps); differentiable in wbar."""
    if lam < 0:
        raise ConfigError(f"load-balance coefficient must be nonnegative, got {lam}")
    if eps <= 0:
        raise ConfigError(f"epsilon must be positive, got {eps}")
    w = nk.as_node(w_bar)
    if w.value.ndim != 1 or w.value.size == 0:
        raise DimensionError(f"load_balance_loss: expected a weight vector, got shape {w.value.shape}")
    return nk.scale(nk.sum_all(nk.mul(w, nk.log(nk.add(w, nk.constant(np.float64(eps)))))), lam)


def task_loss(predicted, target: int) -> Node:
    """Softmax cross-entropy of one prediction vector against a class index."""
    p = nk.as_node(predicted)
    if p.value.ndim != 1 or p.value.size == 0:
        raise DimensionError(f"task_loss: expected a non-empty logit vector, got shape {p.value.shape}")
    return nk.cross_entropy_with_logits(nk.reshape(p, (1, p.value.size)), [int(target)])


def total_loss_graph(batch: model.Batch, params: model.PipelineParams, stage: int,
                     schedule: StageSchedule) -> tuple[Node, LossBreakdown, model.ForwardResult]:
    """Forward the batch and assemble task + auxiliary loss for the given stage."""
    lam = schedule.coefficient(stage)
    out = model.forward_batch(params, batch)
    task = nk.cross_entropy_with_logits(out.answer_logits, batch.targets)
    w_bar = nk.mean_axis(out.weights, 0)
    aux = load_balance_loss(w_bar, lam, schedule.epsilon)
    total = nk.add(task, aux)
    breakdown = LossBreakdown(task_loss=float(task.value), aux_loss=float(aux.value),
                              total=float(total.value), batch_mean_weights=w_bar.value.copy(),
                              batch_entropy=entropy(w_bar.value))
    return total, breakdown, out


def total_loss(batch: model.Batch, params: model.PipelineParams, stage: int,
               schedule: StageSchedule) -> LossBreakdown:
    _, breakdown, _ = total_loss_graph(batch, params, stage, schedule)
    return breakdown

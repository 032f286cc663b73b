"""Two-stage training: stage 1 fits router + connector against a frozen
decoder head; stage 2 additionally trains the decoder. The encoder is data,
not parameters, so it is frozen by construction.

Determinism contract: identical config + seed produce bit-identical
checkpoints and metrics. Batches come from a seeded stream in a fixed order,
the optimizer walks parameters in sorted-name order, and checkpoints store
arrays sorted by name.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model, numkit as nk, objective
from .config import TrainConfig, config_hash
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError
from .numkit import Node

CHECKPOINT_MAGIC = b"LRCK"
CHECKPOINT_VERSION = 1
WARMUP_FRACTION = 0.03
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# learning-rate schedule


def lr_at(step: int, total_steps: int, peak: float,
          warmup_frac: float = WARMUP_FRACTION) -> float:
    """Linear warmup to `peak`, then cosine decay to ~0 at the final step."""
    if total_steps <= 0:
        return 0.0
    warmup = max(1, round(warmup_frac * total_steps))
    if step < warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    frac = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def step_optimizer(state: AdamState, params: dict[str, Node], lr_t: float) -> None:
    """One Adam update over the named parameters, reading node gradients.

    Missing gradients count as zero, which leaves the parameter unchanged
    (bias-corrected moments stay zero).
    """
    state.t += 1
    b1, b2 = ADAM_BETA1, ADAM_BETA2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        node = params[name]
        g = node.grad if node.grad is not None else np.zeros_like(node.value)
        if g.shape != node.value.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter "
                                 f"{name} of shape {node.value.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(node.value)
            state.v[name] = np.zeros_like(node.value)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        node.value = node.value - lr_t * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    stage: int
    step: int
    config_hash: str
    version: int = CHECKPOINT_VERSION


def checkpoint_from_pipeline(pipe: model.PipelineParams, stage: int, step: int,
                             cfg_hash: str) -> Checkpoint:
    arrays = {name: node.value.copy() for name, node in model.named_parameters(pipe).items()}
    return Checkpoint(arrays=arrays, stage=stage, step=step, config_hash=cfg_hash)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    hash_bytes = ckpt.config_hash.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<iii", ckpt.version, ckpt.stage, ckpt.step))
        fh.write(struct.pack("<i", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<i", len(ckpt.arrays)))
        for name in sorted(ckpt.arrays):
            arr = ckpt.arrays[name]
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<i", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<i", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise DataError(f"{path} is not a checkpoint file")
            version, stage, step = struct.unpack("<iii", fh.read(12))
            if version != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {version}")
            (hash_len,) = struct.unpack("<i", fh.read(4))
            cfg_hash = fh.read(hash_len).decode("utf-8")
            (count,) = struct.unpack("<i", fh.read(4))
            arrays: dict[str, np.ndarray] = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<i", fh.read(4))
                name = fh.read(name_len).decode("utf-8")
                (rank,) = struct.unpack("<i", fh.read(4))
                shape = struct.unpack(f"<{rank}i", fh.read(4 * rank))
                n = int(np.prod(shape, dtype=np.int64)) if rank else 1
                buf = fh.read(8 * n)
                if len(buf) != 8 * n:
                    raise DataError(f"truncated checkpoint array {name!r}")
                arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            return Checkpoint(arrays=arrays, stage=stage, step=step,
                              config_hash=cfg_hash, version=version)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def load_into_pipeline(pipe: model.PipelineParams, ckpt: Checkpoint) -> None:
    named = model.named_parameters(pipe)
    if set(named) != set(ckpt.arrays):
        raise ConfigError("checkpoint parameter names do not match the pipeline")
    for name, node in named.items():
        arr = ckpt.arrays[name]
        if arr.shape != node.value.shape:
            raise ConfigError(f"checkpoint array {name} has shape {arr.shape}, "
                              f"expected {node.value.shape}")
        node.value = arr.copy()


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    stage: int
    step: int
    task_loss: float
    aux_loss: float
    total: float
    entropy: float
    lr: float


METRICS_HEADER = "stage,step,task_loss,aux_loss,total,entropy,lr"


def metrics_to_csv(rows: list[MetricsRow]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r.stage},{r.step},{r.task_loss!r},{r.aux_loss!r},"
                     f"{r.total!r},{r.entropy!r},{r.lr!r}")
    return "\n".join(lines) + "\n"


def write_metrics(rows: list[MetricsRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(metrics_to_csv(rows))


def read_metrics(path) -> list[MetricsRow]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read metrics {path}: {exc}") from exc
    if not lines or lines[0] != METRICS_HEADER:
        raise DataError(f"{path} is not a metrics file")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(MetricsRow(int(parts[0]), int(parts[1]), *(float(p) for p in parts[2:])))
    return rows


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    pipeline: model.PipelineParams
    checkpoints: dict[int, Checkpoint]
    metrics: list[MetricsRow]


def _dump_diagnostics(directory, pipe: model.PipelineParams, batch: model.Batch,
                      stage: int, step: int) -> str:
    path = str(directory / f"nan_abort_stage{stage}_step{step}.npz") if hasattr(directory, "__truediv__") \
        else f"{directory}/nan_abort_stage{stage}_step{step}.npz"
    payload = {f"param.{k}": v.value for k, v in model.named_parameters(pipe).items()}
    payload.update(batch_f_text=batch.f_text, batch_stacks=batch.stacks,
                   batch_cls=batch.cls_penultimate, batch_targets=batch.targets)
    np.savez(path, **payload)
    return path


def _stage_freezing(stage: int, freeze_router: bool) -> dict[str, bool]:
    return {"router_on": not freeze_router, "connector_on": True, "decoder_on": stage == 2}


def train_stage(cfg: TrainConfig, stage: int, pipe: model.PipelineParams, data_source,
                *, freeze_router: bool = False, diagnostics_dir=None
                ) -> tuple[Checkpoint, list[MetricsRow]]:
    """Run one stage over its configured steps; returns the checkpoint and
    per-step metrics. Frozen components are structurally outside the gradient
    map, not merely zero-stepped."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    stage_cfg = cfg.stage1 if stage == 1 else cfg.stage2
    model.set_trainable(pipe, **_stage_freezing(stage, freeze_router))
    trainable = model.trainable_parameters(pipe)
    adam = AdamState()
    rows: list[MetricsRow] = []
    cfg_hash = config_hash(cfg)
    for step in range(stage_cfg.steps):
        batch = data_source.batch(stage, step, stage_cfg.batch)
        lr = lr_at(step, stage_cfg.steps, stage_cfg.lr)
        try:
            total, breakdown, _ = objective.total_loss_graph(batch, pipe, stage, cfg.schedule)
            nk.backward(total)
        except NumericError:
            if diagnostics_dir is not None:
                _dump_diagnostics(diagnostics_dir, pipe, batch, stage, step)
            raise
        step_optimizer(adam, trainable, lr)
        nk.zero_grad(list(trainable.values()))
        rows.append(MetricsRow(stage=stage, step=step, task_loss=breakdown.task_loss,
                               aux_loss=breakdown.aux_loss, total=breakdown.total,
                               entropy=breakdown.batch_entropy, lr=lr))
    return checkpoint_from_pipeline(pipe, stage, stage_cfg.steps, cfg_hash), rows


def train(cfg: TrainConfig, data_source, stage: str = "both",
          resume: Checkpoint | None = None, *, freeze_router: bool = False,
          diagnostics_dir=None) -> TrainResult:
    """Train the requested stage(s) from scratch or from a stage-1 checkpoint."""
    if stage not in ("1", "2", "both"):
        raise ConfigError(f"stage must be '1', '2', or 'both', got {stage!r}")
    cfg_hash = config_hash(cfg)
    pipe = model.init_pipeline(cfg.dims, cfg.router_mode, cfg.seed)
    if resume is not None:
        if resume.config_hash != cfg_hash:
            raise ConfigError("checkpoint was produced by a different configuration; "
                              "refusing to resume")
        load_into_pipeline(pipe, resume)
    checkpoints: dict[int, Checkpoint] = {}
    metrics: list[MetricsRow] = []
    if stage in ("1", "both"):
        if resume is not None and resume.stage != 1:
            raise ContractError("stage 1 resumes only from a stage-1 checkpoint")
        ck, rows = train_stage(cfg, 1, pipe, data_source, freeze_router=freeze_router,
                               diagnostics_dir=diagnostics_dir)
        checkpoints[1] = ck
        metrics.extend(rows)
    if stage in ("2", "both"):
        if stage == "2":
            if resume is None:
                raise ContractError("stage 2 requires a stage-1 checkpoint to resume from")
            if resume.stage != 1:
                raise ContractError("stage 2 resumes only from a stage-1 checkpoint")
        ck, rows = train_stage(cfg, 2, pipe, data_source, freeze_router=freeze_router,
                               diagnostics_dir=diagnostics_dir)
        checkpoints[2] = ck
        metrics.extend(rows)
    return TrainResult(pipeline=pipe, checkpoints=checkpoints, metrics=metrics)

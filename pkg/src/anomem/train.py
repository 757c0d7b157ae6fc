"""Two-stage training.

Stage 1 trains the encoder and the memories jointly on the multi-scale
contrasted memory loss. Stage 2 freezes both and fits one small head per
scale on the deviation maps with the double-hinge loss.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from anomem import autodiff as ad
from anomem.augment import augment_batch
from anomem.autodiff import Tensor
from anomem.config import ExperimentConfig
from anomem.data import LabeledImageSet, iterate_minibatches, n_minibatches
from anomem.detect import ScaleHead, deviation_maps
from anomem.encoder import EncoderState, encode, encoder_init
from anomem.errors import DimensionError, NumericError, ValidationError
from anomem.losses import loss_com_ms, loss_sup
from anomem.memory import HopfieldMemory

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# optimisation primitives
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    lr_max: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValidationError(f"need 0 ≤ lr_min ≤ lr_max, got {self.lr_min}, {self.lr_max}")
        if self.total_steps < 1:
            raise ValidationError(f"total_steps must be ≥ 1, got {self.total_steps}")


def cosine_lr(schedule: Schedule, step: int) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValidationError(f"step {step} outside [0, {schedule.total_steps}]")
    cos = math.cos(math.pi * step / schedule.total_steps)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + cos)


@dataclass
class OptimizerState:
    velocities: list[np.ndarray]
    momentum: float = 0.9
    lr: float = 0.05
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], momentum=0.9, lr=0.05, weight_decay=0.0):
        if not 0 <= momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {momentum}")
        return cls([np.zeros_like(p.data) for p in params], momentum, lr, weight_decay)


def sgd_nesterov_step(opt: OptimizerState, params: Sequence[Tensor], grads, lr: float | None = None):
    """In-place Nesterov step ``v ← μv − lr·g``, ``p ← p + μv − lr·g``.

    Weight decay is folded into the gradient. A parameter whose gradient is
    missing or zero everywhere is left untouched, velocity included.
    """
    lr = opt.lr if lr is None else lr
    if not len(params) == len(grads) == len(opt.velocities):
        raise DimensionError(
            f"{len(params)} params, {len(grads)} grads, {len(opt.velocities)} velocity buffers"
        )
    mu = opt.momentum
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        v = opt.velocities[i]
        if g.shape != p.data.shape or v.shape != p.data.shape:
            raise DimensionError(f"param {i}: shape {p.data.shape}, grad {g.shape}, velocity {v.shape}")
        if not g.any():
            continue
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        v *= mu
        v -= lr * g
        p.data += mu * v - lr * g
    return params


def _zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# stage 1
# ----------------------------------------------------------------------


def build_memories(config: ExperimentConfig, seed: int) -> list[HopfieldMemory]:
    """One memory per scale, widths taken from the encoder's feature maps."""
    m = config.memory
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    memories = []
    for shape, size in zip(config.encoder.map_shapes(), m.sizes):
        dim = shape[-1]
        if m.init == "repeated":
            one = HopfieldMemory.init(dim, 1, rng, radius=m.init_radius).weights.data
            w = np.repeat(one, size, axis=1)
            memories.append(HopfieldMemory(Tensor(w, requires_grad=True), m.beta, m.max_iters, m.tol))
        else:
            memories.append(
                HopfieldMemory.init(dim, size, rng, m.beta, m.max_iters, m.tol, m.init_radius)
            )
    return memories


@dataclass
class Stage1Result:
    encoder: EncoderState
    memories: list[HopfieldMemory]
    history: list[dict] = field(default_factory=list)
    optimizer: OptimizerState | None = None

    def __iter__(self):
        return iter((self.encoder, self.memories))


def _emit_telemetry(path: Path | None, record: dict) -> None:
    if path is not None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def train_stage1(
    config: ExperimentConfig,
    dataset: LabeledImageSet,
    seed: int | None = None,
    telemetry_path: str | Path | None = None,
) -> Stage1Result:
    """Joint encoder and memory training; deterministic given ``config`` and ``seed``."""
    config.validate()
    seed = config.seed if seed is None else seed
    labels = np.asarray(dataset.labels)
    if config.mode == "one-class" and not np.all(labels == 1):
        raise ValidationError("one-class stage 1 expects only normal (y=1) samples")
    encoder = encoder_init(config.encoder, seed)
    memories = build_memories(config, seed)
    params = encoder.parameters() + ([m.weights for m in memories] if config.use_memory else [])
    op = config.optim
    opt = OptimizerState.for_params(params, op.momentum, op.lr_max, op.weight_decay)
    result = Stage1Result(encoder, memories, optimizer=opt)
    path = Path(telemetry_path) if telemetry_path is not None else None
    if path is not None:
        path.write_text("")

    n = len(dataset)
    per_epoch = n_minibatches(n, op.batch_size)
    if op.epochs == 0 or per_epoch == 0:
        return result
    schedule = Schedule(op.lr_max, op.lr_min, op.epochs * per_epoch)
    weights = config.scale_weights()
    policy = dataclasses.replace(config.augment, seed=config.augment.seed * 1_000_003 + seed)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    pos_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    loss_memories = memories if config.use_memory else None

    step = 0
    drawn = 0
    for epoch in range(op.epochs):
        totals, coms, vars_ = [], [], []
        for idx in iterate_minibatches(n, op.batch_size, order_rng):
            b = idx.size
            imgs = dataset.images[idx]
            draws = 2 * (drawn + np.arange(b))
            views = augment_batch(policy, np.concatenate([imgs, imgs]), np.concatenate([draws, draws + 1]))
            drawn += b
            lr = cosine_lr(schedule, step)
            _zero_grads(params)
            try:
                feats = encode(encoder, views)
                fa = [ad.getitem(f, slice(0, b)) for f in feats]
                fb = [ad.getitem(f, slice(b, 2 * b)) for f in feats]
                loss = loss_com_ms(
                    fa,
                    fb,
                    labels[idx],
                    weights,
                    loss_memories,
                    config.loss.tau,
                    pos_rng,
                    config.loss.variance_mode,
                    config.normalize_before_memory,
                    config.active_scales,
                )
                ad.backward(loss.total)
            except NumericError as exc:
                ad.new_record()
                raise NumericError(f"stage 1 epoch {epoch} step {step}: {exc}") from exc
            sgd_nesterov_step(opt, params, [p.grad for p in params], lr)
            totals.append(float(loss.total.data))
            coms.append(loss.com)
            vars_.append(loss.var)
            step += 1
        record = {
            "stage": 1,
            "epoch": epoch,
            "loss": float(np.mean(totals)),
            "com": np.mean(coms, axis=0).tolist(),
            "var": np.mean(vars_, axis=0).tolist(),
            "lr": cosine_lr(schedule, step),
            "steps": len(totals),
        }
        result.history.append(record)
        logger.info("stage1 epoch %d loss %.5f", epoch, record["loss"])
        _emit_telemetry(path, record)
    _zero_grads(params)
    return result


# ----------------------------------------------------------------------
# stage 2
# ----------------------------------------------------------------------


@dataclass
class Stage2Result:
    heads: list[ScaleHead]
    initial_loss: float | None = None
    final_loss: float | None = None
    history: list[dict] = field(default_factory=list)


def init_heads(config: ExperimentConfig, seed: int) -> list[ScaleHead]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    return [
        ScaleHead.init(shape, grid, config.stage2.hidden, rng)
        for shape, grid in zip(config.encoder.map_shapes(), config.stage2.grids)
    ]


def _head_loss(heads, pooled, y, margin, clamp) -> Tensor:
    dists = [h.mlp(p) for h, p in zip(heads, pooled)]
    if clamp:
        dists = [ad.relu(d) for d in dists]
    return loss_sup(dists, y, margin)


def train_stage2(
    config: ExperimentConfig,
    dataset: LabeledImageSet,
    encoder: EncoderState,
    memories: Sequence[HopfieldMemory],
    seed: int | None = None,
    telemetry_path: str | Path | None = None,
) -> Stage2Result:
    """Fit one head per scale on frozen deviation maps; one-class mode returns no heads."""
    config.validate()
    if config.mode == "one-class":
        return Stage2Result([])
    seed = config.seed if seed is None else seed
    y = np.asarray(dataset.labels, dtype=np.float64)
    if not np.any(y == 0):
        raise ValidationError("ssad stage 2 needs at least one labelled anomaly; use one-class scoring")
    st2 = config.stage2
    heads = init_heads(config, seed)
    devs = deviation_maps(encoder, memories, dataset.images, config.normalize_before_memory)
    # pooling has no parameters, so the pooled maps are computed once
    with ad.no_grad():
        pooled = [h.pool(d.delta).data for h, d in zip(heads, devs)]
    if st2.standardize:
        for h, p in zip(heads, pooled):
            h.standardize_from(p)
    params = [p for h in heads for p in h.parameters()]
    opt = OptimizerState.for_params(params, st2.momentum, st2.lr_max, st2.weight_decay)
    margin, clamp = config.loss.margin, st2.clamp_negative

    def full_loss() -> float:
        with ad.no_grad():
            return float(_head_loss(heads, [Tensor._wrap(p) for p in pooled], y, margin, clamp).data)

    result = Stage2Result(heads, initial_loss=full_loss())
    path = Path(telemetry_path) if telemetry_path is not None else None
    n = len(dataset)
    per_epoch = n_minibatches(n, st2.batch_size, min_size=1)
    if st2.epochs == 0 or per_epoch == 0:
        result.final_loss = result.initial_loss
        return result
    schedule = Schedule(st2.lr_max, st2.lr_min, st2.epochs * per_epoch)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    step = 0
    for epoch in range(st2.epochs):
        losses = []
        for idx in iterate_minibatches(n, st2.batch_size, order_rng, min_size=1):
            _zero_grads(params)
            batch = [Tensor._wrap(p[idx]) for p in pooled]
            loss = _head_loss(heads, batch, y[idx], margin, clamp)
            ad.backward(loss)
            sgd_nesterov_step(opt, params, [p.grad for p in params], cosine_lr(schedule, step))
            losses.append(float(loss.data))
            step += 1
        record = {"stage": 2, "epoch": epoch, "loss": float(np.mean(losses))}
        result.history.append(record)
        _emit_telemetry(path, record)
    _zero_grads(params)
    result.final_loss = full_loss()
    return result


__all__ = [
    "Schedule",
    "cosine_lr",
    "OptimizerState",
    "sgd_nesterov_step",
    "build_memories",
    "Stage1Result",
    "train_stage1",
    "Stage2Result",
    "init_heads",
    "train_stage2",
]

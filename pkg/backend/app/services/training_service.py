"""
Module: services.training_service
---------------------------------

End-to-end training and evaluation on synthetic scenes.

Key Responsibilities:
- Prepare every scene's constant inputs once (rendering, hit queries,
  prototypes, pseudo masks) and reuse them across epochs.
- Optimize all learnable parameters with AdamW (decoupled weight decay),
  a cosine or constant learning-rate schedule and global-norm gradient
  clipping. Mini-batches accumulate gradients in a fixed scene order.
- Record one MetricsLog entry per epoch: every loss component, the branch
  disagreement, the learning rate and, when validation scenes are given,
  validation mIoU/IoU.
- Abort with a TrainingError naming the loss component that became
  non-finite.
- Evaluate checkpoints with branch-0 decoding only, accumulating
  intersections and unions over all scenes.

Determinism:
- (config, seed) fixes every number in the log. Scene order per epoch comes
  from a named Philox stream whose state is stored in the checkpoint;
  augmentation noise is seeded per (epoch, scene).
"""

import logging
import math
import time
from collections import defaultdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.schemas.config import ExperimentConfig, OptimizerConfig
from app.schemas.metrics import EpochRecord, EvaluationResult, MetricsLog, finite_or_none
from app.services.checkpoint_service import Checkpoint
from app.services.losses_service import confusion_counts, iou_from_counts, occupancy_counts
from app.services.model_service import (
    ModelParams,
    SceneInputs,
    compute_losses,
    forward,
    init_model,
    predict_labels,
    prepare_scene_inputs,
)
from app.services.numeric import Tensor
from app.services.scene_service import CameraRig, HitSet, SceneSample
from app.utils.errors import ParameterError, TrainingError
from app.utils.helpers import derive_seed, make_rng

logger = logging.getLogger(__name__)

LabeledScene = Tuple[SceneSample, CameraRig]


# --------------------------
# Optimizer
# --------------------------


class AdamW:
    """Adam with decoupled weight decay, updating parameter arrays in place."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimizerConfig, total_steps: int):
        self.params = list(params)
        self.cfg = cfg
        self.total_steps = max(int(total_steps), 1)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def lr_at(self, step: int) -> float:
        base = self.cfg.lr
        if self.cfg.schedule == "constant":
            return base
        floor = base * self.cfg.min_lr_ratio
        progress = min(step / self.total_steps, 1.0)
        return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * progress))

    @property
    def current_lr(self) -> float:
        return self.lr_at(self.t)

    def clip(self, grads: List[np.ndarray]) -> List[np.ndarray]:
        if self.cfg.grad_clip <= 0:
            return grads
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm
            return [g * scale for g in grads]
        return grads

    def step(self, grads: List[np.ndarray]) -> None:
        lr = self.lr_at(self.t)
        self.t += 1
        beta1, beta2 = self.cfg.betas
        for i, (p, g) in enumerate(zip(self.params, self.clip(grads))):
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g
            m_hat = self.m[i] / (1.0 - beta1**self.t)
            v_hat = self.v[i] / (1.0 - beta2**self.t)
            p.data = p.data - lr * (
                m_hat / (np.sqrt(v_hat) + self.cfg.eps) + self.cfg.weight_decay * p.data
            )


# --------------------------
# Training
# --------------------------


def prepare_inputs(
    scenes: Sequence[LabeledScene],
    config: ExperimentConfig,
    cache: Optional[Dict[str, HitSet]] = None,
) -> List[SceneInputs]:
    cache = {} if cache is None else cache
    return [prepare_scene_inputs(scene, rig, config, cache) for scene, rig in scenes]


def _check_finite(values: Dict[str, float], epoch: int, scene: int) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise TrainingError(
                f"{name} loss became {value} at epoch {epoch}, scene {scene}", component=name
            )


def train(
    config: ExperimentConfig,
    scenes: Sequence[LabeledScene],
    seed: int,
    val_scenes: Sequence[LabeledScene] = (),
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[Checkpoint, MetricsLog]:
    """Train from a fresh initialization; returns the final checkpoint and the log."""
    if not scenes:
        raise ParameterError("training needs at least one scene")
    cache: Dict[str, HitSet] = {}
    inputs = prepare_inputs(scenes, config, cache)
    val_inputs = prepare_inputs(val_scenes, config, cache)

    params = init_model(config, seed)
    parameters = params.parameters()
    batch_size = config.optimizer.batch_size
    steps_per_epoch = math.ceil(len(inputs) / batch_size)
    optimizer = AdamW(parameters, config.optimizer, config.epochs * steps_per_epoch)
    order_rng = make_rng(seed, "scene-order")
    log = MetricsLog()

    logger.info(
        f"Training {len(parameters)} tensors on {len(inputs)} scenes for {config.epochs} epochs"
    )
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        lr = optimizer.current_lr
        sums: Dict[str, float] = defaultdict(float)
        order = order_rng.permutation(len(inputs))
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            grads = [np.zeros_like(p.data) for p in parameters]
            for index in batch:
                index = int(index)
                for p in parameters:
                    p.zero_grad()
                result = forward(
                    params, inputs[index], config, derive_seed(seed, "augment", epoch, index)
                )
                losses = compute_losses(result, inputs[index], config)
                components = dict(losses.components(), total=losses.total.item())
                _check_finite(components, epoch, index)
                if losses.total.requires_grad:
                    losses.total.backward()
                for g, p in zip(grads, parameters):
                    if p.grad is not None:
                        g += p.grad
                for name, value in components.items():
                    sums[name] += value
                sums["disagreement"] += losses.disagreement
                logger.debug(f"epoch {epoch} scene {index} loss={components['total']:.6f}")
            optimizer.step([g / len(batch) for g in grads])

        n = len(inputs)
        record = EpochRecord(
            epoch=epoch,
            total=sums["total"] / n,
            occ=sums["occ"] / n,
            lov=sums["lov"] / n,
            cls=sums["cls"] / n,
            cons=sums["cons"] / n,
            disagreement=sums["disagreement"] / n,
            lr=lr,
        )
        if val_inputs:
            metrics = evaluate_inputs(params, val_inputs, config)
            record.val_miou, record.val_iou = metrics.miou, metrics.iou
        record.wall_time = time.perf_counter() - started
        log.append(record)
        logger.info(
            f"epoch {epoch}/{config.epochs} total={record.total:.4f} occ={record.occ:.4f} "
            f"lov={record.lov:.4f} cls={record.cls:.4f} cons={record.cons:.4f} "
            f"val_miou={record.val_miou}"
        )
        if on_epoch is not None:
            on_epoch(record)

    checkpoint = Checkpoint.from_model(
        params, config, optimizer.t, order_rng.bit_generator.state
    )
    return checkpoint, log


# --------------------------
# Evaluation
# --------------------------


def evaluate_inputs(
    params: ModelParams, inputs: Sequence[SceneInputs], config: ExperimentConfig
) -> EvaluationResult:
    L = config.scene.num_classes
    intersection, union = np.zeros(L, dtype=np.int64), np.zeros(L, dtype=np.int64)
    occupied_inter, occupied_union = 0, 0
    for scene_inputs in inputs:
        pred = predict_labels(params, scene_inputs, config)
        i, u = confusion_counts(pred, scene_inputs.labels, L)
        intersection += i
        union += u
        oi, ou = occupancy_counts(pred, scene_inputs.labels)
        occupied_inter += oi
        occupied_union += ou
    per_class, mean = iou_from_counts(intersection, union, ignore_free=True)
    return EvaluationResult(
        miou=finite_or_none(mean),
        iou=occupied_inter / occupied_union if occupied_union else None,
        per_class={str(c): finite_or_none(per_class[c]) for c in range(1, L)},
        scenes=len(inputs),
    )


def evaluate(checkpoint: Checkpoint, scenes: Sequence[LabeledScene]) -> EvaluationResult:
    """Branch-0 metrics of ``checkpoint`` on ``scenes``."""
    config = checkpoint.config
    inputs = prepare_inputs(scenes, config)
    result = evaluate_inputs(checkpoint.to_model(), inputs, config)
    logger.info(f"Evaluated {len(inputs)} scenes: mIoU={result.miou} IoU={result.iou}")
    return result

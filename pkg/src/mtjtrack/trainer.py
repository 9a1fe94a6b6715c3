"""Weighted-BCE training: Adam updates, epoch loop, and the sequential
multi-domain curriculum with per-stage checkpoints."""

import os
from dataclasses import dataclass, field

import numpy as np

from . import _rng, imaging, network


class NumericFailure(ArithmeticError):
    """Raised when a loss or gradient turns non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    zero_class_weight: float = 0.1
    epochs_per_stage: int = 100
    batch_size: int = 8
    rng_seed: int = 0
    adam_epsilon: float = 1e-8
    clip_eps: float = 1e-7

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.zero_class_weight <= 1):
            raise ValueError("zero_class_weight must be in (0, 1]")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must be in (0, 1)")
        if self.batch_size < 1 or self.epochs_per_stage < 0:
            raise ValueError("batch_size >= 1 and epochs_per_stage >= 0 required")
        if self.adam_epsilon < 0:
            raise ValueError("adam_epsilon must be non-negative")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, weights):
        return cls(
            m={k: np.zeros_like(v) for k, v in weights.tensors.items()},
            v={k: np.zeros_like(v) for k, v in weights.tensors.items()},
            step=0,
        )


@dataclass
class CurriculumStage:
    stage_id: int
    domains: list
    dataset: list  # (frame, probability map) pairs, frames un-normalized


def weighted_bce(pred, target, w0, clip_eps=1e-7):
    """Mean weighted binary cross-entropy; the 0 class (target < 0.5) gets w0."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    loss, _ = network._bce_forward_grad(pred, target, w0, clip_eps)
    return loss


def adam_step(weights, grads, state, config):
    """One bias-corrected Adam update; returns new weights and state."""
    t = state.step + 1
    lr, b1, b2, eps = (
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_epsilon,
    )
    new_tensors = {}
    new_m = {}
    new_v = {}
    for name, w in weights.tensors.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericFailure(f"non-finite gradient in {name}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_tensors[name] = w - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[name] = m
        new_v[name] = v
    return (
        network.ModelWeights(weights.config, new_tensors),
        AdamState(m=new_m, v=new_v, step=t),
    )


def _shuffle_rng(seed, epoch):
    """Counter-based RNG keyed by (seed, epoch) for platform-stable shuffles."""
    key = ((int(seed) & _rng._MASK64) << 64) | (int(epoch) & _rng._MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def _prepare_sample(frame, pmap, aug_params):
    if aug_params is not None:
        frame, pmap = imaging.apply_augment(frame, pmap, aug_params)
    return imaging.normalize(frame), pmap


def train_stage(weights, stage, config, augment=False):
    """Run epochs_per_stage full passes over the stage dataset.

    Samples are reshuffled per epoch with a counter-based RNG; when augment is
    set, fresh augmentation parameters are drawn per sample per epoch. Returns
    the updated weights and the per-epoch mean losses.
    """
    if not stage.dataset:
        raise ValueError(f"stage {stage.stage_id} has an empty dataset")
    state = AdamState.zeros_like(weights)
    log = []
    n = len(stage.dataset)
    for epoch in range(config.epochs_per_stage):
        perm = _shuffle_rng(config.rng_seed, epoch).permutation(n)
        aug_rng = _rng.substream(config.rng_seed, _rng.AUGMENT, stage.stage_id, epoch)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = perm[start : start + config.batch_size]
            frames = []
            maps = []
            for si in batch:
                frame, pmap = stage.dataset[si]
                params = None
                if augment:
                    params = imaging.sample_augment(int(aug_rng.integers(2**63)))
                f, m = _prepare_sample(frame, pmap, params)
                frames.append(f.astype(np.float32))
                maps.append(m.astype(np.float32))
            x = np.stack(frames)[:, None]
            y = np.stack(maps)[:, None]
            loss, grads = network.loss_and_gradients(
                weights, x, y, config.zero_class_weight, config.clip_eps
            )
            if not np.isfinite(loss):
                raise NumericFailure(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            weights, state = adam_step(weights, grads, state, config)
            loss_sum += loss * len(batch)
        log.append(loss_sum / n)
    return weights, log


def train_curriculum(weights, stages, config, checkpoint_dir, augment=False):
    """Sequential training over nested domain stages with per-stage checkpoints.

    Stage k starts from stage k-1's weights; each stage's domain set must be a
    superset of the previous one. Returns the per-stage models in order, with
    checkpoints stage_1.mtjw .. stage_k.mtjw and a (stage, epoch, mean_loss)
    log.
    """
    prev_domains = set()
    for stage in stages:
        if not set(stage.domains) >= prev_domains:
            raise ValueError(
                f"stage {stage.stage_id} domains {stage.domains} do not include "
                f"the previous stage's {sorted(prev_domains)}"
            )
        prev_domains = set(stage.domains)
    os.makedirs(checkpoint_dir, exist_ok=True)
    models = []
    full_log = []
    for k, stage in enumerate(stages, start=1):
        weights, log = train_stage(weights, stage, config, augment=augment)
        network.save_weights(weights, os.path.join(checkpoint_dir, f"stage_{k}.mtjw"))
        models.append(weights)
        full_log.extend((k, epoch, loss) for epoch, loss in enumerate(log))
    return models, full_log


def write_training_log(log, path):
    """CSV training log: stage,epoch,mean_loss."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("stage,epoch,mean_loss\n")
        for stage, epoch, loss in log:
            fh.write(f"{stage},{epoch},{loss!r}\n")

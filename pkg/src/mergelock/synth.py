"""Seeded synthetic checkpoints: a random "pretrained" model, fine-tunes made
by adding scaled gaussian task vectors, and random input batches."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .checkpoint import Checkpoint, ModelConfig, is_bias
from .rng import Rng

BIAS_STD = 0.1
LN_STD = 0.1


def random_pretrained(config: ModelConfig, rng: Rng) -> Checkpoint:
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        size = int(np.prod(shape))
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            tensors[name] = 1.0 + LN_STD * rng.normal(size)
        elif leaf == "beta":
            tensors[name] = LN_STD * rng.normal(size)
        elif is_bias(name):
            tensors[name] = BIAS_STD * rng.normal(size) if config.includes_bias else np.zeros(size)
        else:
            tensors[name] = (rng.normal(size) / np.sqrt(shape[1])).reshape(shape)
    return Checkpoint(config, tensors)


def perturbation_std(pre: Checkpoint, scale: float) -> float:
    """Per-entry std ``scale * |theta_pre|_F / sqrt(param count)``."""
    total = sum(float((a**2).sum()) for a in pre.tensors.values())
    return scale * np.sqrt(total) / np.sqrt(pre.num_params())


def synthetic_finetune(pre: Checkpoint, rng: Rng, scale: float = 0.02) -> Checkpoint:
    std = perturbation_std(pre, scale)
    out = {}
    for name, a in pre.tensors.items():
        noise = std * rng.normal(a.size).reshape(a.shape)
        if is_bias(name) and not pre.config.includes_bias:
            noise = np.zeros_like(a)
        out[name] = a + noise
    return Checkpoint(pre.config, out)


def random_batch(config: ModelConfig, rng: Rng, size: int = 8, seq_len: int = 6) -> list[np.ndarray]:
    return [rng.normal(seq_len * config.d_model).reshape(seq_len, config.d_model) for _ in range(size)]


class Family(NamedTuple):
    pretrained: Checkpoint
    finetunes: list[Checkpoint]
    batch: list[np.ndarray]


def synthetic_family(
    seed: int,
    config: ModelConfig,
    tasks: int = 2,
    scale: float = 0.02,
    batch_size: int = 8,
    seq_len: int = 6,
) -> Family:
    """Pretrained model, ``tasks`` fine-tunes and a batch, each from its own
    child stream of ``Rng(seed)`` so adding tasks does not shift the batch."""
    root = Rng(seed)
    pre_rng, batch_rng = root.spawn(), root.spawn()
    pre = random_pretrained(config, pre_rng)
    fts = [synthetic_finetune(pre, root.spawn(), scale) for _ in range(tasks)]
    return Family(pre, fts, random_batch(config, batch_rng, batch_size, seq_len))

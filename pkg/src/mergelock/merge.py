"""Model merging: weight averaging, Task Arithmetic and Ties-Merging."""

from __future__ import annotations

import math

import numpy as np

from .checkpoint import Checkpoint, TaskVector, apply_task_vectors, require_same_schema, task_vector
from .errors import ParameterError

DEFAULT_LAMBDA = 0.3
DEFAULT_TRIM = 0.2
LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))


def _sorted_sum(stack: np.ndarray) -> np.ndarray:
    """Sum over axis 0 after sorting, so the result ignores input order."""
    return np.sort(stack, axis=0).sum(axis=0)


def weight_average(ckpts: list[Checkpoint]) -> Checkpoint:
    if not ckpts:
        raise ParameterError("weight_average needs at least one checkpoint")
    config = require_same_schema(*ckpts)
    out = {}
    for name in ckpts[0].names():
        out[name] = _sorted_sum(np.stack([c[name] for c in ckpts])) / len(ckpts)
    return Checkpoint(config, out)


def task_arithmetic(pre: Checkpoint, fts: list[Checkpoint], lam: float = DEFAULT_LAMBDA) -> Checkpoint:
    """``theta_pre + lam * sum_i (theta_i - theta_pre)``."""
    if not math.isfinite(lam):
        raise ParameterError(f"lambda must be finite, got {lam}")
    require_same_schema(pre, *fts)
    return apply_task_vectors(pre, [task_vector(ft, pre) for ft in fts], lam)


def trim_top_k(flat: np.ndarray, k: float) -> np.ndarray:
    """Zero all but the ``ceil(k * n)`` largest-magnitude entries.

    Equal magnitudes at the cut are kept in index order.
    """
    keep = max(1, math.ceil(k * flat.size - 1e-9))
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:keep]] = flat[order[:keep]]
    return out


def ties_vector(vectors: list[np.ndarray], k: float) -> np.ndarray:
    """Trim, elect sign, disjoint mean over flat task vectors.

    A coordinate whose trimmed sum is exactly zero elects the positive sign.
    """
    if not 0 < k <= 1:
        raise ParameterError(f"trim fraction must be in (0, 1], got {k}")
    trimmed = np.stack([trim_top_k(v, k) for v in vectors])
    elected = np.where(_sorted_sum(trimmed) >= 0, 1.0, -1.0)
    agree = np.sign(trimmed) == elected
    count = agree.sum(axis=0)
    total = _sorted_sum(np.where(agree, trimmed, 0.0))
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def ties_merge(pre: Checkpoint, fts: list[Checkpoint], k: float = DEFAULT_TRIM, lam: float = DEFAULT_LAMBDA) -> Checkpoint:
    if not 0 < k <= 1:
        raise ParameterError(f"trim fraction must be in (0, 1], got {k}")
    if not fts:
        raise ParameterError("ties_merge needs at least one fine-tuned checkpoint")
    require_same_schema(pre, *fts)
    merged = ties_vector([task_vector(ft, pre).flat() for ft in fts], k)
    return apply_task_vectors(pre, [TaskVector.from_flat(pre.config, merged)], lam)


def merge(method: str, pre: Checkpoint, fts: list[Checkpoint], lam: float = DEFAULT_LAMBDA, trim: float = DEFAULT_TRIM) -> Checkpoint:
    if method == "avg":
        return weight_average(fts)
    if method == "ta":
        return task_arithmetic(pre, fts, lam)
    if method == "ties":
        return ties_merge(pre, fts, trim, lam)
    raise ParameterError(f"unknown merge method {method!r}", allowed=["avg", "ta", "ties"])

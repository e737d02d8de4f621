"""Forward-only pre-LN transformer used to check functional equivalence.

Activations are row vectors: a sequence is a ``T x d_model`` array and every
projection is ``X @ W.T + b``. All functions also accept a leading batch
axis, ``(N, T, d_model)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from .checkpoint import Checkpoint, ModelConfig, require_same_schema
from .errors import ShapeError

LN_EPS = 1e-5


@dataclass(frozen=True)
class LayerParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass(frozen=True)
class HeadParams:
    """One attention head: ``w_q/w_k/w_v`` are d_head x d_model row slices,
    ``w_o`` is the d_model x d_head column slice of the output projection."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray


class TransformerParams:
    """Structured per-layer view over a checkpoint."""

    def __init__(self, ckpt: Checkpoint):
        self.config: ModelConfig = ckpt.config
        self.layers = []
        for i in range(ckpt.config.num_layers):
            p = f"layers.{i}."
            self.layers.append(
                LayerParams(
                    *(ckpt[p + "attn." + n] for n in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")),
                    *(ckpt[p + "mlp." + n] for n in ("w1", "b1", "w2", "b2")),
                    ckpt[p + "ln1.gamma"],
                    ckpt[p + "ln1.beta"],
                    ckpt[p + "ln2.gamma"],
                    ckpt[p + "ln2.beta"],
                )
            )

    def head(self, layer: int, h: int) -> HeadParams:
        lp = self.layers[layer]
        rows = head_slice(self.config, h)
        return HeadParams(lp.w_q[rows], lp.w_k[rows], lp.w_v[rows], lp.w_o[:, rows], lp.b_q[rows], lp.b_k[rows], lp.b_v[rows])


def head_slice(config: ModelConfig, h: int) -> slice:
    d = config.d_head
    return slice(h * d, (h + 1) * d)


def as_params(model) -> TransformerParams:
    return model if isinstance(model, TransformerParams) else TransformerParams(model)


def _check_input(config: ModelConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != config.d_model:
        raise ShapeError(f"input must be (..., T, {config.d_model}), got {x.shape}", shape=list(x.shape))
    return x


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "gelu":
        return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def attention_forward(params, layer: int, x) -> np.ndarray:
    p = as_params(params)
    cfg = p.config
    x = _check_input(cfg, x)
    lp = p.layers[layer]
    H, d = cfg.num_heads, cfg.d_head

    def split(w, b):
        y = x @ w.T + b
        return np.swapaxes(y.reshape(*y.shape[:-1], H, d), -2, -3)  # (..., H, T, d)

    q, k, v = split(lp.w_q, lp.b_q), split(lp.w_k, lp.b_k), split(lp.w_v, lp.b_v)
    weights = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(d))
    heads = np.swapaxes(weights @ v, -2, -3)
    cat = heads.reshape(*heads.shape[:-2], H * d)
    return cat @ lp.w_o.T + lp.b_o


def mlp_forward(params, layer: int, x) -> np.ndarray:
    p = as_params(params)
    x = _check_input(p.config, x)
    lp = p.layers[layer]
    return activation(p.config.activation, x @ lp.w1.T + lp.b1) @ lp.w2.T + lp.b2


def model_forward(params, x) -> np.ndarray:
    p = as_params(params)
    x = _check_input(p.config, x)
    for i, lp in enumerate(p.layers):
        x = x + attention_forward(p, i, layer_norm(x, lp.ln1_gamma, lp.ln1_beta))
        x = x + mlp_forward(p, i, layer_norm(x, lp.ln2_gamma, lp.ln2_beta))
    return x


def as_batch(batch: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Stack a list of ``T x d`` sequences into ``(N, T, d)``; shapes must agree."""
    arrays = [np.asarray(x, dtype=np.float64) for x in batch]
    if not arrays:
        raise ShapeError("batch is empty")
    first = arrays[0].shape
    if len(first) != 2 or any(a.shape != first for a in arrays):
        raise ShapeError("batch sequences must share one T x d_model shape", shapes=[list(a.shape) for a in arrays])
    return np.stack(arrays)


def functional_divergence(a: Checkpoint, b: Checkpoint, batch) -> float:
    """Mean over the batch of ``|f(a, x) - f(b, x)|_F^2 / (T * d_model)``."""
    require_same_schema(a, b)
    xs = as_batch(batch)
    diff = model_forward(a, xs) - model_forward(b, xs)
    per_example = (diff**2).sum(axis=(-1, -2)) / (xs.shape[1] * xs.shape[2])
    return float(per_example.mean())


def max_output_deviation(a: Checkpoint, b: Checkpoint, batch) -> float:
    xs = as_batch(batch)
    return float(np.abs(model_forward(a, xs) - model_forward(b, xs)).max())

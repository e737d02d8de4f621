"""MergeLock protection, the PaRaMS baseline, and keyed recovery.

Both schemes rewrite each attention head with a pair of invertible matrices
(row-vector convention, ``y = x @ W.T + b``)::

    W_Q <- A.T @ W_Q      b_Q <- b_Q @ A
    W_K <- A^-1 @ W_K     b_K <- b_K @ A^-T
    W_V <- B.T @ W_V      b_V <- b_V @ B
    W_O <- W_O @ B^-T     (b_O untouched)

so ``Q K^T`` and ``V W_O^T`` are unchanged. MergeLock draws ``A = R P D``
(gaussian, permutation, positive diagonal) per head; PaRaMS uses a diagonal
only and also permutes MLP neurons away from the pretrained model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .checkpoint import Checkpoint, HeadTransform, MergeLockKey, check_fingerprint, fingerprint, require_same_schema
from .errors import KeyMismatchError, ParameterError, SamplingError, SchemaError
from .linalg import Permutation, condition_estimate, hungarian, invert, polar_orthogonal
from .rng import Rng, sample_diagonal, sample_gaussian, sample_permutation
from .transformer import head_slice

R_KINDS = ("gaussian", "orthogonal", "identity")


@dataclass(frozen=True)
class SamplingConfig:
    seed: int = 0
    gaussian_std: float | None = None  # None: 1/sqrt(d_head)
    diag_lo: float = 0.5
    diag_hi: float = 2.0
    cond_cap: float = 1e3
    max_resamples: int = 16
    r_kind: str = "gaussian"
    permute: bool = True

    def __post_init__(self):
        if not 0 < self.diag_lo <= self.diag_hi:
            raise ParameterError(f"need 0 < diag_lo <= diag_hi, got {self.diag_lo}, {self.diag_hi}")
        if not self.cond_cap > 1:
            raise ParameterError(f"cond_cap must exceed 1, got {self.cond_cap}")
        if self.max_resamples < 1:
            raise ParameterError("max_resamples must be >= 1")
        if self.gaussian_std is not None and not self.gaussian_std > 0:
            raise ParameterError(f"gaussian_std must be positive, got {self.gaussian_std}")
        if self.r_kind not in R_KINDS:
            raise ParameterError(f"unknown r_kind {self.r_kind!r}", allowed=list(R_KINDS))

    def to_dict(self) -> dict:
        return asdict(self)


def sample_transform(d_head: int, rng: Rng, cfg: SamplingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``A = R P D`` and its inverse ``D^-1 P^T R^-1``.

    ``R`` is redrawn until its condition estimate is within ``cfg.cond_cap``.
    """
    if d_head < 1:
        raise ParameterError(f"d_head must be >= 1, got {d_head}")
    std = cfg.gaussian_std if cfg.gaussian_std is not None else 1.0 / np.sqrt(d_head)
    cond = np.inf
    for _ in range(cfg.max_resamples):
        if cfg.r_kind == "identity":
            r = np.eye(d_head)
        else:
            r = sample_gaussian(d_head, d_head, std, rng)
            if cfg.r_kind == "orthogonal":
                r = polar_orthogonal(r)
        cond = condition_estimate(r)
        if cond <= cfg.cond_cap:
            break
    else:
        raise SamplingError(f"no R within condition cap {cfg.cond_cap} after {cfg.max_resamples} draws", condition=cond)
    perm = sample_permutation(d_head, rng) if cfg.permute else Permutation.identity(d_head)
    p = perm.as_matrix()
    d = np.diag(sample_diagonal(d_head, cfg.diag_lo, cfg.diag_hi, rng))
    a = r @ p * d
    a_inv = (p.T @ invert(r)) / d[:, None]
    return a, a_inv


def transform_attention(ckpt: Checkpoint, transforms: Mapping[tuple[int, int], HeadTransform]) -> Checkpoint:
    """Apply per-head (A, A^-1, B, B^-1) insertions; untouched heads stay bit-identical."""
    cfg = ckpt.config
    updates: dict[str, np.ndarray] = {}

    def get(name):
        if name not in updates:
            updates[name] = np.array(ckpt[name])
        return updates[name]

    for (layer, h), t in sorted(transforms.items()):
        if not (0 <= layer < cfg.num_layers and 0 <= h < cfg.num_heads):
            raise SchemaError(f"head slot ({layer}, {h}) outside the model", layer=layer, head=h)
        for m in t:
            if m.shape != (cfg.d_head, cfg.d_head):
                raise SchemaError(f"transform for head ({layer}, {h}) is {m.shape}, d_head is {cfg.d_head}", layer=layer, head=h)
        rows = head_slice(cfg, h)
        p = f"layers.{layer}.attn."
        w_q, w_k, w_v, w_o = get(p + "w_q"), get(p + "w_k"), get(p + "w_v"), get(p + "w_o")
        b_q, b_k, b_v = get(p + "b_q"), get(p + "b_k"), get(p + "b_v")
        w_q[rows] = t.a.T @ w_q[rows]
        b_q[rows] = b_q[rows] @ t.a
        w_k[rows] = t.a_inv @ w_k[rows]
        b_k[rows] = b_k[rows] @ t.a_inv.T
        w_v[rows] = t.b.T @ w_v[rows]
        b_v[rows] = b_v[rows] @ t.b
        w_o[:, rows] = w_o[:, rows] @ t.b_inv.T
    return ckpt.replace(updates)


def permute_mlp(ckpt: Checkpoint, perms: list[Permutation]) -> Checkpoint:
    """``W1 <- P^T W1``, ``b1 <- b1 P``, ``W2 <- W2 P`` for each layer."""
    cfg = ckpt.config
    if len(perms) != cfg.num_layers:
        raise SchemaError(f"got {len(perms)} permutations for {cfg.num_layers} layers")
    updates = {}
    for i, perm in enumerate(perms):
        if len(perm) != cfg.d_ff:
            raise SchemaError(f"layer {i} permutation has size {len(perm)}, d_ff is {cfg.d_ff}", layer=i)
        src = perm.source_order()
        p = f"layers.{i}.mlp."
        updates[p + "w1"] = ckpt[p + "w1"][src]
        updates[p + "b1"] = ckpt[p + "b1"][src]
        updates[p + "w2"] = ckpt[p + "w2"][:, src]
    return ckpt.replace(updates)


def mlp_similarity(target: Checkpoint, source: Checkpoint, layer: int) -> np.ndarray:
    """``C[i, j]`` = inner product of target neuron ``i`` with source neuron ``j``
    (first-layer rows plus second-layer columns)."""
    p = f"layers.{layer}.mlp."
    return target[p + "w1"] @ source[p + "w1"].T + target[p + "w2"].T @ source[p + "w2"]


def _key_metadata(cfg: SamplingConfig, source: Checkpoint, protected: Checkpoint) -> dict:
    return {
        "fingerprint": fingerprint(protected),
        "sampling": cfg.to_dict(),
        "seed": cfg.seed,
        "source_fingerprint": fingerprint(source),
    }


def protect_mergelock(ckpt: Checkpoint, cfg: SamplingConfig | None = None) -> tuple[Checkpoint, MergeLockKey]:
    cfg = cfg or SamplingConfig()
    c = ckpt.config
    rng = Rng(cfg.seed)
    heads = {}
    for layer in range(c.num_layers):
        for h in range(c.num_heads):
            a, a_inv = sample_transform(c.d_head, rng, cfg)
            b, b_inv = sample_transform(c.d_head, rng, cfg)
            heads[(layer, h)] = HeadTransform(a, a_inv, b, b_inv)
    protected = transform_attention(ckpt, heads)
    key = MergeLockKey("mergelock", c.num_layers, c.num_heads, c.d_head, heads, metadata=_key_metadata(cfg, ckpt, protected))
    return protected, key


def params_permutation(ckpt: Checkpoint, pre: Checkpoint, layer: int) -> Permutation:
    """Neuron permutation of ``ckpt`` that is farthest from ``pre``."""
    assignment = hungarian(mlp_similarity(pre, ckpt, layer))
    return assignment.perm.inverse()


def protect_params(ckpt: Checkpoint, pre: Checkpoint, cfg: SamplingConfig | None = None) -> tuple[Checkpoint, MergeLockKey]:
    cfg = cfg or SamplingConfig()
    c = require_same_schema(ckpt, pre)
    rng = Rng(cfg.seed)
    perms = [params_permutation(ckpt, pre, layer) for layer in range(c.num_layers)]
    heads, qk_diag, vo_diag = {}, [], []
    for layer in range(c.num_layers):
        qk, vo = [], []
        for h in range(c.num_heads):
            da = np.diag(sample_diagonal(c.d_head, cfg.diag_lo, cfg.diag_hi, rng))
            db = np.diag(sample_diagonal(c.d_head, cfg.diag_lo, cfg.diag_hi, rng))
            heads[(layer, h)] = HeadTransform(np.diag(da), np.diag(1.0 / da), np.diag(db), np.diag(1.0 / db))
            qk.append(da)
            vo.append(db)
        qk_diag.append(np.concatenate(qk))
        vo_diag.append(np.concatenate(vo))
    protected = transform_attention(permute_mlp(ckpt, perms), heads)
    key = MergeLockKey(
        "params", c.num_layers, c.num_heads, c.d_head, heads,
        mlp_perms=perms, qk_diag=qk_diag, vo_diag=vo_diag,
        metadata=_key_metadata(cfg, ckpt, protected),
    )
    return protected, key


def protect(ckpt: Checkpoint, scheme: str, cfg: SamplingConfig | None = None, pre: Checkpoint | None = None):
    if scheme == "mergelock":
        return protect_mergelock(ckpt, cfg)
    if scheme == "params":
        if pre is None:
            raise ParameterError("the params scheme needs the pretrained checkpoint")
        return protect_params(ckpt, pre, cfg)
    raise ParameterError(f"unknown protection scheme {scheme!r}", allowed=["mergelock", "params"])


def recover(protected: Checkpoint, key: MergeLockKey, scheme: str | None = None) -> Checkpoint:
    """Undo a protection with its key. Fingerprint mismatches only warn."""
    c = protected.config
    if scheme is not None and scheme != key.scheme:
        raise KeyMismatchError(f"expected a {scheme} key, got {key.scheme}")
    if (key.num_layers, key.num_heads, key.d_head) != (c.num_layers, c.num_heads, c.d_head):
        raise KeyMismatchError(
            "key geometry does not match the checkpoint",
            key=key.geometry(), checkpoint=c.to_dict(),
        )
    if key.scheme == "params" and any(len(p) != c.d_ff for p in key.mlp_perms):
        raise KeyMismatchError(f"key permutations do not match d_ff={c.d_ff}")
    check_fingerprint(key, protected)
    inverse = {slot: HeadTransform(t.a_inv, t.a, t.b_inv, t.b) for slot, t in key.heads.items()}
    out = transform_attention(protected, inverse)
    if key.scheme == "params":
        out = permute_mlp(out, [p.inverse() for p in key.mlp_perms])
    return out

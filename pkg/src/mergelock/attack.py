"""Data-free alignment an adversary can run before merging.

Every alignment re-parameterizes ``model1`` (usually the protected model)
toward ``model2`` through the same head insertions protection uses, so the
aligned model computes exactly the same function as ``model1``.
"""

from __future__ import annotations

from typing import Mapping, NamedTuple

import numpy as np

from .checkpoint import Checkpoint, HeadTransform, require_same_schema
from .errors import ParameterError
from .linalg import Permutation, hungarian, polar_orthogonal
from .protect import mlp_similarity, permute_mlp, transform_attention
from .transformer import HeadParams, TransformerParams

ORTHOGONALITY_TOL = 1e-8


class Rotation(NamedTuple):
    rotation: np.ndarray
    residual_before: float
    residual_after: float


def _sq(x) -> float:
    return float((np.asarray(x) ** 2).sum())


def qk_residual(h1: HeadParams, h2: HeadParams, r: np.ndarray) -> float:
    """QK alignment objective with ``R2 = I``."""
    return (
        _sq(r.T @ h1.w_q - h2.w_q) + _sq(h1.b_q @ r - h2.b_q)
        + _sq(r.T @ h1.w_k - h2.w_k) + _sq(h1.b_k @ r - h2.b_k)
    )


def vo_residual(h1: HeadParams, h2: HeadParams, r: np.ndarray) -> float:
    return _sq(r.T @ h1.w_v - h2.w_v) + _sq(h1.b_v @ r - h2.b_v) + _sq(h1.w_o @ r - h2.w_o)


def kabsch_align_qk(h1: HeadParams, h2: HeadParams) -> Rotation:
    """Orthogonal ``R1 = U V^T`` from the SVD of
    ``W_Q1 W_Q2^T + W_K1 W_K2^T + b_Q1^T b_Q2 + b_K1^T b_K2``."""
    if h1.w_q.shape != h2.w_q.shape:
        raise ParameterError(f"head shapes differ: {h1.w_q.shape} vs {h2.w_q.shape}")
    m = h1.w_q @ h2.w_q.T + h1.w_k @ h2.w_k.T + np.outer(h1.b_q, h2.b_q) + np.outer(h1.b_k, h2.b_k)
    r = polar_orthogonal(m)
    eye = np.eye(r.shape[0])
    return Rotation(r, qk_residual(h1, h2, eye), qk_residual(h1, h2, r))


def kabsch_align_vo(h1: HeadParams, h2: HeadParams) -> Rotation:
    """Orthogonal ``R3`` from ``W_V1 W_V2^T + b_V1^T b_V2 + W_O1^T W_O2``."""
    if h1.w_v.shape != h2.w_v.shape:
        raise ParameterError(f"head shapes differ: {h1.w_v.shape} vs {h2.w_v.shape}")
    m = h1.w_v @ h2.w_v.T + np.outer(h1.b_v, h2.b_v) + h1.w_o.T @ h2.w_o
    r = polar_orthogonal(m)
    eye = np.eye(r.shape[0])
    return Rotation(r, vo_residual(h1, h2, eye), vo_residual(h1, h2, r))


def apply_attention_alignment(model1: Checkpoint, rotations: Mapping[tuple[int, int], tuple[np.ndarray, np.ndarray]]) -> Checkpoint:
    """Insert orthogonal (R1, R3) per head; ``R^-1`` is taken as ``R^T``."""
    transforms = {}
    for slot, (r1, r3) in rotations.items():
        for label, r in (("R1", r1), ("R3", r3)):
            err = float(np.linalg.norm(r.T @ r - np.eye(r.shape[0])))
            if err > ORTHOGONALITY_TOL:
                raise ParameterError(f"{label} for head {slot} is not orthogonal (|R^T R - I| = {err:.2e})", head=list(slot))
        transforms[slot] = HeadTransform(r1, r1.T, r3, r3.T)
    return transform_attention(model1, transforms)


class AttentionAlignment(NamedTuple):
    model: Checkpoint
    qk: dict[tuple[int, int], Rotation]
    vo: dict[tuple[int, int], Rotation]

    def report(self) -> dict:
        heads = []
        for slot in sorted(self.qk):
            heads.append({
                "layer": slot[0],
                "head": slot[1],
                "qk_before": self.qk[slot].residual_before,
                "qk_after": self.qk[slot].residual_after,
                "vo_before": self.vo[slot].residual_before,
                "vo_after": self.vo[slot].residual_after,
            })
        return {"strategy": "kabsch", "heads": heads}


def kabsch_align(model1: Checkpoint, model2: Checkpoint, branches=("qk", "vo")) -> AttentionAlignment:
    """Per-head Kabsch alignment of every attention head of ``model1``."""
    cfg = require_same_schema(model1, model2)
    p1, p2 = TransformerParams(model1), TransformerParams(model2)
    eye = np.eye(cfg.d_head)
    qk, vo, rotations = {}, {}, {}
    for layer in range(cfg.num_layers):
        for h in range(cfg.num_heads):
            h1, h2 = p1.head(layer, h), p2.head(layer, h)
            slot = (layer, h)
            qk[slot] = kabsch_align_qk(h1, h2) if "qk" in branches else Rotation(eye, qk_residual(h1, h2, eye), qk_residual(h1, h2, eye))
            vo[slot] = kabsch_align_vo(h1, h2) if "vo" in branches else Rotation(eye, vo_residual(h1, h2, eye), vo_residual(h1, h2, eye))
            rotations[slot] = (qk[slot].rotation, vo[slot].rotation)
    return AttentionAlignment(apply_attention_alignment(model1, rotations), qk, vo)


class MlpAlignment(NamedTuple):
    model: Checkpoint
    perms: list[Permutation]
    objectives: list[float]

    def report(self) -> dict:
        return {
            "strategy": "hungarian",
            "layers": [
                {"layer": i, "identity": p.is_identity(), "similarity": -obj}
                for i, (p, obj) in enumerate(zip(self.perms, self.objectives))
            ],
        }


def hungarian_align_mlp(model1: Checkpoint, model2: Checkpoint) -> MlpAlignment:
    """Permute ``model1``'s MLP neurons to best match ``model2``'s.

    Solves the same assignment PaRaMS solves, with max replaced by min
    distance, so a PaRaMS-permuted model gets the inverse permutation.
    """
    cfg = require_same_schema(model1, model2)
    perms, objectives = [], []
    for layer in range(cfg.num_layers):
        assignment = hungarian(-mlp_similarity(model2, model1, layer))
        perms.append(assignment.perm.inverse())
        objectives.append(assignment.objective)
    return MlpAlignment(permute_mlp(model1, perms), perms, objectives)


def diagonal_scales(w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Least-squares ``d_i`` with ``d_i * row_i(w1) ~ row_i(w2)``; 1 for degenerate rows."""
    num = np.einsum("ij,ij->i", w1, w2)
    den = np.einsum("ij,ij->i", w1, w1)
    ok = (den > 0) & (num != 0)
    return np.where(ok, num / np.where(ok, den, 1.0), 1.0)


class DiagonalAlignment(NamedTuple):
    model: Checkpoint
    qk_scales: list[np.ndarray]
    vo_scales: list[np.ndarray]

    def report(self) -> dict:
        return {
            "strategy": "diag",
            "layers": [
                {"layer": i, "qk_scales": q.tolist(), "vo_scales": v.tolist()}
                for i, (q, v) in enumerate(zip(self.qk_scales, self.vo_scales))
            ],
        }


def diagonal_align(model1: Checkpoint, model2: Checkpoint, branches=("qk", "vo")) -> DiagonalAlignment:
    """Per-dimension scale estimation against diagonal attention protection.

    QK scales come from W_Q rows (K receives the reciprocal); VO scales from
    W_V rows (W_O columns receive the reciprocal).
    """
    cfg = require_same_schema(model1, model2)
    qk_scales, vo_scales, transforms = [], [], {}
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}.attn."
        ones = np.ones(cfg.d_model)
        dq = diagonal_scales(model1[p + "w_q"], model2[p + "w_q"]) if "qk" in branches else ones
        dv = diagonal_scales(model1[p + "w_v"], model2[p + "w_v"]) if "vo" in branches else ones
        qk_scales.append(dq)
        vo_scales.append(dv)
        for h in range(cfg.num_heads):
            rows = slice(h * cfg.d_head, (h + 1) * cfg.d_head)
            transforms[(layer, h)] = HeadTransform(np.diag(dq[rows]), np.diag(1.0 / dq[rows]), np.diag(dv[rows]), np.diag(1.0 / dv[rows]))
    return DiagonalAlignment(transform_attention(model1, transforms), qk_scales, vo_scales)


def diagonal_align_qk(model1: Checkpoint, model2: Checkpoint) -> DiagonalAlignment:
    return diagonal_align(model1, model2, branches=("qk",))


def params_align(model1: Checkpoint, model2: Checkpoint) -> tuple[Checkpoint, MlpAlignment, DiagonalAlignment]:
    """Hungarian MLP alignment followed by QK/VO diagonal alignment."""
    mlp = hungarian_align_mlp(model1, model2)
    diag = diagonal_align(mlp.model, model2)
    return diag.model, mlp, diag

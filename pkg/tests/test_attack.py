import math

import numpy as np
import pytest

from mergelock import oracles
from mergelock.analysis import branch_distance, parameter_distance
from mergelock.attack import (
    apply_attention_alignment,
    diagonal_align,
    diagonal_align_qk,
    diagonal_scales,
    hungarian_align_mlp,
    kabsch_align,
    kabsch_align_qk,
    kabsch_align_vo,
    params_align,
    qk_residual,
    vo_residual,
)
from mergelock.checkpoint import HeadTransform, ModelConfig
from mergelock.errors import ParameterError
from mergelock.linalg import Permutation, polar_orthogonal
from mergelock.protect import SamplingConfig, mlp_similarity, permute_mlp, protect_mergelock, protect_params, transform_attention
from mergelock.rng import Rng, sample_permutation
from mergelock.synth import synthetic_family
from mergelock.transformer import HeadParams, TransformerParams, max_output_deviation


def _random_orthogonal(n, rng):
    return polar_orthogonal(rng.normal(n * n).reshape(n, n))


def _plant_orthogonal(model, seed):
    rng = Rng(seed)
    cfg = model.config
    planted = {}
    for l in range(cfg.num_layers):
        for h in range(cfg.num_heads):
            a, b = _random_orthogonal(cfg.d_head, rng), _random_orthogonal(cfg.d_head, rng)
            planted[(l, h)] = HeadTransform(a, a.T, b, b.T)
    return transform_attention(model, planted), planted


def test_self_alignment_is_identity(family):
    ft = family.finetunes[0]
    result = kabsch_align(ft, ft)
    for rot in list(result.qk.values()) + list(result.vo.values()):
        assert np.allclose(rot.rotation, np.eye(ft.config.d_head), atol=1e-8)


def test_orthogonal_plant_is_recovered(family):
    ft = family.finetunes[0]
    planted_model, planted = _plant_orthogonal(ft, 3)
    result = kabsch_align(planted_model, ft)
    for slot, t in planted.items():
        # the planted model carries A^T W; the aligning rotation is A^-1 = A^T
        assert np.linalg.norm(result.qk[slot].rotation - t.a.T) <= 1e-6
        assert np.linalg.norm(result.vo[slot].rotation - t.b.T) <= 1e-6
    assert parameter_distance(result.model, ft) <= 1e-6


def test_hand_case_is_ninety_degree_rotation():
    m = np.array([[0.0, -1.0], [1.0, 0.0]])
    zero = np.zeros((2, 2))
    h1 = HeadParams(m, zero, zero, zero, np.zeros(2), np.zeros(2), np.zeros(2))
    h2 = HeadParams(np.eye(2), zero, zero, zero, np.zeros(2), np.zeros(2), np.zeros(2))
    rot = kabsch_align_qk(h1, h2)
    assert np.allclose(rot.rotation, m, atol=1e-12)

    def rotation(deg, flip):
        t = math.radians(deg)
        r = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        return r @ np.diag([1.0, -1.0]) if flip else r

    grid = [(qk_residual(h1, h2, rotation(d, f)), d, f) for d in range(360) for f in (False, True)]
    best, deg, flip = min(grid)
    assert rot.residual_after <= best + 1e-12
    assert not flip and np.allclose(rotation(deg, flip), rot.rotation, atol=1e-12)


def test_kabsch_beats_random_rotations(family):
    p1 = TransformerParams(protect_mergelock(family.finetunes[0], SamplingConfig(seed=1))[0])
    p2 = TransformerParams(family.finetunes[1])
    h1, h2 = p1.head(0, 0), p2.head(0, 0)
    qk, vo = kabsch_align_qk(h1, h2), kabsch_align_vo(h1, h2)
    rng = Rng(0)
    for _ in range(100):
        q = _random_orthogonal(h1.w_q.shape[0], rng)
        assert qk.residual_after <= qk_residual(h1, h2, q) + 1e-9
        assert vo.residual_after <= vo_residual(h1, h2, q) + 1e-9


def test_residual_never_increases_over_random_pairs():
    for seed in range(100):
        fam = synthetic_family(seed, ModelConfig(1, 1, 6, 8), tasks=2)
        protected, _ = protect_mergelock(fam.finetunes[0], SamplingConfig(seed=seed))
        h1 = TransformerParams(protected).head(0, 0)
        h2 = TransformerParams(fam.finetunes[1]).head(0, 0)
        for rot in (kabsch_align_qk(h1, h2), kabsch_align_vo(h1, h2)):
            assert rot.residual_after <= rot.residual_before + 1e-9


def test_alignment_preserves_function_and_reduces_distance(family):
    protected, _ = protect_mergelock(family.finetunes[0], SamplingConfig(seed=2))
    target = family.finetunes[1]
    aligned = kabsch_align(protected, target).model
    assert max_output_deviation(aligned, protected, family.batch) <= 1e-6
    for branch in ("qk", "vo"):
        assert branch_distance(aligned, target, branch) <= branch_distance(protected, target, branch)


def test_apply_alignment_identity_noop_and_rejects_non_orthogonal(family):
    ft = family.finetunes[0]
    eye = np.eye(ft.config.d_head)
    slots = {(l, h): (eye, eye) for l in range(2) for h in range(2)}
    assert apply_attention_alignment(ft, slots) == ft
    slots[(0, 0)] = (2 * eye, eye)
    with pytest.raises(ParameterError):
        apply_attention_alignment(ft, slots)


def test_hungarian_recovers_planted_permutation():
    fam = synthetic_family(4, ModelConfig(2, 2, 16, 32), tasks=1)
    ft = fam.finetunes[0]
    rng = Rng(1)
    planted = permute_mlp(ft, [sample_permutation(32, rng) for _ in range(2)])
    result = hungarian_align_mlp(planted, ft)
    assert parameter_distance(result.model, ft) <= 1e-12
    assert all(p.is_identity() for p in hungarian_align_mlp(ft, ft).perms)


def test_hungarian_mlp_matches_brute_force_on_small_layer():
    fam = synthetic_family(6, ModelConfig(1, 1, 4, 5), tasks=2)
    m1, m2 = fam.finetunes
    result = hungarian_align_mlp(m1, m2)
    _, best = oracles.brute_force_assignment(-mlp_similarity(m2, m1, 0))
    assert math.isclose(result.objectives[0], best, rel_tol=1e-12, abs_tol=1e-12)


def test_diagonal_plant_is_recovered(family):
    ft = family.finetunes[0]
    d = ft.config.d_head
    base = np.array([2.0, 0.5, 3.0, 0.25, 1.5, 0.75, 4.0, 1.25])[:d]
    planted = {
        (l, h): HeadTransform(np.diag(base), np.diag(1 / base), np.diag(base[::-1]), np.diag(1 / base[::-1]))
        for l in range(2) for h in range(2)
    }
    diag_model = transform_attention(ft, planted)
    result = diagonal_align(diag_model, ft)
    assert max(float(np.abs(result.model[n] - ft[n]).max()) for n in ft.names()) <= 1e-10
    assert all(np.allclose(s, 1.0) for s in diagonal_align(ft, ft).qk_scales)
    qk_only = diagonal_align_qk(diag_model, ft)
    assert all(np.allclose(s, 1.0) for s in qk_only.vo_scales)


def test_diagonal_scales_fallback_on_zero_row():
    w1 = np.array([[0.0, 0.0], [1.0, 2.0]])
    w2 = np.array([[3.0, 4.0], [2.0, 4.0]])
    assert np.array_equal(diagonal_scales(w1, w2), [1.0, 2.0])


def test_params_alignment_undoes_params_against_source(family):
    pre, ft = family.pretrained, family.finetunes[0]
    protected, _ = protect_params(ft, pre, SamplingConfig(seed=7))
    model, mlp, diag = params_align(protected, ft)
    assert parameter_distance(model, ft) <= 1e-8
    assert mlp.report()["strategy"] == "hungarian" and diag.report()["strategy"] == "diag"

"""The acceptance matrix: every quantitative claim checked on seeded
desk-scale models, one function per criterion.

Each criterion returns a ``CriterionResult`` whose ``details`` hold only
deterministic numbers, so the summary JSON is byte-stable for a given seed.
Wall-clock timings are returned separately by ``run_suite``.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import oracles
from .analysis import LMC_GRID, branch_distance, lmc_curve, parameter_distance
from .attack import diagonal_align, hungarian_align_mlp, kabsch_align, params_align
from .checkpoint import Checkpoint, ModelConfig, canonical_json
from .linalg import hungarian, svd
from .merge import LAMBDA_GRID, task_arithmetic, ties_merge
from .protect import SamplingConfig, protect_mergelock, protect_params, recover
from .rng import Rng
from .synth import random_batch, synthetic_family
from .transformer import functional_divergence, max_output_deviation, model_forward

STANDARD = ModelConfig(num_layers=2, num_heads=2, d_model=32, d_ff=64, activation="gelu", includes_bias=True)
PERTURB_SCALE = 0.02
MERGE_LAMBDA = 0.3
TIES_TRIM = 0.2

EQUIVALENCE_TOL = 1e-6
RECOVERY_TOL = 1e-8
AMPLIFICATION = 10.0
DEGRADATION = 10.0
SWEEP_FLOOR = 5.0
KABSCH_DISTANCE_TOL = 1e-6
RECOVERED_DIVERGENCE_BAND = 0.10
KABSCH_RESIDUAL_FRACTION = 0.5
KABSCH_DEGRADATION = 5.0
PARAMS_DISTANCE_TOL = 1e-8
LMC_BARRIER = 10.0
SVD_TOL = 1e-8
FORWARD_TOL = 1e-12


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number}: {self.name}"

    def to_dict(self) -> dict:
        return {"details": self.details, "name": self.name, "number": self.number, "passed": self.passed}


def derive_seed(seed: int, *labels) -> int:
    digest = hashlib.sha256(":".join(str(x) for x in (seed, *labels)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _family(seed: int, config: ModelConfig = STANDARD):
    return synthetic_family(seed, config, tasks=2, scale=PERTURB_SCALE)


def _divergence(merged: Checkpoint, m1: Checkpoint, m2: Checkpoint, batch) -> float:
    return 0.5 * (functional_divergence(merged, m1, batch) + functional_divergence(merged, m2, batch))


def _max_abs_diff(a: Checkpoint, b: Checkpoint) -> float:
    return max(float(np.abs(a[n] - b[n]).max(initial=0.0)) for n in a.names())


def _f(x: float) -> float:
    return float(x)


def random_config(rng: Rng, index: int) -> ModelConfig:
    heads = (1, 2, 4)[rng.below(3)]
    d_head = 1 + rng.below(64 // heads)
    d_model = heads * d_head
    return ModelConfig(
        num_layers=1 + rng.below(4),
        num_heads=heads,
        d_model=d_model,
        d_ff=d_model * (1 + rng.below(4)),
        activation=("relu", "gelu")[index % 2],
        includes_bias=rng.below(4) != 0,
    )


def criteria_preservation_and_recovery(seed: int, trials: int = 100) -> tuple[CriterionResult, CriterionResult]:
    """Criteria 1 and 2 share the same 100 random models."""
    rng = Rng(derive_seed(seed, "c1"))
    worst_equiv = {"mergelock": 0.0, "params": 0.0}
    worst_recover = {"mergelock": 0.0, "params": 0.0}
    for i in range(trials):
        config = random_config(rng, i)
        fam = synthetic_family(rng.next_u64(), config, tasks=1, scale=PERTURB_SCALE, batch_size=4, seq_len=1 + rng.below(8))
        ft = fam.finetunes[0]
        sampling = SamplingConfig(seed=rng.next_u64())
        for scheme, (protected, key) in (
            ("mergelock", protect_mergelock(ft, sampling)),
            ("params", protect_params(ft, fam.pretrained, sampling)),
        ):
            worst_equiv[scheme] = max(worst_equiv[scheme], max_output_deviation(protected, ft, fam.batch))
            worst_recover[scheme] = max(worst_recover[scheme], _max_abs_diff(recover(protected, key), ft))
    c1 = CriterionResult(
        1, "functional preservation",
        all(v <= EQUIVALENCE_TOL for v in worst_equiv.values()),
        {"models": trials, "tolerance": EQUIVALENCE_TOL, "max_output_deviation": {k: _f(v) for k, v in worst_equiv.items()}},
    )
    c2 = CriterionResult(
        2, "key recovery",
        all(v <= RECOVERY_TOL for v in worst_recover.values()),
        {"models": trials, "tolerance": RECOVERY_TOL, "max_param_deviation": {k: _f(v) for k, v in worst_recover.items()}},
    )
    return c1, c2


def criterion_distance_amplification(seed: int, trials: int = 100) -> CriterionResult:
    passing, min_qk, min_vo = 0, math.inf, math.inf
    for i in range(trials):
        s = derive_seed(seed, "c3", i)
        pre, (ft, _), _ = _family(s)
        protected, _ = protect_mergelock(ft, SamplingConfig(seed=derive_seed(s, "protect")))
        qk = branch_distance(protected, pre, "qk") / branch_distance(ft, pre, "qk")
        vo = branch_distance(protected, pre, "vo") / branch_distance(ft, pre, "vo")
        min_qk, min_vo = min(min_qk, qk), min(min_vo, vo)
        passing += qk >= AMPLIFICATION and vo >= AMPLIFICATION
    return CriterionResult(
        3, "distance amplification", passing >= 95 * trials // 100,
        {"seeds": trials, "passing": passing, "required_ratio": AMPLIFICATION, "min_ratio_qk": _f(min_qk), "min_ratio_vo": _f(min_vo)},
    )


def criterion_merge_degradation(seed: int, trials: int = 100) -> CriterionResult:
    passing = {"ta": 0, "ties": 0}
    min_ratio = {"ta": math.inf, "ties": math.inf}
    for i in range(trials):
        s = derive_seed(seed, "c4", i)
        pre, (f1, f2), batch = _family(s)
        protected, _ = protect_mergelock(f1, SamplingConfig(seed=derive_seed(s, "protect")))
        for method, fn in (
            ("ta", lambda m: task_arithmetic(pre, [m, f2], MERGE_LAMBDA)),
            ("ties", lambda m: ties_merge(pre, [m, f2], TIES_TRIM, MERGE_LAMBDA)),
        ):
            ratio = _divergence(fn(protected), f1, f2, batch) / _divergence(fn(f1), f1, f2, batch)
            min_ratio[method] = min(min_ratio[method], ratio)
            passing[method] += ratio >= DEGRADATION
    need = 95 * trials // 100
    return CriterionResult(
        4, "merge degradation", all(p >= need for p in passing.values()),
        {"seeds": trials, "passing": passing, "required_ratio": DEGRADATION, "min_ratio": {k: _f(v) for k, v in min_ratio.items()}},
    )


def criterion_sweep_flatness(seed: int, trials: int = 20) -> CriterionResult:
    passing, worst = 0, math.inf
    for i in range(trials):
        s = derive_seed(seed, "c5", i)
        pre, (f1, f2), batch = _family(s)
        protected, _ = protect_mergelock(f1, SamplingConfig(seed=derive_seed(s, "protect")))
        clean_max = max(_divergence(task_arithmetic(pre, [f1, f2], lam), f1, f2, batch) for lam in LAMBDA_GRID)
        prot_min = min(_divergence(task_arithmetic(pre, [protected, f2], lam), f1, f2, batch) for lam in LAMBDA_GRID)
        worst = min(worst, prot_min / clean_max)
        passing += prot_min >= SWEEP_FLOOR * clean_max
    return CriterionResult(
        5, "lambda-sweep flatness", passing == trials,
        {"seeds": trials, "passing": passing, "grid": list(LAMBDA_GRID), "required_ratio": SWEEP_FLOOR, "min_ratio": _f(worst)},
    )


def criterion_kabsch_orthogonal(seed: int, trials: int = 50) -> CriterionResult:
    """Orthogonal-only protection (R orthogonal, P random, D = I).

    * plant-and-recover: aligning against the unprotected model returns it
      (QK distance <= 1e-6 absolute);
    * realistic attack against the clean merge partner: QK distance to the
      partner exceeds the unprotected distance by at most 1e-6, and the
      merged divergence lands within 10% of the clean merge.
    """
    sampling_kw = dict(r_kind="orthogonal", diag_lo=1.0, diag_hi=1.0)
    passing, worst_plant, worst_excess, worst_band = 0, 0.0, -math.inf, 0.0
    for i in range(trials):
        s = derive_seed(seed, "c6", i)
        pre, (f1, f2), batch = _family(s)
        protected, _ = protect_mergelock(f1, SamplingConfig(seed=derive_seed(s, "protect"), **sampling_kw))
        plant = branch_distance(kabsch_align(protected, f1).model, f1, "qk")
        aligned = kabsch_align(protected, f2).model
        excess = branch_distance(aligned, f2, "qk") - branch_distance(f1, f2, "qk")
        clean = _divergence(task_arithmetic(pre, [f1, f2], MERGE_LAMBDA), f1, f2, batch)
        attacked = _divergence(task_arithmetic(pre, [aligned, f2], MERGE_LAMBDA), f1, f2, batch)
        band = abs(attacked / clean - 1.0)
        worst_plant, worst_excess, worst_band = max(worst_plant, plant), max(worst_excess, excess), max(worst_band, band)
        passing += plant <= KABSCH_DISTANCE_TOL and excess <= KABSCH_DISTANCE_TOL and band <= RECOVERED_DIVERGENCE_BAND
    return CriterionResult(
        6, "kabsch recovers orthogonal-only protection", passing == trials,
        {
            "seeds": trials, "passing": passing,
            "max_plant_qk_distance": _f(worst_plant),
            "max_qk_excess_over_unprotected": _f(worst_excess),
            "max_divergence_deviation_from_clean": _f(worst_band),
        },
    )


def criterion_kabsch_fails_rpd(seed: int, trials: int = 50) -> CriterionResult:
    passing, min_fraction, min_ratio = 0, math.inf, math.inf
    for i in range(trials):
        s = derive_seed(seed, "c7", i)
        pre, (f1, f2), batch = _family(s)
        protected, _ = protect_mergelock(f1, SamplingConfig(seed=derive_seed(s, "protect")))
        aligned = kabsch_align(protected, f2).model
        fraction = branch_distance(aligned, f2, "qk") / branch_distance(protected, f2, "qk")
        clean = _divergence(task_arithmetic(pre, [f1, f2], MERGE_LAMBDA), f1, f2, batch)
        ratio = _divergence(task_arithmetic(pre, [aligned, f2], MERGE_LAMBDA), f1, f2, batch) / clean
        min_fraction, min_ratio = min(min_fraction, fraction), min(min_ratio, ratio)
        passing += fraction >= KABSCH_RESIDUAL_FRACTION and ratio >= KABSCH_DEGRADATION
    return CriterionResult(
        7, "kabsch fails on full RPD", passing >= 45 * trials // 50,
        {"seeds": trials, "passing": passing, "min_distance_fraction": _f(min_fraction), "min_divergence_ratio": _f(min_ratio)},
    )


def criterion_params_reversible(seed: int, trials: int = 50) -> CriterionResult:
    """PaRaMS undone by Hungarian + diagonal alignment.

    * Hungarian against the pretrained model restores every MLP exactly;
    * Hungarian + diagonal against the unprotected model restores all
      parameters to <= 1e-8 (diagonal scales are only exactly identifiable
      against the unprotected weights);
    * the realistic attack against the clean partner brings the merged
      divergence within 10% of the clean merge.
    """
    passing, worst_mlp, worst_plant, worst_band = 0, 0.0, 0.0, 0.0
    for i in range(trials):
        s = derive_seed(seed, "c8", i)
        pre, (f1, f2), batch = _family(s)
        protected, _ = protect_params(f1, pre, SamplingConfig(seed=derive_seed(s, "protect")))
        mlp = hungarian_align_mlp(protected, pre).model
        mlp_dev = max(float(np.abs(mlp[n] - f1[n]).max()) for n in f1.names() if ".mlp." in n)
        plant = parameter_distance(params_align(protected, f1)[0], f1)
        aligned = params_align(protected, f2)[0]
        clean = _divergence(task_arithmetic(pre, [f1, f2], MERGE_LAMBDA), f1, f2, batch)
        band = abs(_divergence(task_arithmetic(pre, [aligned, f2], MERGE_LAMBDA), f1, f2, batch) / clean - 1.0)
        worst_mlp, worst_plant, worst_band = max(worst_mlp, mlp_dev), max(worst_plant, plant), max(worst_band, band)
        passing += mlp_dev <= PARAMS_DISTANCE_TOL and plant <= PARAMS_DISTANCE_TOL and band <= RECOVERED_DIVERGENCE_BAND
    return CriterionResult(
        8, "PaRaMS reversibility", passing == trials,
        {
            "seeds": trials, "passing": passing,
            "max_mlp_deviation_after_hungarian": _f(worst_mlp),
            "max_plant_param_distance": _f(worst_plant),
            "max_divergence_deviation_from_clean": _f(worst_band),
        },
    )


def criterion_lmc_barrier(seed: int, trials: int = 50) -> CriterionResult:
    passing, worst = 0, math.inf
    for i in range(trials):
        s = derive_seed(seed, "c9", i)
        pre, (f1, f2), batch = _family(s)
        protected, _ = protect_mergelock(f1, SamplingConfig(seed=derive_seed(s, "protect")))
        clean = lmc_curve(pre, f1, f2, LMC_GRID, batch).max_loss()
        locked = lmc_curve(pre, protected, f2, LMC_GRID, batch).max_loss()
        worst = min(worst, locked / clean)
        passing += locked >= LMC_BARRIER * clean
    return CriterionResult(
        9, "LMC barrier", passing == trials,
        {"trials": trials, "passing": passing, "required_ratio": LMC_BARRIER, "min_ratio": _f(worst)},
    )


def criterion_oracles(seed: int, assignment_trials: int = 100, svd_trials: int = 1000, forward_trials: int = 100) -> CriterionResult:
    rng = Rng(derive_seed(seed, "c10"))
    mismatches = 0
    for i in range(assignment_trials):
        n = 1 + rng.below(8)
        raw = rng.uniform(n * n).reshape(n, n)
        # integers and eighths keep every assignment sum exact
        cost = np.floor(raw * 100) if i % 2 == 0 else np.floor(raw * 800) / 8 - 50
        _, best = oracles.brute_force_assignment(cost)
        mismatches += hungarian(cost).objective != best
    worst_svd = 0.0
    for _ in range(svd_trials):
        rows, cols = 1 + rng.below(64), 1 + rng.below(64)
        m = rng.normal(rows * cols).reshape(rows, cols)
        r = svd(m)
        worst_svd = max(worst_svd, float(np.linalg.norm((r.u * r.s) @ r.vt - m) / np.linalg.norm(m)))
    worst_fwd = 0.0
    for i in range(forward_trials):
        config = ModelConfig(
            num_layers=1 + rng.below(2),
            num_heads=(1, 2)[rng.below(2)],
            d_model=8,
            d_ff=8 * (1 + rng.below(2)),
            activation=("relu", "gelu", "tanh")[i % 3],
        )
        fam = synthetic_family(rng.next_u64(), config, tasks=1, batch_size=1, seq_len=1 + rng.below(4))
        x = fam.batch[0]
        worst_fwd = max(worst_fwd, float(np.abs(model_forward(fam.pretrained, x) - oracles.forward_loop(fam.pretrained, x)).max()))
    passed = mismatches == 0 and worst_svd <= SVD_TOL and worst_fwd <= FORWARD_TOL
    return CriterionResult(
        10, "oracle equivalence", passed,
        {
            "assignment_trials": assignment_trials, "assignment_mismatches": mismatches,
            "svd_trials": svd_trials, "max_svd_relative_error": _f(worst_svd),
            "forward_trials": forward_trials, "max_forward_deviation": _f(worst_fwd),
        },
    )


CRITERIA = (
    criterion_distance_amplification,
    criterion_merge_degradation,
    criterion_sweep_flatness,
    criterion_kabsch_orthogonal,
    criterion_kabsch_fails_rpd,
    criterion_params_reversible,
    criterion_lmc_barrier,
    criterion_oracles,
)


def run_suite(seed: int, log=None) -> tuple[dict, dict]:
    """Run criteria 1-10. Returns (summary, timings); only the summary is deterministic."""
    results, timings = [], {}
    start = time.perf_counter()
    results.extend(criteria_preservation_and_recovery(seed))
    timings["1+2"] = time.perf_counter() - start
    if log:
        for r in results:
            log(r.line())
    for fn in CRITERIA:
        start = time.perf_counter()
        r = fn(seed)
        timings[str(r.number)] = time.perf_counter() - start
        results.append(r)
        if log:
            log(r.line())
    summary = {
        "all_passed": all(r.passed for r in results),
        "criteria": [r.to_dict() for r in results],
        "seed": seed,
        "standard_config": STANDARD.to_dict(),
    }
    return summary, timings


def summary_bytes(summary: dict) -> bytes:
    return canonical_json(summary) + b"\n"

"""Distance tables, linear-mode-connectivity curves, lambda sweeps and the
end-to-end protect/align/merge evaluation.

Losses here are functional divergences (output MSE against the endpoint
models on a fixed batch); no task data exists for synthetic models.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attack import kabsch_align, params_align
from .checkpoint import Checkpoint, canonical_json, require_same_schema
from .errors import ParameterError
from .merge import DEFAULT_LAMBDA, DEFAULT_TRIM, LAMBDA_GRID, merge
from .protect import SamplingConfig, protect_mergelock, protect_params
from .transformer import functional_divergence

BRANCHES = {
    "qk": ("attn.w_q", "attn.w_k", "attn.b_q", "attn.b_k"),
    "vo": ("attn.w_v", "attn.w_o", "attn.b_v", "attn.b_o"),
    "mlp": ("mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"),
}
SCENARIOS = ("clean", "mergelock", "params", "mergelock+align", "params+align")
LMC_GRID = tuple(round(0.05 * i, 2) for i in range(21))
LOSS_PROXY = "functional MSE against both endpoint models (no task data)"


@dataclass
class AnalysisReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, metric: str, value: float, layer: int | None = None, branch: str | None = None, lam: float | None = None):
        self.rows.append({"branch": branch, "lambda": lam, "layer": layer, "metric": metric, "value": float(value)})

    def value(self, metric: str, layer=None, branch=None, lam=None) -> float:
        for r in self.rows:
            if (r["metric"], r["layer"], r["branch"], r["lambda"]) == (metric, layer, branch, lam):
                return r["value"]
        raise KeyError((metric, layer, branch, lam))

    def column(self, metric: str, branch=None) -> list[float]:
        return [r["value"] for r in self.rows if r["metric"] == metric and r["branch"] == branch]

    def to_json(self) -> bytes:
        return canonical_json({"metadata": self.metadata, "rows": self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "branch", "metric", "lambda", "value"])
        for r in self.rows:
            w.writerow(["" if r["layer"] is None else r["layer"], r["branch"] or "", r["metric"], "" if r["lambda"] is None else repr(r["lambda"]), repr(r["value"])])
        return buf.getvalue()


def branch_sq_distance(a: Checkpoint, b: Checkpoint, layer: int, branch: str) -> float:
    return sum(float(((a[f"layers.{layer}.{n}"] - b[f"layers.{layer}.{n}"]) ** 2).sum()) for n in BRANCHES[branch])


def branch_distance(a: Checkpoint, b: Checkpoint, branch: str) -> float:
    """Frobenius distance over one branch, summed across all layers."""
    require_same_schema(a, b)
    return math.sqrt(sum(branch_sq_distance(a, b, l, branch) for l in range(a.config.num_layers)))


def parameter_distance(a: Checkpoint, b: Checkpoint) -> float:
    require_same_schema(a, b)
    return math.sqrt(sum(float(((a[n] - b[n]) ** 2).sum()) for n in a.names()))


def frobenius_report(model: Checkpoint, reference: Checkpoint, metadata: dict | None = None) -> AnalysisReport:
    """Per-layer QK/VO/MLP Frobenius distances, with per-branch totals and means."""
    cfg = require_same_schema(model, reference)
    report = AnalysisReport(metadata={"models": ["model", "reference"], "seed": None, "timestamp": None, **(metadata or {})})
    per_branch = {b: [] for b in BRANCHES}
    for layer in range(cfg.num_layers):
        for b in BRANCHES:
            sq = branch_sq_distance(model, reference, layer, b)
            per_branch[b].append(sq)
            report.add("frobenius", math.sqrt(sq), layer=layer, branch=b)
    for b, sq in per_branch.items():
        report.add("frobenius_total", math.sqrt(sum(sq)), branch=b)
        report.add("frobenius_mean", float(np.mean(np.sqrt(sq))) if sq else 0.0, branch=b)
    report.add("frobenius_total", parameter_distance(model, reference), branch="all")
    return report


def interpolate(m1: Checkpoint, m2: Checkpoint, lam: float) -> Checkpoint:
    """``pre + lam (m1 - pre) + (1 - lam)(m2 - pre)``; the pretrained terms
    cancel, leaving ``lam m1 + (1 - lam) m2`` (exact at both endpoints)."""
    require_same_schema(m1, m2)
    return Checkpoint(m1.config, {n: lam * m1[n] + (1.0 - lam) * m2[n] for n in m1.names()})


@dataclass(frozen=True)
class LmcCurve:
    grid: tuple
    losses: tuple

    def max_loss(self) -> float:
        return max(self.losses)


def _check_grid(grid: Sequence[float]) -> tuple:
    g = tuple(float(x) for x in grid)
    if len(g) < 2 or g[0] != 0.0 or g[-1] != 1.0 or any(b <= a for a, b in zip(g, g[1:])):
        raise ParameterError("grid must be strictly increasing from 0 to 1", grid=list(g))
    return g


def uniform_grid(points: int) -> tuple:
    if points < 2:
        raise ParameterError(f"grid needs at least 2 points, got {points}")
    return tuple(i / (points - 1) for i in range(points))


def lmc_curve(pre: Checkpoint, m1: Checkpoint, m2: Checkpoint, grid: Sequence[float], batch) -> LmcCurve:
    g = _check_grid(grid)
    require_same_schema(pre, m1, m2)
    losses = []
    for lam in g:
        interp = interpolate(m1, m2, lam)
        losses.append(0.5 * (functional_divergence(interp, m1, batch) + functional_divergence(interp, m2, batch)))
    return LmcCurve(g, tuple(losses))


def lmc_report(curve: LmcCurve, metadata: dict | None = None) -> AnalysisReport:
    report = AnalysisReport(metadata={"loss": LOSS_PROXY, **(metadata or {})})
    for lam, loss in zip(curve.grid, curve.losses):
        report.add("lmc_loss", loss, branch="model", lam=lam)
    return report


def _divergence_rows(report: AnalysisReport, merged: Checkpoint, m1: Checkpoint, m2: Checkpoint, batch, lam=None):
    d1 = functional_divergence(merged, m1, batch)
    d2 = functional_divergence(merged, m2, batch)
    report.add("divergence_m1", d1, branch="model", lam=lam)
    report.add("divergence_m2", d2, branch="model", lam=lam)
    report.add("divergence_mean", 0.5 * (d1 + d2), branch="model", lam=lam)


def lambda_sweep(
    pre: Checkpoint,
    m1: Checkpoint,
    m2: Checkpoint,
    batch,
    grid: Sequence[float] = LAMBDA_GRID,
    method: str = "ta",
    trim: float = DEFAULT_TRIM,
) -> AnalysisReport:
    """Merge at each lambda and score the result against both endpoints."""
    require_same_schema(pre, m1, m2)
    report = AnalysisReport(metadata={"loss": LOSS_PROXY, "method": method})
    for lam in grid:
        _divergence_rows(report, merge(method, pre, [m1, m2], lam, trim), m1, m2, batch, lam)
    return report


def protect_and_align(
    pre: Checkpoint,
    m1: Checkpoint,
    m2: Checkpoint,
    scenario: str,
    sampling: SamplingConfig | None = None,
    align_reference: str = "clean",
) -> Checkpoint:
    """The model an adversary ends up merging in ``scenario``."""
    if scenario not in SCENARIOS:
        raise ParameterError(f"unknown scenario {scenario!r}", allowed=list(SCENARIOS))
    if align_reference not in ("clean", "pretrained"):
        raise ParameterError(f"align_reference must be 'clean' or 'pretrained', got {align_reference!r}")
    base, _, align = scenario.partition("+")
    sampling = sampling or SamplingConfig()
    if base == "clean":
        return m1
    if base == "mergelock":
        protected, _ = protect_mergelock(m1, sampling)
    else:
        protected, _ = protect_params(m1, pre, sampling)
    if not align:
        return protected
    reference = m2 if align_reference == "clean" else pre
    if base == "mergelock":
        return kabsch_align(protected, reference).model
    return params_align(protected, reference)[0]


def merge_eval(
    pre: Checkpoint,
    m1: Checkpoint,
    m2: Checkpoint,
    scenario: str,
    batch,
    method: str = "ta",
    lam: float = DEFAULT_LAMBDA,
    trim: float = DEFAULT_TRIM,
    sampling: SamplingConfig | None = None,
    align_reference: str = "clean",
) -> AnalysisReport:
    """Protect ``m1`` (optional), align (optional), merge with clean ``m2``,
    and score the merge against the original ``m1`` and ``m2`` functions."""
    require_same_schema(pre, m1, m2)
    sampling = sampling or SamplingConfig()
    candidate = protect_and_align(pre, m1, m2, scenario, sampling, align_reference)
    merged = merge(method, pre, [candidate, m2], lam, trim)
    report = AnalysisReport(metadata={
        "align_reference": align_reference,
        "lambda": lam,
        "loss": LOSS_PROXY,
        "method": method,
        "scenario": scenario,
        "seed": sampling.seed,
        "trim": trim,
    })
    _divergence_rows(report, merged, m1, m2, batch)
    return report

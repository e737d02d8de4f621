"""Slow reference computations that share no code with the fast paths.

Used by the acceptance suite and the tests to cross-check the library.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_assignment(cost) -> tuple[tuple[int, ...], float]:
    """Best row->column assignment by enumerating all n! permutations."""
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)
    totals = c[np.arange(n), perms].sum(axis=1)
    best = int(np.argmin(totals))
    return tuple(int(j) for j in perms[best]), float(totals[best])


def jacobi_eigenvalues(sym, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi, ascending."""
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(1.0, float(np.abs(np.diag(a)).max(initial=0.0))):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))


def _layer_norm_loop(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        row = x[t]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        for j in range(len(row)):
            out[t, j] = (row[j] - mu) / math.sqrt(var + eps) * gamma[j] + beta[j]
    return out


def _act(name, z):
    if name == "relu":
        return max(z, 0.0)
    if name == "gelu":
        return 0.5 * z * (1.0 + math.erf(z / math.sqrt(2.0)))
    return math.tanh(z)


def attention_loop(ckpt, layer: int, x) -> np.ndarray:
    """Per-head, per-token attention with explicit exp/sum softmax."""
    cfg = ckpt.config
    p = f"layers.{layer}.attn."
    w_q, w_k, w_v, w_o = (ckpt[p + n] for n in ("w_q", "w_k", "w_v", "w_o"))
    b_q, b_k, b_v, b_o = (ckpt[p + n] for n in ("b_q", "b_k", "b_v", "b_o"))
    T, d = x.shape[0], cfg.d_head
    cat = np.zeros((T, cfg.d_model))
    for h in range(cfg.num_heads):
        rows = range(h * d, (h + 1) * d)
        q = [[float(np.dot(x[t], w_q[r])) + b_q[r] for r in rows] for t in range(T)]
        k = [[float(np.dot(x[t], w_k[r])) + b_k[r] for r in rows] for t in range(T)]
        v = [[float(np.dot(x[t], w_v[r])) + b_v[r] for r in rows] for t in range(T)]
        for t in range(T):
            scores = [sum(q[t][i] * k[s][i] for i in range(d)) / math.sqrt(d) for s in range(T)]
            top = max(scores)
            ex = [math.exp(z - top) for z in scores]
            total = sum(ex)
            for i in range(d):
                cat[t, h * d + i] = sum(ex[s] / total * v[s][i] for s in range(T))
    out = np.zeros((T, cfg.d_model))
    for t in range(T):
        for j in range(cfg.d_model):
            out[t, j] = sum(cat[t, i] * w_o[j, i] for i in range(cfg.d_model)) + b_o[j]
    return out


def mlp_loop(ckpt, layer: int, x) -> np.ndarray:
    cfg = ckpt.config
    p = f"layers.{layer}.mlp."
    w1, b1, w2, b2 = (ckpt[p + n] for n in ("w1", "b1", "w2", "b2"))
    T = x.shape[0]
    out = np.zeros((T, cfg.d_model))
    for t in range(T):
        hidden = [_act(cfg.activation, float(np.dot(x[t], w1[f])) + b1[f]) for f in range(cfg.d_ff)]
        for j in range(cfg.d_model):
            out[t, j] = sum(hidden[f] * w2[j, f] for f in range(cfg.d_ff)) + b2[j]
    return out


def forward_loop(ckpt, x) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    for i in range(ckpt.config.num_layers):
        p = f"layers.{i}."
        x = x + attention_loop(ckpt, i, _layer_norm_loop(x, ckpt[p + "ln1.gamma"], ckpt[p + "ln1.beta"]))
        x = x + mlp_loop(ckpt, i, _layer_norm_loop(x, ckpt[p + "ln2.gamma"], ckpt[p + "ln2.beta"]))
    return x

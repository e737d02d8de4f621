"""Dense float64 linear algebra used by every transform and attack.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. numpy
provides storage and BLAS products; the decompositions (SVD, inversion,
linear assignment) are implemented here so that their behaviour (tie
breaking, error reporting, convergence caps) is fixed by this module rather
than by whichever LAPACK build happens to be installed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConvergenceError, NumericError, ShapeError, SingularMatrixError

EPS = np.finfo(np.float64).eps


def as_matrix(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}", shape=list(a.shape))
    return a


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{op} produced non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}",
            left=list(a.shape),
            right=list(b.shape),
        )
    return _check_finite(a @ b, "matmul")


@dataclass(frozen=True)
class Permutation:
    """Bijection on ``range(n)``; ``map[i]`` is where source index ``i`` goes.

    ``as_matrix()`` returns ``P`` with ``P[i, map[i]] = 1``, so a row vector
    ``x @ P`` moves entry ``i`` to position ``map[i]``.
    """

    map: tuple

    def __init__(self, mapping: Sequence[int]):
        m = tuple(int(i) for i in mapping)
        if sorted(m) != list(range(len(m))):
            raise ShapeError("permutation map is not a bijection", map=list(m))
        object.__setattr__(self, "map", m)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(range(n))

    def __len__(self) -> int:
        return len(self.map)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.map, dtype=np.int64)

    def as_matrix(self) -> np.ndarray:
        n = len(self.map)
        p = np.zeros((n, n))
        p[np.arange(n), self.array] = 1.0
        return p

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.map)
        for src, dst in enumerate(self.map):
            inv[dst] = src
        return Permutation(inv)

    def compose(self, other: "Permutation") -> "Permutation":
        """Apply ``self`` first, then ``other``."""
        return Permutation([other.map[d] for d in self.map])

    def source_order(self) -> np.ndarray:
        """Indices ``s`` such that ``y = x[s]`` equals ``x @ P``."""
        return self.inverse().array

    def is_identity(self) -> bool:
        return self.map == tuple(range(len(self.map)))


class SvdResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def _round_robin(n: int):
    """Tournament schedule: n-1 rounds of n/2 disjoint pairs (n even)."""
    idx = list(range(n))
    half = n // 2
    for _ in range(n - 1):
        yield np.array(idx[:half]), np.array(idx[half:][::-1])
        idx = [idx[0], idx[-1]] + idx[1:-1]


def _orthonormal_complete(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns where ``good`` is False by an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    out = u.copy()
    candidates = iter(range(m))
    for j in np.flatnonzero(~good):
        while True:
            e = np.zeros(m)
            e[next(candidates)] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 0.5:
                break
        e /= norm
        basis.append(e)
        out[:, j] = e
    return out


def svd(m, max_sweeps: int = 64) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Column pairs are swept in a round-robin order so each round rotates
    ``n/2`` disjoint pairs at once. Returns ``u`` (m x k), ``s`` descending
    and ``vt`` (k x n) with ``k = min(m, n)``.

    Raises
    ------
    ConvergenceError
        If the columns are not mutually orthogonal after ``max_sweeps``.
    """
    a = as_matrix(m)
    if a.size == 0:
        raise ShapeError("svd of an empty matrix", shape=list(a.shape))
    if not np.all(np.isfinite(a)):
        raise NumericError("svd input has non-finite entries")
    rows, cols = a.shape
    if rows < cols:
        r = svd(a.T, max_sweeps)
        return SvdResult(r.vt.T, r.s, r.u.T)

    n = cols + (cols % 2)
    u = np.zeros((rows, n))
    u[:, :cols] = a
    v = np.eye(n)
    tol = rows * EPS
    # columns below this squared norm are numerically zero; rotating them
    # against each other only shuffles rounding noise and never converges
    floor = (rows * EPS * float(np.linalg.norm(a))) ** 2
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in _round_robin(n):
            up, uq = u[:, p], u[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > floor)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.hypot(1.0, t), 1.0)
            s = np.where(active, c * t, 0.0)
            u[:, p], u[:, q] = c * up - s * uq, s * up + c * uq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps", iterations=max_sweeps)

    u, v = u[:, :cols], v[:cols, :cols]
    sigma = np.linalg.norm(u, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, u, v = sigma[order], u[:, order], v[:, order]
    good = (sigma > 0) & (sigma * sigma > floor)
    u[:, good] /= sigma[good]
    if not good.all():
        u = _orthonormal_complete(u, good)
    return SvdResult(u, sigma, v.T)


def polar_orthogonal(m) -> np.ndarray:
    """Closest orthogonal matrix ``U V^T`` to a square ``m``."""
    r = svd(m)
    return r.u @ r.vt


def condition_estimate(m) -> float:
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"condition number needs a square matrix, got {a.shape}", shape=list(a.shape))
    s = svd(a).s
    if s[-1] == 0:
        return math.inf
    return float(s[0] / s[-1])


def invert(m, cond_cap: float | None = None) -> np.ndarray:
    """Gauss-Jordan inverse with partial pivoting and one refinement step.

    Raises ``SingularMatrixError`` (carrying the smallest pivot seen) when a
    pivot falls below ``n * eps * max|m|``, or when ``cond_cap`` is given and
    the condition estimate exceeds it.
    """
    a = as_matrix(m)
    n = a.shape[0]
    if n == 0 or a.shape[1] != n:
        raise ShapeError(f"invert needs a non-empty square matrix, got {a.shape}", shape=list(a.shape))
    scale = np.abs(a).max()
    threshold = n * EPS * scale
    work = a.copy()
    inv = np.eye(n)
    smallest = math.inf
    for k in range(n):
        piv = k + int(np.argmax(np.abs(work[k:, k])))
        pivot = work[piv, k]
        smallest = min(smallest, abs(pivot))
        if abs(pivot) <= threshold:
            raise SingularMatrixError(f"matrix is singular to working precision (pivot {abs(pivot):.3e})", pivot=float(smallest))
        if piv != k:
            work[[k, piv]] = work[[piv, k]]
            inv[[k, piv]] = inv[[piv, k]]
        work[k] /= pivot
        inv[k] /= pivot
        f = work[:, k].copy()
        f[k] = 0.0
        work -= np.outer(f, work[k])
        inv -= np.outer(f, inv[k])
    inv = inv + inv @ (np.eye(n) - a @ inv)
    if cond_cap is not None:
        cond = condition_estimate(a)
        if cond > cond_cap:
            raise SingularMatrixError(f"condition estimate {cond:.3e} exceeds cap {cond_cap:.3e}", pivot=float(smallest), condition=cond)
    return _check_finite(inv, "invert")


class Assignment(NamedTuple):
    perm: Permutation  # row i -> column perm.map[i]
    objective: float


def hungarian(cost) -> Assignment:
    """Minimum-cost perfect assignment, O(n^3) shortest augmenting paths.

    Row potentials ``u`` and column potentials ``v`` are kept feasible while
    each new row is connected by a Dijkstra-style search over reduced costs.
    Ties resolve to the lowest column index.
    """
    c = as_matrix(cost, "cost")
    n, m = c.shape
    if n != m:
        raise ShapeError(f"cost matrix must be square, got {n}x{m}", shape=[n, m])
    if not np.all(np.isfinite(c)):
        raise NumericError("cost matrix has non-finite entries")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    mapping = [0] * n
    for j in range(1, n + 1):
        mapping[owner[j] - 1] = j - 1
    objective = math.fsum(c[i, mapping[i]] for i in range(n))
    return Assignment(Permutation(mapping), objective)

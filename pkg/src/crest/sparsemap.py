"""SparseMAP over budget-constrained binary masks.

The feasible set is every 0/1 mask with at most ``k`` ones.  A mask ``v``
scores ``theta . v - c * transitions(v)`` where ``transitions`` counts 0<->1
changes between neighbouring positions.  SparseMAP returns marginals

    mu = argmax_{mu in hull}  theta . mu - c * T(mu) - 1/2 ||mu||^2

as a sparse convex combination of masks, found by an active-set method that
only talks to the polytope through :func:`map_oracle`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

# relative slack used when turning B*n into an integer budget, so 0.3*10 gives 3
_CEIL_SLACK = 1e-9


def budget_tokens(budget: float, n: int) -> int:
    """ceil(budget * n), clamped to [1, n]."""
    if not 0 < budget <= 1:
        raise ValueError(f"budget must be in (0, 1], got {budget}")
    k = math.ceil(budget * n * (1 - _CEIL_SLACK))
    return max(1, min(n, k))


@dataclass(frozen=True)
class BudgetFactor:
    n: int
    k: int
    transition_penalty: float = 0.0

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        if self.transition_penalty < 0:
            raise ValueError("transition_penalty must be nonnegative")

    @classmethod
    def from_budget(cls, n: int, budget: float, transition_penalty: float = 0.0) -> "BudgetFactor":
        return cls(n, budget_tokens(budget, n), transition_penalty)


@dataclass
class SparseMapSolution:
    marginals: np.ndarray
    active_vertices: List[np.ndarray]
    coefficients: np.ndarray
    converged: bool = True
    n_iter: int = 0
    factor: BudgetFactor = field(default=None, repr=False)
    scores: Optional[np.ndarray] = field(default=None, repr=False)


def transitions(z: np.ndarray) -> int:
    z = np.asarray(z)
    return int(np.count_nonzero(z[1:] != z[:-1]))


def vertex_score(scores, z, penalty: float) -> float:
    return float(np.dot(scores, z)) - penalty * transitions(z)


def map_oracle(scores, factor: BudgetFactor) -> np.ndarray:
    """Highest-scoring feasible mask.

    Ties go to fewer selected tokens, then to lower indices.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (factor.n,):
        raise ValueError(f"expected {factor.n} scores, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("map_oracle: non-finite scores")
    if factor.transition_penalty == 0:
        return _topk_positive(s, factor.k)
    return _budget_viterbi(s, factor.k, factor.transition_penalty)


def _topk_positive(s: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-s, kind="stable")[:k]
    z = np.zeros(s.size, dtype=np.int8)
    z[order[s[order] > 0]] = 1
    return z


def _budget_viterbi(s: np.ndarray, k: int, c: float) -> np.ndarray:
    """Backward DP over (position, ones still allowed, previous state).

    Values are (score, ones used) pairs compared lexicographically with the
    count minimised; on a full tie the forward pass prefers selecting, which
    favours lower indices.
    """
    n = s.size
    scores = s.tolist()
    eps = 1e-12 * (1.0 + float(np.abs(s).sum()))  # summation-order noise
    # best[r][p]: (value, count) of the suffix after position i, r ones left, z[i] = p
    nxt = [[(0.0, 0), (0.0, 0)] for _ in range(k + 1)]
    tables = [None] * (n + 1)
    tables[n] = nxt
    for i in range(n - 1, -1, -1):
        cur = []
        si = scores[i]
        for r in range(k + 1):
            row = []
            for p in (0, 1):
                pen0 = c if (i > 0 and p == 1) else 0.0
                pen1 = c if (i > 0 and p == 0) else 0.0
                v0, c0 = nxt[r][0]
                v0 -= pen0
                if r > 0:
                    v1, c1 = nxt[r - 1][1]
                    v1 = si - pen1 + v1
                    c1 += 1
                    if v1 > v0 + eps or (v1 >= v0 - eps and c1 <= c0):
                        row.append((v1, c1))
                        continue
                row.append((v0, c0))
            cur.append(row)
        tables[i] = cur
        nxt = cur
    z = np.zeros(n, dtype=np.int8)
    left, prev = k, 0
    for i in range(n):
        pen0 = c if (i > 0 and prev == 1) else 0.0
        pen1 = c if (i > 0 and prev == 0) else 0.0
        after = tables[i + 1]
        v0, c0 = after[left][0]
        v0 -= pen0
        if left > 0:
            v1, c1 = after[left - 1][1]
            v1 = scores[i] - pen1 + v1
            c1 += 1
            if v1 > v0 + eps or (v1 >= v0 - eps and c1 <= c0):
                z[i] = 1
                left -= 1
                prev = 1
                continue
        prev = 0
    return z


def _kkt_solve(vertices: List[np.ndarray], vscores: np.ndarray) -> Tuple[np.ndarray, float]:
    """Minimise 1/2 ||M a||^2 - s.a subject to sum(a) = 1 on the current support."""
    M = np.stack(vertices, axis=1).astype(np.float64)
    m = M.shape[1]
    K = np.zeros((m + 1, m + 1))
    K[0, 1:] = 1
    K[1:, 0] = 1
    K[1:, 1:] = M.T @ M
    rhs = np.concatenate([[1.0], vscores])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[1:], sol[0]


def sparsemap(scores, factor: BudgetFactor, max_iter: int = 100, tol: float = 1e-6) -> SparseMapSolution:
    """Active-set SparseMAP.  Returns the best iterate flagged ``converged=False`` on budget exhaustion."""
    if max_iter < 1 or tol <= 0:
        raise ValueError("need max_iter >= 1 and tol > 0")
    theta = np.asarray(scores, dtype=np.float64)
    c = factor.transition_penalty

    v0 = map_oracle(theta, factor)
    active = [v0]
    vscores = [vertex_score(theta, v0, c)]
    alpha = np.ones(1)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        alpha_new, tau = _kkt_solve(active, np.array(vscores))
        if np.any(alpha_new < 0):
            # step towards alpha_new until the first weight hits zero, then drop it
            dec = alpha_new < alpha
            ratios = np.where(dec, alpha / np.where(dec, alpha - alpha_new, 1.0), np.inf)
            j = int(np.argmin(ratios))
            gamma = min(1.0, ratios[j])
            alpha = (1 - gamma) * alpha + gamma * alpha_new
            alpha[j] = 0.0
            keep = [i for i in range(len(active)) if i != j]
            active = [active[i] for i in keep]
            vscores = [vscores[i] for i in keep]
            alpha = np.clip(alpha[keep], 0, None)
            alpha /= alpha.sum()
            continue
        alpha = alpha_new
        mu = np.stack(active, axis=1) @ alpha
        y = map_oracle(theta - mu, factor)
        gain = vertex_score(theta - mu, y, c)
        if gain <= tau + tol or any(np.array_equal(y, a) for a in active):
            converged = True
            break
        active.append(y)
        vscores.append(vertex_score(theta, y, c))
        alpha = np.append(alpha, 0.0)
        null = _affine_null_direction(active)
        if null is not None:
            # y is an affine combination of the support: slide along the null
            # direction (mu fixed, linear term rising) until a weight vanishes
            if null[-1] < 0:
                null = -null
            neg = null < -1e-12
            ratios = np.where(neg, alpha / np.where(neg, -null, 1.0), np.inf)
            j = int(np.argmin(ratios))
            alpha = np.clip(alpha + ratios[j] * null, 0, None)
            keep = [i for i in range(len(active)) if i != j]
            active = [active[i] for i in keep]
            vscores = [vscores[i] for i in keep]
            alpha = alpha[keep] / alpha[keep].sum()

    keep = alpha > 0
    if not np.any(keep):
        keep[int(np.argmax(alpha))] = True
    verts = [v for v, kp in zip(active, keep) if kp]
    coef = alpha[keep] / alpha[keep].sum()
    mu = np.stack(verts, axis=1).astype(np.float64) @ coef
    return SparseMapSolution(mu, verts, coef, converged, it, factor, theta)


def _affine_null_direction(vertices: List[np.ndarray]) -> Optional[np.ndarray]:
    """Nonzero d with sum(d) = 0 and M d = 0 if the vertices are affinely dependent."""
    A = np.vstack([np.ones(len(vertices)), np.stack(vertices, axis=1).astype(np.float64)])
    if A.shape[1] > A.shape[0]:
        return np.linalg.svd(A)[2][-1]
    _, sv, vt = np.linalg.svd(A)
    if sv[-1] > 1e-9 * max(1.0, sv[0]):
        return None
    return vt[-1]


def _affinely_independent(vertices: List[np.ndarray], coef: np.ndarray) -> List[int]:
    """Indices of a maximal affinely independent subset, heaviest vertices first."""
    order = np.argsort(-coef, kind="stable")
    kept: List[int] = []
    rows: List[np.ndarray] = []
    for i in order:
        cand = np.concatenate([[1.0], vertices[i].astype(np.float64)])
        trial = np.stack(rows + [cand])
        if np.linalg.matrix_rank(trial, tol=1e-9) == len(rows) + 1:
            rows.append(cand)
            kept.append(int(i))
            if len(rows) == cand.size:
                break
    return sorted(kept)


def _neighbours(v: np.ndarray, r: np.ndarray, k: int, c: float, tol: float) -> np.ndarray:
    """Feasible single flips and swaps of ``v`` whose score gain could be zero."""
    n = v.size
    flips = np.tile(v, (n, 1))
    flips[np.arange(n), np.arange(n)] ^= 1
    flips = flips[flips.sum(axis=1) <= k]
    ones, zeros = np.flatnonzero(v), np.flatnonzero(v == 0)
    # a swap changes the transition count by at most 4
    close = np.abs(r[zeros][None, :] - r[ones][:, None]) <= 4 * c + tol
    oi, zj = np.nonzero(close)
    swaps = np.tile(v, (oi.size, 1))
    swaps[np.arange(oi.size), ones[oi]] = 0
    swaps[np.arange(oi.size), zeros[zj]] = 1
    return np.vstack([flips, swaps])


def tight_vertices(solution: SparseMapSolution, tol: float = 1e-7, cap: Optional[int] = None) -> List[np.ndarray]:
    """Active vertices plus every vertex reachable by flips and swaps that ties them.

    Vertices tie when their score under ``scores - mu`` matches the active
    ones; together they span the optimal face.  Flips and swaps are the
    edges of the budget polytope, so the search covers a face when ``c = 0``.
    """
    factor = solution.factor
    active = [np.asarray(a, dtype=np.int8) for a in solution.active_vertices]
    if solution.scores is None or factor is None:
        return active
    c = factor.transition_penalty
    r = solution.scores - solution.marginals
    tol = tol * max(1.0, float(np.abs(solution.scores).max(initial=0.0)))
    base = max(vertex_score(r, a, c) for a in active)
    cap = cap or 2 * (factor.n + 1)
    found = {a.tobytes(): a for a in active}
    queue = list(active)
    while queue and len(found) < cap:
        cand = _neighbours(queue.pop(0), r, factor.k, c, tol)
        if not len(cand):
            continue
        vals = cand @ r - c * np.count_nonzero(cand[:, 1:] != cand[:, :-1], axis=1)
        for u in cand[np.abs(vals - base) <= tol]:
            key = u.tobytes()
            if key not in found and len(found) < cap:
                found[key] = u
                queue.append(u)
    return list(found.values())


def sparsemap_backward(solution: SparseMapSolution, upstream) -> np.ndarray:
    """Vector-Jacobian product d(upstream . mu)/d(scores).

    Differentiates the equality-constrained QP on the optimal face: with M an
    affinely independent basis of the tied vertices, d(mu) is the projection
    of d(theta) onto the face's tangent space, d(mu) = M P M^T d(theta), P the
    (alpha, alpha) block of the inverse KKT matrix.  Using the face rather
    than the (possibly smaller) active set keeps degenerate points exact.
    """
    g = np.asarray(upstream, dtype=np.float64)
    verts = tight_vertices(solution)
    weights = np.concatenate([solution.coefficients, np.zeros(len(verts) - len(solution.coefficients))])
    idx = _affinely_independent(verts, weights)
    M = np.stack([verts[i] for i in idx], axis=1).astype(np.float64)
    m = M.shape[1]
    K = np.zeros((m + 1, m + 1))
    K[0, 1:] = 1
    K[1:, 0] = 1
    K[1:, 1:] = M.T @ M
    rhs = np.concatenate([[0.0], M.T @ g])
    u = np.linalg.solve(K, rhs)[1:]
    return M @ u


def binarize(mu, k: int) -> np.ndarray:
    """Top-k positions of ``mu`` (lower index wins ties, zeros excluded)."""
    mu = np.asarray(mu, dtype=np.float64)
    order = np.argsort(-mu, kind="stable")[:k]
    z = np.zeros(mu.size, dtype=np.int8)
    z[order[mu[order] > 0]] = 1
    return z


# ----------------------------------------------------------------------
# reference solvers (used by tests and the acceptance suite)
# ----------------------------------------------------------------------

def project_budget(theta, k: int, iters: int = 200) -> np.ndarray:
    """Euclidean projection onto {mu in [0,1]^n : sum(mu) <= k} by bisection on the threshold."""
    theta = np.asarray(theta, dtype=np.float64)
    mu = np.clip(theta, 0, 1)
    if mu.sum() <= k:
        return mu
    lo, hi = 0.0, float(theta.max())
    for _ in range(iters):
        tau = 0.5 * (lo + hi)
        if np.clip(theta - tau, 0, 1).sum() > k:
            lo = tau
        else:
            hi = tau
    return np.clip(theta - 0.5 * (lo + hi), 0, 1)


def enumerate_vertices(n: int, k: int) -> np.ndarray:
    """All 0/1 masks of length n with at most k ones, as rows."""
    grid = ((np.arange(2 ** n)[:, None] >> np.arange(n)[::-1]) & 1).astype(np.int8)
    return grid[grid.sum(axis=1) <= k]


def frank_wolfe_reference(theta, factor: BudgetFactor, max_iter: int = 100_000,
                          gap_tol: float = 1e-12) -> np.ndarray:
    """Pairwise Frank-Wolfe with exact line search over explicitly enumerated vertices."""
    theta = np.asarray(theta, dtype=np.float64)
    V = enumerate_vertices(factor.n, factor.k).astype(np.float64)
    s = V @ theta - factor.transition_penalty * np.count_nonzero(V[:, 1:] != V[:, :-1], axis=1)
    alpha = np.zeros(len(V))
    alpha[int(np.argmax(s))] = 1.0
    mu = V.T @ alpha
    for _ in range(max_iter):
        grad = s - V @ mu
        fw = int(np.argmax(grad))
        support = np.flatnonzero(alpha > 0)
        away = support[int(np.argmin(grad[support]))]
        gap = grad[fw] - grad[away]
        if gap <= gap_tol:
            break
        d = V[fw] - V[away]
        dd = d @ d
        step = min(alpha[away], gap / dd)
        alpha[fw] += step
        alpha[away] -= step
        if alpha[away] < 1e-15:
            alpha[away] = 0.0
        mu = mu + step * d
    return mu

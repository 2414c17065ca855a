"""Discrete optimal transport between feature batches.

Two solvers share one interface: an exact transportation-simplex solver
for small problems and a log-domain entropic (Sinkhorn) solver for larger
ones. Plans are always solved on frozen cost values (plain float64 numpy
arrays, never tape tensors); the differentiable part is loss_ot, which
re-expresses the transport integrand through tape ops with the plan held
constant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError


@dataclass
class OTConfig:
    """Solver policy for alignment plans.

    exact_size_cap: largest batch side solved exactly; bigger problems go
    through Sinkhorn. epsilon is the entropic temperature.
    """

    solver: str = "auto"
    exact_size_cap: int = 32
    epsilon: float = 0.05
    max_iters: int = 5000
    tol: float = 1e-9

    def __post_init__(self):
        if self.solver not in ("auto", "exact", "sinkhorn"):
            raise ContractError(f"unknown solver {self.solver!r}")
        if self.epsilon <= 0:
            raise ContractError("sinkhorn epsilon must be positive")


@dataclass
class CouplingMatrix:
    """A transport plan with its marginals and solve diagnostics."""

    plan: np.ndarray
    a: np.ndarray
    b: np.ndarray
    objective: float
    converged: bool = True
    iterations: int = 0

    def marginal_violation(self):
        row = np.abs(self.plan.sum(axis=1) - self.a).max()
        col = np.abs(self.plan.sum(axis=0) - self.b).max()
        return float(max(row, col))


def _check_marginals(cost, a, b):
    cost = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if cost.ndim != 2 or cost.shape != (a.size, b.size):
        raise ContractError(
            f"cost shape {cost.shape} does not match marginals ({a.size}, {b.size})"
        )
    if (a < 0).any() or (b < 0).any():
        raise ContractError("marginal masses must be nonnegative")
    if abs(a.sum() - b.sum()) > 1e-9 * max(1.0, a.sum()):
        raise ContractError(
            f"marginal masses disagree: {a.sum():.12g} vs {b.sum():.12g}"
        )
    return cost, a, b


# ---------------------------------------------------------------------------
# exact solver: transportation simplex


def _northwest_corner(a, b):
    m, n = a.size, b.size
    x = np.zeros((m, n))
    basis = []
    ra, rb = a.copy(), b.copy()
    i = j = 0
    while True:
        t = min(ra[i], rb[j])
        x[i, j] = t
        basis.append((i, j))
        ra[i] -= t
        rb[j] -= t
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return x, basis


def _tree_duals(cost, basis, m, n):
    adj = [[] for _ in range(m + n)]
    for (i, j) in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    u = np.zeros(m)
    v = np.zeros(n)
    seen = [False] * (m + n)
    seen[0] = True
    stack = [0]
    while stack:
        node = stack.pop()
        for nb in adj[node]:
            if seen[nb]:
                continue
            seen[nb] = True
            if node < m:
                v[nb - m] = cost[node, nb - m] - u[node]
            else:
                u[nb] = cost[nb, node - m] - v[node - m]
            stack.append(nb)
    return u, v, adj


def _cycle_cells(adj, m, enter_i, enter_j):
    """Cells of the unique basis cycle closed by the entering cell.

    Returned in cycle order starting at the entering cell, so even
    positions gain mass and odd positions lose it.
    """
    start = enter_i
    goal = m + enter_j
    parent = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in parent:
                parent[nb] = node
                stack.append(nb)
    cells = [(enter_i, enter_j)]
    node = goal
    while parent[node] is not None:
        prev = parent[node]
        if node >= m:
            cells.append((prev, node - m))
        else:
            cells.append((node, prev - m))
        node = prev
    return cells


def _simplex(cost, a, b, bland_after=None):
    """Primal transportation simplex. Deterministic pivot choices throughout:
    entering is the most negative reduced cost (lowest flat index on ties),
    leaving is the earliest minimum-mass cell on the losing side of the
    cycle. Falls back to Bland's smallest-index entering rule if pivoting
    drags on, which rules out degenerate cycling."""
    m, n = a.size, b.size
    x, basis = _northwest_corner(a, b)
    scale = 1.0 + float(np.abs(cost).max(initial=0.0))
    tol = 1e-12 * scale
    if bland_after is None:
        bland_after = 20 * (m + n) * max(m, n)
    max_pivots = bland_after + 1000 * (m + n)

    pivots = 0
    while True:
        u, v, adj = _tree_duals(cost, basis, m, n)
        reduced = cost - u[:, None] - v[None, :]
        for (i, j) in basis:
            reduced[i, j] = np.inf
        if pivots < bland_after:
            flat = int(np.argmin(reduced))
            ei, ej = divmod(flat, n)
            if reduced[ei, ej] >= -tol:
                break
        else:
            candidates = np.argwhere(reduced < -tol)
            if candidates.size == 0:
                break
            ei, ej = map(int, candidates[0])
        cells = _cycle_cells(adj, m, ei, ej)
        losing = cells[1::2]
        theta = min(x[c] for c in losing)
        leave = next(c for c in losing if x[c] == theta)
        for k, c in enumerate(cells):
            if k % 2 == 0:
                x[c] += theta
            else:
                x[c] -= theta
        x[leave] = 0.0
        basis[basis.index(leave)] = (ei, ej)
        pivots += 1
        if pivots > max_pivots:
            raise RuntimeError("transportation simplex failed to terminate")

    u, v, _ = _tree_duals(cost, basis, m, n)
    return x, basis, u, v, pivots


def _is_uniform_square(a, b):
    m, n = a.size, b.size
    if m != n:
        return False
    w = 1.0 / m
    return bool(np.abs(a - w).max() < 1e-12 and np.abs(b - w).max() < 1e-12)


def _assignment_cost(cost):
    """Minimum assignment cost of a square matrix via the exact solver."""
    k = cost.shape[0]
    w = np.full(k, 1.0 / k)
    x, _, _, _, _ = _simplex(cost, w, w)
    return float((cost * x).sum()) * k


def _lex_min_permutation(cost, tol):
    """Lexicographically smallest permutation among minimum-cost assignments.

    Greedy over rows: commit the smallest column whose forced completion
    still meets the optimal cost, certified by re-solving the remaining
    subproblem exactly.
    """
    k = cost.shape[0]
    free = list(range(k))
    best = _assignment_cost(cost)
    perm = np.empty(k, dtype=np.int64)
    remaining = best
    for i in range(k):
        rows_left = list(range(i + 1, k))
        for j in free:
            fixed = float(cost[i, j])
            if rows_left:
                cols_left = [c for c in free if c != j]
                tail = _assignment_cost(cost[np.ix_(rows_left, cols_left)])
            else:
                tail = 0.0
            if fixed + tail <= remaining + tol:
                perm[i] = j
                free.remove(j)
                remaining = tail
                break
        else:
            raise RuntimeError("no admissible column during tie refinement")
    return perm


def solve_exact(cost, a, b):
    """Exact optimal transport plan between discrete masses.

    The solution is a vertex of the transportation polytope. For uniform
    square marginals the vertex is a permutation scaled by 1/k; when
    several permutations tie on cost, the lexicographically smallest one
    (reading assigned columns row by row) is returned, so equal inputs
    always produce identical plans.
    """
    cost, a, b = _check_marginals(cost, a, b)
    x, basis, u, v, pivots = _simplex(cost, a, b)

    if _is_uniform_square(a, b):
        k = a.size
        scale = 1.0 + float(np.abs(cost).max(initial=0.0))
        reduced = cost - u[:, None] - v[None, :]
        for c in basis:
            reduced[c] = np.inf
        if float(reduced.min(initial=np.inf)) <= 1e-9 * scale:
            perm = _lex_min_permutation(cost, 1e-9 * scale)
            x = np.zeros_like(x)
            x[np.arange(k), perm] = 1.0 / k

    obj = float((cost * x).sum())
    plan = CouplingMatrix(x, a, b, obj, converged=True, iterations=pivots)
    if plan.marginal_violation() > 1e-9:
        raise RuntimeError("solver produced inconsistent marginals")
    return plan


# ---------------------------------------------------------------------------
# entropic solver


def _logsumexp(m, axis):
    mx = np.max(m, axis=axis, keepdims=True)
    out = mx + np.log(np.sum(np.exp(m - mx), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def solve_sinkhorn(cost, a, b, config=None):
    """Entropy-regularized transport via Sinkhorn iterations in log space.

    Potentials are updated with logsumexp, so small epsilon does not
    underflow. Stops when the row-marginal L1 error drops below tol; if
    the iteration budget runs out first, the best iterate is returned
    with converged=False and a warning.
    """
    cfg = config or OTConfig()
    cost, a, b = _check_marginals(cost, a, b)
    if (a == 0).any() or (b == 0).any():
        raise ContractError("sinkhorn requires strictly positive marginals")
    eps = cfg.epsilon
    loga, logb = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    best_err = np.inf
    best = None
    it = 0
    for it in range(1, cfg.max_iters + 1):
        f = eps * (loga - _logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (logb - _logsumexp((f[:, None] - cost) / eps, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
        err = float(np.abs(plan.sum(axis=1) - a).sum())
        if err < best_err:
            best_err = err
            best = plan
        if err < cfg.tol:
            break
    converged = best_err < cfg.tol
    if not converged:
        warnings.warn(
            f"sinkhorn stopped after {cfg.max_iters} iterations with "
            f"marginal error {best_err:.3g}",
            RuntimeWarning,
        )
    obj = float((cost * best).sum())
    return CouplingMatrix(best, a, b, obj, converged=converged, iterations=it)


def solve(cost, a, b, config=None):
    """Route to the exact or entropic solver according to config."""
    cfg = config or OTConfig()
    m, n = np.asarray(a).size, np.asarray(b).size
    if cfg.solver == "exact":
        return solve_exact(cost, a, b)
    if cfg.solver == "sinkhorn":
        return solve_sinkhorn(cost, a, b, cfg)
    if max(m, n) <= cfg.exact_size_cap:
        return solve_exact(cost, a, b)
    return solve_sinkhorn(cost, a, b, cfg)


# ---------------------------------------------------------------------------
# feature alignment


def _as_array(x):
    return x.data if isinstance(x, tt.Tensor) else np.asarray(x)


def _pairwise_sq_dists(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = (x * x).sum(axis=1)[:, None]
    ny = (y * y).sum(axis=1)[None, :]
    d = nx + ny - 2.0 * (x @ y.T)
    return np.maximum(d, 0.0)


def cost_matrix(z_s, y_s, z_t, g_probs, alpha, beta):
    """Ground cost between source and target batch items.

    alpha weighs squared feature distance, beta weighs squared distance
    between source one-hot labels and target classifier predictions.
    Returns plain float64 values with no tape recording: plans are always
    solved on a frozen snapshot of the batch.
    """
    if alpha < 0 or beta < 0:
        raise ContractError("cost weights must be nonnegative")
    zs, zt = _as_array(z_s), _as_array(z_t)
    ys, gt = _as_array(y_s), _as_array(g_probs)
    if zs.ndim != 2 or zt.ndim != 2 or zs.shape[1] != zt.shape[1]:
        raise ContractError("feature batches must be rank-2 with equal width")
    if ys.shape[0] != zs.shape[0] or gt.shape[0] != zt.shape[0]:
        raise ContractError("label rows must match feature rows")
    if ys.shape[1] != gt.shape[1]:
        raise ContractError("label width mismatch between domains")
    if np.abs(np.asarray(ys, dtype=np.float64).sum(axis=1) - 1.0).max() > 1e-5:
        raise ContractError("source labels must be one-hot rows")
    if np.abs(np.asarray(gt, dtype=np.float64).sum(axis=1) - 1.0).max() > 1e-3:
        raise ContractError("target predictions must lie on the simplex")
    feat = _pairwise_sq_dists(zs, zt)
    lab = _pairwise_sq_dists(np.asarray(ys, np.float64), np.asarray(gt, np.float64))
    return alpha * feat + beta * lab


def loss_ot(plan, z_s, y_s, z_t, g_probs, alpha, beta):
    """Transport-weighted alignment loss, differentiable in the batch.

    The plan is treated as a constant weighting. Feature cost is squared
    Euclidean distance; the label term is cross-entropy between source
    one-hot labels and target class probabilities (with the guarded log),
    so gradients flow into both encoders and the classifier head.
    """
    p = plan.plan if isinstance(plan, CouplingMatrix) else np.asarray(plan)
    weights = tt.Tensor(p.astype(np.float64))
    ys = tt.Tensor(np.asarray(_as_array(y_s), dtype=np.float64))

    ns = tt.sum_axis(tt.mul(z_s, z_s), 1, keepdims=True)
    nt = tt.transpose(tt.sum_axis(tt.mul(z_t, z_t), 1, keepdims=True))
    cross = tt.matmul(z_s, tt.transpose(z_t))
    feat = tt.sub(tt.add(ns, nt), tt.mul(cross, 2.0))

    ce = tt.neg(tt.matmul(ys, tt.transpose(tt.log(g_probs))))

    integrand = tt.add(tt.mul(feat, alpha), tt.mul(ce, beta))
    return tt.tensor_sum(tt.mul(weights, integrand))


def wasserstein_p(x, y, p=2, a=None, b=None, config=None):
    """Discrete p-Wasserstein distance between two point sets."""
    if p < 1:
        raise ContractError("wasserstein order p must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if a is None:
        a = np.full(x.shape[0], 1.0 / x.shape[0])
    if b is None:
        b = np.full(y.shape[0], 1.0 / y.shape[0])
    dist = np.sqrt(_pairwise_sq_dists(x, y))
    plan = solve(dist**p, a, b, config)
    return float(plan.objective ** (1.0 / p))

"""Exact discrete optimal transport.

The transportation simplex keeps an explicit spanning-tree basis of m + n - 1
cells (degenerate zero-flow cells included), starts from the north-west
corner rule and pivots with Bland's rule: the entering cell is the first
improving cell in row-major order, the leaving cell the first tied blocking
cell. Solutions carry their dual potentials so that optimality can be
certified independently of the solver, and can warm-start later solves on
the same marginals (the fixed-point iteration in :mod:`bisimlab.metrics`
re-solves each state pair with slowly changing costs).
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InfeasibleMarginals, NoConvergence

MARGINAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Coupling between two discrete marginals and its cost."""

    coupling: np.ndarray
    cost: float
    marginal_row: np.ndarray
    marginal_col: np.ndarray
    row_potential: np.ndarray | None = None
    col_potential: np.ndarray | None = None

    def to_csv(self, path) -> None:
        """Write the nonzero entries as ``i, j, mass`` rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "mass"])
            for i, j in zip(*np.nonzero(self.coupling)):
                writer.writerow([int(i), int(j), repr(float(self.coupling[i, j]))])


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ValueError("covariance must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def diagonal(cls, mean, std) -> GaussianDist:
        std = np.asarray(std, dtype=float)
        return cls(mean, np.diag(std ** 2))


@dataclass
class SimplexSolution:
    """Raw solver state on the compressed (support-only) problem."""

    flow: np.ndarray
    basis: list
    u: np.ndarray
    v: np.ndarray
    cost: float
    pivots: int


# ---------------------------------------------------------------------------
# transportation simplex


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    m, n = len(a), len(b)
    ra, rb = a.astype(float).copy(), b.astype(float).copy()
    flow = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        x = min(ra[i], rb[j])
        flow[i, j] = x
        basis.append((i, j))
        ra[i] -= x
        rb[j] -= x
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
    return flow, basis


def _flows_from_basis(basis, a: np.ndarray, b: np.ndarray):
    """Solve the tree system for basic flows by leaf elimination; None if infeasible."""
    m, n = len(a), len(b)
    rem = np.concatenate([a, b]).astype(float)
    adj = [set() for _ in range(m + n)]
    for i, j in basis:
        adj[i].add(m + j)
        adj[m + j].add(i)
    flow = np.zeros((m, n))
    leaves = deque(k for k in range(m + n) if len(adj[k]) == 1)
    while leaves:
        k = leaves.popleft()
        if len(adj[k]) != 1:
            continue
        other = adj[k].pop()
        adj[other].discard(k)
        x = rem[k]
        if x < -1e-14:
            return None
        x = max(x, 0.0)
        i, j = (k, other - m) if k < m else (other, k - m)
        flow[i, j] = x
        rem[other] -= x
        rem[k] = 0.0
        if len(adj[other]) == 1:
            leaves.append(other)
    return flow


def _potentials(C: np.ndarray, basis, m: int, n: int):
    u = np.zeros(m)
    v = np.zeros(n)
    row_adj = [[] for _ in range(m)]
    col_adj = [[] for _ in range(n)]
    for i, j in basis:
        row_adj[i].append(j)
        col_adj[j].append(i)
    seen_r = [False] * m
    seen_c = [False] * n
    seen_r[0] = True
    stack = [(0, True)]
    while stack:
        k, is_row = stack.pop()
        if is_row:
            for j in row_adj[k]:
                if not seen_c[j]:
                    seen_c[j] = True
                    v[j] = C[k, j] - u[k]
                    stack.append((j, False))
        else:
            for i in col_adj[k]:
                if not seen_r[i]:
                    seen_r[i] = True
                    u[i] = C[i, k] - v[k]
                    stack.append((i, True))
    return u, v


def _tree_path(basis, m: int, n: int, start_row: int, end_col: int):
    """Cells on the unique basis path from row ``start_row`` to column ``end_col``."""
    adj = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    target = m + end_col
    parent = {start_row: None}
    queue = deque([start_row])
    while queue:
        k = queue.popleft()
        if k == target:
            break
        for nb in adj[k]:
            if nb not in parent:
                parent[nb] = k
                queue.append(nb)
    cells = []
    k = target
    while parent[k] is not None:
        p = parent[k]
        cells.append((p, k - m) if p < m else (k, p - m))
        k = p
    return cells  # ordered from end_col back towards start_row


def solve_transport(C: np.ndarray, a: np.ndarray, b: np.ndarray,
                    warm: SimplexSolution | None = None, max_pivots: int | None = None) -> SimplexSolution:
    """Minimise <flow, C> subject to row sums ``a`` and column sums ``b``.

    All entries of ``a`` and ``b`` should be positive (compress supports
    first). ``warm`` may hold a previous solution on the same marginals.
    """
    m, n = C.shape
    if warm is not None and len(warm.basis) == m + n - 1:
        basis = list(warm.basis)
        flow = warm.flow.copy()
    else:
        flow, basis = _northwest_corner(a, b)
    scale = max(1.0, float(np.max(np.abs(C), initial=0.0)))
    eps = 1e-12 * scale
    if max_pivots is None:
        max_pivots = 50 * (m + n) ** 2 + 100
    is_basic = np.zeros((m, n), dtype=bool)
    for cell in basis:
        is_basic[cell] = True
    pivots = 0
    while True:
        u, v = _potentials(C, basis, m, n)
        reduced = C - u[:, None] - v[None, :]
        candidates = np.flatnonzero((reduced < -eps) & ~is_basic)
        if candidates.size == 0:
            break
        if pivots >= max_pivots:
            raise NoConvergence("transportation simplex exceeded its pivot budget")
        ei, ej = divmod(int(candidates[0]), n)
        path = _tree_path(basis, m, n, ei, ej)
        minus = path[0::2]
        plus = path[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min(c for c in minus if flow[c] == theta)
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ei, ej] += theta
        flow[leaving] = 0.0
        basis[basis.index(leaving)] = (ei, ej)
        is_basic[leaving] = False
        is_basic[ei, ej] = True
        pivots += 1
    np.maximum(flow, 0.0, out=flow)
    cost = float(np.sum(flow * C))
    return SimplexSolution(flow, basis, u, v, cost, pivots)


# ---------------------------------------------------------------------------
# public API


def _validate_marginals(cost, mu, lam):
    cost = np.asarray(cost, dtype=float)
    mu = np.asarray(mu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if cost.shape != (mu.size, lam.size):
        raise DimensionMismatch(f"cost shape {cost.shape} does not match marginals ({mu.size}, {lam.size})")
    if np.any(cost < 0) or not np.all(np.isfinite(cost)):
        raise ValueError("cost must be finite and nonnegative")
    if np.any(mu < 0) or np.any(lam < 0):
        raise InfeasibleMarginals("marginals must be nonnegative")
    if abs(mu.sum() - lam.sum()) > MARGINAL_TOL:
        raise InfeasibleMarginals(f"marginal masses differ: {mu.sum()!r} vs {lam.sum()!r}")
    return cost, mu, lam


def _complete_potentials(cost, rows, cols, u_s, v_s):
    """Extend support potentials to every index through c-transforms."""
    m, n = cost.shape
    u = np.empty(m)
    v = np.empty(n)
    u[rows] = u_s
    v[cols] = v_s
    free_cols = np.setdiff1d(np.arange(n), cols)
    if free_cols.size:
        v[free_cols] = np.min(cost[np.ix_(rows, free_cols)] - u_s[:, None], axis=0)
    free_rows = np.setdiff1d(np.arange(m), rows)
    if free_rows.size:
        u[free_rows] = np.min(cost[free_rows, :] - v[None, :], axis=1)
    return u, v


def w1_discrete(cost, mu, lam) -> tuple[float, TransportPlan]:
    """Exact 1-Wasserstein distance and optimal plan for a ground cost matrix."""
    cost, mu, lam = _validate_marginals(cost, mu, lam)
    rows = np.flatnonzero(mu > 0)
    cols = np.flatnonzero(lam > 0)
    coupling = np.zeros(cost.shape)
    if rows.size == 0 or cols.size == 0:
        u, v = np.zeros(cost.shape[0]), np.zeros(cost.shape[1])
        return 0.0, TransportPlan(coupling, 0.0, mu, lam, u, v)
    sub = cost[np.ix_(rows, cols)]
    sol = solve_transport(sub, mu[rows], lam[cols])
    coupling[np.ix_(rows, cols)] = sol.flow
    u, v = _complete_potentials(cost, rows, cols, sol.u, sol.v)
    plan = TransportPlan(coupling, sol.cost, mu, lam, u, v)
    return sol.cost, plan


def wp_discrete(cost, p: float, mu, lam) -> float:
    """p-Wasserstein distance: W1 under the cost d**p, raised to 1/p."""
    if not p >= 1 or not np.isfinite(p):
        raise ValueError(f"order p must be finite and >= 1, got {p}")
    cost = np.asarray(cost, dtype=float)
    value, _ = w1_discrete(cost ** p, mu, lam)
    return max(value, 0.0) ** (1.0 / p)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(mat)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def w2_gaussian(a: GaussianDist, b: GaussianDist) -> float:
    """Closed-form 2-Wasserstein distance between Gaussians.

    Uses ||mu_a - mu_b||^2 + ||cov_a^(1/2) - cov_b^(1/2)||_F^2, which is exact
    whenever the covariances commute (in particular for diagonal ones).
    """
    if a.mean.size != b.mean.size:
        raise DimensionMismatch(f"dimensions differ: {a.mean.size} vs {b.mean.size}")
    dm = a.mean - b.mean
    ds = _psd_sqrt(a.cov) - _psd_sqrt(b.cov)
    return float(np.sqrt(dm @ dm + np.sum(ds * ds)))


@dataclass(frozen=True)
class Certificate:
    passed: bool
    primal: float
    dual: float
    gap: float
    max_violation: float


def _slackness_potentials(coupling, cost):
    """Dual potentials from complementary slackness on the plan's support."""
    m, n = cost.shape
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    support = coupling > 1e-15
    for start in range(m):
        if np.isnan(u[start]):
            u[start] = 0.0
            stack = [(start, True)]
            while stack:
                k, is_row = stack.pop()
                if is_row:
                    for j in np.flatnonzero(support[k]):
                        if np.isnan(v[j]):
                            v[j] = cost[k, j] - u[k]
                            stack.append((j, False))
                else:
                    for i in np.flatnonzero(support[:, k]):
                        if np.isnan(u[i]):
                            u[i] = cost[i, k] - v[k]
                            stack.append((i, True))
    v = np.where(np.isnan(v), np.min(cost - u[:, None], axis=0), v)
    # make the pair feasible: v <- min_i (c_ij - u_i), then u <- min_j (c_ij - v_j)
    v = np.min(cost - u[:, None], axis=0)
    u = np.min(cost - v[None, :], axis=1)
    return u, v


def _is_metric(cost: np.ndarray, tol: float = 1e-12) -> bool:
    if cost.shape[0] != cost.shape[1]:
        return False
    if np.max(np.abs(np.diag(cost)), initial=0.0) > tol or np.max(np.abs(cost - cost.T), initial=0.0) > tol:
        return False
    # d_ik <= d_ij + d_jk for all i, j, k
    detour = np.min(cost[:, :, None] + cost[None, :, :], axis=1)
    return bool(np.all(cost <= detour + tol))


def certify_optimality(plan: TransportPlan, cost, tol: float = 1e-8) -> Certificate:
    """Check a plan against dual potentials.

    Metric costs over a shared point set are certified in Kantorovich-Rubinstein
    form: f = min_j (cost[:, j] - v_j) must be 1-Lipschitz with respect to the
    cost and E_mu[f] - E_lam[f] must equal the primal cost. Other costs use the (u, v) form u_i + v_j <= c_ij instead.
    """
    cost = np.asarray(cost, dtype=float)
    coupling = plan.coupling
    primal = float(np.sum(coupling * cost))
    row_err = np.max(np.abs(coupling.sum(axis=1) - plan.marginal_row), initial=0.0)
    col_err = np.max(np.abs(coupling.sum(axis=0) - plan.marginal_col), initial=0.0)
    marginal_violation = max(row_err, col_err, float(-min(coupling.min(initial=0.0), 0.0)))

    if plan.row_potential is not None and plan.col_potential is not None:
        u, v = plan.row_potential, plan.col_potential
    else:
        u, v = _slackness_potentials(coupling, cost)

    if _is_metric(cost):
        col_support = np.flatnonzero(plan.marginal_col > 0)
        if col_support.size == 0:
            f = np.zeros(cost.shape[0])
        else:
            f = np.min(cost[:, col_support] - v[col_support][None, :], axis=1)
        lip = np.max(np.abs(f[:, None] - f[None, :]) - cost, initial=0.0)
        dual = float(plan.marginal_row @ f - plan.marginal_col @ f)
        violation = max(float(lip), marginal_violation)
    else:
        feas = np.max(u[:, None] + v[None, :] - cost, initial=0.0)
        dual = float(plan.marginal_row @ u + plan.marginal_col @ v)
        violation = max(float(feas), marginal_violation)
    gap = primal - dual
    passed = violation <= tol and abs(gap) <= tol
    return Certificate(bool(passed), primal, dual, float(gap), float(max(violation, 0.0)))

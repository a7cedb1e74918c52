"""Exact bisimulation metrics on finite MDPs by fixed-point iteration.

All variants share one operator, applied to a symmetric distance matrix d:

    F(d)[i, j] = max_b ( c_R * gap_b[i, j] + c_T * W(d)(mu_b[i], mu_b[j]) )

where each branch b is an action (policy-independent metric) or the single
policy-averaged kernel (on-policy and approximate-dynamics metrics). The
iteration starts from d = 0 and stops once the sup-norm residual is at most
``tol``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import NoConvergence, RewardRangeViolation, ShapeMismatch, UnsupportedOrder
from .mdp import FiniteMdp, PolicyTable, evaluate_chain, policy_kernel
from .transport import solve_transport


@dataclass(frozen=True)
class BisimConfig:
    """Weights and stopping rule of the metric operator.

    Attributes:
        c_R: reward weight, >= 0.
        c_T: transition weight in [0, 1); also the contraction factor.
        p: Wasserstein order. Orders above 1 are only accepted for
            deterministic MDPs under deterministic policies.
        tol: sup-norm residual at which the iteration stops.
        max_iter: iteration cap; ``None`` derives it from the contraction
            rate so that exact arithmetic would converge in time.
        accelerate: once every transport basis stops changing, solve the
            linearised fixed point directly and keep it if its residual is
            within ``tol``.
    """

    c_R: float = 1.0
    c_T: float = 0.9
    p: float = 1.0
    tol: float = 1e-9
    max_iter: int | None = None
    accelerate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.c_T < 1.0:
            raise ValueError(f"c_T must lie in [0, 1), got {self.c_T}")
        if self.c_R < 0:
            raise ValueError(f"c_R must be nonnegative, got {self.c_R}")
        if not self.p >= 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    @classmethod
    def def1(cls, c: float, **kw) -> BisimConfig:
        """Policy-independent weighting (1 - c, c)."""
        return cls(c_R=1.0 - c, c_T=c, **kw)

    @classmethod
    def def2(cls, gamma: float, **kw) -> BisimConfig:
        """On-policy weighting (1, gamma)."""
        return cls(c_R=1.0, c_T=gamma, **kw)

    @classmethod
    def dbc_alt(cls, **kw) -> BisimConfig:
        return cls(c_R=0.5, c_T=0.5, **kw)

    def diameter_bound(self, reward_range: float) -> float:
        return self.c_R * reward_range / (1.0 - self.c_T)

    def iteration_cap(self, reward_range: float) -> int:
        scale = self.c_R * reward_range
        if scale <= self.tol or self.c_T == 0.0:
            return 10
        # residual after n sweeps is at most c_T^n * scale
        n = math.log(self.tol / scale) / math.log(self.c_T)
        return int(math.ceil(n)) + 50


@dataclass
class FixedPointTrace:
    residuals: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    accelerated: bool = False


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def diameter(self) -> float:
        return float(self.values.max(initial=0.0))

    def triangle_violation(self, samples: int = 1000, seed=0) -> float:
        """Largest d[i,k] - d[i,j] - d[j,k]; exhaustive up to 64 states, sampled above."""
        d = self.values
        n = d.shape[0]
        if n <= 64:
            detour = np.min(d[:, :, None] + d[None, :, :], axis=1)
            return float(np.max(d - detour, initial=0.0))
        rng = np.random.default_rng(seed)
        i, j, k = rng.integers(n, size=(3, samples))
        return float(np.max(d[i, k] - d[i, j] - d[j, k], initial=0.0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "d"])
            n = self.n_states
            for i in range(n):
                for j in range(n):
                    writer.writerow([i, j, repr(float(self.values[i, j]))])

    def summary(self, trace: FixedPointTrace | None = None) -> dict:
        doc = {"n_states": self.n_states, "diameter": self.diameter}
        if trace is not None:
            doc["iterations"] = trace.iterations
            doc["residual"] = trace.residuals[-1] if trace.residuals else 0.0
            doc["converged"] = trace.converged
        return doc

    def write_summary(self, path, trace: FixedPointTrace | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(trace), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# the operator


class _PairTerm:
    """W(d) between two next-state distributions, with a cached simplex basis."""

    __slots__ = ("rows", "cols", "a", "b", "warm", "stable", "kind")

    def __init__(self, mu: np.ndarray, lam: np.ndarray):
        self.rows = np.flatnonzero(mu > 0)
        self.cols = np.flatnonzero(lam > 0)
        self.a = mu[self.rows]
        self.b = lam[self.cols]
        self.warm = None
        self.stable = False
        if self.rows.size == 1:
            self.kind = "row_point"
        elif self.cols.size == 1:
            self.kind = "col_point"
        else:
            self.kind = "lp"

    def value(self, cost: np.ndarray) -> float:
        if self.kind == "row_point":
            return float(self.b @ cost[self.rows[0], self.cols])
        if self.kind == "col_point":
            return float(self.a @ cost[self.rows, self.cols[0]])
        sub = cost[np.ix_(self.rows, self.cols)]
        prev = self.warm
        sol = solve_transport(sub, self.a, self.b, warm=prev)
        self.stable = prev is not None and sol.pivots == 0
        self.warm = sol
        return sol.cost

    def coupling(self):
        """(row index, col index, mass) triples of the current optimal plan."""
        if self.kind == "row_point":
            return [(self.rows[0], c, m) for c, m in zip(self.cols, self.b)]
        if self.kind == "col_point":
            return [(r, self.cols[0], m) for r, m in zip(self.rows, self.a)]
        flow = self.warm.flow
        nz = np.nonzero(flow)
        return [(self.rows[i], self.cols[j], flow[i, j]) for i, j in zip(*nz)]


class _MetricOperator:
    """F over all unordered pairs i < j for a list of (reward, kernel) branches."""

    def __init__(self, branches, cfg: BisimConfig, point_mass: bool):
        self.cfg = cfg
        self.branches = branches
        self.n = branches[0][0].shape[0]
        self.point_mass = point_mass
        self.iu, self.ju = np.triu_indices(self.n, k=1)
        self.gaps = [cfg.c_R * np.abs(r[self.iu] - r[self.ju]) for r, _ in branches]
        if point_mass:
            self.succ = [np.argmax(P, axis=1) for _, P in branches]
            self.terms = None
        else:
            self.terms = [[_PairTerm(P[i], P[j]) for i, j in zip(self.iu, self.ju)] for _, P in branches]
        self.last_choice = None

    def apply(self, d: np.ndarray) -> np.ndarray:
        n_pairs = self.iu.size
        best = np.full(n_pairs, -np.inf)
        choice = np.zeros(n_pairs, dtype=int)
        for b in range(len(self.branches)):
            if self.point_mass:
                # W_p between point masses is the ground distance itself
                succ = self.succ[b]
                w = d[succ[self.iu], succ[self.ju]]
            else:
                w = np.fromiter((t.value(d) for t in self.terms[b]), dtype=float, count=n_pairs)
            cand = self.gaps[b] + self.cfg.c_T * w
            better = cand > best
            best[better] = cand[better]
            choice[better] = b
        self.last_choice = choice
        out = np.zeros((self.n, self.n))
        out[self.iu, self.ju] = best
        out[self.ju, self.iu] = best
        return out

    def bases_stable(self) -> bool:
        if self.point_mass:
            return True
        return all(t.stable or t.kind != "lp" for terms in self.terms for t in terms)

    def linearised_fixed_point(self) -> np.ndarray:
        """Solve d = g + c_T M d with the current argmax branches and couplings frozen."""
        n, n_pairs = self.n, self.iu.size
        index = -np.ones((n, n), dtype=int)
        index[self.iu, self.ju] = np.arange(n_pairs)
        index[self.ju, self.iu] = np.arange(n_pairs)
        rows, cols, vals = [], [], []
        g = np.empty(n_pairs)
        for k in range(n_pairs):
            b = self.last_choice[k]
            g[k] = self.gaps[b][k]
            if self.point_mass:
                succ = self.succ[b]
                pk = index[succ[self.iu[k]], succ[self.ju[k]]]
                if pk >= 0:
                    rows.append(k)
                    cols.append(pk)
                    vals.append(1.0)
            else:
                for r, c, m in self.terms[b][k].coupling():
                    pk = index[r, c]
                    if pk >= 0:
                        rows.append(k)
                        cols.append(pk)
                        vals.append(m)
        # duplicate (row, col) entries are summed on conversion
        M = sparse.csr_matrix((vals, (rows, cols)), shape=(n_pairs, n_pairs))
        x = spsolve((sparse.identity(n_pairs, format="csr") - self.cfg.c_T * M).tocsc(), g)
        out = np.zeros((n, n))
        out[self.iu, self.ju] = x
        out[self.ju, self.iu] = x
        return out


def _iterate(op: _MetricOperator, cfg: BisimConfig, reward_range: float):
    n = op.n
    trace = FixedPointTrace()
    d = np.zeros((n, n))
    if n == 1:
        trace.converged = True
        trace.residuals.append(0.0)
        return DistanceMatrix(d), trace
    max_iter = cfg.max_iter if cfg.max_iter is not None else cfg.iteration_cap(reward_range)
    for it in range(1, max_iter + 1):
        nxt = op.apply(d)
        residual = float(np.max(np.abs(nxt - d)))
        trace.residuals.append(residual)
        trace.iterations = it
        d = nxt
        if residual <= cfg.tol:
            trace.converged = True
            return DistanceMatrix(d), trace
        if cfg.accelerate and it >= 2 and op.bases_stable():
            cand = np.maximum(op.linearised_fixed_point(), 0.0)
            check = op.apply(cand)
            cand_residual = float(np.max(np.abs(check - cand)))
            if cand_residual <= cfg.tol:
                trace.residuals.append(cand_residual)
                trace.iterations = it + 1
                trace.converged = True
                trace.accelerated = True
                return DistanceMatrix(check), trace
            # keep iterating from the probe's image; the fixed point is unique
            d = check
    raise NoConvergence(f"metric iteration stopped at residual {trace.residuals[-1]:.3e} after {max_iter} sweeps")


def _deterministic_rows(P: np.ndarray) -> bool:
    return bool(np.all(np.isclose(P.max(axis=-1), 1.0, atol=1e-12)))


def _snap(P: np.ndarray) -> np.ndarray:
    """Drop round-off mass below 1e-15 so supports stay small."""
    P = np.where(P < 1e-15, 0.0, P)
    return P / P.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# public solvers


def metric_policy_independent(mdp: FiniteMdp, cfg: BisimConfig) -> tuple[DistanceMatrix, FixedPointTrace]:
    """Metric with a max over actions of reward gap plus c_T * W1 of successors."""
    if cfg.p != 1:
        raise UnsupportedOrder("the policy-independent metric is defined with W1 only")
    branches = [(mdp.reward[:, a], _snap(mdp.transition[:, a, :])) for a in range(mdp.n_actions)]
    op = _MetricOperator(branches, cfg, point_mass=mdp.is_deterministic())
    return _iterate(op, cfg, mdp.reward_range)


def _chain_operator(r: np.ndarray, P: np.ndarray, cfg: BisimConfig, order_ok: bool) -> _MetricOperator:
    if cfg.p != 1 and not order_ok:
        raise UnsupportedOrder("orders p > 1 need a deterministic MDP and a deterministic policy")
    return _MetricOperator([(r, _snap(P))], cfg, point_mass=_deterministic_rows(P))


def metric_on_policy(mdp: FiniteMdp, pi: PolicyTable, cfg: BisimConfig) -> tuple[DistanceMatrix, FixedPointTrace]:
    """On-policy metric c_R |r_i - r_j| + c_T W_p(d)(P_pi[i], P_pi[j])."""
    r_pi, P_pi = policy_kernel(mdp, pi)
    op = _chain_operator(r_pi, P_pi, cfg, mdp.is_deterministic() and pi.is_deterministic())
    return _iterate(op, cfg, mdp.reward_range)


def _policy_level(mdp: FiniteMdp, pi: PolicyTable, p_hat, r_hat):
    p_hat = np.asarray(p_hat, dtype=float)
    r_hat = np.asarray(r_hat, dtype=float)
    n = mdp.n_states
    if p_hat.shape == (n, mdp.n_actions, n):
        p_hat = np.einsum("sa,sat->st", pi.action_probs, p_hat)
    if r_hat.shape == (n, mdp.n_actions):
        r_hat = np.einsum("sa,sa->s", pi.action_probs, r_hat)
    if p_hat.shape != (n, n) or r_hat.shape != (n,):
        raise ShapeMismatch(f"p_hat {p_hat.shape} / r_hat {r_hat.shape} do not match {n} states")
    if np.any(p_hat < 0) or np.any(np.abs(p_hat.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("p_hat rows must be probability vectors")
    return p_hat, r_hat


def metric_approx_dynamics(mdp: FiniteMdp, p_hat, r_hat, pi: PolicyTable,
                           cfg: BisimConfig) -> tuple[DistanceMatrix, FixedPointTrace]:
    """On-policy metric under a model (p_hat, r_hat) over the same state set.

    ``p_hat`` is either a policy-level kernel (S, S) or per-action (S, A, S);
    ``r_hat`` is either (S,) or (S, A). Orders p > 1 need point-mass model
    rows over a deterministic MDP.
    """
    P_hat, r_vec = _policy_level(mdp, pi, p_hat, r_hat)
    op = _chain_operator(r_vec, P_hat, cfg, _deterministic_rows(P_hat) and mdp.is_deterministic())
    return _iterate(op, cfg, mdp.reward_range)


def metric_from_chain(r: np.ndarray, P: np.ndarray, cfg: BisimConfig,
                      reward_range: float | None = None) -> tuple[DistanceMatrix, FixedPointTrace]:
    """On-policy metric of a bare Markov reward process (r, P)."""
    r = np.asarray(r, dtype=float)
    P = np.asarray(P, dtype=float)
    rng_ = float(np.ptp(r)) if reward_range is None else reward_range
    op = _chain_operator(r, P, cfg, _deterministic_rows(P))
    return _iterate(op, cfg, rng_)


def bisim_operator(mdp: FiniteMdp, pi: PolicyTable | None, cfg: BisimConfig):
    """The metric operator F as a callable on distance matrices.

    ``pi=None`` gives the policy-independent operator.
    """
    if pi is None:
        branches = [(mdp.reward[:, a], _snap(mdp.transition[:, a, :])) for a in range(mdp.n_actions)]
        op = _MetricOperator(branches, cfg, point_mass=mdp.is_deterministic())
    else:
        r_pi, P_pi = policy_kernel(mdp, pi)
        op = _chain_operator(r_pi, P_pi, cfg, mdp.is_deterministic() and pi.is_deterministic())
    return op.apply


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ContractionReport:
    max_ratio: float
    bound: float
    n_pairs: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.max_ratio <= self.bound + 1e-9


def _random_pseudometric(rng, n: int, scale: float) -> np.ndarray:
    X = rng.normal(size=(n, rng.integers(1, 4)))
    D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
    return scale * rng.uniform(0.1, 1.0) * D / max(D.max(), 1e-12)


def verify_contraction(mdp: FiniteMdp, pi: PolicyTable | None, cfg: BisimConfig,
                       samples: int = 100, seed=0) -> ContractionReport:
    """Check ||F(d) - F(d')|| <= c_T ||d - d'|| on random pseudo-metric pairs."""
    F = bisim_operator(mdp, pi, cfg)
    rng = np.random.default_rng(seed)
    scale = max(cfg.diameter_bound(mdp.reward_range), 1.0)
    max_ratio, skipped = 0.0, 0
    for _ in range(samples):
        d1 = _random_pseudometric(rng, mdp.n_states, scale)
        d2 = _random_pseudometric(rng, mdp.n_states, scale)
        den = float(np.max(np.abs(d1 - d2)))
        if den == 0.0:
            skipped += 1
            continue
        num = float(np.max(np.abs(F(d1) - F(d2))))
        max_ratio = max(max_ratio, num / den)
    return ContractionReport(max_ratio, cfg.c_T, samples - skipped, skipped)


def residual_slope(trace: FixedPointTrace, burn_in: int = 3) -> float:
    """Least-squares slope of log residual against iteration after a burn-in."""
    res = np.asarray(trace.residuals[burn_in:], dtype=float)
    res = res[res > 0]
    if res.size < 2:
        return -np.inf
    x = np.arange(res.size)
    return float(np.polyfit(x, np.log(res), 1)[0])


def _check_unit_rewards(mdp: FiniteMdp) -> None:
    if mdp.reward.min() < 0.0 or mdp.reward.max() > 1.0:
        raise RewardRangeViolation("value bounds need rewards in [0, 1]")


@dataclass(frozen=True)
class ValueBoundReport:
    lhs: np.ndarray  # c_R |V_i - V_j|
    rhs: np.ndarray  # d_ij + myopia penalty
    penalty: float
    max_violation: float
    tol: float = 1e-9

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol

    @property
    def min_slack(self) -> float:
        return float(np.min(self.rhs - self.lhs))


def myopia_penalty(c_R: float, c_T: float, gamma: float) -> float:
    """2 c_R (gamma - min(c_T, gamma)) / ((1 - gamma)(1 - c_T))."""
    gbar = min(c_T, gamma)
    return 2.0 * c_R * (gamma - gbar) / ((1.0 - gamma) * (1.0 - c_T))


def value_bound_report(mdp: FiniteMdp, pi: PolicyTable, metric: DistanceMatrix, cfg: BisimConfig,
                       gamma: float | None = None) -> ValueBoundReport:
    """Check c_R |V(s_i) - V(s_j)| <= d(s_i, s_j) + penalty for every pair."""
    _check_unit_rewards(mdp)
    gamma = mdp.discount if gamma is None else gamma
    r_pi, P_pi = policy_kernel(mdp, pi)
    V = evaluate_chain(r_pi, P_pi, gamma).values
    lhs = cfg.c_R * np.abs(V[:, None] - V[None, :])
    penalty = myopia_penalty(cfg.c_R, cfg.c_T, gamma)
    rhs = metric.values + penalty
    return ValueBoundReport(lhs, rhs, penalty, float(np.max(lhs - rhs)))


@dataclass(frozen=True)
class Dispersion:
    mu_bd: float
    mu_rd: float
    sigma_bd: float
    sigma_rd: float

    @property
    def ratio(self) -> float | None:
        return self.mu_bd / self.mu_rd if self.mu_rd > 0 else None


def dispersion_stats(mdp: FiniteMdp, pi: PolicyTable, metric: DistanceMatrix, rho) -> Dispersion:
    """Exact means and standard deviations of d and |r_i - r_j| under rho x rho."""
    r_pi, _ = policy_kernel(mdp, pi)
    return dispersion_from_chain(r_pi, metric.values, rho)


def dispersion_from_chain(r, d, rho) -> Dispersion:
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    w = np.outer(rho, rho)
    rd = np.abs(r[:, None] - r[None, :])
    mu_bd = float(np.sum(w * d))
    mu_rd = float(np.sum(w * rd))
    var_bd = max(float(np.sum(w * (d - mu_bd) ** 2)), 0.0)
    var_rd = max(float(np.sum(w * (rd - mu_rd) ** 2)), 0.0)
    return Dispersion(mu_bd, mu_rd, math.sqrt(var_bd), math.sqrt(var_rd))


def mean_distance_ratio(cfg: BisimConfig) -> float:
    """Mean distance over mean reward gap for deterministic stationary chains."""
    return cfg.c_R / (1.0 - cfg.c_T)


def variance_bound(cfg: BisimConfig, disp: Dispersion) -> float | None:
    """Upper bound on sigma_bd^2 for deterministic chains; None when c_T >= sqrt(0.5)."""
    c_R, c_T = cfg.c_R, cfg.c_T
    if 2 * c_T * c_T >= 1.0:
        return None
    k = 1.0 - 2 * c_T * c_T
    mean_term = c_R ** 2 * (1 - 2 * c_T) ** 2 / (k * (1 - c_T) ** 2)
    return (2 * c_R ** 2 / k) * disp.sigma_rd ** 2 + mean_term * disp.mu_rd ** 2

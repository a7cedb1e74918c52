"""State aggregation under a metric and value-function approximation bounds.

A partition groups states whose pairwise distance is at most 2 * epsilon.
The aggregated chain averages rewards and cluster-to-cluster transition mass
of its members under a per-state measure xi; its values, lifted back to the
original states, are compared against bound expressions for the exact metric
and for models with reward, transition and encoder error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCluster, ZeroMeasureCluster
from .metrics import (
    BisimConfig, DistanceMatrix, _check_unit_rewards, _policy_level, metric_approx_dynamics, metric_on_policy,
)
from .mdp import FiniteMdp, PolicyTable, build_mdp, evaluate_chain, policy_kernel, stationary_distribution
from .transport import w1_discrete, wp_discrete

SLACK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    epsilon: float
    metric_used: DistanceMatrix | None = None

    @property
    def n_clusters(self) -> int:
        return int(self.assignment.max()) + 1 if self.assignment.size else 0

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def max_intra_distance(self, metric: DistanceMatrix | None = None) -> float:
        d = (metric or self.metric_used).values
        same = self.assignment[:, None] == self.assignment[None, :]
        return float(np.max(np.where(same, d, 0.0), initial=0.0))

    def satisfies_radius(self, tol: float = 1e-12) -> bool:
        return self.max_intra_distance() <= 2 * self.epsilon + tol


def epsilon_partition(metric: DistanceMatrix, epsilon: float) -> Partition:
    """Greedy covering in index order.

    Each state joins the first cluster whose anchor lies within ``epsilon``,
    otherwise it anchors a new cluster. For a pseudo-metric every cluster then
    has diameter at most 2 * epsilon.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    d = metric.values
    n = d.shape[0]
    anchors: list[int] = []
    assignment = np.empty(n, dtype=int)
    for s in range(n):
        for k, a in enumerate(anchors):
            if d[s, a] <= epsilon:
                assignment[s] = k
                break
        else:
            assignment[s] = len(anchors)
            anchors.append(s)
    return Partition(assignment, float(epsilon), metric)


@dataclass(frozen=True, eq=False)
class AggregatedMdp:
    """Aggregated chain over clusters (single-action FiniteMdp) with its averaging weights."""

    mdp: FiniteMdp
    xi_weights: np.ndarray
    partition: Partition

    @property
    def reward(self) -> np.ndarray:
        return self.mdp.reward[:, 0]

    @property
    def transition(self) -> np.ndarray:
        return self.mdp.transition[:, 0, :]

    def values(self, gamma: float) -> np.ndarray:
        return evaluate_chain(self.reward, self.transition, gamma).values

    def lifted_values(self, gamma: float) -> np.ndarray:
        """V~(Phi(s)) for every original state s."""
        return self.values(gamma)[self.partition.assignment]


def resolve_xi(mdp: FiniteMdp, pi: PolicyTable, xi) -> np.ndarray:
    """``None``/"uniform" gives the uniform measure, "stationary" the stationary distribution."""
    if xi is None or (isinstance(xi, str) and xi == "uniform"):
        return np.full(mdp.n_states, 1.0 / mdp.n_states)
    if isinstance(xi, str) and xi == "stationary":
        return stationary_distribution(mdp, pi, lazy=True)
    if isinstance(xi, str):
        raise ValueError(f"unknown xi measure {xi!r}")
    return np.asarray(xi, dtype=float)


def aggregate_chain(r: np.ndarray, P: np.ndarray, part: Partition, xi: np.ndarray,
                    reward_bounds=(0.0, 1.0), gamma: float = 0.9) -> AggregatedMdp:
    n_k = part.n_clusters
    onehot = np.zeros((len(r), n_k))
    onehot[np.arange(len(r)), part.assignment] = 1.0
    mass = onehot.T @ xi
    for k in range(n_k):
        if not np.any(part.assignment == k):
            raise EmptyCluster(f"cluster {k} has no members")
        if mass[k] <= 0:
            raise ZeroMeasureCluster(f"cluster {k} has zero xi-measure")
    R_agg = (onehot.T @ (xi * r)) / mass
    into = P @ onehot  # mass from each state into each cluster
    P_agg = (onehot.T @ (xi[:, None] * into)) / mass[:, None]
    P_agg /= P_agg.sum(axis=1, keepdims=True)
    lo, hi = reward_bounds
    R_agg = np.clip(R_agg, lo, hi)  # averaging cannot leave the bounds; clip round-off only
    rho0 = mass / mass.sum()
    agg = build_mdp(P_agg[:, None, :], R_agg[:, None], rho0=rho0, gamma=gamma, reward_bounds=(lo, hi))
    return AggregatedMdp(agg, xi, part)


def aggregate_mdp(mdp: FiniteMdp, pi: PolicyTable, part: Partition, xi=None) -> AggregatedMdp:
    """xi-average aggregated MDP of (r_pi, P_pi) over the partition's clusters."""
    xi = resolve_xi(mdp, pi, xi)
    if xi.shape != (mdp.n_states,) or np.any(xi < 0):
        raise ValueError("xi must be a nonnegative per-state measure")
    r_pi, P_pi = policy_kernel(mdp, pi)
    return aggregate_chain(r_pi, P_pi, part, xi, mdp.reward_bounds, mdp.discount)


def gamma_bar(cfg: BisimConfig, gamma: float) -> float:
    return min(cfg.c_T, gamma)


def discount_gap_term(cfg: BisimConfig, gamma: float) -> float:
    """2 (gamma - gamma_bar) / ((1 - gamma)(1 - c_T))."""
    return 2.0 * (gamma - gamma_bar(cfg, gamma)) / ((1.0 - gamma) * (1.0 - cfg.c_T))


@dataclass
class VfaReport:
    lhs: np.ndarray
    rhs: np.ndarray
    max_violation: float
    in_hypothesis: bool
    epsilon: float
    n_clusters: int
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_violation <= SLACK_TOL

    @property
    def max_error(self) -> float:
        return float(self.lhs.max(initial=0.0))

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs.tolist(),
            "rhs": self.rhs.tolist(),
            "max_violation": self.max_violation,
            "in_hypothesis": self.in_hypothesis,
            "epsilon": self.epsilon,
            "n_clusters": self.n_clusters,
            "passed": self.passed,
            **self.details,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def vfa_bound_report(mdp: FiniteMdp, pi: PolicyTable, metric: DistanceMatrix, part: Partition,
                     cfg: BisimConfig, gamma: float | None = None, xi=None) -> VfaReport:
    """|V(s) - V~(Phi(s))| <= 2 eps / (c_R (1 - gamma_bar)) + discount gap term, per state."""
    _check_unit_rewards(mdp)
    gamma = mdp.discount if gamma is None else gamma
    agg = aggregate_mdp(mdp, pi, part, xi)
    r_pi, P_pi = policy_kernel(mdp, pi)
    V = evaluate_chain(r_pi, P_pi, gamma).values
    lhs = np.abs(V - agg.lifted_values(gamma))
    gb = gamma_bar(cfg, gamma)
    bound = 2.0 * part.epsilon / (cfg.c_R * (1.0 - gb)) + discount_gap_term(cfg, gamma)
    rhs = np.full_like(lhs, bound)
    in_hyp = part.max_intra_distance(metric) <= 2 * part.epsilon + 1e-12
    return VfaReport(lhs, rhs, float(np.max(lhs - rhs)), bool(in_hyp), part.epsilon, part.n_clusters,
                     {"c_R": cfg.c_R, "c_T": cfg.c_T, "gamma": gamma})


@dataclass(frozen=True)
class ModelErrorReport:
    e_phi: float
    e_r: float
    e_p: float
    a_p: float

    def to_dict(self) -> dict:
        return {"e_phi": self.e_phi, "e_r": self.e_r, "e_p": self.e_p, "a_p": self.a_p}


def order_constant(p: float) -> float:
    """a_p = 2^((p - 1) / p)."""
    return 2.0 ** ((p - 1.0) / p)


def model_errors(mdp: FiniteMdp, pi: PolicyTable, d_true: DistanceMatrix, p_hat, r_hat,
                 learned_dist: DistanceMatrix | None = None, d_hat: DistanceMatrix | None = None,
                 p: float = 1.0) -> ModelErrorReport:
    """Reward, transition and encoder errors of a model relative to the true chain.

    The transition error is the largest W_p(d_true) between true and model
    next-state distributions; the encoder error compares ``learned_dist``
    against the model's own metric ``d_hat``.
    """
    r_pi, P_pi = policy_kernel(mdp, pi)
    P_hat, r_vec = _policy_level(mdp, pi, p_hat, r_hat)
    e_r = float(np.max(np.abs(r_vec - r_pi)))
    if p == 1:
        e_p = max(w1_discrete(d_true.values, P_pi[s], P_hat[s])[0] for s in range(mdp.n_states))
    else:
        e_p = max(wp_discrete(d_true.values, p, P_pi[s], P_hat[s]) for s in range(mdp.n_states))
    e_phi = 0.0
    if learned_dist is not None:
        if d_hat is None:
            raise ValueError("the encoder error needs the model metric d_hat")
        e_phi = float(np.max(np.abs(learned_dist.values - d_hat.values)))
    return ModelErrorReport(e_phi, e_r, float(max(e_p, 0.0)), order_constant(p))


def distance_error_bound(cfg: BisimConfig, errs: ModelErrorReport, diam_true: float) -> float | None:
    """Bound on ||d_pi - d_hat||: needs 1 - c_T a_p > 0, else None."""
    k = 1.0 - cfg.c_T * errs.a_p
    if k <= 0:
        return None
    return (2 * cfg.c_R * errs.e_r + 2 * cfg.c_T * errs.e_p + cfg.c_T * (errs.a_p - 1.0) * diam_true) / k


def encoder_error_bound(cfg: BisimConfig, errs: ModelErrorReport) -> float:
    """Bound on ||d_pi - learned||_inf for p = 1."""
    return errs.e_phi + (2 * cfg.c_R * errs.e_r + 2 * cfg.c_T * errs.e_p) / (1.0 - cfg.c_T)


def learned_radius(part: Partition, learned_dist: DistanceMatrix) -> float:
    """Half the largest intra-cluster learned distance: the smallest valid eps-hat."""
    return 0.5 * part.max_intra_distance(learned_dist)


def model_error_vfa_report(mdp: FiniteMdp, pi: PolicyTable, cfg: BisimConfig, p_hat, r_hat,
                           learned_dist: DistanceMatrix, part: Partition, gamma: float | None = None,
                           xi=None, d_true: DistanceMatrix | None = None,
                           d_hat: DistanceMatrix | None = None) -> tuple[ModelErrorReport, VfaReport]:
    """Value error of a partition built on learned distances, against the model-error bound.

    For c_T >= gamma the bound is (2 eps + E_phi + 2 c_R E_r/(1-c_T) + 2 c_T E_P/(1-c_T)) / (c_R (1-gamma));
    otherwise 1 - gamma is replaced by 1 - gamma_bar and the discount gap term is added.
    """
    _check_unit_rewards(mdp)
    if cfg.p != 1:
        raise ValueError("the model-error value bound is stated for p = 1")
    gamma = mdp.discount if gamma is None else gamma
    if d_true is None:
        d_true, _ = metric_on_policy(mdp, pi, cfg)
    if d_hat is None:
        d_hat, _ = metric_approx_dynamics(mdp, p_hat, r_hat, pi, cfg)
    errs = model_errors(mdp, pi, d_true, p_hat, r_hat, learned_dist, d_hat)
    eps_hat = learned_radius(part, learned_dist)

    agg = aggregate_mdp(mdp, pi, part, xi)
    r_pi, P_pi = policy_kernel(mdp, pi)
    V = evaluate_chain(r_pi, P_pi, gamma).values
    lhs = np.abs(V - agg.lifted_values(gamma))
    gb = gamma_bar(cfg, gamma)
    inner = 2 * eps_hat + errs.e_phi + (2 * cfg.c_R * errs.e_r + 2 * cfg.c_T * errs.e_p) / (1.0 - cfg.c_T)
    bound = inner / (cfg.c_R * (1.0 - gb)) + discount_gap_term(cfg, gamma)
    rhs = np.full_like(lhs, bound)
    details = {"c_R": cfg.c_R, "c_T": cfg.c_T, "gamma": gamma, "form": "exact" if cfg.c_T >= gamma else "gamma_bar",
               **errs.to_dict()}
    report = VfaReport(lhs, rhs, float(np.max(lhs - rhs)), True, eps_hat, part.n_clusters, details)
    return errs, report

"""Randomized suites that check every value, diameter and dispersion bound.

Each check compares a computed left-hand side against its bound over random
finite MDPs and (c_R, c_T) weightings. A case whose weights fall outside a
bound's hypotheses is counted as ``out_of_hypothesis`` rather than failed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregation import (
    distance_error_bound, encoder_error_bound, epsilon_partition, model_error_vfa_report, model_errors,
    vfa_bound_report,
)
from .metrics import (
    BisimConfig, DistanceMatrix, dispersion_from_chain, mean_distance_ratio, metric_approx_dynamics, metric_on_policy,
    metric_policy_independent, value_bound_report, variance_bound,
)
from .mdp import evaluate_chain, generate_mdp, policy_kernel, random_policy, stationary_distribution

SLACK_TOL = 1e-9
RATIO_TOL = 1e-8

CHECKS = (
    "value_difference", "aggregation_value", "diameter_reward_range", "diameter_reward_spread",
    "order_p_value_difference", "discount_value_gap", "model_diameter", "distance_reward_ratio", "distance_variance",
    "distance_mean_variance", "order_p_model_error", "model_error", "encoder_error", "model_aggregation_value",
    "model_aggregation_value_any_cT",
)


@dataclass
class CheckResult:
    name: str
    cases: int = 0
    out_of_hypothesis: int = 0
    failures: int = 0
    max_violation: float = -math.inf
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def record(self, violation: float, tol: float = SLACK_TOL, **context) -> None:
        self.cases += 1
        if violation > self.max_violation:
            self.max_violation = float(violation)
            self.worst = context
        if violation > tol:
            self.failures += 1

    def skip(self) -> None:
        self.out_of_hypothesis += 1

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["passed"] = self.passed
        if self.cases == 0:
            doc["max_violation"] = None
        return doc


@dataclass(frozen=True)
class SuiteConfig:
    """Randomized bound-suite parameters.

    ``weights`` lists (c_R, c_T) pairs; ``perturbations`` scales the model
    errors injected for the model-error chain; ``epsilons`` are partition
    radii as fractions of each metric's diameter.
    """

    n_mdps: int = 100
    min_states: int = 2
    max_states: int = 12
    n_actions: int = 2
    gamma: float = 0.9
    weights: tuple = ((1.0, 0.9), (0.1, 0.9), (0.5, 0.5))
    epsilons: tuple = (0.05, 0.1, 0.2, 0.4)
    perturbations: tuple = (0.0, 0.01, 0.05, 0.1)
    tol: float = 1e-11
    perturb_metric: float = 0.0

    def __post_init__(self):
        if self.n_mdps < 1:
            raise ValueError("n_mdps must be positive")
        if not 1 <= self.min_states <= self.max_states:
            raise ValueError("need 1 <= min_states <= max_states")
        for c_R, c_T in self.weights:
            BisimConfig(c_R=c_R, c_T=c_T)


def _perturbed_kernel(rng, P: np.ndarray, delta: float) -> np.ndarray:
    noise = rng.dirichlet(np.ones(P.shape[1]), size=P.shape[0])
    return (1.0 - delta) * P + delta * noise


def _perturbed_rewards(rng, r: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(r + delta * rng.uniform(-1.0, 1.0, size=r.shape), 0.0, 1.0)


def _perturbed_distance(rng, d: np.ndarray, delta: float) -> DistanceMatrix:
    scale = delta * max(float(d.max(initial=0.0)), 1e-12)
    noise = rng.uniform(-scale, scale, size=d.shape)
    noise = 0.5 * (noise + noise.T)
    out = np.maximum(d + noise, 0.0)
    np.fill_diagonal(out, 0.0)
    return DistanceMatrix(out)


def _rerouted_kernel(rng, P: np.ndarray, delta: float) -> np.ndarray:
    """Point-mass kernel that sends each row elsewhere with probability delta."""
    n = P.shape[0]
    out = P.copy()
    for s in range(n):
        if rng.random() < delta:
            out[s] = 0.0
            out[s, rng.integers(n)] = 1.0
    return out


def _clean(rho: np.ndarray, floor: float = 1e-9) -> np.ndarray:
    """Zero out power-iteration residue on transient states."""
    rho = np.where(rho < floor, 0.0, rho)
    return rho / rho.sum()


class BoundSuite:
    def __init__(self, cfg: SuiteConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.results = {name: CheckResult(name) for name in CHECKS}

    def _bisim(self, c_R: float, c_T: float, p: float = 1.0) -> BisimConfig:
        return BisimConfig(c_R=c_R, c_T=c_T, p=p, tol=self.cfg.tol, accelerate=True)

    def run(self) -> dict:
        cfg = self.cfg
        seeds = np.random.SeedSequence(self.seed).spawn(cfg.n_mdps)
        for k, ss in enumerate(seeds):
            rng = np.random.default_rng(ss)
            n = int(rng.integers(cfg.min_states, cfg.max_states + 1))
            mdp = generate_mdp(rng, n, cfg.n_actions, gamma=cfg.gamma)
            pi = random_policy(rng, n, cfg.n_actions)
            det_mdp = generate_mdp(rng, n, cfg.n_actions, deterministic=True, gamma=cfg.gamma)
            det_pi = random_policy(rng, n, cfg.n_actions, deterministic=True)
            for c_R, c_T in cfg.weights:
                ctx = {"mdp": k, "n_states": n, "c_R": c_R, "c_T": c_T}
                self._stochastic_checks(rng, mdp, pi, c_R, c_T, ctx)
                self._deterministic_checks(rng, det_mdp, det_pi, c_R, c_T, ctx)
        return self.results

    # -- stochastic instance --------------------------------------------------

    def _stochastic_checks(self, rng, mdp, pi, c_R, c_T, ctx) -> None:
        cfg = self.cfg
        res = self.results
        bc = self._bisim(c_R, c_T)
        d, _ = metric_on_policy(mdp, pi, bc)
        r_pi, P_pi = policy_kernel(mdp, pi)
        reward_range = mdp.reward_range
        diam_bound = bc.diameter_bound(reward_range)

        d_checked = d
        if cfg.perturb_metric > 0:
            # deliberate corruption for harness self-tests; the diagonal is hit too
            d_checked = DistanceMatrix(d.values + cfg.perturb_metric * rng.normal(size=d.values.shape))
        rep = value_bound_report(mdp, pi, d_checked, bc)
        res["value_difference"].record(rep.max_violation, **ctx)

        for frac in cfg.epsilons:
            eps = frac * max(d.diameter, 1e-12)
            part = epsilon_partition(d, eps)
            vfa = vfa_bound_report(mdp, pi, d, part, bc)
            if vfa.in_hypothesis:
                res["aggregation_value"].record(vfa.max_violation, epsilon=eps, **ctx)
            else:
                res["aggregation_value"].skip()

        d_pi_ind, _ = metric_policy_independent(mdp, bc)
        for m in (d, d_pi_ind):
            res["diameter_reward_range"].record(m.diameter - diam_bound, **ctx)
        spread = float(np.ptp(r_pi))
        res["diameter_reward_spread"].record(d.diameter - c_R * spread / (1.0 - c_T), **ctx)

        g_lo = c_T if c_T < mdp.discount else 0.5 * mdp.discount
        V_lo = evaluate_chain(r_pi, P_pi, g_lo).values
        V_hi = evaluate_chain(r_pi, P_pi, mdp.discount).values
        gap = (mdp.discount - g_lo) / ((1.0 - g_lo) * (1.0 - mdp.discount))
        res["discount_value_gap"].record(float(np.max(np.abs(V_lo - V_hi))) - gap, **ctx)

        rho = _clean(stationary_distribution(mdp, pi, lazy=True))
        disp = dispersion_from_chain(r_pi, d.values, rho)
        res["distance_mean_variance"].record(disp.mu_bd - c_R * reward_range / (2.0 * (1.0 - c_T)), **ctx)
        var_bound = (c_R * reward_range) ** 2 / (4.0 * (1.0 - c_T) ** 2)
        res["distance_mean_variance"].record(disp.sigma_bd ** 2 - var_bound, **ctx)

        for delta in cfg.perturbations:
            p_hat = _perturbed_kernel(rng, P_pi, delta)
            r_hat = _perturbed_rewards(rng, r_pi, delta)
            d_hat, _ = metric_approx_dynamics(mdp, p_hat, r_hat, pi, bc)
            res["model_diameter"].record(d_hat.diameter - diam_bound, delta=delta, **ctx)
            learned = _perturbed_distance(rng, d_hat.values, delta)
            errs = model_errors(mdp, pi, d, p_hat, r_hat, learned, d_hat)
            res["model_error"].record(float(np.max(np.abs(d.values - d_hat.values)))
                                       - distance_error_bound(bc, errs, d.diameter), delta=delta, **ctx)
            res["encoder_error"].record(float(np.max(np.abs(d.values - learned.values)))
                                        - encoder_error_bound(bc, errs), delta=delta, **ctx)
            for frac in cfg.epsilons:
                part = epsilon_partition(learned, frac * max(learned.diameter, 1e-12))
                _, rep4 = model_error_vfa_report(mdp, pi, bc, p_hat, r_hat, learned, part, d_true=d, d_hat=d_hat)
                exact = rep4.details["form"] == "exact"
                name = "model_aggregation_value" if exact else "model_aggregation_value_any_cT"
                res[name].record(rep4.max_violation, delta=delta, **ctx)

    # -- deterministic instance -----------------------------------------------

    def _deterministic_checks(self, rng, mdp, pi, c_R, c_T, ctx) -> None:
        res = self.results
        r_pi, P_pi = policy_kernel(mdp, pi)
        rho = _clean(stationary_distribution(mdp, pi, lazy=True))
        for p in (1.0, 2.0):
            bc = self._bisim(c_R, c_T, p)
            d, _ = metric_on_policy(mdp, pi, bc)
            g = min(mdp.discount, c_T)
            V = evaluate_chain(r_pi, P_pi, g).values
            lhs = c_R * np.abs(V[:, None] - V[None, :])
            res["order_p_value_difference"].record(float(np.max(lhs - d.values)), p=p, gamma=g, **ctx)
            if p == 1.0:
                disp = dispersion_from_chain(r_pi, d.values, rho)
                if disp.mu_rd > 0:
                    res["distance_reward_ratio"].record(abs(disp.ratio - mean_distance_ratio(bc)), tol=RATIO_TOL, **ctx)
                else:
                    # the stationary mass sits where rewards agree: the ratio is undefined
                    res["distance_reward_ratio"].skip()
                bound = variance_bound(bc, disp)
                if bound is None:
                    res["distance_variance"].skip()
                else:
                    res["distance_variance"].record(disp.sigma_bd ** 2 - bound, **ctx)
                    if c_T == 0.5:
                        res["distance_variance"].record(disp.sigma_bd ** 2 - 4 * c_R ** 2 * disp.sigma_rd ** 2, **ctx)
            else:
                for delta in self.cfg.perturbations:
                    p_hat = _rerouted_kernel(rng, P_pi, delta)
                    r_hat = _perturbed_rewards(rng, r_pi, delta)
                    errs = model_errors(mdp, pi, d, p_hat, r_hat, p=p)
                    bound = distance_error_bound(bc, errs, d.diameter)
                    if bound is None:
                        res["order_p_model_error"].skip()
                        continue
                    d_hat, _ = metric_approx_dynamics(mdp, p_hat, r_hat, pi, bc)
                    res["order_p_model_error"].record(float(np.max(np.abs(d.values - d_hat.values))) - bound,
                                         delta=delta, p=p, **ctx)


def run_suite(cfg: SuiteConfig, seed: int = 0) -> dict:
    return BoundSuite(cfg, seed).run()


def write_reports(results: dict, out_dir) -> list:
    """One JSON document per check plus a ``checks.csv`` table; returns the written file names."""
    names = []
    for name in CHECKS:
        fname = f"check_{name}.json"
        with open(f"{out_dir}/{fname}", "w") as fh:
            json.dump(results[name].to_dict(), fh, indent=2, sort_keys=True)
        names.append(fname)
    with open(f"{out_dir}/checks.csv", "w") as fh:
        fh.write("check,cases,out_of_hypothesis,failures,max_violation,passed\n")
        for name in CHECKS:
            r = results[name]
            worst = repr(r.max_violation) if r.cases else ""
            fh.write(f"{name},{r.cases},{r.out_of_hypothesis},{r.failures},{worst},{int(r.passed)}\n")
    names.append("checks.csv")
    return names

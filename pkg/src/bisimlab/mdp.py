"""Tabular MDPs, policies, policy evaluation and stationary distributions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoConvergence, NonStochasticRow, RewardOutOfBounds, ShapeMismatch

ROW_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """A finite MDP <S, A, P, R, rho0> with discount and reward bounds.

    ``transition`` has shape (S, A, S), ``reward`` has shape (S, A).
    Build instances with :func:`build_mdp`, which validates the tables.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    discount: float = 0.9
    reward_bounds: tuple[float, float] = (0.0, 1.0)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def reward_range(self) -> float:
        lo, hi = self.reward_bounds
        return hi - lo

    def is_deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.transition.max(axis=-1), 1.0, atol=1e-12)))

    def with_discount(self, gamma: float) -> FiniteMdp:
        return FiniteMdp(self.transition, self.reward, self.initial_dist, float(gamma), self.reward_bounds)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.discount,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "rho0": self.initial_dist.tolist(),
            "reward_bounds": list(self.reward_bounds),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FiniteMdp:
        mdp = build_mdp(
            doc["transition"],
            doc["reward"],
            rho0=doc.get("rho0"),
            gamma=doc.get("gamma", 0.9),
            reward_bounds=doc.get("reward_bounds"),
        )
        if mdp.n_states != doc.get("n_states", mdp.n_states) or mdp.n_actions != doc.get("n_actions", mdp.n_actions):
            raise ShapeMismatch("n_states/n_actions disagree with the tables")
        return mdp


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Stochastic policy pi[s] = distribution over actions, shape (S, A)."""

    action_probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.action_probs, dtype=float)
        if probs.ndim != 2:
            raise ShapeMismatch(f"policy must be 2-D, got shape {probs.shape}")
        _check_stochastic(probs, "policy")
        object.__setattr__(self, "action_probs", _renormalize(probs))

    @property
    def n_states(self) -> int:
        return self.action_probs.shape[0]

    def is_deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.action_probs.max(axis=1), 1.0, atol=1e-12)))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> PolicyTable:
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> PolicyTable:
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class ValueFunction:
    values: np.ndarray
    discount: float
    residual: float = 0.0
    iterations: int = 0


def _check_stochastic(rows: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(rows)):
        raise NonStochasticRow(f"{what} has non-finite entries")
    if np.any(rows < 0):
        raise NonStochasticRow(f"{what} has negative entries")
    sums = rows.sum(axis=-1)
    bad = np.abs(sums - 1.0) > ROW_TOL
    if np.any(bad):
        idx = tuple(int(k) for k in np.argwhere(bad)[0])
        raise NonStochasticRow(f"{what} row {idx} sums to {sums[idx]!r}")


def _renormalize(rows: np.ndarray) -> np.ndarray:
    return rows / rows.sum(axis=-1, keepdims=True)


def build_mdp(transition, reward, rho0=None, gamma: float = 0.9, reward_bounds=None) -> FiniteMdp:
    """Validate raw tables and return a :class:`FiniteMdp`.

    Rows whose sums are within 1e-9 of one are renormalized; anything further
    off raises :class:`NonStochasticRow`. When ``reward_bounds`` is omitted it
    defaults to [0, 1] if the rewards fit, else to the observed min/max.
    """
    P = np.array(transition, dtype=float)
    R = np.array(reward, dtype=float)
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise ShapeMismatch(f"transition must have shape (S, A, S), got {P.shape}")
    if R.shape != P.shape[:2]:
        raise ShapeMismatch(f"reward must have shape {P.shape[:2]}, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise RewardOutOfBounds("rewards must be finite")
    _check_stochastic(P, "transition")
    P = _renormalize(P)

    n = P.shape[0]
    mu0 = np.full(n, 1.0 / n) if rho0 is None else np.array(rho0, dtype=float)
    if mu0.shape != (n,):
        raise ShapeMismatch(f"rho0 must have shape ({n},), got {mu0.shape}")
    _check_stochastic(mu0, "rho0")
    mu0 = _renormalize(mu0)

    if reward_bounds is None:
        lo, hi = float(R.min()), float(R.max())
        reward_bounds = (0.0, 1.0) if lo >= 0.0 and hi <= 1.0 else (lo, hi)
    lo, hi = (float(v) for v in reward_bounds)
    if lo > hi:
        raise RewardOutOfBounds(f"reward bounds reversed: {(lo, hi)}")
    if R.min() < lo - 1e-12 or R.max() > hi + 1e-12:
        raise RewardOutOfBounds(f"rewards span [{R.min()}, {R.max()}], outside bounds {(lo, hi)}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    return FiniteMdp(P, R, mu0, float(gamma), (lo, hi))


def save_mdp(mdp: FiniteMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict()))


def load_mdp(path) -> FiniteMdp:
    return FiniteMdp.from_dict(json.loads(Path(path).read_text()))


def policy_kernel(mdp: FiniteMdp, pi: PolicyTable) -> tuple[np.ndarray, np.ndarray]:
    """Return (r_pi, P_pi): rewards and transitions averaged under the policy."""
    probs = pi.action_probs
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeMismatch(f"policy shape {probs.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")
    r_pi = np.einsum("sa,sa->s", probs, mdp.reward)
    P_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    return r_pi, P_pi


def evaluate_chain(r: np.ndarray, P: np.ndarray, gamma: float, method: str = "direct",
                   tol: float = 1e-10, max_iter: int = 1_000_000) -> ValueFunction:
    """Solve V = r + gamma P V for a Markov reward process."""
    n = len(r)
    if method == "direct":
        V = np.linalg.solve(np.eye(n) - gamma * P, r)
        residual = float(np.max(np.abs(V - (r + gamma * P @ V)), initial=0.0))
        return ValueFunction(V, gamma, residual, 0)
    if method != "iterative":
        raise ValueError(f"unknown method {method!r}")
    V = np.zeros(n)
    for it in range(1, max_iter + 1):
        V_new = r + gamma * P @ V
        residual = float(np.max(np.abs(V_new - V), initial=0.0))
        V = V_new
        # sup-norm Bellman residual of V_new is at most gamma * residual
        if gamma * residual <= tol:
            final = float(np.max(np.abs(V - (r + gamma * P @ V)), initial=0.0))
            return ValueFunction(V, gamma, final, it)
    raise NoConvergence(f"policy evaluation did not reach tol={tol} in {max_iter} sweeps")


def policy_evaluation(mdp: FiniteMdp, pi: PolicyTable, gamma: float | None = None,
                      tol: float = 1e-10, method: str = "direct") -> ValueFunction:
    """Evaluate V^pi with ``method`` in {"direct", "iterative"}."""
    gamma = mdp.discount if gamma is None else gamma
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    r_pi, P_pi = policy_kernel(mdp, pi)
    return evaluate_chain(r_pi, P_pi, gamma, method=method, tol=tol)


def stationary_distribution(mdp: FiniteMdp, pi: PolicyTable, tol: float = 1e-10,
                            max_iter: int = 100_000, lazy: bool = False) -> np.ndarray:
    """Power iteration rho <- rho P_pi started from rho0.

    With ``lazy=True`` the iteration uses (I + P_pi) / 2, which has the same
    stationary distributions but is aperiodic, so deterministic cycles
    converge too. Raises :class:`NoConvergence` otherwise.
    """
    _, P_pi = policy_kernel(mdp, pi)
    K = 0.5 * (np.eye(mdp.n_states) + P_pi) if lazy else P_pi
    rho = mdp.initial_dist.copy()
    for _ in range(max_iter):
        nxt = rho @ K
        nxt /= nxt.sum()
        if np.abs(nxt @ P_pi - nxt).sum() <= tol:
            return nxt
        rho = nxt
    raise NoConvergence(f"power iteration did not converge in {max_iter} steps (periodic or slowly mixing chain)")


def generate_mdp(seed, n_states: int, n_actions: int, deterministic: bool = False,
                 reward_sparsity: float = 0.0, gamma: float = 0.9) -> FiniteMdp:
    """Random MDP with rewards in [0, 1].

    Stochastic rows are Dirichlet(1); deterministic rows point to a uniformly
    drawn successor. Exactly floor(sparsity * S * A) rewards are zero.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    if not 0.0 <= reward_sparsity <= 1.0:
        raise ValueError("reward_sparsity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    if deterministic:
        targets = rng.integers(n_states, size=(n_states, n_actions))
        P = np.zeros((n_states, n_actions, n_states))
        P[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], targets] = 1.0
    else:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    n_zero = int(np.floor(reward_sparsity * n_states * n_actions))
    zero_idx = rng.permutation(n_states * n_actions)[:n_zero]
    R.flat[zero_idx] = 0.0
    return build_mdp(P, R, gamma=gamma, reward_bounds=(0.0, 1.0))


def random_policy(seed, n_states: int, n_actions: int, deterministic: bool = False) -> PolicyTable:
    rng = np.random.default_rng(seed)
    if deterministic:
        return PolicyTable.deterministic(rng.integers(n_actions, size=n_states), n_actions)
    return PolicyTable(rng.dirichlet(np.ones(n_actions), size=n_states))

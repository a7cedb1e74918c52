"""Sparse-reward classic-control tasks in plain numpy, plus a grid discretizer.

Physics follows the canonical open-source CartPole-v0, MountainCarContinuous-v0
and Pendulum-v0 implementations. Rewards are sparse:

* sparse_cartpole: 1 when the resulting pole angle is within +-theta_rew,
  termination outside +-theta_term or |x| > 2.4, 200-step cap.
* mountain_car: -0.01 per step, +1 on reaching the goal (terminal), 999-step cap.
* sparse_pendulum: 1 when the angle from upright is within +-theta_rew, 200-step cap.

Each task exposes a discrete action set mapped to continuous values in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SteppedAfterDone
from .mdp import FiniteMdp, build_mdp

TASKS = ("sparse_cartpole", "mountain_car", "sparse_pendulum")

# CartPole-v0
GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = MASS_POLE * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
X_THRESHOLD = 2.4

# MountainCarContinuous-v0
MC_MIN_POS, MC_MAX_POS = -1.2, 0.6
MC_MAX_SPEED = 0.07
MC_GOAL = 0.45
MC_POWER = 0.0015
MC_STEP_PENALTY = -0.01
MC_GOAL_REWARD = 1.0

# Pendulum-v0
PD_MAX_SPEED = 8.0
PD_MAX_TORQUE = 2.0
PD_DT = 0.05
PD_G = 10.0
PD_M = 1.0
PD_L = 1.0

_DEFAULT_CAP = {"sparse_cartpole": 200, "mountain_car": 999, "sparse_pendulum": 200}
_DEFAULT_ACTIONS = {"sparse_cartpole": 2, "mountain_car": 5, "sparse_pendulum": 5}
_STATE_DIM = {"sparse_cartpole": 4, "mountain_car": 2, "sparse_pendulum": 3}


@dataclass(frozen=True)
class EnvConfig:
    """Task parameters.

    ``theta_rew_deg=None`` selects 1% of ``theta_term_deg`` for the cart-pole
    and 1 degree for the pendulum. ``dense=True`` gives the evaluation
    variant: +1 per surviving step on the cart-pole, theta_rew = theta_term
    elsewhere.
    """

    task: str = "sparse_cartpole"
    theta_term_deg: float = 12.0
    theta_rew_deg: float | None = None
    noise_dims_multiplier: int = 0
    noise_std: float = 1.0
    episode_cap: int | None = None
    n_actions: int | None = None
    dense: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.noise_dims_multiplier < 0:
            raise ValueError("noise_dims_multiplier must be >= 0")
        if self.reward_angle_deg <= 0:
            raise ValueError("theta_rew must be positive")
        if self.task == "sparse_cartpole" and self.reward_angle_deg > self.theta_term_deg:
            raise ValueError("need theta_rew <= theta_term")

    @property
    def reward_angle_deg(self) -> float:
        if self.theta_rew_deg is not None:
            return self.theta_rew_deg
        return 0.01 * self.theta_term_deg if self.task == "sparse_cartpole" else 1.0

    @property
    def cap(self) -> int:
        return self.episode_cap or _DEFAULT_CAP[self.task]

    @property
    def action_count(self) -> int:
        return self.n_actions or _DEFAULT_ACTIONS[self.task]

    @property
    def state_dim(self) -> int:
        return _STATE_DIM[self.task]

    @property
    def obs_dim(self) -> int:
        return self.state_dim * (1 + self.noise_dims_multiplier)

    @property
    def reward_bounds(self) -> tuple[float, float]:
        if self.task == "mountain_car":
            return (MC_STEP_PENALTY, MC_GOAL_REWARD)
        return (0.0, 1.0)

    def action_values(self) -> np.ndarray:
        if self.task == "sparse_cartpole" and self.action_count == 2:
            return np.array([-1.0, 1.0])
        return np.linspace(-1.0, 1.0, self.action_count)

    def evaluation(self) -> EnvConfig:
        return replace(self, dense=True)


@dataclass
class EnvState:
    physical: np.ndarray
    steps: int = 0
    done: bool = False


def angle_normalize(th: float) -> float:
    return ((th + math.pi) % (2 * math.pi)) - math.pi


# ---------------------------------------------------------------------------
# physics


def cartpole_physics(s: np.ndarray, a: float) -> np.ndarray:
    x, x_dot, theta, theta_dot = s
    force = FORCE_MAG * a
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin_t) / TOTAL_MASS
    theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos_t * cos_t / TOTAL_MASS))
    x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS
    return np.array([x + TAU * x_dot, x_dot + TAU * x_acc, theta + TAU * theta_dot, theta_dot + TAU * theta_acc])


def mountain_car_physics(s: np.ndarray, a: float) -> np.ndarray:
    pos, vel = s
    force = min(max(a, -1.0), 1.0)
    vel += force * MC_POWER - 0.0025 * math.cos(3 * pos)
    vel = min(max(vel, -MC_MAX_SPEED), MC_MAX_SPEED)
    pos += vel
    pos = min(max(pos, MC_MIN_POS), MC_MAX_POS)
    if pos == MC_MIN_POS and vel < 0:
        vel = 0.0
    return np.array([pos, vel])


def pendulum_physics(s: np.ndarray, a: float) -> np.ndarray:
    th, th_dot = s
    u = min(max(a * PD_MAX_TORQUE, -PD_MAX_TORQUE), PD_MAX_TORQUE)
    new_dot = th_dot + (3 * PD_G / (2 * PD_L) * math.sin(th) + 3.0 / (PD_M * PD_L ** 2) * u) * PD_DT
    new_dot = min(max(new_dot, -PD_MAX_SPEED), PD_MAX_SPEED)
    return np.array([th + new_dot * PD_DT, new_dot])


_PHYSICS = {"sparse_cartpole": cartpole_physics, "mountain_car": mountain_car_physics,
            "sparse_pendulum": pendulum_physics}


def terminal(cfg: EnvConfig, s: np.ndarray) -> bool:
    """Task-level termination (not the step cap)."""
    if cfg.task == "sparse_cartpole":
        limit = math.radians(cfg.theta_term_deg)
        return bool(s[0] < -X_THRESHOLD or s[0] > X_THRESHOLD or s[2] < -limit or s[2] > limit)
    if cfg.task == "mountain_car":
        return bool(s[0] >= MC_GOAL and s[1] >= 0)
    return False


def reward_of(cfg: EnvConfig, s: np.ndarray, done: bool) -> float:
    """Reward for arriving in physical state ``s``."""
    if cfg.task == "sparse_cartpole":
        if cfg.dense:
            return 0.0 if done else 1.0
        return 1.0 if abs(s[2]) <= math.radians(cfg.reward_angle_deg) and not done else 0.0
    if cfg.task == "mountain_car":
        return MC_GOAL_REWARD if terminal(cfg, s) else MC_STEP_PENALTY
    limit = cfg.theta_term_deg if cfg.dense else cfg.reward_angle_deg
    return 1.0 if abs(angle_normalize(s[0])) <= math.radians(limit) else 0.0


def observe(cfg: EnvConfig, s: np.ndarray) -> np.ndarray:
    if cfg.task == "sparse_pendulum":
        return np.array([math.cos(s[0]), math.sin(s[0]), s[1]])
    return np.asarray(s, dtype=float).copy()


def initial_state(cfg: EnvConfig, rng) -> np.ndarray:
    if cfg.task == "sparse_cartpole":
        return rng.uniform(-0.05, 0.05, size=4)
    if cfg.task == "mountain_car":
        return np.array([rng.uniform(-0.6, -0.4), 0.0])
    return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])


def env_step(state: EnvState, action: int, cfg: EnvConfig) -> tuple[EnvState, float, bool]:
    """Advance one tick with discrete action index ``action``."""
    if state.done:
        raise SteppedAfterDone("reset the environment before stepping again")
    value = float(cfg.action_values()[action])
    nxt = _PHYSICS[cfg.task](state.physical, value)
    term = terminal(cfg, nxt)
    reward = reward_of(cfg, nxt, term)
    steps = state.steps + 1
    done = term or steps >= cfg.cap
    return EnvState(nxt, steps, done), reward, done


def noisy_wrap(obs: np.ndarray, cfg: EnvConfig, rng) -> np.ndarray:
    """Append N_m * dim(obs) i.i.d. N(0, noise_std^2) distractor coordinates."""
    if cfg.noise_dims_multiplier == 0:
        return obs
    noise = rng.normal(0.0, cfg.noise_std, size=cfg.noise_dims_multiplier * len(obs))
    return np.concatenate([obs, noise])


class Env:
    """Stateful wrapper with its own seeded generator for resets and distractor noise."""

    def __init__(self, cfg: EnvConfig, seed=None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.state: EnvState | None = None
        self.terminated = False  # task termination, as opposed to hitting the cap

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    @property
    def n_actions(self) -> int:
        return self.cfg.action_count

    def reset(self) -> np.ndarray:
        self.state = EnvState(initial_state(self.cfg, self.rng))
        self.terminated = False
        return noisy_wrap(observe(self.cfg, self.state.physical), self.cfg, self.rng)

    def step(self, action: int):
        if self.state is None:
            raise SteppedAfterDone("call reset() first")
        self.state, reward, done = env_step(self.state, action, self.cfg)
        self.terminated = terminal(self.cfg, self.state.physical)
        obs = noisy_wrap(observe(self.cfg, self.state.physical), self.cfg, self.rng)
        return obs, reward, done


# ---------------------------------------------------------------------------
# discretization


@dataclass(frozen=True)
class GridSpec:
    """Per physical dimension: (low, high, cells)."""

    axes: tuple

    def centers(self) -> list[np.ndarray]:
        out = []
        for lo, hi, n in self.axes:
            width = (hi - lo) / n
            out.append(lo + width * (np.arange(n) + 0.5))
        return out

    @property
    def shape(self) -> tuple:
        return tuple(int(n) for _, _, n in self.axes)

    def snap(self, s: np.ndarray) -> int | None:
        """Flat index of the cell containing ``s``; None outside the grid."""
        idx = []
        for v, (lo, hi, n) in zip(s, self.axes):
            if v < lo or v > hi:
                return None
            k = min(int((v - lo) / (hi - lo) * n), n - 1)
            idx.append(k)
        return int(np.ravel_multi_index(idx, self.shape))


@dataclass(frozen=True, eq=False)
class DiscretizedTask:
    mdp: FiniteMdp
    centers: np.ndarray  # (n_cells, state_dim); the absorbing cell has no center
    absorbing: int | None
    left_grid: int  # transitions redirected to the absorbing cell because they left the grid
    terminal_hits: int
    features: np.ndarray = field(default=None)

    @property
    def n_cells(self) -> int:
        return len(self.centers)


def discretize_env(cfg: EnvConfig, grid: GridSpec, gamma: float = 0.99) -> DiscretizedTask:
    """Deterministic finite MDP over grid cells.

    Each cell's center is simulated one tick per action and snapped to its
    cell. Terminal successors and successors outside the grid go to one
    absorbing zero-reward cell appended at the end. Rewards are evaluated at
    the cell centers.
    """
    mesh = np.meshgrid(*grid.centers(), indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=1)
    n_cells = len(centers)
    actions = cfg.action_values()
    physics = _PHYSICS[cfg.task]
    succ = np.empty((n_cells, len(actions)), dtype=int)
    left, hits = 0, 0
    absorbing_needed = False
    for c in range(n_cells):
        for k, a in enumerate(actions):
            nxt = physics(centers[c], float(a))
            if cfg.task == "sparse_pendulum":
                nxt = np.array([angle_normalize(nxt[0]), nxt[1]])
            if terminal(cfg, nxt):
                succ[c, k] = -1
                hits += 1
                absorbing_needed = True
                continue
            cell = grid.snap(nxt)
            if cell is None:
                succ[c, k] = -1
                left += 1
                absorbing_needed = True
            else:
                succ[c, k] = cell
    n_states = n_cells + (1 if absorbing_needed else 0)
    absorbing = n_cells if absorbing_needed else None
    P = np.zeros((n_states, len(actions), n_states))
    for c in range(n_cells):
        for k in range(len(actions)):
            P[c, k, absorbing if succ[c, k] < 0 else succ[c, k]] = 1.0
    R = np.zeros((n_states, len(actions)))
    for c in range(n_cells):
        R[c, :] = reward_of(cfg, centers[c], terminal(cfg, centers[c]))
    if absorbing is not None:
        P[absorbing, :, absorbing] = 1.0
    lo, hi = cfg.reward_bounds
    mdp = build_mdp(P, R, gamma=gamma, reward_bounds=(lo, hi))
    feats = np.array([observe(cfg, c) for c in centers])
    return DiscretizedTask(mdp, centers, absorbing, left, hits, feats)

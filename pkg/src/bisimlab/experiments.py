"""Experiment drivers shared by the command line, the demos and the acceptance tests.

* :func:`ratio_study` learns a metric on a deterministic discretized task and
  tracks the mini-batch ratio mu_bd / mu_rd against c_R / (1 - c_T).
* :func:`collapse_study` trains on a zero-reward buffer, with and without
  the intrinsic reward, and tracks mu_bd relative to its starting value.
* :func:`train_agent` runs the full control loop for one variant and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .agent import Agent, AgentConfig, TrainResult
from .auxiliary import intrinsic_reward
from .envs import Env, EnvConfig, GridSpec, discretize_env
from .learning import MetricLearner, TrainConfig, TransitionBatch, pairwise_stats
from .mdp import PolicyTable, policy_kernel, stationary_distribution
from .metrics import BisimConfig, dispersion_from_chain, mean_distance_ratio, metric_on_policy


def repetition_seed(master: int, counter: int) -> int:
    """Seed of repetition ``counter``: a counter-based split of the master seed."""
    state = np.random.SeedSequence(master, spawn_key=(counter,)).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


# ---------------------------------------------------------------------------
# ratio study


DEFAULT_GRIDS = {
    "sparse_pendulum": ((-math.pi, math.pi, 21), (-8.0, 8.0, 21)),
    "sparse_cartpole": ((-2.4, 2.4, 5), (-2.0, 2.0, 5), (-0.21, 0.21, 5), (-2.0, 2.0, 5)),
    "mountain_car": ((-1.2, 0.6, 21), (-0.07, 0.07, 21)),
}


@dataclass(frozen=True)
class RatioStudyConfig:
    """Metric learning on the stationary transitions of a discretized task.

    ``action`` fixes a constant-action policy, which keeps the discretized
    chain deterministic.
    """

    env: EnvConfig = field(default_factory=lambda: EnvConfig(task="sparse_pendulum"))
    grid: tuple | None = None
    action: int = 0
    steps: int = 20_000
    log_every: int = 10
    latent_dim: int = 50
    encoder_hidden: tuple = (64, 64)
    model_hidden: tuple = (64,)


@dataclass
class RatioStudyResult:
    target: float
    exact_ratio: float
    steps: list
    mu_bd: list
    mu_rd: list
    ratios: list
    diagnostics: list

    def final_window(self, fraction: float = 0.1) -> list:
        k = max(1, int(math.ceil(len(self.ratios) * fraction)))
        return [r for r in self.ratios[-k:] if r is not None]

    @property
    def final_ratio(self) -> float:
        window = self.final_window()
        return float(np.mean(window)) if window else float("nan")

    @property
    def relative_gap(self) -> float:
        return abs(self.final_ratio - self.target) / self.target


class StationarySampler:
    """Transitions of a deterministic chain drawn i.i.d. from its stationary distribution."""

    def __init__(self, features: np.ndarray, reward: np.ndarray, successor: np.ndarray, rho: np.ndarray,
                 action_value: float):
        self.features = features
        self.reward = reward
        self.successor = successor
        self.rho = rho
        self.action_value = action_value

    def __len__(self) -> int:
        return len(self.rho)

    def sample(self, size: int, rng) -> TransitionBatch:
        idx = rng.choice(len(self.rho), size=size, p=self.rho)
        nxt = self.successor[idx]
        action = np.full((size, 1), self.action_value)
        return TransitionBatch(self.features[idx], action, self.reward[idx], self.features[nxt])


def _task_sampler(cfg: RatioStudyConfig, bisim: BisimConfig):
    grid = GridSpec(cfg.grid or DEFAULT_GRIDS[cfg.env.task])
    task = discretize_env(cfg.env, grid)
    mdp = task.mdp
    pi = PolicyTable.deterministic(np.full(mdp.n_states, cfg.action), mdp.n_actions)
    r_pi, P_pi = policy_kernel(mdp, pi)
    rho = stationary_distribution(mdp, pi, lazy=True)
    rho = np.where(rho < 1e-9, 0.0, rho)
    rho = rho / rho.sum()
    feats = task.features
    if task.absorbing is not None:
        # the absorbing cell gets its own constant observation
        feats = np.vstack([feats, np.full((1, feats.shape[1]), 10.0)])
    d, _ = metric_on_policy(mdp, pi, replace(bisim, tol=1e-12, accelerate=True))
    exact = dispersion_from_chain(r_pi, d.values, rho).ratio
    successor = P_pi.argmax(axis=1)
    value = float(cfg.env.action_values()[cfg.action])
    return StationarySampler(feats, r_pi, successor, rho, value), exact


def ratio_study(cfg: RatioStudyConfig, train: TrainConfig, seed: int = 0) -> RatioStudyResult:
    bisim = BisimConfig(c_R=train.c_R, c_T=train.c_T)
    sampler, exact = _task_sampler(cfg, bisim)
    rng = np.random.default_rng(seed)
    learner = MetricLearner(sampler.features.shape[1], 1, train, rng=rng, latent_dim=cfg.latent_dim,
                            encoder_hidden=cfg.encoder_hidden, model_hidden=cfg.model_hidden)
    steps, bd, rd, ratios, diags = [], [], [], [], []
    for step in range(1, cfg.steps + 1):
        log = step % cfg.log_every == 0
        rec = learner.update(sampler.sample(train.batch_size, rng), step, pairwise=log)
        if log:
            steps.append(step)
            bd.append(rec.mu_bd)
            rd.append(rec.mu_rd)
            ratios.append(rec.ratio)
            diags.append(rec)
    return RatioStudyResult(mean_distance_ratio(bisim), float("nan") if exact is None else exact, steps, bd, rd,
                            ratios, diags)


# ---------------------------------------------------------------------------
# collapse study


@dataclass(frozen=True)
class CollapseStudyConfig:
    env: EnvConfig = field(default_factory=lambda: EnvConfig(task="sparse_cartpole"))
    buffer_size: int = 5000
    steps: int = 10_000
    log_every: int = 100
    eval_batch: int = 256
    eta_r: float = 2.0
    r_max_i: float = 0.1
    latent_dim: int = 50
    encoder_hidden: tuple = (64, 64)
    model_hidden: tuple = (64,)


@dataclass
class CollapseResult:
    use_ir: bool
    steps: list
    mu_bd: list

    @property
    def initial(self) -> float:
        return self.mu_bd[0]

    @property
    def relative(self) -> np.ndarray:
        return np.asarray(self.mu_bd) / self.initial

    @property
    def min_relative(self) -> float:
        return float(self.relative.min())

    def collapsed_below(self, fraction: float) -> bool:
        return self.min_relative < fraction


class ArrayBuffer:
    """Fixed transitions with seeded uniform sampling."""

    def __init__(self, obs, action, reward, next_obs):
        self.obs, self.action, self.reward, self.next_obs = obs, action, reward, next_obs

    def __len__(self) -> int:
        return len(self.reward)

    def sample(self, size: int, rng) -> TransitionBatch:
        idx = rng.integers(0, len(self), size=size)
        return TransitionBatch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx])


def random_rollouts(env_cfg: EnvConfig, n: int, rng) -> ArrayBuffer:
    """``n`` transitions under a uniform random policy, with their extrinsic rewards."""
    env = Env(env_cfg, seed=int(rng.integers(2 ** 31)))
    values = env_cfg.action_values()
    obs_l, act_l, rew_l, nxt_l = [], [], [], []
    obs = env.reset()
    while len(rew_l) < n:
        k = int(rng.integers(len(values)))
        nxt, r, done = env.step(k)
        obs_l.append(obs)
        act_l.append([values[k]])
        rew_l.append(r)
        nxt_l.append(nxt)
        obs = env.reset() if done else nxt
    return ArrayBuffer(np.array(obs_l), np.array(act_l), np.array(rew_l), np.array(nxt_l))


def collapse_study(cfg: CollapseStudyConfig, train: TrainConfig, use_ir: bool, seed: int = 0) -> CollapseResult:
    """Metric learning on a buffer whose extrinsic rewards are all zero.

    The same fixed evaluation batch measures mu_bd at every log step.
    """
    rng = np.random.default_rng(seed)
    buf = random_rollouts(cfg.env, cfg.buffer_size, rng)
    buf.reward = np.zeros_like(buf.reward)
    eval_batch = buf.sample(cfg.eval_batch, rng)
    learner = MetricLearner(cfg.env.obs_dim, 1, train, rng=rng, latent_dim=cfg.latent_dim,
                            encoder_hidden=cfg.encoder_hidden, model_hidden=cfg.model_hidden)

    def measure() -> float:
        z = learner.encoder.encode(eval_batch.obs)
        return pairwise_stats(z, eval_batch.reward, train.q, train.huber_delta)[0]

    steps, bd = [0], [measure()]
    for step in range(1, cfg.steps + 1):
        batch = buf.sample(train.batch_size, rng)
        if use_ir:
            z = learner.encoder.encode(batch.obs)
            z_next = learner.encoder.encode(batch.next_obs)
            r_i = intrinsic_reward(z, batch.action, z_next, learner.dynamics, cfg.eta_r, cfg.r_max_i)
            batch = batch.with_reward(batch.reward + r_i)
        learner.update(batch, step, pairwise=False)
        if step % cfg.log_every == 0:
            steps.append(step)
            bd.append(measure())
    return CollapseResult(use_ir, steps, bd)


# ---------------------------------------------------------------------------
# control runs


def train_agent(env_cfg: EnvConfig, agent_cfg: AgentConfig, steps: int, seed: int,
                stop_on_divergence: bool = False) -> tuple[Agent, TrainResult]:
    agent = Agent(env_cfg, agent_cfg, seed=seed)
    return agent, agent.train(steps, stop_on_divergence=stop_on_divergence)

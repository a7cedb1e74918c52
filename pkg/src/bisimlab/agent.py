"""Value-based control on top of a learned bisimulation encoder.

The agent is epsilon-greedy Q-learning over a discrete action set. The
Q-network reads the encoder latent and its TD loss trains the encoder along
with the metric, forward, reward and (optionally) inverse-dynamics losses.
With the intrinsic reward enabled, the reward used by both the metric target
and the TD target is ``r_E + r_I``, where ``r_I`` is recomputed from the
current forward model each time a batch is drawn.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .auxiliary import InverseModel, intrinsic_reward, inverse_dynamics_loss
from .autograd import Tensor
from .envs import Env, EnvConfig
from .learning import DiagnosticsRecord, MetricLearner, TrainConfig, TransitionBatch, project_to_ball
from .nn import MLP, make_optimizer

EPISODE_COLUMNS = ("episode", "steps", "extrinsic_return", "intrinsic_return", "eval_return")

# (eta_r, eta_d) per task
AUX_WEIGHTS = {"sparse_cartpole": (2.0, 1.0), "sparse_pendulum": (0.1, 0.1), "mountain_car": (20.0, 20.0)}


@dataclass(frozen=True)
class AgentConfig:
    """Agent and auxiliary hyperparameters.

    ``eta_r``/``eta_d`` default to the per-task weights in :data:`AUX_WEIGHTS`
    when left as ``None``. With ``scale_q_input`` the Q-network reads the
    latent divided by the norm-ball radius, so its inputs stay O(1) however
    large c_R / (1 - c_T) is.
    """

    metric: TrainConfig = field(default_factory=TrainConfig)
    use_ir: bool = False
    use_id: bool = False
    eta_r: float | None = None
    eta_d: float | None = None
    r_max_i: float = 0.1
    gamma: float = 0.99
    q_hidden: tuple = (64,)
    q_lr: float = 1e-3
    inverse_hidden: tuple = (256, 128)
    latent_dim: int = 50
    encoder_hidden: tuple = (64, 64)
    model_hidden: tuple = (64,)
    dynamics_mode: str = "deterministic"
    buffer_capacity: int = 50_000
    warmup_steps: int = 1000
    train_every: int = 1
    target_tau: float = 0.01
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 10_000
    eval_every: int = 10_000
    eval_episodes: int = 10
    log_every: int = 100
    scale_q_input: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.train_every < 1 or self.log_every < 1:
            raise ValueError("train_every and log_every must be positive")
        if not 0.0 <= self.target_tau <= 1.0:
            raise ValueError("target_tau must lie in [0, 1]")
        if self.r_max_i < 0:
            raise ValueError("r_max_i must be nonnegative")

    def weights_for(self, task: str) -> tuple[float, float]:
        default_r, default_d = AUX_WEIGHTS.get(task, (1.0, 1.0))
        eta_r = default_r if self.eta_r is None else self.eta_r
        eta_d = default_d if self.eta_d is None else self.eta_d
        return eta_r, eta_d

    def epsilon(self, step: int) -> float:
        if self.epsilon_decay_steps <= 0:
            return self.epsilon_end
        frac = min(1.0, step / self.epsilon_decay_steps)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def to_dict(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, action_dim))
        self.action_index = np.zeros(capacity, dtype=int)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, obs, action_index: int, action_value, reward: float, next_obs, done: bool) -> None:
        k = self._next
        self.obs[k] = obs
        self.next_obs[k] = next_obs
        self.action[k] = action_value
        self.action_index[k] = action_index
        self.reward[k] = reward
        self.done[k] = float(done)
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, size: int, rng) -> TransitionBatch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=size)
        return TransitionBatch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx],
                               self.done[idx], self.action_index[idx])


def act(q_net: MLP, latent, epsilon: float, rng) -> int:
    """Epsilon-greedy action; ties in Q go to the lowest index."""
    n_actions = q_net.out_dim
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(n_actions))
    return int(np.argmax(q_net.predict(latent)[0]))


def td_targets(reward, next_q: np.ndarray, done, gamma: float) -> np.ndarray:
    """r + gamma * max_a' Q(s', a'), without bootstrap past termination."""
    return np.asarray(reward, dtype=float) + gamma * (1.0 - np.asarray(done, dtype=float)) * next_q.max(axis=1)


def q_loss(q_net: MLP, z: Tensor, action_index, target: np.ndarray) -> Tensor:
    """Half mean squared TD error of the taken actions."""
    q = q_net(z)
    onehot = np.zeros(q.shape)
    onehot[np.arange(len(onehot)), np.asarray(action_index, dtype=int)] = 1.0
    chosen = (q * onehot).sum(axis=1)
    resid = chosen - Tensor(target)
    return (resid * resid).mean() * 0.5


def q_update(q_net: MLP, optimizer, latent, action_index, reward, next_latent, done, gamma: float) -> float:
    """One TD(0) step on fixed latents; the target is held fixed."""
    target = td_targets(reward, q_net.predict(next_latent), done, gamma)
    loss = q_loss(q_net, Tensor(np.atleast_2d(latent)), action_index, target)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


def soft_update(target: MLP, source: MLP, tau: float) -> None:
    for t, s in zip(target.params, source.params):
        t.data = (1.0 - tau) * t.data + tau * s.data


@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    extrinsic_return: float
    intrinsic_return: float
    eval_return: float | None = None

    def row(self) -> list:
        return [self.episode, self.steps, repr(float(self.extrinsic_return)), repr(float(self.intrinsic_return)),
                "" if self.eval_return is None else repr(float(self.eval_return))]


def write_episodes(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODE_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


@dataclass
class TrainResult:
    episodes: list
    diagnostics: list
    eval_returns: list  # (step, mean return)
    steps: int
    diverged_at: int | None = None

    @property
    def final_eval(self) -> float | None:
        return self.eval_returns[-1][1] if self.eval_returns else None


class Agent:
    """Encoder + Q-network + auxiliaries for one environment."""

    def __init__(self, env_cfg: EnvConfig, cfg: AgentConfig, seed: int = 0):
        self.env_cfg = env_cfg
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        # the metric sees r_E + r_I, so the intrinsic cap widens the reward range
        lo, hi = env_cfg.reward_bounds
        metric = replace(cfg.metric, reward_bounds=(lo, hi + (cfg.r_max_i if cfg.use_ir else 0.0)))
        self.metric_cfg = metric
        self.learner = MetricLearner(env_cfg.obs_dim, 1, metric, rng=self.rng, latent_dim=cfg.latent_dim,
                                     encoder_hidden=cfg.encoder_hidden, model_hidden=cfg.model_hidden,
                                     dynamics_mode=cfg.dynamics_mode)
        self.action_values = env_cfg.action_values()
        self.q_net = MLP([cfg.latent_dim, *cfg.q_hidden, len(self.action_values)], rng=self.rng)
        q_opt = make_optimizer(metric.optimizer, self.q_net.params, cfg.q_lr)
        self.learner.extra_optimizers.append(q_opt)
        self.eta_r, self.eta_d = cfg.weights_for(env_cfg.task)
        self.inverse = None
        if cfg.use_id:
            self.inverse = InverseModel(cfg.latent_dim, 1, cfg.inverse_hidden, rng=self.rng)
            self.learner.extra_optimizers.append(make_optimizer(metric.optimizer, self.inverse.params,
                                                                metric.model_lr))
        self.target_encoder = self.learner.encoder.net.copy() if cfg.target_tau < 1.0 else None
        self.target_q = self.q_net.copy() if cfg.target_tau < 1.0 else None
        self.buffer = ReplayBuffer(cfg.buffer_capacity, env_cfg.obs_dim)
        self.q_scale = 1.0 / metric.projection_radius if cfg.scale_q_input else 1.0

    @property
    def encoder(self):
        return self.learner.encoder

    def encode(self, obs) -> np.ndarray:
        return self.encoder.encode(obs)

    def greedy(self, obs) -> int:
        return act(self.q_net, self.q_scale * self.encode(obs), 0.0, self.rng)

    def intrinsic(self, batch: TransitionBatch) -> np.ndarray:
        if not self.cfg.use_ir:
            return np.zeros(len(batch))
        z = self.encode(batch.obs)
        z_next = self.encode(batch.next_obs)
        return intrinsic_reward(z, batch.action, z_next, self.learner.dynamics, self.eta_r, self.cfg.r_max_i)

    def _next_q(self, next_obs) -> np.ndarray:
        if self.target_encoder is None:
            return self.q_net.predict(self.q_scale * self.encode(next_obs))
        z = self.target_encoder.predict(next_obs)
        if self.encoder.projection_radius is not None:
            z = project_to_ball(z, self.encoder.projection_radius, self.encoder.norm_order)
        return self.target_q.predict(self.q_scale * z)

    def _extra_loss(self, batch, z, z_next):
        target = td_targets(batch.reward, self._next_q(batch.next_obs), batch.done, self.cfg.gamma)
        loss = q_loss(self.q_net, z * self.q_scale, batch.action_index, target)
        info = {"loss_q": float(loss.data)}
        if self.inverse is not None:
            l_inv = inverse_dynamics_loss(z, z_next, batch.action, self.inverse, self.eta_d)
            info["loss_inv"] = float(l_inv.data)
            loss = loss + l_inv
        return loss, info

    def update(self, step: int, pairwise: bool = True) -> DiagnosticsRecord:
        batch = self.buffer.sample(self.metric_cfg.batch_size, self.rng)
        if self.cfg.use_ir:
            batch = batch.with_reward(batch.reward + self.intrinsic(batch))
        rec = self.learner.update(batch, step, extra_loss=self._extra_loss, pairwise=pairwise)
        if self.target_encoder is not None and not rec.diverged:
            soft_update(self.target_encoder, self.encoder.net, self.cfg.target_tau)
            soft_update(self.target_q, self.q_net, self.cfg.target_tau)
        return rec

    def evaluate(self, episodes: int, seed: int) -> float:
        """Mean greedy return on the dense-reward evaluation environment."""
        env = Env(self.env_cfg.evaluation(), seed=seed)
        totals = []
        for _ in range(episodes):
            obs = env.reset()
            total, done = 0.0, False
            while not done:
                obs, r, done = env.step(self.greedy(obs))
                total += r
            totals.append(total)
        return float(np.mean(totals))

    def train(self, total_steps: int, stop_on_divergence: bool = False) -> TrainResult:
        cfg = self.cfg
        env = Env(self.env_cfg, seed=int(self.rng.integers(2 ** 31)))
        eval_seed = int(self.rng.integers(2 ** 31))
        episodes, diags, evals = [], [], []
        diverged_at = None
        obs = env.reset()
        ep_ext, ep_int, ep_steps = 0.0, 0.0, 0
        last_eval = None
        for step in range(1, total_steps + 1):
            z = self.encode(obs)
            a_idx = act(self.q_net, self.q_scale * z, cfg.epsilon(step), self.rng)
            a_val = self.action_values[a_idx]
            next_obs, r_ext, done = env.step(a_idx)
            if cfg.use_ir:
                r_int = float(intrinsic_reward(z, [[a_val]], self.encode(next_obs), self.learner.dynamics,
                                               self.eta_r, cfg.r_max_i)[0])
            else:
                r_int = 0.0
            self.buffer.add(obs, a_idx, a_val, r_ext, next_obs, env.terminated)
            ep_ext += r_ext
            ep_int += r_int
            ep_steps += 1
            obs = next_obs

            if step > cfg.warmup_steps and step % cfg.train_every == 0 and len(self.buffer) >= 2:
                rec = self.update(step, pairwise=step % cfg.log_every == 0)
                if step % cfg.log_every == 0 or rec.diverged:
                    diags.append(rec)
                if rec.diverged and diverged_at is None:
                    diverged_at = step
                    if stop_on_divergence:
                        break
            if cfg.eval_every and step % cfg.eval_every == 0:
                last_eval = self.evaluate(cfg.eval_episodes, eval_seed + step)
                evals.append((step, last_eval))
            if done:
                episodes.append(EpisodeRecord(len(episodes), ep_steps, ep_ext, ep_int, last_eval))
                obs = env.reset()
                ep_ext, ep_int, ep_steps = 0.0, 0.0, 0
        return TrainResult(episodes, diags, evals, step if total_steps else 0, diverged_at)

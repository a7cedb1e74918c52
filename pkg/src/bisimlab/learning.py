"""Learned bisimulation representations.

An encoder maps observations to latents; a latent dynamics model predicts
the next latent; a reward model predicts the reward. The metric loss matches
latent distances to ``c_R * reward gap + c_T * W2(predicted next latents)``
on pairs formed inside a batch, with the target held fixed (no gradient) by
default. Optional radial projection keeps latents and predicted means inside
the ball of radius ``c_R (R_max - R_min) / (2 (1 - c_T))``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autograd import Tensor, concat, where
from .errors import DimensionMismatch, NonFiniteInput, NonFiniteOutput
from .nn import MLP, make_optimizer

DIAGNOSTIC_COLUMNS = ("step", "loss_dbc", "loss_fwd", "loss_rew", "loss_inv", "mean_norm", "max_norm",
                      "mu_bd", "mu_rd", "ratio", "diverged")


@dataclass(frozen=True)
class TrainConfig:
    """Metric-learning hyperparameters.

    Attributes:
        c_R, c_T: reward and transition weights of the target.
        q: order of the latent distance ``||phi_i - phi_j||_q``.
        q_transition: order inside the transition term; ``None`` matches ``q``.
        lr: encoder learning rate; model_lr: dynamics/reward/inverse rate.
        stop_gradient_target: hold the regression target fixed.
        projection_enabled: project latents and predicted means onto the ball.
        projection_order: norm of the ball (the L2 ball by default).
        huber_delta: when set, distances are coordinate-summed Huber terms.
    """

    c_R: float = 1.0
    c_T: float = 0.5
    q: int = 2
    q_transition: int | None = None
    lr: float = 1e-3
    model_lr: float = 1e-3
    batch_size: int = 128
    stop_gradient_target: bool = True
    projection_enabled: bool = False
    projection_order: int = 2
    huber_delta: float | None = None
    reward_bounds: tuple = (0.0, 1.0)
    optimizer: str = "adam"
    divergence_norm: float = 1e6

    def __post_init__(self):
        if self.lr < 0 or self.model_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0.0 <= self.c_T < 1.0:
            raise ValueError("c_T must lie in [0, 1)")
        if self.q not in (1, 2) or (self.q_transition not in (None, 1, 2)):
            raise ValueError("distance orders must be 1 or 2")

    @property
    def transition_order(self) -> int:
        return self.q if self.q_transition is None else self.q_transition

    @property
    def projection_radius(self) -> float:
        lo, hi = self.reward_bounds
        return self.c_R * (hi - lo) / (2.0 * (1.0 - self.c_T))

    @property
    def ratio_target(self) -> float:
        return self.c_R / (1.0 - self.c_T)


# ---------------------------------------------------------------------------
# projection


def project_to_ball(x, radius: float, q: int = 2) -> np.ndarray:
    """Radially scale rows of ``x`` whose q-norm exceeds ``radius`` onto the sphere."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("cannot project non-finite vectors")
    if q == 2:
        norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    elif q == 1:
        norms = np.sum(np.abs(x), axis=-1, keepdims=True)
    else:
        raise ValueError(f"unsupported ball order {q}")
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return x * scale


def project_tensor(x: Tensor, radius: float, q: int = 2) -> Tensor:
    norms = x.norm(q, axis=-1, keepdims=True)
    outside = norms.data > radius
    # inside the ball the divisor is the constant radius, so no gradient flows through the norm
    safe = where(outside, norms, radius)
    return x * (radius / safe)


# ---------------------------------------------------------------------------
# models


class EncoderModel:
    """phi: observation -> R^n, optionally projected onto the ball."""

    def __init__(self, obs_dim: int, latent_dim: int = 50, hidden=(64, 64), rng=None,
                 projection_radius: float | None = None, norm_order: int = 2, activation: str = "elu"):
        self.net = MLP([obs_dim, *hidden, latent_dim], rng=rng, activation=activation)
        self.projection_radius = projection_radius
        self.norm_order = norm_order

    @property
    def params(self):
        return self.net.params

    @property
    def latent_dim(self) -> int:
        return self.net.out_dim

    @property
    def obs_dim(self) -> int:
        return self.net.in_dim

    def __call__(self, obs) -> Tensor:
        z = self.net(obs)
        if self.projection_radius is not None:
            z = project_tensor(z, self.projection_radius, self.norm_order)
        return z

    def encode(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.obs_dim:
            raise DimensionMismatch(f"expected observation width {self.obs_dim}, got {obs.shape[-1]}")
        z = self.net.predict(obs)
        if not np.all(np.isfinite(z)):
            raise NonFiniteOutput("encoder produced non-finite latents")
        if self.projection_radius is not None:
            z = project_to_ball(z, self.projection_radius, self.norm_order)
        return z


def encode(model: EncoderModel, obs) -> np.ndarray:
    return model.encode(obs)


class LatentDynamics:
    """(latent, action) -> predicted next latent mean (and diagonal scale in gaussian mode)."""

    SIGMA_MIN = 1e-4
    SIGMA_MAX = 10.0

    def __init__(self, latent_dim: int, action_dim: int = 1, hidden=(64,), rng=None, mode: str = "deterministic",
                 projection_radius: float | None = None, norm_order: int = 2):
        if mode not in ("deterministic", "gaussian"):
            raise ValueError(f"unknown dynamics mode {mode!r}")
        self.mode = mode
        self.latent_dim = latent_dim
        self.action_dim = action_dim
        out = latent_dim if mode == "deterministic" else 2 * latent_dim
        self.net = MLP([latent_dim + action_dim, *hidden, out], rng=rng)
        self.projection_radius = projection_radius
        self.norm_order = norm_order

    @property
    def params(self):
        return self.net.params

    def _split(self, raw):
        n = self.latent_dim
        if self.mode == "deterministic":
            return raw, None
        return raw[:, :n], raw[:, n:]

    def __call__(self, z: Tensor, action) -> tuple[Tensor, Tensor | None]:
        out = self.net(concat([z, _as_2d(action)], axis=1))
        mu, raw_s = self._split(out)
        if self.projection_radius is not None:
            mu = project_tensor(mu, self.projection_radius, self.norm_order)
        sigma = None
        if raw_s is not None:
            sigma = raw_s.sigmoid() * (self.SIGMA_MAX - self.SIGMA_MIN) + self.SIGMA_MIN
        return mu, sigma

    def predict(self, z, action) -> tuple[np.ndarray, np.ndarray | None]:
        out = self.net.predict(np.concatenate([np.atleast_2d(z), _as_2d(action).data], axis=1))
        mu, raw_s = self._split(out)
        if self.projection_radius is not None:
            mu = project_to_ball(mu, self.projection_radius, self.norm_order)
        sigma = None
        if raw_s is not None:
            sigma = 1.0 / (1.0 + np.exp(-raw_s)) * (self.SIGMA_MAX - self.SIGMA_MIN) + self.SIGMA_MIN
        return mu, sigma


class RewardModel:
    """latent -> predicted reward."""

    def __init__(self, latent_dim: int, hidden=(64,), rng=None):
        self.net = MLP([latent_dim, *hidden, 1], rng=rng)

    @property
    def params(self):
        return self.net.params

    def __call__(self, z: Tensor) -> Tensor:
        return self.net(z).reshape(-1)

    def predict(self, z) -> np.ndarray:
        return self.net.predict(z).reshape(-1)


def _as_2d(a) -> Tensor:
    data = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    return Tensor(data)


# ---------------------------------------------------------------------------
# batches and losses


@dataclass
class TransitionBatch:
    obs: np.ndarray
    action: np.ndarray  # continuous action values, shape (B, n_a)
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray | None = None
    action_index: np.ndarray | None = None

    def __post_init__(self):
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=float))
        self.next_obs = np.atleast_2d(np.asarray(self.next_obs, dtype=float))
        self.reward = np.asarray(self.reward, dtype=float).reshape(-1)
        a = np.asarray(self.action, dtype=float)
        self.action = a.reshape(len(self.reward), -1)
        if self.done is None:
            self.done = np.zeros(len(self.reward))

    def __len__(self) -> int:
        return len(self.reward)

    def with_reward(self, reward) -> TransitionBatch:
        return TransitionBatch(self.obs, self.action, reward, self.next_obs, self.done, self.action_index)


def pair_partner(batch_size: int) -> np.ndarray:
    """Partner index of each sample: the next one, cyclically."""
    return np.roll(np.arange(batch_size), -1)


def latent_distance(a: Tensor, b: Tensor, q: int, huber_delta: float | None) -> Tensor:
    diff = a - b
    if huber_delta is not None:
        return diff.huber(huber_delta).sum(axis=1)
    return diff.norm(q, axis=1)


def _latent_distance_np(diff: np.ndarray, q: int, huber_delta: float | None) -> np.ndarray:
    if huber_delta is not None:
        ad = np.abs(diff)
        return np.where(ad <= huber_delta, 0.5 * diff ** 2, huber_delta * (ad - 0.5 * huber_delta)).sum(axis=1)
    if q == 2:
        return np.sqrt(np.sum(diff * diff, axis=1))
    return np.sum(np.abs(diff), axis=1)


def _reward_gap(r: np.ndarray, huber_delta: float | None) -> np.ndarray:
    diff = r - r[pair_partner(len(r))]
    if huber_delta is not None:
        ad = np.abs(diff)
        return np.where(ad <= huber_delta, 0.5 * diff ** 2, huber_delta * (ad - 0.5 * huber_delta))
    return np.abs(diff)


def transition_distance(mu: Tensor, sigma: Tensor | None, q: int, huber_delta: float | None) -> Tensor:
    """W2 between predicted next-latent distributions of each sample and its partner.

    Deterministic predictions are point masses, so this is the latent distance
    of the means; diagonal Gaussians add the scale difference in quadrature.
    """
    perm = pair_partner(len(mu))
    if sigma is None:
        return latent_distance(mu, mu[perm], q, huber_delta)
    stacked = concat([mu, sigma], axis=1)
    if huber_delta is not None:
        return latent_distance(stacked, stacked[perm], q, huber_delta)
    return latent_distance(stacked, stacked[perm], 2, None)


def dbc_loss(batch: TransitionBatch, enc: EncoderModel, dyn: LatentDynamics, cfg: TrainConfig,
             z: Tensor | None = None) -> Tensor:
    """0.5 * mean over pairs of (d_phi(i, j) - c_R * reward gap - c_T * W(P_hat_i, P_hat_j))^2."""
    if z is None:
        z = enc(batch.obs)
    perm = pair_partner(len(batch))
    d_hat = latent_distance(z, z[perm], cfg.q, cfg.huber_delta)
    gap = cfg.c_R * _reward_gap(batch.reward, cfg.huber_delta)
    if cfg.stop_gradient_target:
        mu, sigma = dyn.predict(z.data, batch.action)
        if sigma is not None:
            mu = np.concatenate([mu, sigma], axis=1)
        q_t = cfg.transition_order if sigma is None or cfg.huber_delta is not None else 2
        w = _latent_distance_np(mu - mu[perm], q_t, cfg.huber_delta)
        target = Tensor(gap + cfg.c_T * w)
    else:
        mu, sigma = dyn(z, batch.action)
        target = transition_distance(mu, sigma, cfg.transition_order, cfg.huber_delta) * cfg.c_T + gap
    resid = d_hat - target
    return (resid * resid).mean() * 0.5


def forward_model_loss(batch: TransitionBatch, enc: EncoderModel, dyn: LatentDynamics,
                       z: Tensor | None = None, z_next: np.ndarray | None = None) -> Tensor:
    """MSE (deterministic) or diagonal-Gaussian NLL of the next latent, target held fixed."""
    if z is None:
        z = enc(batch.obs)
    if z_next is None:
        z_next = enc.encode(batch.next_obs)
    mu, sigma = dyn(z, batch.action)
    diff = mu - Tensor(z_next)
    if sigma is None:
        return (diff * diff).mean()
    scaled = diff / sigma
    return (scaled * scaled * 0.5 + sigma.log()).mean()


def reward_model_loss(batch: TransitionBatch, enc: EncoderModel, rew: RewardModel, z: Tensor | None = None) -> Tensor:
    if z is None:
        z = enc(batch.obs)
    diff = rew(z) - Tensor(batch.reward)
    return (diff * diff).mean()


def gradients(loss: Tensor, params) -> list[np.ndarray]:
    """Backpropagate ``loss`` and return copies of the parameter gradients (zeros where unused)."""
    for p in params:
        p.grad = None
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class DiagnosticsRecord:
    step: int
    loss_dbc: float = float("nan")
    loss_fwd: float = float("nan")
    loss_rew: float = float("nan")
    loss_inv: float = float("nan")
    mean_norm: float = float("nan")
    max_norm: float = float("nan")
    mu_bd: float = float("nan")
    mu_rd: float = float("nan")
    ratio: float | None = None
    diverged: bool = False

    def row(self) -> list:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out.append("")
            elif isinstance(v, bool):
                out.append(int(v))
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(v)
        return out


def write_diagnostics(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DIAGNOSTIC_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


def pairwise_stats(z: np.ndarray, reward: np.ndarray, q: int = 2, huber_delta: float | None = None):
    """Mean latent distance and mean reward gap over all ordered pairs i != j."""
    n = len(reward)
    if n < 2:
        return 0.0, 0.0
    if q == 2 and huber_delta is None:
        # Gram form on centred latents: O(n^2) memory instead of O(n^2 * dim)
        zc = z - z.mean(axis=0)
        sq = np.sum(zc * zc, axis=1)
        d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * (zc @ zc.T), 0.0))
    else:
        diff = z[:, None, :] - z[None, :, :]
        d = _latent_distance_np(diff.reshape(n * n, -1), q, huber_delta).reshape(n, n)
    np.fill_diagonal(d, 0.0)
    rd = np.abs(reward[:, None] - reward[None, :])
    pairs = n * (n - 1)
    return float(d.sum() / pairs), float(rd.sum() / pairs)


def batch_diagnostics(batch: TransitionBatch, enc: EncoderModel, cfg: TrainConfig, step: int = 0,
                      z: np.ndarray | None = None, pairwise: bool = True) -> DiagnosticsRecord:
    """Norm statistics, plus the pairwise mu_bd / mu_rd / ratio unless ``pairwise`` is off."""
    if z is None:
        z = enc.net.predict(batch.obs)
        if enc.projection_radius is not None and np.all(np.isfinite(z)):
            z = project_to_ball(z, enc.projection_radius, enc.norm_order)
    if cfg.projection_order == 1:
        norms = np.sum(np.abs(z), axis=1)
    else:
        norms = np.sqrt(np.sum(z * z, axis=1))
    rec = DiagnosticsRecord(step=step, mean_norm=float(norms.mean()), max_norm=float(norms.max()))
    if pairwise:
        rec.mu_bd, rec.mu_rd = pairwise_stats(z, batch.reward, cfg.q, cfg.huber_delta)
        rec.ratio = rec.mu_bd / rec.mu_rd if rec.mu_rd > 0 else None
    if not np.all(np.isfinite(norms)) or rec.max_norm > cfg.divergence_norm:
        rec.diverged = True
    return rec


# ---------------------------------------------------------------------------
# training


class MetricLearner:
    """Encoder, latent dynamics and reward model trained jointly on the metric objective.

    Auxiliary terms (inverse dynamics, Q-learning) are added by passing
    ``extra_loss``: a callable ``(batch, z, z_next) -> (Tensor, dict)``.
    """

    def __init__(self, obs_dim: int, action_dim: int, cfg: TrainConfig, rng=None, latent_dim: int = 50,
                 encoder_hidden=(64, 64), model_hidden=(64,), dynamics_mode: str = "deterministic",
                 dynamics: LatentDynamics | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        radius = cfg.projection_radius if cfg.projection_enabled else None
        self.encoder = EncoderModel(obs_dim, latent_dim, encoder_hidden, rng=rng, projection_radius=radius,
                                    norm_order=cfg.projection_order)
        self.dynamics = dynamics or LatentDynamics(latent_dim, action_dim, model_hidden, rng=rng, mode=dynamics_mode,
                                                   projection_radius=radius, norm_order=cfg.projection_order)
        self.reward_model = RewardModel(latent_dim, model_hidden, rng=rng)
        self.enc_opt = make_optimizer(cfg.optimizer, self.encoder.params, cfg.lr)
        self.model_opt = make_optimizer(cfg.optimizer, self.dynamics.params + self.reward_model.params, cfg.model_lr)
        self.extra_optimizers = []

    @property
    def optimizers(self):
        return [self.enc_opt, self.model_opt, *self.extra_optimizers]

    def update(self, batch: TransitionBatch, step: int, extra_loss=None, pairwise: bool = True) -> DiagnosticsRecord:
        cfg = self.cfg
        n = len(batch)
        both = self.encoder(np.concatenate([batch.obs, batch.next_obs], axis=0))
        z = both[:n]
        z_next = both[n:]
        l_dbc = dbc_loss(batch, self.encoder, self.dynamics, cfg, z=z)
        l_fwd = forward_model_loss(batch, self.encoder, self.dynamics, z=z, z_next=z_next.data)
        l_rew = reward_model_loss(batch, self.encoder, self.reward_model, z=z)
        total = l_dbc + l_fwd + l_rew
        l_inv = float("nan")
        if extra_loss is not None:
            l_extra, info = extra_loss(batch, z, z_next)
            total = total + l_extra
            l_inv = info.get("loss_inv", float("nan"))

        rec = batch_diagnostics(batch, self.encoder, cfg, step, z=z.data, pairwise=pairwise)
        rec.loss_dbc, rec.loss_fwd, rec.loss_rew, rec.loss_inv = (
            float(l_dbc.data), float(l_fwd.data), float(l_rew.data), float(l_inv))
        if not math.isfinite(float(total.data)):
            # explosion is an observable: record it and leave the parameters untouched
            rec.diverged = True
            return rec
        for opt in self.optimizers:
            opt.zero_grad()
        total.backward()
        for opt in self.optimizers:
            opt.step()
        return rec


def train_step(learner: MetricLearner, buffer, rng, step: int, batch_size: int | None = None,
               extra_loss=None) -> DiagnosticsRecord:
    """Sample a batch from ``buffer`` and take one joint gradient step."""
    size = batch_size or learner.cfg.batch_size
    if len(buffer) < size:
        raise ValueError(f"buffer holds {len(buffer)} transitions, need {size}")
    return learner.update(buffer.sample(size, rng), step, extra_loss)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

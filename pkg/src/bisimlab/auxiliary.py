"""Anti-collapse auxiliaries: intrinsic reward from forward-model error and inverse dynamics."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, concat
from .errors import DimensionMismatch, NonFiniteInput
from .nn import MLP


def intrinsic_reward(latent_t, action_t, latent_next, dyn, eta_r: float, r_max_i: float = 0.1) -> np.ndarray:
    """min(r_max_i, eta_r * ||mu_hat(z_t, a_t) - z_next||^2 / (2 n)) per row.

    ``latent_next`` is a plain array, so no gradient reaches the target.
    """
    z = np.atleast_2d(np.asarray(latent_t, dtype=float))
    z_next = np.atleast_2d(np.asarray(latent_next, dtype=float))
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(z_next))):
        raise NonFiniteInput("intrinsic reward needs finite latents")
    if z.shape != z_next.shape:
        raise DimensionMismatch(f"latent shapes differ: {z.shape} vs {z_next.shape}")
    if eta_r == 0.0:
        return np.zeros(len(z))
    mu, _ = dyn.predict(z, action_t)
    return intrinsic_from_error(np.sum((mu - z_next) ** 2, axis=1), z.shape[1], eta_r, r_max_i)


def intrinsic_from_error(sq_error, n: int, eta_r: float, r_max_i: float = 0.1) -> np.ndarray:
    raw = eta_r * np.asarray(sq_error, dtype=float) / (2.0 * n)
    return np.minimum(r_max_i, raw)


class InverseModel:
    """g_I: (z_t, z_next) -> predicted action in [-1, 1]^n_a."""

    def __init__(self, latent_dim: int, action_dim: int = 1, hidden=(256, 128), rng=None):
        self.net = MLP([2 * latent_dim, *hidden, action_dim], rng=rng, activation="elu", out_activation="tanh")
        self.action_dim = action_dim

    @property
    def params(self):
        return self.net.params

    def __call__(self, z: Tensor, z_next: Tensor) -> Tensor:
        return self.net(concat([z, z_next], axis=1))

    def predict(self, z, z_next) -> np.ndarray:
        return self.net.predict(np.concatenate([np.atleast_2d(z), np.atleast_2d(z_next)], axis=1))


def inverse_dynamics_loss(latent_t, latent_next, action_t, inv: InverseModel, eta_d: float) -> Tensor:
    """eta_d * ||a - a_hat||_1 / n_a, averaged over the batch; gradients reach both latents."""
    z = latent_t if isinstance(latent_t, Tensor) else Tensor(np.atleast_2d(latent_t))
    zn = latent_next if isinstance(latent_next, Tensor) else Tensor(np.atleast_2d(latent_next))
    a = np.asarray(action_t, dtype=float).reshape(len(z), -1)
    if a.shape[1] != inv.action_dim:
        raise DimensionMismatch(f"expected {inv.action_dim} action dims, got {a.shape[1]}")
    a_hat = inv(z, zn)
    per_sample = (a_hat - Tensor(a)).abs().sum(axis=1) * (1.0 / inv.action_dim)
    return per_sample.mean() * eta_d

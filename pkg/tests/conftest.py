"""Shared fixtures and helpers for the bisimlab test suite."""

import numpy as np
import pytest
from hypothesis import settings

from bisimlab.mdp import build_mdp

settings.register_profile("bisimlab", max_examples=50, deadline=None)
settings.load_profile("bisimlab")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def self_loop_mdp(rewards, gamma=0.9):
    """One action; every state loops onto itself with the given reward."""
    n = len(rewards)
    P = np.eye(n)[:, None, :]
    R = np.asarray(rewards, dtype=float)[:, None]
    return build_mdp(P, R, gamma=gamma)


def chain_mdp(successors, rewards, gamma=0.9):
    """One action; deterministic successor per state."""
    n = len(successors)
    P = np.zeros((n, 1, n))
    P[np.arange(n), 0, successors] = 1.0
    return build_mdp(P, np.asarray(rewards, dtype=float)[:, None], gamma=gamma)


def central_difference(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """Norm-wise relative error; zero when both gradients vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(loss_fn, params, h=1e-6):
    """Largest relative error between backprop and central differences over ``params``.

    ``loss_fn`` rebuilds the graph from the current parameter arrays and
    returns a scalar Tensor.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        numeric = central_difference(lambda: float(loss_fn().data), p.data, h)
        worst = max(worst, relative_error(g, numeric))
    return worst

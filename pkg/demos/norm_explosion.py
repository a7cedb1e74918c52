"""Embedding norms of dbc-plain against the projected (normed) learner.

Trains both variants on the sparse cart-pole for a few thousand steps and
prints the largest mean latent norm next to the norm-ball radius.

    python demos/norm_explosion.py [steps]
"""

import sys

from bisimlab.agent import Agent
from bisimlab.envs import EnvConfig
from bisimlab.harness import agent_config, build_config


def run(preset, steps, seed=0):
    doc = build_config({"agent": {"train_every": 2, "eval_every": 0, "log_every": 500}}, preset=preset)
    agent = Agent(EnvConfig(task="sparse_cartpole"), agent_config(doc), seed=seed)
    result = agent.train(steps)
    peak = max(rec.mean_norm for rec in result.diagnostics)
    return peak, agent.metric_cfg.projection_radius, result.diagnostics


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 10_000
    for preset in ("dbc-plain", "normed"):
        peak, radius, diags = run(preset, steps)
        trail = " ".join(f"{rec.mean_norm:.3g}" for rec in diags[:: max(1, len(diags) // 8)])
        print(f"{preset:9s} radius {radius:.1f}  peak mean norm {peak:.4g}  trajectory: {trail}")


if __name__ == "__main__":
    main()

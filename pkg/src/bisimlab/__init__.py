"""Exact and learned bisimulation metrics for finite and classic-control MDPs."""

from .mdp import (
    FiniteMdp, PolicyTable, ValueFunction, build_mdp, evaluate_chain, generate_mdp, load_mdp, policy_evaluation,
    policy_kernel, random_policy, save_mdp, stationary_distribution,
)
from .transport import GaussianDist, TransportPlan, certify_optimality, w1_discrete, w2_gaussian, wp_discrete
from .metrics import (
    BisimConfig, DistanceMatrix, FixedPointTrace, bisim_operator, metric_approx_dynamics, metric_from_chain,
    metric_on_policy, metric_policy_independent, value_bound_report, verify_contraction,
)
from .aggregation import Partition, aggregate_mdp, epsilon_partition, vfa_bound_report
from .learning import (
    EncoderModel, LatentDynamics, MetricLearner, RewardModel, TrainConfig, TransitionBatch, batch_diagnostics,
    dbc_loss, encode, forward_model_loss, project_to_ball, reward_model_loss, train_step,
)
from .auxiliary import InverseModel, intrinsic_reward, inverse_dynamics_loss
from .envs import Env, EnvConfig, GridSpec, discretize_env, env_step, noisy_wrap
from .agent import Agent, AgentConfig, ReplayBuffer, act, q_update

__all__ = [
    "FiniteMdp", "PolicyTable", "ValueFunction", "build_mdp", "evaluate_chain", "generate_mdp", "load_mdp",
    "policy_evaluation", "policy_kernel", "random_policy", "save_mdp", "stationary_distribution",
    "GaussianDist", "TransportPlan", "certify_optimality", "w1_discrete", "w2_gaussian", "wp_discrete",
    "BisimConfig", "DistanceMatrix", "FixedPointTrace", "bisim_operator", "metric_approx_dynamics",
    "metric_from_chain", "metric_on_policy", "metric_policy_independent", "value_bound_report",
    "verify_contraction", "Partition", "aggregate_mdp", "epsilon_partition", "vfa_bound_report",
    "EncoderModel", "LatentDynamics", "MetricLearner", "RewardModel", "TrainConfig", "TransitionBatch",
    "batch_diagnostics", "dbc_loss", "encode", "forward_model_loss", "project_to_ball", "reward_model_loss",
    "train_step", "InverseModel", "intrinsic_reward", "inverse_dynamics_loss", "Env", "EnvConfig", "GridSpec",
    "discretize_env", "env_step", "noisy_wrap", "Agent", "AgentConfig", "ReplayBuffer", "act", "q_update",
]

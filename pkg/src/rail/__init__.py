"""Derivative-free adversarial imitation learning for highway driving.

Random search in policy parameter space driven by the reward signal of a
least-squares GAN discriminator, plus the deterministic highway simulator
and tooling needed to run imitation experiments end to end.
"""

__version__ = "0.1.0"

from .highway import (DrivingStats, HighwayConfig, HighwayState, StepOutcome,
                      Trajectory, env_reset, env_step, evaluate_policy,
                      lidar_scan, scripted_expert)
from .policy import (NoiseDirection, NoiseSchedule, NormalizerState,
                     PolicyParams, noise_schedule_step, normalizer_update,
                     perturb, policy_act, sample_directions)
from .discriminator import (DiscriminatorParams, LabeledBatch, OptimizerState,
                            disc_forward, disc_grad, disc_update, lsgan_loss,
                            reward_signal, trajectory_reward)
from .training import (DemonstrationSet, IterationReport, RailConfig,
                       RolloutEngine, RolloutResult, RolloutTask,
                       bc_train, compute_update, rail_train,
                       record_demonstrations, rollout_engine_run)

__all__ = [
    "DrivingStats", "HighwayConfig", "HighwayState", "StepOutcome",
    "Trajectory", "env_reset", "env_step", "evaluate_policy", "lidar_scan",
    "scripted_expert",
    "NoiseDirection", "NoiseSchedule", "NormalizerState", "PolicyParams",
    "noise_schedule_step", "normalizer_update", "perturb", "policy_act",
    "sample_directions",
    "DiscriminatorParams", "LabeledBatch", "OptimizerState", "disc_forward",
    "disc_grad", "disc_update", "lsgan_loss", "reward_signal",
    "trajectory_reward",
    "DemonstrationSet", "IterationReport", "RailConfig", "RolloutEngine",
    "RolloutResult", "RolloutTask", "bc_train", "compute_update",
    "rail_train", "record_demonstrations", "rollout_engine_run",
]

"""Offline reinforcement learning as return-conditioned regression with boosted trees."""

from .envs import EnvSpec, EnvState, PointMassEnv, generate_dataset, make_env, normalized_score
from .evaluation import SweepRecord, SweepResult, TimingReport, benchmark, rtg_sweep, simulate_policy
from .gbrt import BoostConfig, Ensemble, FeatureImportance, Tree, feature_importance, fit_ensemble
from .policy import Agent, ConditioningState, act, load_agent, save_agent, train_agent, update_conditioning
from .trajectory import (
    EndReason,
    Episode,
    FlatLog,
    RtgConfig,
    TrainingMatrix,
    build_training_matrix,
    compute_rtg,
    normalize_rtg,
    sparsify_rewards,
    split_episodes,
)

__version__ = "0.1.0"

"""Seeded point-mass control tasks and behavior-policy dataset generators.

Both built-in tasks integrate ``p' = p + v*dt, v' = v + a*dt`` per axis with
explicit Euler and charge ``-(|p|^2 + 0.1|v|^2 + 0.001|a|^2)`` per step,
evaluated at the pre-step state. Episodes end only at the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRangeError, StructuralError, UsageError, ValidationError
from .trajectory import FlatLog

BEHAVIORS = ("expert", "medium", "replay", "random")
EXPERT_GAINS = (4.0, 3.0)
MEDIUM_NOISE = 0.5
REPLAY_NOISE_LEVELS = tuple(round(0.1 * k, 1) for k in range(1, 11))
REFERENCE_ROLLOUTS = 1000


@dataclass(frozen=True)
class EnvSpec:
    name: str
    n_axes: int
    horizon: int
    dt: float
    random_ref: float
    expert_ref: float
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValidationError("horizon must be at least 1")
        if not self.expert_ref > self.random_ref:
            raise DegenerateRangeError(
                f"{self.name}: expert_ref ({self.expert_ref}) must exceed random_ref ({self.random_ref})"
            )

    @property
    def state_dim(self) -> int:
        return 2 * self.n_axes

    @property
    def action_dim(self) -> int:
        return self.n_axes

    @property
    def action_bounds(self) -> np.ndarray:
        """``(d_a, 2)`` array of ``[low, high]`` rows."""
        return np.tile([self.action_low, self.action_high], (self.n_axes, 1)).astype(np.float64)


@dataclass(frozen=True, eq=False)
class EnvState:
    observation: np.ndarray
    steps_taken: int = 0
    done: bool = False

    def __post_init__(self) -> None:
        obs = np.array(self.observation, dtype=np.float64)
        obs.setflags(write=False)
        object.__setattr__(self, "observation", obs)


@dataclass(frozen=True)
class PointMassEnv:
    """Value-like environment: all state lives in :class:`EnvState`."""

    spec: EnvSpec

    @property
    def name(self) -> str:
        return self.spec.name

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        p = rng.uniform(-1.0, 1.0, size=self.spec.n_axes)
        return EnvState(np.concatenate([p, np.zeros(self.spec.n_axes)]))

    def step(self, state: EnvState, action) -> tuple[EnvState, float]:
        if state.done:
            raise UsageError(f"{self.name}: step() called on a finished episode")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.spec.action_dim,):
            raise StructuralError(
                f"{self.name} expects {self.spec.action_dim} action dims, got {a.shape[0]}"
            )
        if not np.all(np.isfinite(a)):
            raise ValidationError("action contains non-finite values")
        if np.any(a < self.spec.action_low) or np.any(a > self.spec.action_high):
            raise ValidationError(
                f"action {a.tolist()} outside [{self.spec.action_low}, {self.spec.action_high}]"
            )
        n = self.spec.n_axes
        p = state.observation[:n]
        v = state.observation[n:]
        reward = -(float(p @ p) + 0.1 * float(v @ v) + 0.001 * float(a @ a))
        dt = self.spec.dt
        nxt = np.concatenate([p + v * dt, v + a * dt])
        steps = state.steps_taken + 1
        return EnvState(nxt, steps, steps >= self.spec.horizon), reward


# Means of REFERENCE_ROLLOUTS seeded rollouts; recompute with compute_reference_returns.
_SPECS = {
    "double-integrator-1d": EnvSpec(
        "double-integrator-1d", 1, 200, 0.05,
        random_ref=-318.7359944866444, expert_ref=-5.478327861234171,
    ),
    "point-mass-2d": EnvSpec(
        "point-mass-2d", 2, 200, 0.05,
        random_ref=-654.7544059437267, expert_ref=-10.841107755811196,
    ),
}


def env_names() -> tuple[str, ...]:
    return tuple(_SPECS)


def make_env(name: str) -> PointMassEnv:
    try:
        return PointMassEnv(_SPECS[name])
    except KeyError:
        raise ValidationError(
            f"unknown environment {name!r}; valid names: {', '.join(_SPECS)}"
        ) from None


def normalized_score(spec: EnvSpec, episode_return: float) -> float:
    span = spec.expert_ref - spec.random_ref
    if not span > 0:
        raise DegenerateRangeError("expert_ref must exceed random_ref")
    return 100.0 * (episode_return - spec.random_ref) / span


# ------------------------------------------------------------------ behaviors


def expert_action(spec: EnvSpec, observation: np.ndarray) -> np.ndarray:
    n = spec.n_axes
    kp, kd = EXPERT_GAINS
    raw = -kp * observation[:n] - kd * observation[n:]
    return np.clip(raw, spec.action_low, spec.action_high)


@dataclass
class _Behavior:
    spec: EnvSpec
    kind: str
    rng: np.random.Generator
    noise: float = field(init=False, default=0.0)

    def __post_init__(self) -> None:
        if self.kind == "medium":
            self.noise = MEDIUM_NOISE
        elif self.kind == "replay":
            self.noise = float(self.rng.choice(REPLAY_NOISE_LEVELS))

    def __call__(self, observation: np.ndarray) -> np.ndarray:
        lo, hi, n = self.spec.action_low, self.spec.action_high, self.spec.n_axes
        if self.kind == "random":
            return self.rng.uniform(lo, hi, size=n)
        action = expert_action(self.spec, observation)
        if self.noise:
            action = np.clip(action + self.rng.normal(0.0, self.noise, size=n), lo, hi)
        return action


def _episode_seeds(seed: int, episode: int) -> tuple[int, np.random.Generator]:
    reset_ss, policy_ss = np.random.SeedSequence([seed, episode]).spawn(2)
    return int(reset_ss.generate_state(1, np.uint64)[0]), np.random.default_rng(policy_ss)


def rollout_behavior(env: PointMassEnv, behavior: str, seed: int, episode: int):
    """One behavior-policy episode. Returns ``(observations, actions, rewards)``."""
    if behavior not in BEHAVIORS:
        raise ValidationError(
            f"unknown behavior {behavior!r}; valid tiers: {', '.join(BEHAVIORS)}"
        )
    reset_seed, rng = _episode_seeds(seed, episode)
    policy = _Behavior(env.spec, behavior, rng)
    state = env.reset(reset_seed)
    obs, acts, rews = [], [], []
    while not state.done:
        action = policy(state.observation)
        obs.append(state.observation)
        acts.append(action)
        state, reward = env.step(state, action)
        rews.append(reward)
    return np.array(obs), np.array(acts), np.array(rews)


def generate_dataset(env: PointMassEnv, behavior: str, n_episodes: int, seed: int) -> FlatLog:
    """Roll out ``n_episodes`` of a behavior tier into a flat transition log.

    Tiers: ``expert`` is the clipped PD controller ``-4p - 3v``; ``medium``
    adds N(0, 0.5) action noise; ``replay`` draws a per-episode noise scale
    from {0.1, ..., 1.0}; ``random`` samples actions uniformly.
    """
    if n_episodes < 1:
        raise ValidationError("n_episodes must be at least 1")
    if behavior not in BEHAVIORS:
        raise ValidationError(
            f"unknown behavior {behavior!r}; valid tiers: {', '.join(BEHAVIORS)}"
        )
    parts = [rollout_behavior(env, behavior, seed, i) for i in range(n_episodes)]
    lengths = [len(r) for _, _, r in parts]
    timeouts = np.zeros(sum(lengths), dtype=bool)
    timeouts[np.cumsum(lengths) - 1] = True
    return FlatLog(
        np.concatenate([o for o, _, _ in parts]),
        np.concatenate([a for _, a, _ in parts]),
        np.concatenate([r for _, _, r in parts]),
        np.zeros(sum(lengths), dtype=bool),
        timeouts,
    )


def compute_reference_returns(env: PointMassEnv, n: int = REFERENCE_ROLLOUTS) -> tuple[float, float]:
    """Mean (random, expert) returns over ``n`` rollouts with base seed 0."""
    means = []
    for behavior in ("random", "expert"):
        totals = [float(np.sum(rollout_behavior(env, behavior, 0, i)[2])) for i in range(n)]
        means.append(float(np.mean(totals)))
    return means[0], means[1]

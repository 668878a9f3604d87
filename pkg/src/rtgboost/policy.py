"""Return-conditioned agent: one boosted ensemble per action dimension."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _jsonfmt, gbrt
from .errors import MalformedDocumentError, StructuralError, ValidationError, VersionError
from .gbrt import BoostConfig, Ensemble
from .trajectory import RtgConfig, TrainingMatrix, default_feature_names

AGENT_VERSION = 1


@dataclass(frozen=True)
class ConditioningState:
    """Running conditioning inputs: remaining normalized return and step count."""

    target_return: float
    timestep: int = 0


@dataclass(frozen=True, eq=False)
class Agent:
    ensembles: tuple[Ensemble, ...]
    action_bounds: np.ndarray
    rtg_config: RtgConfig
    feature_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        ensembles = tuple(self.ensembles)
        if not ensembles:
            raise StructuralError("an agent needs at least one ensemble")
        counts = {e.feature_count for e in ensembles}
        if len(counts) != 1:
            raise StructuralError(f"ensembles disagree on feature_count: {sorted(counts)}")
        bounds = np.array(self.action_bounds, dtype=np.float64).reshape(-1, 2)
        if len(bounds) != len(ensembles):
            raise StructuralError(
                f"{len(bounds)} action bound pairs for {len(ensembles)} action dimensions"
            )
        if not np.all(np.isfinite(bounds)) or np.any(bounds[:, 0] > bounds[:, 1]):
            raise ValidationError("action bounds must be finite with low <= high")
        bounds.setflags(write=False)
        (n_features,) = counts
        names = tuple(self.feature_names) or default_feature_names(n_features - 2)
        if len(names) != n_features:
            raise StructuralError(f"{len(names)} feature names for {n_features} features")
        object.__setattr__(self, "ensembles", ensembles)
        object.__setattr__(self, "action_bounds", bounds)
        object.__setattr__(self, "feature_names", names)

    @property
    def feature_count(self) -> int:
        return self.ensembles[0].feature_count

    @property
    def state_dim(self) -> int:
        return self.feature_count - 2

    @property
    def action_dim(self) -> int:
        return len(self.ensembles)


def resolve_threads(threads: int) -> int:
    if threads <= 0:
        return os.cpu_count() or 1
    return threads


def train_agent(
    matrix: TrainingMatrix,
    cfg: BoostConfig,
    bounds,
    rtg_config: RtgConfig,
    threads: int = 1,
) -> Agent:
    """Fit an independent squared-error booster to each action column.

    Columns are fitted concurrently when ``threads > 1``; each fit is serial
    internally, so the result does not depend on the thread count.
    """
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    if len(bounds) != matrix.action_dim:
        raise StructuralError(
            f"{len(bounds)} action bound pairs for {matrix.action_dim} action dimensions"
        )
    columns = [np.ascontiguousarray(matrix.targets[:, j]) for j in range(matrix.action_dim)]
    workers = min(resolve_threads(threads), len(columns))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ensembles = list(pool.map(lambda y: gbrt.fit_ensemble(matrix.inputs, y, cfg), columns))
    else:
        ensembles = [gbrt.fit_ensemble(matrix.inputs, y, cfg) for y in columns]
    return Agent(tuple(ensembles), bounds, rtg_config, matrix.feature_names)


def policy_input(state, cond: ConditioningState) -> np.ndarray:
    return np.concatenate(
        [np.asarray(state, dtype=np.float64).reshape(-1), [cond.target_return, float(cond.timestep)]]
    )


def act(agent: Agent, state, cond: ConditioningState) -> np.ndarray:
    """Predict every action dimension for ``[state, target_return, timestep]`` and clip."""
    state = np.asarray(state, dtype=np.float64).reshape(-1)
    if state.shape[0] != agent.state_dim:
        raise StructuralError(
            f"agent expects {agent.state_dim} state dims, got {state.shape[0]}"
        )
    x = policy_input(state, cond)
    raw = np.array([e.predict_row(x) for e in agent.ensembles])
    return np.clip(raw, agent.action_bounds[:, 0], agent.action_bounds[:, 1])


def update_conditioning(cond: ConditioningState, reward: float, rtg_config: RtgConfig) -> ConditioningState:
    """Subtract the reward, on the normalized scale, and advance one step."""
    reward = float(reward)
    if not np.isfinite(reward):
        raise ValidationError("reward must be finite")
    return ConditioningState(cond.target_return - reward / rtg_config.span, cond.timestep + 1)


# ------------------------------------------------------------- serialization


def to_document(agent: Agent) -> dict:
    return {
        "version": AGENT_VERSION,
        "kind": "agent",
        "rtg_config": agent.rtg_config.to_dict(),
        "action_bounds": agent.action_bounds.tolist(),
        "feature_names": list(agent.feature_names),
        "models": [gbrt.to_document(e) for e in agent.ensembles],
    }


def dumps_agent(agent: Agent) -> bytes:
    return (_jsonfmt.dumps(to_document(agent)) + "\n").encode()


def loads_agent(data: bytes | str) -> Agent:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocumentError(f"agent document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "agent":
        raise MalformedDocumentError("not an agent document")
    if doc.get("version") != AGENT_VERSION:
        raise VersionError(f"unsupported agent version {doc.get('version')!r} (expected {AGENT_VERSION})")
    try:
        names = doc["feature_names"]
        models = doc["models"]
        rtg = RtgConfig(**doc["rtg_config"])
        bounds = doc["action_bounds"]
    except (KeyError, TypeError) as exc:
        raise MalformedDocumentError(f"agent document is incomplete: {exc}") from exc
    if not isinstance(models, list) or not models:
        raise MalformedDocumentError("agent document holds no models")
    ensembles = tuple(gbrt.from_document(m, feature_count=len(names)) for m in models)
    return Agent(ensembles, bounds, rtg, tuple(names))


def save_agent(agent: Agent, path: str | Path) -> None:
    Path(path).write_bytes(dumps_agent(agent))


def load_agent(path: str | Path) -> Agent:
    path = Path(path)
    try:
        return loads_agent(path.read_bytes())
    except (MalformedDocumentError, VersionError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc

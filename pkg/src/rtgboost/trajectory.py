"""Logged trajectories, return-to-go features and the supervised training matrix."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _jsonfmt
from .errors import DegenerateRangeError, StructuralError, ValidationError

RTG_FEATURE = "rtg"
TIMESTEP_FEATURE = "timestep"


class EndReason(str, enum.Enum):
    TERMINAL = "terminal"
    TIMEOUT = "timeout"
    DATASET_END = "dataset_end"


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise StructuralError(f"{name} must be a 2-D array, got shape {arr.shape}")
    return arr


def _require_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class Episode:
    """One logged trajectory.

    Attributes:
        observations: ``(T, d_s)`` state vectors.
        actions: ``(T, d_a)`` action vectors.
        rewards: ``(T,)`` per-step rewards.
        ended_by: Why the trajectory stopped.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    ended_by: EndReason = EndReason.DATASET_END

    def __post_init__(self) -> None:
        obs = _as_matrix(self.observations, "observations")
        act = _as_matrix(self.actions, "actions")
        rew = np.array(self.rewards, dtype=np.float64).reshape(-1)
        if len(obs) < 1:
            raise StructuralError("an episode needs at least one step")
        if not (len(obs) == len(act) == len(rew)):
            raise StructuralError(
                f"episode arrays differ in length: observations={len(obs)}, "
                f"actions={len(act)}, rewards={len(rew)}"
            )
        for arr, name in ((obs, "observations"), (act, "actions"), (rew, "rewards")):
            _require_finite(arr, name)
            arr.setflags(write=False)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", act)
        object.__setattr__(self, "rewards", rew)
        object.__setattr__(self, "ended_by", EndReason(self.ended_by))

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def state_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def total_return(self) -> float:
        return float(compute_rtg(self)[0])


@dataclass(frozen=True)
class FlatLog:
    """A D4RL-style transition log: equal-length arrays, episodes delimited by flags."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    timeouts: np.ndarray

    def __post_init__(self) -> None:
        obs = _as_matrix(self.observations, "observations")
        act = _as_matrix(self.actions, "actions")
        rew = np.array(self.rewards, dtype=np.float64).reshape(-1)
        lengths = {
            "observations": len(obs),
            "actions": len(act),
            "rewards": len(rew),
            "terminals": len(np.asarray(self.terminals).reshape(-1)),
            "timeouts": len(np.asarray(self.timeouts).reshape(-1)),
        }
        if len(set(lengths.values())) != 1:
            raise StructuralError(f"transition arrays differ in length: {lengths}")
        if lengths["rewards"] < 1:
            raise StructuralError("transition log is empty")
        flags = {}
        for name in ("terminals", "timeouts"):
            raw = np.array(getattr(self, name)).reshape(-1)
            if raw.dtype != np.bool_:
                if not np.all(np.isin(raw, (0, 1))):
                    raise ValidationError(f"{name} must be boolean (0/1) flags")
                raw = raw.astype(bool)
            flags[name] = raw
        for arr, name in ((obs, "observations"), (act, "actions"), (rew, "rewards")):
            _require_finite(arr, name)
        for name, arr in (("observations", obs), ("actions", act), ("rewards", rew), *flags.items()):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True)
class RtgConfig:
    """Reference range used to put returns on a 0..1 scale."""

    r_min_ref: float
    r_max_ref: float
    gamma: float = 1.0

    def __post_init__(self) -> None:
        lo, hi = float(self.r_min_ref), float(self.r_max_ref)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValidationError("reference returns must be finite")
        if not hi > lo:
            raise DegenerateRangeError(
                f"r_max_ref ({hi!r}) must exceed r_min_ref ({lo!r})"
            )
        if self.gamma != 1.0:
            raise ValidationError("only undiscounted returns (gamma = 1) are supported")
        object.__setattr__(self, "r_min_ref", lo)
        object.__setattr__(self, "r_max_ref", hi)
        object.__setattr__(self, "gamma", 1.0)

    @property
    def span(self) -> float:
        return self.r_max_ref - self.r_min_ref

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "RtgConfig":
        """Use the lowest and highest observed episode return as the range."""
        if not episodes:
            raise ValidationError("cannot derive a return range from zero episodes")
        returns = [ep.total_return for ep in episodes]
        lo, hi = min(returns), max(returns)
        if not hi > lo:
            raise DegenerateRangeError(
                f"all episodes return {lo!r}; pass explicit reference returns"
            )
        return cls(lo, hi)

    def to_dict(self) -> dict:
        return {"r_min_ref": self.r_min_ref, "r_max_ref": self.r_max_ref, "gamma": self.gamma}


@dataclass(frozen=True)
class TrainingMatrix:
    inputs: np.ndarray
    targets: np.ndarray
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        x = _as_matrix(self.inputs, "inputs")
        y = _as_matrix(self.targets, "targets")
        if len(x) != len(y):
            raise StructuralError(f"inputs have {len(x)} rows but targets have {len(y)}")
        names = tuple(self.feature_names) or default_feature_names(x.shape[1] - 2)
        if len(names) != x.shape[1]:
            raise StructuralError(
                f"{len(names)} feature names for {x.shape[1]} input columns"
            )
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_rows(self) -> int:
        return self.inputs.shape[0]

    @property
    def state_dim(self) -> int:
        return self.inputs.shape[1] - 2

    @property
    def action_dim(self) -> int:
        return self.targets.shape[1]


def default_feature_names(state_dim: int) -> tuple[str, ...]:
    return tuple(f"s{i}" for i in range(state_dim)) + (RTG_FEATURE, TIMESTEP_FEATURE)


def split_episodes(flat: FlatLog) -> list[Episode]:
    """Cut a transition log after every step whose terminal or timeout flag is set.

    A trailing run without any flag becomes a final episode marked
    ``DATASET_END``. A step carrying both flags counts as terminal.
    """
    ends = np.flatnonzero(flat.terminals | flat.timeouts)
    episodes = []
    start = 0
    for end in ends:
        reason = EndReason.TERMINAL if flat.terminals[end] else EndReason.TIMEOUT
        episodes.append(_slice_episode(flat, start, end + 1, reason))
        start = end + 1
    if start < len(flat):
        episodes.append(_slice_episode(flat, start, len(flat), EndReason.DATASET_END))
    return episodes


def _slice_episode(flat: FlatLog, lo: int, hi: int, reason: EndReason) -> Episode:
    return Episode(
        flat.observations[lo:hi].copy(),
        flat.actions[lo:hi].copy(),
        flat.rewards[lo:hi].copy(),
        reason,
    )


def concatenate_episodes(episodes: Sequence[Episode]) -> FlatLog:
    """Inverse of :func:`split_episodes`."""
    if not episodes:
        raise StructuralError("need at least one episode")
    _check_uniform_dims(episodes)
    terminals, timeouts = [], []
    for ep in episodes:
        term = np.zeros(len(ep), dtype=bool)
        tout = np.zeros(len(ep), dtype=bool)
        if ep.ended_by is EndReason.TERMINAL:
            term[-1] = True
        elif ep.ended_by is EndReason.TIMEOUT:
            tout[-1] = True
        terminals.append(term)
        timeouts.append(tout)
    return FlatLog(
        np.concatenate([ep.observations for ep in episodes]),
        np.concatenate([ep.actions for ep in episodes]),
        np.concatenate([ep.rewards for ep in episodes]),
        np.concatenate(terminals),
        np.concatenate(timeouts),
    )


def compute_rtg(episode: Episode) -> np.ndarray:
    """Undiscounted reward-to-go: ``out[t] = rewards[t] + out[t + 1]``."""
    rewards = episode.rewards
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + acc
        out[t] = acc
    return out


def normalize_rtg(rtg, cfg: RtgConfig):
    """Min-max scale a return (scalar or array). Values outside the range pass through."""
    if np.ndim(rtg):
        return (np.asarray(rtg, dtype=np.float64) - cfg.r_min_ref) / cfg.span
    return (float(rtg) - cfg.r_min_ref) / cfg.span


def denormalize_rtg(value, cfg: RtgConfig):
    if np.ndim(value):
        return np.asarray(value, dtype=np.float64) * cfg.span + cfg.r_min_ref
    return float(value) * cfg.span + cfg.r_min_ref


def sparsify_rewards(episode: Episode) -> Episode:
    """Zero every reward except the last, which receives the episode total."""
    rewards = np.zeros(len(episode))
    rewards[-1] = episode.total_return
    return replace(episode, rewards=rewards)


def _check_uniform_dims(episodes: Sequence[Episode]) -> None:
    ds = {ep.state_dim for ep in episodes}
    da = {ep.action_dim for ep in episodes}
    if len(ds) > 1 or len(da) > 1:
        raise ValidationError(
            f"episodes disagree on dimensions: state dims {sorted(ds)}, action dims {sorted(da)}"
        )


def build_training_matrix(episodes: Sequence[Episode], cfg: RtgConfig) -> TrainingMatrix:
    """Stack ``[obs_t, normalized RTG_t, t] -> action_t`` rows, episode by episode."""
    if not episodes:
        raise ValidationError("cannot build a training matrix from zero episodes")
    _check_uniform_dims(episodes)
    blocks = []
    for ep in episodes:
        rtg = normalize_rtg(compute_rtg(ep), cfg)
        steps = np.arange(len(ep), dtype=np.float64)
        blocks.append(np.column_stack([ep.observations, rtg, steps]))
    return TrainingMatrix(
        np.concatenate(blocks),
        np.concatenate([ep.actions for ep in episodes]),
        default_feature_names(episodes[0].state_dim),
    )


# ---------------------------------------------------------------- file formats


def flat_log_to_dict(flat: FlatLog) -> dict:
    return {
        "observations": flat.observations.tolist(),
        "actions": flat.actions.tolist(),
        "rewards": flat.rewards.tolist(),
        "terminals": flat.terminals.tolist(),
        "timeouts": flat.timeouts.tolist(),
    }


def dumps_flat_log(flat: FlatLog) -> str:
    return _jsonfmt.dumps(flat_log_to_dict(flat)) + "\n"


def save_flat_log(flat: FlatLog, path: str | Path) -> None:
    Path(path).write_text(dumps_flat_log(flat))


def load_flat_log(path: str | Path) -> FlatLog:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: not valid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    missing = [k for k in ("observations", "actions", "rewards", "terminals", "timeouts") if k not in doc]
    if missing:
        raise ValidationError(f"{path}: missing keys {missing}")
    try:
        return FlatLog(
            doc["observations"], doc["actions"], doc["rewards"], doc["terminals"], doc["timeouts"]
        )
    except (ValidationError, StructuralError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def episode_to_dict(ep: Episode) -> dict:
    return {
        "observations": ep.observations.tolist(),
        "actions": ep.actions.tolist(),
        "rewards": ep.rewards.tolist(),
        "ended_by": ep.ended_by.value,
    }


def save_episodes_jsonl(episodes: Iterable[Episode], path: str | Path) -> None:
    lines = [_jsonfmt.dumps(episode_to_dict(ep)) for ep in episodes]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_episodes_jsonl(path: str | Path) -> list[Episode]:
    path = Path(path)
    episodes = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                episodes.append(
                    Episode(doc["observations"], doc["actions"], doc["rewards"], EndReason(doc["ended_by"]))
                )
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
            except (KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed episode record ({exc})") from exc
            except (ValidationError, StructuralError) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if not episodes:
        raise ValidationError(f"{path}: no episodes found")
    return episodes


def load_episodes(path: str | Path) -> list[Episode]:
    """Read either file format, chosen by suffix (``.jsonl`` means episodic)."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return load_episodes_jsonl(path)
    return split_episodes(load_flat_log(path))

"""Closed-loop rollouts, target-return sweeps, timing and result files."""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import _jsonfmt
from .envs import PointMassEnv, normalized_score
from .errors import OutputError, StructuralError, ValidationError
from .gbrt import BoostConfig, FeatureImportance
from .policy import Agent, ConditioningState, act, resolve_threads, train_agent, update_conditioning
from .trajectory import RtgConfig, TrainingMatrix

SWEEP_HEADER = ("target_rtg", "achieved_return", "normalized_score", "episode_length", "seed")

StepHook = Callable[[ConditioningState, float, float], None]


@dataclass(frozen=True)
class SweepRecord:
    target_rtg: float
    achieved_return: float
    achieved_normalized_score: float
    episode_length: int
    seed: int


@dataclass(frozen=True)
class SweepResult:
    records: tuple[SweepRecord, ...]
    pearson: float | None
    spearman: float | None

    @property
    def degenerate(self) -> bool:
        """True when a correlation could not be computed (constant input or < 2 records)."""
        return self.pearson is None or self.spearman is None

    @property
    def mean_normalized_score(self) -> float | None:
        if not self.records:
            return None
        return math.fsum(r.achieved_normalized_score for r in self.records) / len(self.records)

    def per_target(self) -> list[dict]:
        groups: dict[float, list[SweepRecord]] = {}
        for r in self.records:
            groups.setdefault(r.target_rtg, []).append(r)
        return [
            {
                "target_rtg": target,
                "episodes": len(rs),
                "mean_return": math.fsum(r.achieved_return for r in rs) / len(rs),
                "mean_normalized_score": math.fsum(r.achieved_normalized_score for r in rs) / len(rs),
            }
            for target, rs in groups.items()
        ]


@dataclass(frozen=True)
class TimingStat:
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class TimingReport:
    training_time: TimingStat
    inference_time_per_action: TimingStat

    def to_dict(self) -> dict:
        return {
            "training_time": {
                "mean": self.training_time.mean,
                "std": self.training_time.std,
                "trials": self.training_time.n,
            },
            "inference_time_per_action": {
                "mean": self.inference_time_per_action.mean,
                "std": self.inference_time_per_action.std,
                "samples": self.inference_time_per_action.n,
            },
        }


def check_compatible(agent: Agent, env: PointMassEnv) -> None:
    spec = env.spec
    if agent.state_dim != spec.state_dim or agent.action_dim != spec.action_dim:
        raise StructuralError(
            f"agent has state dim {agent.state_dim} / action dim {agent.action_dim} but "
            f"{spec.name} has state dim {spec.state_dim} / action dim {spec.action_dim}"
        )


def simulate_policy(
    agent: Agent,
    env: PointMassEnv,
    target_return: float,
    seed: int,
    on_step: StepHook | None = None,
) -> tuple[float, int]:
    """Run one conditioned episode and return ``(raw return, length)``.

    ``on_step(cond, reward, episode_return)`` is called after every
    environment step with the already-updated conditioning state.
    """
    check_compatible(agent, env)
    state = env.reset(seed)
    cond = ConditioningState(float(target_return), 0)
    episode_return = 0.0
    for _ in range(env.spec.horizon):
        action = act(agent, state.observation, cond)
        state, reward = env.step(state, action)
        cond = update_conditioning(cond, reward, agent.rtg_config)
        episode_return += reward
        if on_step is not None:
            on_step(cond, reward, episode_return)
        if state.done:
            break
    return episode_return, cond.timestep


def episode_seed(seed: int, target_index: int, episode_index: int) -> int:
    ss = np.random.SeedSequence([seed, target_index, episode_index])
    return int(ss.generate_state(1, np.uint64)[0])


def _correlation(fn, x: np.ndarray, y: np.ndarray) -> float | None:
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    value = float(fn(x, y)[0])
    return value if math.isfinite(value) else None


def rtg_sweep(
    agent: Agent,
    env: PointMassEnv,
    targets: Sequence[float],
    episodes_per_target: int,
    seed: int,
    threads: int = 1,
) -> SweepResult:
    """Roll out ``episodes_per_target`` episodes for every target in the grid.

    Records come back ordered by (target index, episode index) whatever the
    thread count.
    """
    targets = [float(t) for t in targets]
    if not targets:
        raise ValidationError("target grid is empty")
    if episodes_per_target < 1:
        raise ValidationError("episodes_per_target must be at least 1")
    check_compatible(agent, env)
    jobs = [
        (t, episode_seed(seed, ti, ei))
        for ti, t in enumerate(targets)
        for ei in range(episodes_per_target)
    ]

    def run(job):
        target, s = job
        ret, length = simulate_policy(agent, env, target, s)
        return SweepRecord(target, ret, normalized_score(env.spec, ret), length, s)

    workers = min(resolve_threads(threads), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = tuple(pool.map(run, jobs))
    else:
        records = tuple(run(j) for j in jobs)
    x = np.array([r.target_rtg for r in records])
    y = np.array([r.achieved_return for r in records])
    return SweepResult(records, _correlation(stats.pearsonr, x, y), _correlation(stats.spearmanr, x, y))


def parse_grid(text: str) -> list[float]:
    """Parse ``start:stop:count`` (inclusive) into evenly spaced targets."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid {text!r} is not of the form start:stop:count")
    start, stop = float(parts[0]), float(parts[1])
    count = int(parts[2])
    if count < 1:
        raise ValueError("grid count must be at least 1")
    if stop < start:
        raise ValueError(f"grid bounds reversed: start {start} > stop {stop}")
    if not (math.isfinite(start) and math.isfinite(stop)):
        raise ValueError("grid bounds must be finite")
    if count == 1:
        return [start]
    return [float(v) for v in np.linspace(start, stop, count)]


def benchmark(
    cfg: BoostConfig,
    matrix: TrainingMatrix,
    env: PointMassEnv,
    rtg_config: RtgConfig,
    trials: int = 3,
    inference_calls: int = 1000,
    warmup: int = 50,
    threads: int = 1,
) -> tuple[TimingReport, Agent]:
    """Time ``trials`` full agent fits and ``inference_calls`` single-step actions."""
    if trials < 1 or inference_calls < 1:
        raise ValidationError("trials and inference_calls must be positive")
    fit_times = []
    agent = None
    for _ in range(trials):
        t0 = time.perf_counter()
        agent = train_agent(matrix, cfg, env.spec.action_bounds, rtg_config, threads=threads)
        fit_times.append(time.perf_counter() - t0)
    check_compatible(agent, env)

    rows = matrix.inputs
    d = matrix.state_dim

    def call(i: int) -> None:
        row = rows[i % len(rows)]
        act(agent, row[:d], ConditioningState(float(row[d]), int(row[d + 1])))

    for i in range(warmup):
        call(i)
    act_times = []
    for i in range(inference_calls):
        t0 = time.perf_counter()
        call(i)
        act_times.append(time.perf_counter() - t0)
    report = TimingReport(_stat(fit_times), _stat(act_times))
    return report, agent


def _stat(samples: list[float]) -> TimingStat:
    std = statistics.stdev(samples) if len(samples) > 1 else 0.0
    return TimingStat(statistics.fmean(samples), std, len(samples))


# ---------------------------------------------------------------- emission


def _write(path: str | Path, text: str) -> Path:
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def sweep_csv(records: Sequence[SweepRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in records:
        writer.writerow(
            [
                _jsonfmt.format_real(r.target_rtg),
                _jsonfmt.format_real(r.achieved_return),
                _jsonfmt.format_real(r.achieved_normalized_score),
                r.episode_length,
                r.seed,
            ]
        )
    return buf.getvalue()


def read_sweep_csv(path: str | Path) -> list[SweepRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            SweepRecord(
                float(row["target_rtg"]),
                float(row["achieved_return"]),
                float(row["normalized_score"]),
                int(row["episode_length"]),
                int(row["seed"]),
            )
            for row in reader
        ]


def sweep_summary(result: SweepResult) -> dict:
    return {
        "pearson": result.pearson,
        "spearman": result.spearman,
        "mean_normalized_score": result.mean_normalized_score,
        "records": len(result.records),
        "per_target": result.per_target(),
    }


def write_sweep(result: SweepResult, csv_path: str | Path, summary_path: str | Path) -> None:
    _write(csv_path, sweep_csv(result.records))
    _write(summary_path, _jsonfmt.dumps(sweep_summary(result)) + "\n")


def write_timing(report: TimingReport, path: str | Path) -> None:
    _write(path, _jsonfmt.dumps(report.to_dict()) + "\n")


def importance_rows(imp: FeatureImportance, metric: str, feature_names: Sequence[str]) -> list[tuple[str, float]]:
    """``(feature name, score)`` pairs sorted by descending score, then feature index."""
    scores = imp.metric(metric)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(feature_names[f], float(v)) for f, v in ranked]


def importance_csv(rows: Sequence[tuple[str, float]], metric: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("feature", metric))
    for name, value in rows:
        writer.writerow((name, _jsonfmt.format_real(value)))
    return buf.getvalue()


def write_importance(rows: Sequence[tuple[str, float]], metric: str, path: str | Path) -> None:
    _write(path, importance_csv(rows, metric))

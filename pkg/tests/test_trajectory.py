import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import suffix_sums_double_loop
from rtgboost.errors import DegenerateRangeError, StructuralError, ValidationError
from rtgboost.trajectory import (
    EndReason,
    Episode,
    FlatLog,
    RtgConfig,
    build_training_matrix,
    compute_rtg,
    concatenate_episodes,
    denormalize_rtg,
    dumps_flat_log,
    load_episodes,
    load_episodes_jsonl,
    load_flat_log,
    normalize_rtg,
    save_episodes_jsonl,
    save_flat_log,
    sparsify_rewards,
    split_episodes,
)


def make_episode(rewards, d_s=2, d_a=1, ended_by=EndReason.TIMEOUT, offset=0.0):
    T = len(rewards)
    obs = np.arange(T * d_s, dtype=float).reshape(T, d_s) + offset
    act = np.linspace(-1, 1, T * d_a).reshape(T, d_a)
    return Episode(obs, act, rewards, ended_by)


def make_flat(terminals, timeouts, d_s=2):
    n = len(terminals)
    return FlatLog(
        np.arange(n * d_s, dtype=float).reshape(n, d_s),
        np.arange(n, dtype=float).reshape(n, 1) / 10,
        np.arange(n, dtype=float),
        np.array(terminals, dtype=bool),
        np.array(timeouts, dtype=bool),
    )


# ------------------------------------------------------------ split_episodes


def test_split_on_terminal_and_timeout():
    eps = split_episodes(make_flat([0, 0, 1, 0, 0], [0, 0, 0, 0, 1]))
    assert [len(e) for e in eps] == [3, 2]
    assert [e.ended_by for e in eps] == [EndReason.TERMINAL, EndReason.TIMEOUT]


def test_split_without_flags_is_one_dataset_end_episode():
    eps = split_episodes(make_flat([0, 0, 0, 0], [0, 0, 0, 0]))
    assert len(eps) == 1
    assert len(eps[0]) == 4
    assert eps[0].ended_by is EndReason.DATASET_END


def test_split_every_step_terminal():
    eps = split_episodes(make_flat([1, 1, 1], [0, 0, 0]))
    assert [len(e) for e in eps] == [1, 1, 1]


def test_split_trailing_unflagged_run():
    eps = split_episodes(make_flat([0, 1, 0, 0], [0, 0, 0, 0]))
    assert [len(e) for e in eps] == [2, 2]
    assert eps[-1].ended_by is EndReason.DATASET_END


def test_flat_log_length_mismatch_is_structural():
    with pytest.raises(StructuralError):
        FlatLog(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros(2), np.zeros(3), np.zeros(3))


def test_flat_log_rejects_non_finite():
    rewards = np.array([0.0, np.nan, 1.0])
    with pytest.raises(ValidationError):
        FlatLog(np.zeros((3, 2)), np.zeros((3, 1)), rewards, np.zeros(3), np.zeros(3))


def test_flat_log_rejects_non_boolean_flags():
    with pytest.raises(ValidationError):
        FlatLog(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(2), [0, 2], [0, 0])


def test_episode_rejects_ragged_and_empty():
    with pytest.raises(StructuralError):
        Episode(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros(3))
    with pytest.raises(StructuralError):
        Episode(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ValidationError):
        Episode(np.zeros((1, 2)), np.full((1, 1), np.inf), np.zeros(1))


def test_episode_does_not_freeze_caller_arrays():
    obs = np.zeros((2, 2))
    Episode(obs, np.zeros((2, 1)), np.zeros(2))
    obs[0, 0] = 1.0


@settings(max_examples=100, deadline=None)
@given(
    flags=st.lists(st.sampled_from([(0, 0), (1, 0), (0, 1), (1, 1)]), min_size=1, max_size=40),
    seed=st.integers(0, 2**32 - 1),
)
def test_split_then_concatenate_is_identity(flags, seed):
    rng = np.random.default_rng(seed)
    n = len(flags)
    term = np.array([f[0] for f in flags], dtype=bool)
    tout = np.array([f[1] for f in flags], dtype=bool)
    flat = FlatLog(rng.normal(size=(n, 3)), rng.normal(size=(n, 2)), rng.normal(size=n), term, tout)
    back = concatenate_episodes(split_episodes(flat))
    assert np.array_equal(back.observations, flat.observations)
    assert np.array_equal(back.actions, flat.actions)
    assert np.array_equal(back.rewards, flat.rewards)
    # a step flagged both ways is recorded as terminal
    assert np.array_equal(back.terminals, term)
    assert np.array_equal(back.terminals | back.timeouts, term | tout)


# ----------------------------------------------------------------- compute_rtg


@pytest.mark.parametrize(
    "rewards, expected",
    [([1.0, 2.0, 3.0], [6.0, 5.0, 3.0]), ([0.0, 0.0], [0.0, 0.0]), ([-1.0, 2.0], [1.0, 2.0])],
)
def test_compute_rtg_examples(rewards, expected):
    assert compute_rtg(make_episode(rewards)).tolist() == expected


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=50))
def test_compute_rtg_matches_double_loop(rewards):
    assert compute_rtg(make_episode(rewards)).tolist() == suffix_sums_double_loop(rewards)


def test_rtg_does_not_cross_episode_boundaries():
    flat = make_flat([0, 1, 0, 0], [0, 0, 0, 1])
    eps = split_episodes(flat)
    assert compute_rtg(eps[0]).tolist() == [1.0, 1.0]
    assert compute_rtg(eps[1]).tolist() == [5.0, 3.0]


# ------------------------------------------------------------- normalize_rtg


def test_normalize_anchors_and_interpolation():
    cfg = RtgConfig(-4.0, 10.0)
    assert normalize_rtg(-4.0, cfg) == 0.0
    assert normalize_rtg(10.0, cfg) == 1.0
    assert normalize_rtg(3.0, RtgConfig(0.0, 12.0)) == 0.25


def test_normalize_passes_out_of_range_values_through():
    cfg = RtgConfig(0.0, 10.0)
    assert normalize_rtg(15.0, cfg) == 1.5
    assert normalize_rtg(-5.0, cfg) == -0.5


def test_degenerate_range_rejected():
    with pytest.raises(DegenerateRangeError):
        RtgConfig(1.0, 1.0)
    with pytest.raises(DegenerateRangeError):
        RtgConfig(2.0, 1.0)


def test_gamma_must_be_one():
    with pytest.raises(ValidationError):
        RtgConfig(0.0, 1.0, gamma=0.99)


@settings(max_examples=200, deadline=None)
@given(
    lo=st.floats(-1e3, 1e3),
    width=st.floats(1e-3, 1e3),
    x=st.floats(-1e4, 1e4),
)
def test_normalize_denormalize_round_trip(lo, width, x):
    cfg = RtgConfig(lo, lo + width)
    back = denormalize_rtg(normalize_rtg(x, cfg), cfg)
    assert math.isclose(back, x, rel_tol=1e-12, abs_tol=1e-12 * max(abs(lo), width))


def test_range_from_episodes_uses_min_and_max_return():
    eps = [make_episode([1.0, 1.0]), make_episode([5.0]), make_episode([-3.0, 1.0])]
    assert RtgConfig.from_episodes(eps) == RtgConfig(-2.0, 5.0)
    with pytest.raises(DegenerateRangeError):
        RtgConfig.from_episodes([make_episode([1.0]), make_episode([1.0])])


# ---------------------------------------------------------- sparsify_rewards


@pytest.mark.parametrize(
    "rewards, expected", [([1, 2, 3], [0, 0, 6]), ([5], [5]), ([-1, -1], [0, -2])]
)
def test_sparsify_examples(rewards, expected):
    ep = make_episode(rewards)
    sparse = sparsify_rewards(ep)
    assert sparse.rewards.tolist() == expected
    assert np.array_equal(sparse.observations, ep.observations)
    assert np.array_equal(sparse.actions, ep.actions)
    assert sparse.ended_by is ep.ended_by


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=50))
def test_sparsify_preserves_return_and_is_idempotent(rewards):
    ep = make_episode(rewards)
    once = sparsify_rewards(ep)
    assert once.total_return == ep.total_return
    assert np.array_equal(sparsify_rewards(once).rewards, once.rewards)


# ------------------------------------------------------ build_training_matrix


def test_matrix_layout_single_episode():
    m = build_training_matrix([make_episode([1.0, 1.0, 1.0])], RtgConfig(0.0, 3.0))
    assert m.inputs.shape == (3, 4)
    assert m.inputs[:, -1].tolist() == [0.0, 1.0, 2.0]
    assert m.feature_names == ("s0", "s1", "rtg", "timestep")


def test_matrix_timesteps_restart_per_episode():
    m = build_training_matrix([make_episode([1, 1]), make_episode([1, 1, 1])], RtgConfig(0.0, 3.0))
    assert m.n_rows == 5
    assert m.inputs[:, -1].tolist() == [0, 1, 0, 1, 2]


def test_matrix_rtg_column_hand_computed():
    # suffix sums [2, 1] over the range [0, 4]
    m = build_training_matrix([make_episode([1.0, 1.0])], RtgConfig(0.0, 4.0))
    assert m.inputs[:, 2].tolist() == [0.5, 0.25]


def test_matrix_rejects_heterogeneous_dimensions():
    with pytest.raises(ValidationError):
        build_training_matrix([make_episode([1.0], d_s=2), make_episode([1.0], d_s=3)], RtgConfig(0, 1))


@settings(max_examples=50, deadline=None)
@given(
    lengths=st.lists(st.integers(1, 12), min_size=1, max_size=6),
    perm_seed=st.integers(0, 1000),
)
def test_matrix_rows_and_block_permutation(lengths, perm_seed):
    rng = np.random.default_rng(perm_seed)
    eps = [make_episode(rng.normal(size=n).tolist(), offset=10.0 * i) for i, n in enumerate(lengths)]
    cfg = RtgConfig(-20.0, 20.0)
    m = build_training_matrix(eps, cfg)
    assert m.n_rows == sum(lengths)
    perm = rng.permutation(len(eps))
    permuted = build_training_matrix([eps[i] for i in perm], cfg)
    starts = np.cumsum([0] + lengths)
    expected = np.concatenate([m.inputs[starts[i]:starts[i + 1]] for i in perm])
    assert np.array_equal(permuted.inputs, expected)


# --------------------------------------------------------------- file formats


def test_flat_log_json_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    flat = FlatLog(rng.normal(size=(6, 2)), rng.normal(size=(6, 1)), rng.normal(size=6),
                   [0, 0, 1, 0, 0, 0], [0, 0, 0, 0, 0, 1])
    path = tmp_path / "log.json"
    save_flat_log(flat, path)
    back = load_flat_log(path)
    for name in ("observations", "actions", "rewards", "terminals", "timeouts"):
        assert np.array_equal(getattr(back, name), getattr(flat, name))
    assert dumps_flat_log(back) == path.read_text()


def test_episodic_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    eps = [
        Episode(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=3), EndReason.TERMINAL),
        Episode(rng.normal(size=(1, 2)), rng.normal(size=(1, 2)), [0.1], EndReason.DATASET_END),
    ]
    path = tmp_path / "eps.jsonl"
    save_episodes_jsonl(eps, path)
    back = load_episodes(path)
    assert len(back) == 2
    for a, b in zip(eps, back):
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.rewards, b.rewards)
        assert a.ended_by is b.ended_by


def test_jsonl_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"observations": [[0]], "actions": [[0]], "rewards": [0], "ended_by": "timeout"}\n'
        '{"observations": [[0], [1]], "actions": [[0]], "rewards": [0], "ended_by": "timeout"}\n'
    )
    with pytest.raises(StructuralError, match=r"bad\.jsonl:2"):
        load_episodes_jsonl(path)


def test_flat_log_file_with_nan_is_rejected(tmp_path):
    path = tmp_path / "nan.json"
    path.write_text(
        '{"observations": [[0]], "actions": [[0]], "rewards": [NaN], "terminals": [false], "timeouts": [true]}'
    )
    with pytest.raises(ValidationError, match="non-finite"):
        load_flat_log(path)

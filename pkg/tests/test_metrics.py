import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from naomi.metrics import (ALL_METRICS, evaluate, l2_loss, multi_agent_stats, reflection_to_wall,
                           segments, sinuosity, step_change, turning_points)
from naomi.simulator import BilliardsConfig, rollout, simulate


def test_l2_loss_counts_missing_steps_only():
    truth = np.zeros((4, 2))
    pred = np.array([[9.0, 9.0], [3.0, 4.0], [0.0, 1.0], [9.0, 9.0]])
    mask = np.array([1, 0, 0, 1], bool)
    # (25 + 1) / 2
    assert l2_loss(pred, truth, mask) == pytest.approx(13.0, rel=1e-15)
    assert l2_loss(pred, truth, np.ones(4, bool)) == 0.0


def test_straight_line_has_unit_sinuosity():
    traj = np.linspace([0.1, 0.2], [0.8, 0.5], 30)
    assert sinuosity(traj) == pytest.approx(1.0, abs=1e-12)
    assert step_change(traj) < 1e-15


def test_right_angle_detour():
    # (0.2,0.2) -> (0.5,0.2) -> (0.5,0.6): no sign flip and no wall contact,
    # so one segment; arclength 0.7, chord 0.5
    traj = np.array([[0.2, 0.2], [0.35, 0.2], [0.5, 0.2], [0.5, 0.4], [0.5, 0.6]])
    assert segments(traj) == [(0, 4)]
    assert sinuosity(traj) == pytest.approx(0.7 / 0.5, rel=1e-12)


def test_turning_points_split_zigzag():
    traj = np.array([[0.2, 0.5], [0.3, 0.6], [0.4, 0.5], [0.5, 0.6], [0.6, 0.5]])
    assert turning_points(traj).tolist() == [1, 2, 3]
    assert math.isnan(sinuosity(traj))


def test_step_change_value():
    traj = np.array([[0.0, 0.0], [0.1, 0.0], [0.3, 0.0], [0.6, 0.0]])
    # step lengths 0.1, 0.2, 0.3
    assert step_change(traj) == pytest.approx(0.1, rel=1e-12)


def test_reflection_estimate_for_exact_bounce():
    pos, _ = rollout([0.5, 0.5], [0.03, 0.011], 60, (0.0, 1.0))
    value, hit = reflection_to_wall(pos, (0.0, 1.0))
    assert hit and value < 1e-9


def test_reflection_absent():
    value, hit = reflection_to_wall(np.linspace([0.2, 0.2], [0.3, 0.3], 10))
    assert (value, hit) == (0.0, False)


def test_expert_trajectories_are_smooth():
    cfg = BilliardsConfig(timesteps=200, seed=11)
    traj = simulate(cfg, 20)
    vals = [sinuosity(t, cfg.bounds) for t in traj]
    assert abs(np.nanmean(vals) - 1.0) < 1e-3


def test_multi_agent_stats():
    a = np.stack([np.linspace([0, 0], [0.3, 0.4], 5), np.linspace([1, 0], [1.3, 0.4], 5)])
    stats = multi_agent_stats(a)
    assert stats["path_length"] == pytest.approx(0.5)
    assert stats["path_difference"] == pytest.approx(0.0, abs=1e-15)
    assert stats["player_distance"] == pytest.approx(1.0)
    # second agent leaves the court from step 1 on
    assert stats["oob_rate"] == pytest.approx(4 / 10)
    flat = a.transpose(1, 0, 2).reshape(5, 4)
    assert multi_agent_stats(flat) == stats
    assert "player_distance" not in multi_agent_stats(a[:1])


def test_evaluate_report():
    rng = np.random.default_rng(0)
    truth = simulate(BilliardsConfig(timesteps=20, seed=1), 3)
    pred = truth + rng.normal(scale=1e-3, size=truth.shape)
    masks = np.ones((3, 20), bool)
    masks[:, 5:9] = False
    rep = evaluate(pred, truth, masks)
    assert set(rep.values) <= set(ALL_METRICS)
    assert {"l2_loss", "sinuosity", "step_change", "path_length"} <= set(rep.values)
    assert "l2_loss" in rep.to_json() and "l2_loss" in rep.to_table()
    assert len(rep.percentiles("l2_loss")) == 3
    with pytest.raises(ValueError, match="unknown"):
        evaluate(pred, truth, masks, metrics=["nope"])


@given(st.integers(0, 10 ** 6))
@settings(max_examples=50, deadline=None)
def test_sinuosity_at_least_one(seed):
    traj = np.random.default_rng(seed).uniform(0.1, 0.9, (15, 2))
    s = sinuosity(traj)
    assert math.isnan(s) or s >= 1.0 - 1e-12


def test_two_unit_legs_right_angle():
    traj = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    assert sinuosity(traj, walls=(-10.0, 10.0)) == pytest.approx(2 / math.sqrt(2), rel=1e-12)


def test_step_change_doubling_speeds():
    traj = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [7.0, 0.0]])
    assert step_change(traj) == pytest.approx(1.5, rel=1e-15)


def test_v_path_reversing_at_centre():
    r = 0.02
    xs = [0.2, 0.3, 0.4, 0.5, 0.4, 0.3, 0.2]
    traj = np.array([[x, 0.5] for x in xs])
    value, hit = reflection_to_wall(traj, (r, 1 - r))
    assert hit and value == pytest.approx(0.5 - r, abs=1e-12)


def test_stationary_and_constant_distance_agents():
    still = np.full((3, 6, 2), 0.4)
    stats = multi_agent_stats(still)
    assert stats["path_length"] == 0 and stats["path_difference"] == 0
    a = np.linspace([0.1, 0.1], [0.5, 0.3], 8)
    pair = np.stack([a, a + [0.0, 0.25]])
    assert multi_agent_stats(pair)["player_distance"] == pytest.approx(0.25, rel=1e-12)


def naive_agent_stats(agents, court):
    K, T, _ = agents.shape
    lengths = []
    for k in range(K):
        total = 0.0
        for t in range(1, T):
            total += math.dist(agents[k][t], agents[k][t - 1])
        lengths.append(total)
    (x_lo, x_hi), (y_lo, y_hi) = court
    out = 0
    for k in range(K):
        for t in range(T):
            x, y = agents[k][t]
            out += not (x_lo <= x <= x_hi and y_lo <= y <= y_hi)
    dist = 0.0
    for t in range(T):
        pairs = [math.dist(agents[a][t], agents[b][t]) for a in range(K) for b in range(a + 1, K)]
        dist += sum(pairs) / len(pairs)
    return {"path_length": sum(lengths) / K, "oob_rate": out / (K * T),
            "path_difference": max(lengths) - min(lengths), "player_distance": dist / T}


def test_multi_agent_matches_naive_oracle():
    rng = np.random.default_rng(5)
    court = ((0.0, 1.0), (0.0, 0.5))
    for _ in range(20):
        agents = rng.uniform(-0.1, 1.1, (5, 12, 2))
        got = multi_agent_stats(agents, court)
        want = naive_agent_stats(agents, court)
        for k in want:
            assert got[k] == pytest.approx(want[k], rel=1e-12, abs=1e-15), k


def test_metrics_invariant_to_sequence_order():
    truth = simulate(BilliardsConfig(timesteps=30, seed=2), 6)
    pred = truth + np.random.default_rng(1).normal(scale=0.01, size=truth.shape)
    masks = np.random.default_rng(2).random((6, 30)) < 0.5
    masks[:, 0] = True
    perm = np.random.default_rng(3).permutation(6)
    a = evaluate(pred, truth, masks).values
    b = evaluate(pred[perm], truth[perm], masks[perm]).values
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-12), k


def test_l2_of_truth_is_zero():
    truth = simulate(BilliardsConfig(timesteps=10, seed=2), 3)
    masks = np.zeros((3, 10), bool)
    masks[:, 0] = True
    assert evaluate(truth, truth, masks, metrics=["l2_loss"]).values["l2_loss"] == 0.0


def test_simulated_straight_segments_are_exactly_straight():
    cfg = BilliardsConfig(timesteps=200)
    pos, vel = rollout([0.3, 0.6], [0.021, -0.013], 200, cfg.bounds)
    change = np.flatnonzero((vel[1:] != vel[:-1]).any(axis=1)) + 1
    for a, b in zip(np.r_[0, change], np.r_[change, 200]):
        if b - a >= 3:
            assert abs(sinuosity(pos[a:b], (-1.0, 2.0)) - 1.0) < 1e-6
            assert step_change(pos[a:b]) < 1e-9


def test_simulated_reflections_sit_on_walls():
    cfg = BilliardsConfig(timesteps=200, seed=4)
    for traj in simulate(cfg, 10):
        value, hit = reflection_to_wall(traj, cfg.bounds)
        assert value < 1e-6

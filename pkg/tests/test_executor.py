import math

import numpy as np
import pytest

from mobman.diffusion import ActionChunkTensor
from mobman.executor import (
    ChunkPlan,
    ExecutorConfig,
    LatencyConfig,
    MatchWeights,
    PredictedState,
    Waypoint,
    advance_state,
    command_to_target,
    forward_rollout,
    run_executor,
    splice,
    state_discrepancy,
    state_match,
)
from mobman.geometry import Pose2
from mobman.sim import CruisePolicy, Plant, PlantConfig

IDENT_Q = np.array([1.0, 0.0, 0.0, 0.0])


def state(x=0.0, y=0.0, th=0.0, hand=(0.3, 0.0, -0.2), grip=1.0):
    return PredictedState(Pose2(x, y, th), np.array(hand, float), IDENT_Q.copy(), grip)


def cruise_chunk(step=0.03, horizon=16, grip=1.0):
    rows = np.zeros((horizon, 11))
    rows[:, 0] = step
    rows[:, 6] = 1.0
    rows[:, 10] = grip
    return ActionChunkTensor(rows)


class TestRollout:
    def test_starts_at_s0_and_has_horizon_length(self):
        s0 = state()
        roll = forward_rollout(s0, cruise_chunk())
        assert len(roll) == 16
        assert roll[0] is s0

    def test_straight_line_integration(self):
        roll = forward_rollout(state(), cruise_chunk(step=0.03))
        for i, s in enumerate(roll):
            assert s.base.x == pytest.approx(0.03 * i, abs=1e-12)
            assert s.base.y == 0.0

    def test_base_increments_compose_in_body_frame(self):
        rows = np.zeros((3, 11))
        rows[:, 6] = 1.0
        rows[0] = [0.1, 0, math.pi / 2, 0, 0, 0, 1, 0, 0, 0, 1]
        rows[1] = [0.1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1]
        roll = forward_rollout(state(), ActionChunkTensor(rows))
        assert roll[2].base.x == pytest.approx(0.1, abs=1e-12)
        assert roll[2].base.y == pytest.approx(0.1, abs=1e-12)

    def test_advance_state_matches_rollout(self):
        chunk = cruise_chunk()
        roll = forward_rollout(state(), chunk)
        stepped = advance_state(roll[4], chunk.values[4])
        assert stepped.base.x == pytest.approx(roll[5].base.x, abs=1e-12)


class TestMatchWeights:
    def test_validation(self):
        with pytest.raises(ValueError):
            MatchWeights(w_b=-1.0)
        with pytest.raises(ValueError):
            MatchWeights(0.0, 0.0, 0.0, 0.0)

    def test_scaled(self):
        w = MatchWeights().scaled(3.0)
        assert w.w_b == 3.0 and w.w_r == pytest.approx(0.6)
        assert w.fold_radius == 0.5


class TestStateMatch:
    def test_picks_nearest(self):
        roll = forward_rollout(state(), cruise_chunk(step=0.03))
        rep = state_match(roll, state(x=0.0852))  # between indices 2 and 3
        assert rep.i_star == 3

    def test_tie_breaks_to_smaller_index(self):
        roll = forward_rollout(state(), cruise_chunk(step=0.03))
        rep = state_match(roll, state(x=0.045))  # exactly between 1 and 2
        assert rep.i_star == 1

    def test_empty_rollout_raises(self):
        with pytest.raises(ValueError):
            state_match([], state())

    def test_weight_scaling_leaves_argmin(self):
        rng = np.random.default_rng(0)
        roll = forward_rollout(state(), cruise_chunk())
        for _ in range(50):
            probe = state(
                x=rng.uniform(0, 0.5),
                y=rng.uniform(-0.05, 0.05),
                th=rng.uniform(-0.2, 0.2),
                grip=rng.uniform(0, 1),
            )
            base = state_match(roll, probe).i_star
            for f in (0.1, 0.5, 2.0, 10.0):
                assert state_match(roll, probe, MatchWeights().scaled(f)).i_star == base

    def test_discrepancy_terms_sum(self):
        a, b = state(), state(x=0.1, grip=0.5)
        total, tb, tt, tr, tg = state_discrepancy(a, b, MatchWeights())
        assert total == pytest.approx(tb + tt + tr + tg)
        assert tt == 0.0 and tr == 0.0
        assert tg == pytest.approx(0.1 * 0.25)


class TestSplice:
    def _plan(self):
        chunk = cruise_chunk()
        return ChunkPlan(chunk, forward_rollout(state(), chunk), 0.0)

    def test_keeps_tail(self):
        wps, replan = splice(self._plan(), 3)
        assert [w.index for w in wps] == list(range(3, 16))
        assert not replan
        # each waypoint target is one row ahead of its rollout state
        assert wps[0].target.base.x == pytest.approx(0.03 * 4, abs=1e-12)

    def test_replan_when_only_last_row_remains(self):
        _, replan = splice(self._plan(), 15)
        assert replan

    def test_range_checked(self):
        with pytest.raises(ValueError):
            splice(self._plan(), 16)
        with pytest.raises(ValueError):
            splice(self._plan(), -1)


class TestLatencyConfig:
    def test_defaults_total(self):
        lat = LatencyConfig()
        assert lat.total == pytest.approx(0.142)

    def test_scaled_to(self):
        lat = LatencyConfig.scaled_to(0.284)
        assert lat.d_in == pytest.approx(0.066)
        assert lat.d_net == pytest.approx(0.174)
        assert lat.d_exe == pytest.approx(0.044)

    def test_nonnegative(self):
        with pytest.raises(ValueError):
            LatencyConfig(d_in=-0.001)


class TestCommandToTarget:
    def test_deadbeat_on_track(self):
        # waypoint exactly one row ahead: command equals the feedforward row
        roll = forward_rollout(state(), cruise_chunk(step=0.03))
        wp = Waypoint(0, roll[1], cruise_chunk().values[0])
        cmd = command_to_target(roll[0], wp, dt=0.1)
        assert cmd.v == pytest.approx(0.3)
        assert cmd.omega == 0.0

    def test_deadbeat_corrects_error(self):
        wp = Waypoint(0, state(x=0.05), np.r_[0.03, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1.0])
        cmd = command_to_target(state(x=0.0), wp, dt=0.1)
        assert cmd.v == pytest.approx(0.5)

    def test_damped_gain_blends(self):
        wp = Waypoint(0, state(x=0.05), np.r_[0.03, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1.0])
        cmd = command_to_target(state(x=0.0), wp, dt=0.1, gain=0.4)
        assert cmd.v == pytest.approx((0.03 + 0.4 * (0.05 - 0.03)) / 0.1)


def run_cruise(matching=True, latency=None, kinematic=True, ticks=80, jitter=0.0, seed=0, v0=0.0):
    lat = latency if latency is not None else LatencyConfig()
    lat.jitter_std = jitter
    plant = Plant(PlantConfig(kinematic=kinematic), v0=v0)
    cfg = ExecutorConfig(
        matching=matching,
        latency=lat,
        max_ticks=ticks,
        seed=seed,
        plant_response_s=0.0 if kinematic else PlantConfig().tau_base,
    )
    return run_executor(CruisePolicy(), plant, cfg), plant


class TestExecutorLoop:
    def test_zero_latency_matching_is_identity(self):
        log_on, _ = run_cruise(matching=True, latency=LatencyConfig(0.0, 0.0, 0.0))
        log_off, _ = run_cruise(matching=False, latency=LatencyConfig(0.0, 0.0, 0.0))
        assert log_on.commands == log_off.commands
        assert all(s.i_star == 0 for s in log_on.splices[1:])
        assert log_on.rollback_count == 0

    def test_kinematic_cruise_splice_offset_is_two(self):
        # 142 ms budget at 0.3 m/s: the robot advances 4.26 cm between the
        # observation and the first effective command, against 3 cm rows
        log, _ = run_cruise(matching=True)
        steady = log.i_star_values()[1:]
        assert steady, "no steady-state splices logged"
        assert all(i == 2 for i in steady)

    def test_splice_offset_monotone_in_latency(self):
        means = []
        for total in (0.0, 0.05, 0.10, 0.142, 0.20):
            log, _ = run_cruise(matching=True, latency=LatencyConfig.scaled_to(total))
            means.append(np.mean(log.i_star_values()[1:]))
        assert all(b >= a for a, b in zip(means, means[1:]))
        assert means[0] == 0.0

    def test_matching_off_rolls_back_every_splice(self):
        log, _ = run_cruise(matching=False)
        n_splices = len(log.splices)
        assert n_splices >= 3
        # every post-startup splice re-executes from row 0 behind the robot
        assert log.rollback_count >= n_splices - 1

    def test_matching_on_no_rollbacks(self):
        log, _ = run_cruise(matching=True)
        assert log.rollback_count == 0

    def test_lagged_plant_splice_offset_in_band(self):
        log, _ = run_cruise(matching=True, kinematic=False, ticks=150)
        mean = float(np.mean(log.i_star_values()[1:]))
        assert 2.0 <= mean <= 5.0

    def test_deterministic_per_seed(self):
        a, _ = run_cruise(jitter=0.018, seed=5)
        b, _ = run_cruise(jitter=0.018, seed=5)
        assert a.commands == b.commands
        assert a.i_star_values() == b.i_star_values()

    def test_policy_horizon_checked(self):
        plant = Plant(PlantConfig(kinematic=True))
        with pytest.raises(ValueError, match="horizon"):
            run_executor(
                CruisePolicy(horizon=4), plant, ExecutorConfig(max_ticks=10)
            )

    def test_tick_callback_stops_episode(self):
        plant = Plant(PlantConfig(kinematic=True))
        seen = []

        def cb(tick, t, pl):
            seen.append(tick)
            return tick >= 7

        run_executor(CruisePolicy(), plant, ExecutorConfig(max_ticks=100), tick_callback=cb)
        assert seen[-1] == 7

    def test_splice_report_serializes(self):
        log, _ = run_cruise()
        d = log.splices[1].to_dict()
        assert {"i_star", "discrepancy", "term_base", "tick"} <= set(d)

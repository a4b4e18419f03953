"""Asynchronous receding-horizon execution with spatial-temporal state matching.

A dispatcher ticks at 10 Hz, feeding waypoints of the active chunk to the
plant, while a planner produces the next chunk in the background conditioned
on a (latency-aged) observation. When a chunk arrives, its kinematic roll-out
from the observation-time state is matched against the robot's current state;
waypoints before the matched index are expired and discarded, so execution
resumes from the spatially aligned point instead of rolling back.

Everything here runs on a virtual clock: planner latency is simulated as a
delayed arrival, command dispatch latency as a delayed effect inside the
plant, so episodes are bit-identical per seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .diffusion import ActionChunkTensor
from .geometry import Pose2, Pose3, dist_se2, geodesic_so3, quat_increment_apply, wrap_angle

CONTROL_DT = 0.1


@dataclass(frozen=True)
class PredictedState:
    """Decomposed robot state: base pose, hand position/rotation, aperture."""

    base: Pose2
    hand_pos: np.ndarray
    hand_rot: np.ndarray
    grip: float

    @staticmethod
    def make(base: Pose2, hand_rel: Pose3, grip: float) -> "PredictedState":
        return PredictedState(base, hand_rel.translation, hand_rel.rotation, grip)

    @property
    def hand_rel(self) -> Pose3:
        return Pose3(self.hand_rot, self.hand_pos)


@dataclass(frozen=True)
class MatchWeights:
    """Weights of the four discrepancy terms; defaults favor base + hand position."""

    w_b: float = 1.0
    w_t: float = 1.0
    w_r: float = 0.2
    w_g: float = 0.1
    fold_radius: float = 0.5

    def __post_init__(self):
        ws = (self.w_b, self.w_t, self.w_r, self.w_g)
        if any(w < 0 for w in ws):
            raise ValueError("weights must be nonnegative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one weight must be positive")

    def scaled(self, factor: float) -> "MatchWeights":
        return MatchWeights(
            self.w_b * factor,
            self.w_t * factor,
            self.w_r * factor,
            self.w_g * factor,
            self.fold_radius,
        )


@dataclass
class ChunkPlan:
    """An arrived chunk plus its kinematic roll-out from the observed state."""

    chunk: ActionChunkTensor
    rollout: list[PredictedState]
    t0_obs: float


@dataclass
class SpliceReport:
    i_star: int
    discarded: int
    discrepancy: float
    term_base: float
    term_trans: float
    term_rot: float
    term_grip: float
    t0_obs: float = 0.0
    tick: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def forward_rollout(
    s0: PredictedState, chunk: ActionChunkTensor, dt: float = CONTROL_DT
) -> list[PredictedState]:
    """Kinematic roll-out: geometric integration of the chunk, no dynamics.

    rollout[i] is the state after applying the first i action rows to s0
    (rollout[0] == s0). Base increments compose in the evolving base frame,
    the hand integrates its translation and quaternion increments, and the
    grip channel is absolute.
    """
    states = [s0]
    for i in range(chunk.horizon - 1):
        row = chunk.values[i]
        prev = states[-1]
        states.append(
            PredictedState(
                base=prev.base.compose(Pose2(row[0], row[1], row[2])),
                hand_pos=prev.hand_pos + row[3:6],
                hand_rot=quat_increment_apply(prev.hand_rot, row[6:10]),
                grip=float(row[10]),
            )
        )
    return states


def advance_state(s: PredictedState, row: np.ndarray) -> PredictedState:
    """Apply a single action row to a state."""
    return PredictedState(
        base=s.base.compose(Pose2(row[0], row[1], row[2])),
        hand_pos=s.hand_pos + row[3:6],
        hand_rot=quat_increment_apply(s.hand_rot, row[6:10]),
        grip=float(row[10]),
    )


def state_discrepancy(a: PredictedState, b: PredictedState, w: MatchWeights) -> tuple:
    tb = w.w_b * dist_se2(a.base, b.base, w.fold_radius) ** 2
    tt = w.w_t * float(np.sum((a.hand_pos - b.hand_pos) ** 2))
    tr = w.w_r * geodesic_so3(a.hand_rot, b.hand_rot) ** 2
    tg = w.w_g * (a.grip - b.grip) ** 2
    return tb + tt + tr + tg, tb, tt, tr, tg


def state_match(
    rollout: list[PredictedState], now: PredictedState, w: MatchWeights | None = None
) -> SpliceReport:
    """Index of the roll-out state closest to the current physical state.

    Ties break toward the smaller index so less of the plan is discarded.
    """
    if not rollout:
        raise ValueError("empty rollout")
    w = w or MatchWeights()
    best = None
    for i, s in enumerate(rollout):
        total, tb, tt, tr, tg = state_discrepancy(s, now, w)
        if best is None or total < best[0]:
            best = (total, i, tb, tt, tr, tg)
    total, i_star, tb, tt, tr, tg = best
    return SpliceReport(
        i_star=i_star,
        discarded=i_star,
        discrepancy=total,
        term_base=tb,
        term_trans=tt,
        term_rot=tr,
        term_grip=tg,
    )


@dataclass
class Waypoint:
    """One dispatchable target state, tagged with its chunk row."""

    index: int
    target: PredictedState
    row: np.ndarray


def splice(plan: ChunkPlan, i_star: int) -> tuple[list[Waypoint], bool]:
    """Waypoints from i_star onward; flag requests an immediate replan when
    only the degenerate tail remains."""
    T_p = plan.chunk.horizon
    if not 0 <= i_star < T_p:
        raise ValueError(f"i_star {i_star} out of range [0, {T_p})")
    waypoints = []
    for i in range(i_star, T_p):
        row = plan.chunk.values[i]
        waypoints.append(
            Waypoint(index=i, target=advance_state(plan.rollout[i], row), row=row)
        )
    replan_now = i_star == T_p - 1
    return waypoints, replan_now


@dataclass
class LatencyConfig:
    """End-to-end latency budget: observation age, planning, command dispatch [s]."""

    d_in: float = 0.033
    d_net: float = 0.087
    d_exe: float = 0.022
    jitter_std: float = 0.0  # total-latency jitter, split evenly over the three legs

    def __post_init__(self):
        if min(self.d_in, self.d_net, self.d_exe) < 0:
            raise ValueError("delays must be nonnegative")

    @property
    def total(self) -> float:
        return self.d_in + self.d_net + self.d_exe

    @staticmethod
    def scaled_to(total: float) -> "LatencyConfig":
        """Default 33/87/22 ms split rescaled to a new total latency."""
        base = LatencyConfig()
        if base.total == 0:
            raise ValueError("cannot scale a zero budget")
        f = total / base.total
        return LatencyConfig(base.d_in * f, base.d_net * f, base.d_exe * f)


@dataclass
class ExecutorConfig:
    matching: bool = True
    weights: MatchWeights = field(default_factory=MatchWeights)
    horizon: int = 16  # T_p
    exec_horizon: int = 8  # T_a
    dt: float = CONTROL_DT
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    max_ticks: int = 1200
    seed: int = 0
    rollback_threshold: float = 0.005  # m behind current pose, along heading
    jitter_window: float = 0.5  # s after a splice in which sign flips count
    # plant motor time constant as seen by the dispatcher; lowers the
    # position-correction gain to dt / (dt + tau) so the loop stays damped on
    # a lagged plant (0 = deadbeat, for kinematic plants)
    plant_response_s: float = 0.0


@dataclass
class PlantCommand:
    """One control-tick command: base twist plus hand and grip targets."""

    v: float
    v_lat: float
    omega: float
    hand_target: Pose3
    grip_target: float


@dataclass
class EpisodeLog:
    events: list[dict] = field(default_factory=list)
    splices: list[SpliceReport] = field(default_factory=list)
    rollback_count: int = 0
    jitter_count: int = 0
    commands: list[tuple] = field(default_factory=list)  # (tick, v, v_lat, omega)

    def add(self, tick: int, t: float, kind: str, payload: dict):
        self.events.append({"tick": tick, "t": round(t, 6), "kind": kind, "payload": payload})

    def i_star_values(self) -> list[int]:
        return [s.i_star for s in self.splices]


def command_to_target(
    now: PredictedState, wp: Waypoint, dt: float, gain: float = 1.0
) -> PlantCommand:
    """Command toward a waypoint: action-row feedforward plus error correction.

    gain = 1 is deadbeat (kinematic plants); on a lagged plant the caller
    lowers it to dt / (dt + tau) so the position loop stays damped while the
    feedforward keeps steady-state tracking exact.
    """
    rel = wp.target.base.relative_to(now.base)
    return PlantCommand(
        v=(wp.row[0] + gain * (rel.x - wp.row[0])) / dt,
        v_lat=(wp.row[1] + gain * (rel.y - wp.row[1])) / dt,
        omega=(wp.row[2] + gain * (wrap_angle(rel.theta) - wp.row[2])) / dt,
        hand_target=wp.target.hand_rel,
        grip_target=wp.target.grip,
    )


def _advance_by_latency(state: PredictedState, v: float, omega: float, d_exe: float):
    """Where the base will be when a command issued now takes effect."""
    th = state.base.theta
    return PredictedState(
        base=Pose2(
            state.base.x + v * math.cos(th) * d_exe,
            state.base.y + v * math.sin(th) * d_exe,
            th + omega * d_exe,
        ),
        hand_pos=state.hand_pos,
        hand_rot=state.hand_rot,
        grip=state.grip,
    )


def run_executor(policy, plant, config: ExecutorConfig, tick_callback=None) -> EpisodeLog:
    """Drive the plant with chunks from the policy on a virtual clock.

    policy(obs_state, obs_t) -> ActionChunkTensor of the configured horizon.
    plant must expose step_to(t), read_state() -> (PredictedState, v, omega),
    state_at(t) and issue_command(cmd, t_effect).

    Exactly one plan may be pending. A new plan is activated (matched and
    spliced) at the first tick boundary at or after its arrival. The next
    request is scheduled so the arrival lands T_a ticks after the previous
    activation. With matching disabled, execution restarts from row 0 of
    every arriving chunk.
    """
    lat = config.latency
    dt = config.dt
    rng = np.random.default_rng(config.seed)
    log = EpisodeLog()

    pending = None  # (arrival_time, chunk, obs_state, obs_t)
    request_tick = 0
    waypoints: list[Waypoint] = []
    wp_cursor = 0
    last_splice_tick = None
    prev_v_sign = 0
    chunk_net_forward = 0.0

    def jitter():
        if lat.jitter_std <= 0:
            return 0.0
        # one third of the budget's jitter per leg, never negative total
        return float(rng.normal(0.0, lat.jitter_std / 3.0))

    for tick in range(config.max_ticks):
        t = tick * dt
        plant.step_to(t)

        # planner request (one in flight at a time); runs before arrival
        # handling so a zero-latency plan activates on the same tick
        if pending is None and tick >= request_tick:
            obs_t = max(t - (lat.d_in + max(0.0, jitter())), 0.0)
            obs_state = plant.state_at(obs_t)
            chunk = policy(obs_state, obs_t)
            if chunk.horizon != config.horizon:
                raise ValueError(
                    f"policy produced horizon {chunk.horizon}, expected {config.horizon}"
                )
            arrival = t + lat.d_net + max(0.0, jitter())
            pending = (arrival, chunk, obs_state, obs_t)
            log.add(tick, t, "plan_request", {"obs_t": round(obs_t, 6)})
            log.add(tick, t, "plan_arrival", {"t_arrival": round(arrival, 6)})
            request_tick = config.max_ticks  # re-armed at next activation

        # plan arrival -> match + splice at this tick boundary
        if pending is not None and pending[0] <= t + 1e-9:
            arrival_t, chunk, obs_state, obs_t = pending
            pending = None
            plan = ChunkPlan(
                chunk=chunk, rollout=forward_rollout(obs_state, chunk, dt), t0_obs=obs_t
            )
            now_state, v_now, omega_now = plant.read_state()
            now_eff = _advance_by_latency(now_state, v_now, omega_now, lat.d_exe)
            if config.matching:
                report = state_match(plan.rollout, now_eff, config.weights)
            else:
                _, tb, tt, tr, tg = state_discrepancy(
                    plan.rollout[0], now_eff, config.weights
                )
                report = SpliceReport(0, 0, tb + tt + tr + tg, tb, tt, tr, tg)
            report.t0_obs = obs_t
            report.tick = tick
            waypoints, replan_now = splice(plan, report.i_star)
            wp_cursor = 0
            chunk_net_forward = float(np.sum(chunk.values[:, 0]))
            log.splices.append(report)
            log.add(tick, t, "splice", report.to_dict())
            last_splice_tick = tick
            prev_v_sign = 0
            if replan_now:
                request_tick = tick
            else:
                request_tick = tick + max(
                    0, config.exec_horizon - math.ceil(lat.d_net / dt - 1e-9)
                )

        # dispatch; before the first chunk arrives the plant is left alone
        # (startup grace), afterwards an empty queue means hold-in-place
        now_state, v_now, omega_now = plant.read_state()
        payload_extra = {}
        if wp_cursor >= len(waypoints) and last_splice_tick is None:
            if tick_callback is not None and tick_callback(tick, t, plant):
                break
            continue
        if wp_cursor < len(waypoints):
            wp = waypoints[wp_cursor]
            wp_cursor += 1
            cmd = command_to_target(
                now_state, wp, dt, gain=dt / (dt + config.plant_response_s)
            )
            # rollback: executed waypoint behind the current pose along heading
            rel = wp.target.base.relative_to(now_state.base)
            payload_extra = {"ex": round(rel.x, 9), "ey": round(rel.y, 9), "row": wp.index}
            if rel.x < -config.rollback_threshold and chunk_net_forward > 1e-6:
                log.rollback_count += 1
                log.add(tick, t, "rollback", {"behind_m": round(-rel.x, 6), "row": wp.index})
        else:
            cmd = PlantCommand(0.0, 0.0, 0.0, now_state.hand_rel, now_state.grip)
        plant.issue_command(cmd, t + lat.d_exe)
        log.commands.append((tick, cmd.v, cmd.v_lat, cmd.omega))
        log.add(
            tick,
            t,
            "command",
            {
                "v": round(cmd.v, 9),
                "v_lat": round(cmd.v_lat, 9),
                "omega": round(cmd.omega, 9),
                **payload_extra,
            },
        )

        # splice jitter: forward-velocity sign reversals shortly after a splice
        sign = 0 if abs(cmd.v) < 0.02 else (1 if cmd.v > 0 else -1)
        if (
            last_splice_tick is not None
            and (tick - last_splice_tick) * dt <= config.jitter_window + 1e-9
        ):
            if sign != 0 and prev_v_sign != 0 and sign != prev_v_sign:
                log.jitter_count += 1
                log.add(tick, t, "jitter", {"v": round(cmd.v, 6)})
        if sign != 0:
            prev_v_sign = sign

        if tick_callback is not None and tick_callback(tick, t, plant):
            break

    return log

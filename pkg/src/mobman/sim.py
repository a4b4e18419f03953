"""Deterministic plant, scripted experts, scenarios and episode metrics.

The plant is a differential-drive base with first-order motor lag plus a
pose-tracked arm, stepped at 100 Hz under 10 Hz control. Scripted experts
produce both capture sessions for the processing pipeline (chest/hand pose
streams, fiducial detections, fingertip markers) and reference trajectories
for replay policies, so every claim about the toolkit can be checked end to
end at desk scale. All randomness flows from explicit seeds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .anchoring import CHEST, HAND, Extrinsic, TagDetection, VioTrajectory
from .executor import (
    CONTROL_DT,
    EpisodeLog,
    ExecutorConfig,
    PlantCommand,
    PredictedState,
    run_executor,
)
from .diffusion import ACTION_DIM, ActionChunkTensor, DEFAULT_HORIZON
from .geometry import (
    Pose2,
    Pose3,
    geodesic_so3,
    quat_canonical,
    quat_conj,
    quat_from_axis_angle,
    quat_mul,
    slerp,
    wrap_angle,
)
from .pipeline import GripperCalib, RawSession

CHEST_HEIGHT = 0.9  # m, chest frame above the ground plane
ARM_REACH = 0.75  # m, hand position clamp radius around the chest origin

DEFAULT_CALIB = GripperCalib(d_closed=0.01, d_open=0.09)


# ---------------------------------------------------------------------------
# Plant
# ---------------------------------------------------------------------------


@dataclass
class PlantConfig:
    tau_base: float = 0.15  # s, motor response of v and omega
    tau_arm: float = 0.08  # s, pose-tracking lag of the arm
    lateral_clip: float = 0.05  # m/s, saturation of the lateral channel
    lateral_tau: float = 0.2  # s, low-pass after the clip
    grip_rate: float = 2.0  # 1/s, aperture slew limit
    v_max: float = 0.8
    omega_max: float = 1.5
    dt_sub: float = 0.01
    kinematic: bool = False  # tau -> 0 limit: velocities equal commands

    def __post_init__(self):
        if min(self.tau_base, self.tau_arm, self.lateral_tau) <= 0:
            raise ValueError("time constants must be positive")
        if self.dt_sub <= 0:
            raise ValueError("substep must be positive")


class Plant:
    """100 Hz plant with a command queue honoring dispatch latency.

    Commands are applied at the first substep boundary at or after their
    effect time (virtual-clock quantization). A snapshot history backs
    state_at() for aged observations.
    """

    def __init__(
        self,
        config: PlantConfig,
        base: Pose2 = Pose2(),
        hand_rel: Pose3 | None = None,
        grip: float = 1.0,
        v0: float = 0.0,
    ):
        self.config = config
        self.base = base
        self.hand_rel = hand_rel if hand_rel is not None else Pose3()
        self.grip = float(grip)
        self.v = float(v0)
        self.omega = 0.0
        self.v_lat = 0.0
        self.t = 0.0
        self.cmd = PlantCommand(0.0, 0.0, 0.0, self.hand_rel, self.grip)
        if config.kinematic:
            self.cmd = replace(self.cmd, v=self.v)
        self._queue: list[tuple[float, PlantCommand]] = []
        self._history: list[tuple[float, PredictedState, float, float]] = []
        self._snapshot()

    def _snapshot(self):
        self._history.append(
            (self.t, PredictedState.make(self.base, self.hand_rel, self.grip), self.v, self.omega)
        )

    def issue_command(self, cmd: PlantCommand, t_effect: float) -> None:
        self._queue.append((t_effect, cmd))

    def read_state(self) -> tuple[PredictedState, float, float]:
        return PredictedState.make(self.base, self.hand_rel, self.grip), self.v, self.omega

    def state_at(self, t: float) -> PredictedState:
        """State at a past time, interpolated between substep snapshots."""
        hist = self._history
        if t <= hist[0][0]:
            return hist[0][1]
        if t >= hist[-1][0]:
            return hist[-1][1]
        ts = [h[0] for h in hist]
        j = int(np.searchsorted(ts, t, side="right"))
        (t0, s0, _, _), (t1, s1, _, _) = hist[j - 1], hist[j]
        a = (t - t0) / (t1 - t0)
        return PredictedState(
            base=Pose2(
                (1 - a) * s0.base.x + a * s1.base.x,
                (1 - a) * s0.base.y + a * s1.base.y,
                s0.base.theta + a * wrap_angle(s1.base.theta - s0.base.theta),
            ),
            hand_pos=(1 - a) * s0.hand_pos + a * s1.hand_pos,
            hand_rot=slerp(s0.hand_rot, s1.hand_rot, a),
            grip=(1 - a) * s0.grip + a * s1.grip,
        )

    def step_to(self, t: float) -> None:
        cfg = self.config
        while self.t < t - 1e-9:
            due = [c for c in self._queue if c[0] <= self.t + 1e-9]
            if due:
                # last issued command wins when several are due
                self.cmd = due[-1][1]
                self._queue = [c for c in self._queue if c[0] > self.t + 1e-9]
            self._substep(cfg.dt_sub)
            self.t = round(self.t + cfg.dt_sub, 9)
            self._snapshot()

    def _substep(self, dt: float) -> None:
        cfg = self.config
        v_cmd = float(np.clip(self.cmd.v, -cfg.v_max, cfg.v_max))
        w_cmd = float(np.clip(self.cmd.omega, -cfg.omega_max, cfg.omega_max))
        lat_cmd = float(np.clip(self.cmd.v_lat, -cfg.lateral_clip, cfg.lateral_clip))
        if cfg.kinematic:
            self.v, self.omega, self.v_lat = v_cmd, w_cmd, lat_cmd
        else:
            decay_b = math.exp(-dt / cfg.tau_base)
            self.v = v_cmd + (self.v - v_cmd) * decay_b
            self.omega = w_cmd + (self.omega - w_cmd) * decay_b
            decay_l = math.exp(-dt / cfg.lateral_tau)
            self.v_lat = lat_cmd + (self.v_lat - lat_cmd) * decay_l
        c, s = math.cos(self.base.theta), math.sin(self.base.theta)
        self.base = Pose2(
            self.base.x + (self.v * c - self.v_lat * s) * dt,
            self.base.y + (self.v * s + self.v_lat * c) * dt,
            self.base.theta + self.omega * dt,
        )
        # arm: first-order pose tracking toward the commanded target
        a = 1.0 if cfg.kinematic else 1.0 - math.exp(-dt / cfg.tau_arm)
        target = self.cmd.hand_target
        pos = self.hand_rel.translation + a * (target.translation - self.hand_rel.translation)
        r = float(np.linalg.norm(pos))
        if r > ARM_REACH:
            pos = pos * (ARM_REACH / r)
        rot = slerp(self.hand_rel.rotation, target.rotation, a)
        self.hand_rel = Pose3(rot, pos)
        dg = np.clip(self.cmd.grip_target - self.grip, -cfg.grip_rate * dt, cfg.grip_rate * dt)
        self.grip = float(np.clip(self.grip + dg, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Scripted expert: piecewise-linear reference motion
# ---------------------------------------------------------------------------


@dataclass
class _Segment:
    t0: float
    t1: float
    b0: np.ndarray  # (x, y, theta) with theta unwrapped
    b1: np.ndarray
    h0: Pose3
    h1: Pose3
    g0: float
    g1: float


class ExpertScript:
    """Reference motion built from constant-rate primitives.

    Every primitive is linear in (x, y, theta), hand pose and grip over its
    duration, and durations are multiples of the control period, so sampling
    at any rate whose grid contains the segment corners is exact.
    """

    def __init__(self, hand_home: Pose3, grip0: float = 1.0):
        self._segments: list[_Segment] = []
        self._b = np.array([0.0, 0.0, 0.0])
        self._h = hand_home
        self._g = float(grip0)
        self._t = 0.0

    @staticmethod
    def _round_duration(d: float) -> float:
        return max(CONTROL_DT, round(round(d / CONTROL_DT) * CONTROL_DT, 9))

    def _push(self, duration, b1=None, h1=None, g1=None):
        d = self._round_duration(duration)
        b1 = self._b if b1 is None else np.asarray(b1, dtype=float)
        h1 = self._h if h1 is None else h1
        g1 = self._g if g1 is None else float(g1)
        self._segments.append(
            _Segment(self._t, round(self._t + d, 9), self._b.copy(), b1, self._h, h1, self._g, g1)
        )
        self._t = round(self._t + d, 9)
        self._b, self._h, self._g = b1, h1, g1
        return self

    def pause(self, duration: float):
        return self._push(duration)

    def drive(self, distance: float, speed: float = 0.3, ramp_steps: int = 10):
        """Straight drive ending in a stepped deceleration ramp.

        The ramp sheds speed/ramp_steps every 0.3 s so a first-order plant
        can brake without overshooting the stop point.
        """
        th = self._b[2]
        sgn = 1.0 if distance >= 0 else -1.0
        heading = np.array([math.cos(th), math.sin(th), 0.0])
        ramp = [speed * k / ramp_steps for k in range(ramp_steps - 1, 0, -1)]
        ramp += [speed * f for f in (1.0 / 15, 1.0 / 25, 1.0 / 50, 1.0 / 150)]
        ramp_dist = sum(v * 0.3 for v in ramp)
        cruise_dist = max(abs(distance) - ramp_dist, 0.0)
        if cruise_dist > 0:
            self._push(cruise_dist / speed, b1=self._b + sgn * cruise_dist * heading)
        for v in ramp:
            self._push(0.3, b1=self._b + sgn * v * 0.3 * heading)
        return self

    def turn(self, dangle: float, duration: float):
        return self._push(duration, b1=self._b + np.array([0.0, 0.0, dangle]))

    def move_hand(self, target: Pose3, duration: float):
        return self._push(duration, h1=target)

    def set_grip(self, value: float, duration: float):
        return self._push(duration, g1=value)

    @property
    def duration(self) -> float:
        return self._t

    def _segment_at(self, t: float) -> _Segment:
        if not self._segments:
            raise ValueError("empty script")
        t = min(max(t, 0.0), self.duration)
        for seg in self._segments:
            if t <= seg.t1 + 1e-12:
                return seg
        return self._segments[-1]

    def base_at(self, t: float) -> Pose2:
        seg = self._segment_at(t)
        a = 0.0 if seg.t1 == seg.t0 else (min(t, seg.t1) - seg.t0) / (seg.t1 - seg.t0)
        b = (1 - a) * seg.b0 + a * seg.b1
        return Pose2(b[0], b[1], b[2])

    def hand_at(self, t: float) -> Pose3:
        seg = self._segment_at(t)
        a = 0.0 if seg.t1 == seg.t0 else (min(t, seg.t1) - seg.t0) / (seg.t1 - seg.t0)
        return Pose3(
            slerp(seg.h0.rotation, seg.h1.rotation, a),
            (1 - a) * seg.h0.translation + a * seg.h1.translation,
        )

    def grip_at(self, t: float) -> float:
        seg = self._segment_at(t)
        a = 0.0 if seg.t1 == seg.t0 else (min(t, seg.t1) - seg.t0) / (seg.t1 - seg.t0)
        return (1 - a) * seg.g0 + a * seg.g1


HAND_HOME = Pose3(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.30, 0.0, -0.20]))
GRASP_POSE = Pose3(
    quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), 0.6), np.array([0.50, 0.10, -0.30])
)
PLACE_POSE = Pose3(
    quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), 0.4), np.array([0.45, -0.10, -0.25])
)


# ---------------------------------------------------------------------------
# Scenarios: staged geometric goals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoalStage:
    """One ordered goal; the episode succeeds when all stages held in order."""

    label: str
    base: tuple | None = None  # (x, y, theta, pos_tol, ang_tol)
    hand: tuple | None = None  # (pos 3-vector, tol)
    grip: tuple | None = None  # (op '<=' or '>=', threshold)
    hold_s: float = 0.3

    def satisfied(self, state: PredictedState, frame: Pose2) -> bool:
        if self.base is not None:
            x, y, th, pos_tol, ang_tol = self.base
            goal = frame.compose(Pose2(x, y, th))
            if math.hypot(state.base.x - goal.x, state.base.y - goal.y) > pos_tol:
                return False
            if abs(wrap_angle(state.base.theta - goal.theta)) > ang_tol:
                return False
        if self.hand is not None:
            pos, tol = self.hand
            if float(np.linalg.norm(state.hand_pos - np.asarray(pos))) > tol:
                return False
        if self.grip is not None:
            op, thr = self.grip
            if op == "<=" and not state.grip <= thr:
                return False
            if op == ">=" and not state.grip >= thr:
                return False
        return True


@dataclass
class SimScenario:
    name: str
    script: ExpertScript
    goals: list[GoalStage]
    time_limit: float = 120.0
    randomize_radius: float = 0.10  # m, initial position perturbation
    randomize_heading: float = math.radians(15.0)

    def __post_init__(self):
        if self.script.duration >= self.time_limit:
            raise ValueError("goals not reachable within the time limit")


def _nav_reach_script() -> ExpertScript:
    return (
        ExpertScript(HAND_HOME)
        .pause(0.5)
        .drive(1.5, 0.3)
        .pause(0.4)
        .move_hand(GRASP_POSE, 1.5)
        .set_grip(0.1, 0.6)
        .pause(0.6)
    )


def _nav_turn_place_script() -> ExpertScript:
    return (
        ExpertScript(HAND_HOME, grip0=0.1)
        .pause(0.5)
        .drive(1.0, 0.3)
        .turn(math.pi / 2.0, 2.5)
        .drive(0.8, 0.3)
        .pause(0.4)
        .move_hand(PLACE_POSE, 1.5)
        .set_grip(1.0, 0.6)
        .pause(0.6)
    )


def _long_horizon_script() -> ExpertScript:
    return (
        ExpertScript(HAND_HOME)
        .pause(0.5)
        .drive(1.2, 0.3)
        .turn(-math.pi / 2.0, 2.5)
        .drive(1.0, 0.3)
        .pause(0.4)
        .move_hand(GRASP_POSE, 1.5)
        .set_grip(0.1, 0.6)
        .pause(0.4)
        .move_hand(HAND_HOME, 1.5)
        .turn(math.pi, 5.0)
        .drive(0.8, 0.3)
        .pause(0.4)
        .set_grip(1.0, 0.6)
        .pause(0.6)
    )


def _cruise_script() -> ExpertScript:
    return ExpertScript(HAND_HOME).drive(3.0, 0.3)


_GRIP_CLOSED = ("<=", 0.15)
_GRIP_OPEN = (">=", 0.8)


def make_scenario(name: str) -> SimScenario:
    if name == "nav_reach":
        return SimScenario(
            name,
            _nav_reach_script(),
            goals=[
                GoalStage("arrive", base=(1.5, 0.0, 0.0, 0.06, 0.15), hold_s=0.5),
                GoalStage("reach", hand=(GRASP_POSE.translation, 0.05), hold_s=0.3),
                GoalStage("grasp", grip=_GRIP_CLOSED, hold_s=0.3),
            ],
            time_limit=12.0,
        )
    if name == "nav_turn_place":
        return SimScenario(
            name,
            _nav_turn_place_script(),
            goals=[
                GoalStage(
                    "arrive", base=(1.0, 0.8, math.pi / 2.0, 0.06, 0.15), hold_s=0.5
                ),
                GoalStage("place", hand=(PLACE_POSE.translation, 0.05), hold_s=0.3),
                GoalStage("release", grip=_GRIP_OPEN, hold_s=0.3),
            ],
            time_limit=40.0,
        )
    if name == "long_horizon":
        return SimScenario(
            name,
            _long_horizon_script(),
            goals=[
                GoalStage(
                    "arrive_pick", base=(1.2, -1.0, -math.pi / 2.0, 0.06, 0.15), hold_s=0.5
                ),
                GoalStage("grasp", hand=(GRASP_POSE.translation, 0.05), grip=_GRIP_CLOSED),
                GoalStage(
                    "arrive_drop", base=(1.2, -0.2, math.pi / 2.0, 0.06, 0.15), hold_s=0.5
                ),
                GoalStage("release", grip=_GRIP_OPEN, hold_s=0.3),
            ],
            time_limit=60.0,
        )
    if name == "cruise":
        return SimScenario(
            name,
            _cruise_script(),
            goals=[GoalStage("arrive", base=(3.0, 0.0, 0.0, 0.08, 0.3), hold_s=0.3)],
            time_limit=30.0,
        )
    raise ValueError(f"unknown scenario {name!r}")


SCENARIO_NAMES = ("nav_reach", "nav_turn_place", "long_horizon", "cruise")


# ---------------------------------------------------------------------------
# Expert capture sessions for the anchoring + processing modules
# ---------------------------------------------------------------------------

BOARD_IN_WORLD = Pose3(
    quat_mul(
        quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), 1.2),
        quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), 0.4),
    ),
    np.array([0.8, -0.4, 0.5]),
)

EXTRINSICS = {
    CHEST: Extrinsic(
        CHEST,
        Pose3(
            quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), 0.3),
            np.array([0.05, 0.0, 0.10]),
        ),
    ),
    HAND: Extrinsic(
        HAND,
        Pose3(
            quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), -0.2),
            np.array([0.02, -0.01, 0.05]),
        ),
    ),
}


@dataclass
class ExpertSession:
    """Everything one synthetic demonstration produces."""

    session: RawSession  # cross_node left unset; anchoring recovers it
    detections: list[TagDetection]
    extrinsics: dict[str, Extrinsic]
    cross_node_true: Pose3  # ground truth T mapping hand-world into chest-world
    script: ExpertScript
    ref_t: np.ndarray  # 10 Hz reference grid
    ref_base: list[Pose2]
    ref_hand: list[Pose3]
    ref_grip: np.ndarray
    calib: GripperCalib = DEFAULT_CALIB


def _random_rigid(rng: np.random.Generator) -> Pose3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    q = quat_from_axis_angle(axis, rng.uniform(-math.pi, math.pi))
    return Pose3(q, rng.uniform(-2.0, 2.0, size=3))


def chest_world_pose(base: Pose2) -> Pose3:
    return base.lift(CHEST_HEIGHT)


def _sample_stream(script: ExpertScript, rate_hz: float):
    n = int(round(script.duration * rate_hz))
    t = np.round(np.arange(n + 1) / rate_hz, 9)
    chest = [chest_world_pose(script.base_at(ti)) for ti in t]
    hand = [chest_world_pose(script.base_at(ti)).compose(script.hand_at(ti)) for ti in t]
    return t, chest, hand


def _noisy(pose: Pose3, rng, sigma_pos: float, sigma_rot: float) -> Pose3:
    if sigma_pos == 0.0 and sigma_rot == 0.0:
        return pose
    dq = np.array([1.0, 0.0, 0.0, 0.0])
    if sigma_rot > 0.0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        dq = quat_from_axis_angle(axis, rng.normal(0.0, sigma_rot))
    return Pose3(
        quat_mul(dq, pose.rotation), pose.translation + rng.normal(0.0, sigma_pos, size=3)
    )


def scripted_expert(
    scenario: SimScenario,
    seed: int = 0,
    sigma_pos: float = 0.0,
    sigma_rot: float = 0.0,
    n_detections: int = 15,
    session_id: str | None = None,
) -> ExpertSession:
    """Synthesize one demonstration obeying the collection protocol.

    Chest poses stream at 30 Hz, hand poses at 20 Hz and fingertip markers at
    50 Hz — all grids containing the 10 Hz corners of the script, so the
    noiseless session round-trips through the pipeline exactly. The hand
    stream lives in its own world frame, displaced from the chest world by a
    seed-random rigid transform that anchoring must recover from the shared
    board detections.
    """
    rng = np.random.default_rng([seed, 0xE0])
    script = scenario.script
    g_true = _random_rigid(rng)

    t_c = np.round(np.arange(int(round(script.duration * 30)) + 1) / 30.0, 9)
    t_h = np.round(np.arange(int(round(script.duration * 20)) + 1) / 20.0, 9)
    t_m = np.round(np.arange(int(round(script.duration * 50)) + 1) / 50.0, 9)

    chest_poses = [
        _noisy(chest_world_pose(script.base_at(ti)), rng, sigma_pos, sigma_rot) for ti in t_c
    ]
    g_inv = g_true.inverse()
    hand_poses = [
        _noisy(
            g_inv.compose(chest_world_pose(script.base_at(ti)).compose(script.hand_at(ti))),
            rng,
            sigma_pos,
            sigma_rot,
        )
        for ti in t_h
    ]
    calib = DEFAULT_CALIB
    marker_d = np.array(
        [
            calib.d_closed + script.grip_at(ti) * (calib.d_open - calib.d_closed)
            for ti in t_m
        ]
    )
    if sigma_pos > 0.0:
        marker_d = marker_d + rng.normal(0.0, sigma_pos / 5.0, size=len(marker_d))

    def make_traj(node, t, poses):
        return VioTrajectory(
            node_id=node,
            t=t,
            pos=np.array([p.translation for p in poses]),
            quat=np.array([p.rotation for p in poses]),
            cov_trace=np.full(len(t), 1e-4),
        )

    session = RawSession(
        session_id=session_id or f"{scenario.name}-{seed}",
        chest=make_traj(CHEST, t_c, chest_poses),
        hand=make_traj(HAND, t_h, hand_poses),
        cross_node=None,
        marker_t=t_m,
        marker_d=marker_d,
    )

    # board detections in both cameras over the initial window
    detections = []
    det_span = min(1.4, script.duration)
    det_t = np.round(np.linspace(0.0, det_span, n_detections), 9)
    board_hand_world = g_inv.compose(BOARD_IN_WORLD)
    for ti in det_t:
        chest_imu = chest_world_pose(script.base_at(ti))
        cam_c = chest_imu.compose(EXTRINSICS[CHEST].T_imu_from_camera)
        detections.append(
            TagDetection(
                CHEST, float(ti), _noisy(cam_c.inverse().compose(BOARD_IN_WORLD), rng, sigma_pos, sigma_rot)
            )
        )
        hand_imu = g_inv.compose(
            chest_world_pose(script.base_at(ti)).compose(script.hand_at(ti))
        )
        cam_h = hand_imu.compose(EXTRINSICS[HAND].T_imu_from_camera)
        detections.append(
            TagDetection(
                HAND,
                float(ti),
                _noisy(cam_h.inverse().compose(board_hand_world), rng, sigma_pos, sigma_rot),
            )
        )

    n10 = int(round(script.duration * 10))
    ref_t = np.round(np.arange(n10 + 1) / 10.0, 9)
    return ExpertSession(
        session=session,
        detections=detections,
        extrinsics=EXTRINSICS,
        cross_node_true=g_true,
        script=script,
        ref_t=ref_t,
        ref_base=[script.base_at(ti) for ti in ref_t],
        ref_hand=[script.hand_at(ti) for ti in ref_t],
        ref_grip=np.array([script.grip_at(ti) for ti in ref_t]),
        calib=calib,
    )


def save_expert_session(out_dir, expert: ExpertSession) -> None:
    """Write one capture session in the on-disk raw layout the CLI reads."""
    from pathlib import Path

    from .anchoring import save_detections, save_extrinsics, save_trajectories
    from .jsonl import write_jsonl

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectories(
        out / "trajectories.jsonl",
        {CHEST: expert.session.chest, HAND: expert.session.hand},
    )
    save_detections(out / "detections.jsonl", expert.detections)
    save_extrinsics(out / "extrinsics.json", expert.extrinsics)
    write_jsonl(
        out / "markers.jsonl",
        [
            {"t": float(t), "distance_m": float(d)}
            for t, d in zip(expert.session.marker_t, expert.session.marker_d)
        ],
    )




# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

_IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])
HOLD_ROW = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])


class CruisePolicy:
    """Constant forward motion: every row advances 3 cm straight ahead."""

    def __init__(self, step: float = 0.03, horizon: int = DEFAULT_HORIZON):
        self.step = step
        self.horizon = horizon

    def __call__(self, obs: PredictedState, obs_t: float) -> ActionChunkTensor:
        rows = np.tile(HOLD_ROW, (self.horizon, 1))
        rows[:, 0] = self.step
        rows[:, 10] = obs.grip
        return ActionChunkTensor(rows, t0_obs=obs_t)


class ExpertReplayPolicy:
    """Chunked replay of a scripted reference with feedback correction.

    The observed state is matched against the 10 Hz reference (monotonic
    cursor), and each chunk row nudges the running predicted state toward the
    next reference step under the base's motion limits: bounded forward step,
    bounded steering that also bleeds off lateral error, millimeter-level
    lateral leakage, bounded hand steps.

    label_frame selects how the hand branch of the rows is expressed:
    'relative' uses chest-relative targets (invariant to where the base path
    actually ended up), 'global' replays the demonstration's world-frame hand
    motion, which entangles locomotion with manipulation — the row increments
    then contain the demo's base motion and point at the demo's absolute
    grasp location regardless of the executed path.
    """

    MAX_DX = 0.045
    MAX_DY = 0.004
    MAX_DTH = 0.12
    STEER_GAIN = 1.5
    MAX_STEER = 0.5
    MAX_HAND_STEP = 0.06
    MAX_HAND_ROT = 0.15
    MAX_DGRIP = 0.3

    def __init__(
        self,
        expert: ExpertSession,
        task_frame: Pose2 = Pose2(),
        label_frame: str = "relative",
        horizon: int = DEFAULT_HORIZON,
    ):
        if label_frame not in ("relative", "global"):
            raise ValueError("label_frame must be 'relative' or 'global'")
        self.label_frame = label_frame
        self.horizon = horizon
        self.ref_base = [task_frame.compose(b) for b in expert.ref_base]
        self.ref_hand = expert.ref_hand
        self.ref_grip = expert.ref_grip
        # demo-world hand poses, as recorded (not shifted into the task frame)
        self.ref_hand_world = [
            chest_world_pose(b).compose(h) for b, h in zip(expert.ref_base, expert.ref_hand)
        ]
        self._cursor = 0

    def _match_index(self, obs: PredictedState) -> int:
        lo = self._cursor
        hi = min(len(self.ref_base), lo + 30)
        best, best_j = None, lo
        for j in range(lo, hi):
            d = math.hypot(
                self.ref_base[j].x - obs.base.x, self.ref_base[j].y - obs.base.y
            )
            d += 0.5 * abs(wrap_angle(self.ref_base[j].theta - obs.base.theta))
            d += float(np.linalg.norm(self.ref_hand[j].translation - obs.hand_pos))
            d += 0.1 * abs(self.ref_grip[j] - obs.grip)
            # prefer the latest of equally close reference steps (idle phases)
            if best is None or d < best - 1e-9:
                best, best_j = d, j
            elif d < best + 1e-9:
                best_j = j
        self._cursor = best_j
        return best_j

    def _base_row(self, cur: Pose2, target: Pose2) -> tuple[float, float, float]:
        e = target.relative_to(cur)
        dx = float(np.clip(e.x, -self.MAX_DX, self.MAX_DX))
        dy = float(np.clip(e.y, -self.MAX_DY, self.MAX_DY))
        steer = float(np.clip(self.STEER_GAIN * e.y, -self.MAX_STEER, self.MAX_STEER))
        dth = float(np.clip(wrap_angle(e.theta) + steer, -self.MAX_DTH, self.MAX_DTH))
        return dx, dy, dth

    def _hand_step(self, pos, rot, target: Pose3):
        ep = target.translation - pos
        n = float(np.linalg.norm(ep))
        if n > self.MAX_HAND_STEP:
            ep = ep * (self.MAX_HAND_STEP / n)
        q_err = quat_canonical(quat_mul(target.rotation, quat_conj(rot)))
        ang = geodesic_so3(_IDENTITY_Q, q_err)
        frac = 1.0 if ang <= self.MAX_HAND_ROT else self.MAX_HAND_ROT / ang
        dq = slerp(_IDENTITY_Q, q_err, frac)
        return ep, dq

    def __call__(self, obs: PredictedState, obs_t: float) -> ActionChunkTensor:
        j = self._match_index(obs)
        n = len(self.ref_base)
        rows = np.zeros((self.horizon, ACTION_DIM))
        cur = obs
        hand_world = chest_world_pose(obs.base).compose(obs.hand_rel)
        for r in range(self.horizon):
            k = min(j + r + 1, n - 1)
            dx, dy, dth = self._base_row(cur.base, self.ref_base[k])
            if self.label_frame == "relative":
                dp, dq = self._hand_step(cur.hand_pos, cur.hand_rot, self.ref_hand[k])
            else:
                dp, dq = self._hand_step(
                    hand_world.translation, hand_world.rotation, self.ref_hand_world[k]
                )
                hand_world = Pose3(
                    quat_mul(dq, hand_world.rotation), hand_world.translation + dp
                )
            g = cur.grip + float(
                np.clip(self.ref_grip[k] - cur.grip, -self.MAX_DGRIP, self.MAX_DGRIP)
            )
            rows[r, 0:3] = [dx, dy, dth]
            rows[r, 3:6] = dp
            rows[r, 6:10] = dq
            rows[r, 10] = g
            cur = PredictedState(
                base=cur.base.compose(Pose2(dx, dy, dth)),
                hand_pos=cur.hand_pos + dp,
                hand_rot=quat_canonical(quat_mul(dq, cur.hand_rot)),
                grip=g,
            )
        return ActionChunkTensor(rows, t0_obs=obs_t)


# ---------------------------------------------------------------------------
# Episodes and condition comparisons
# ---------------------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    success: bool
    completion_time: float  # s; time limit when failed
    rollback_count: int
    jitter_count: int
    i_star_mean: float
    i_star_std: float
    tracking_rms: float  # m, base distance from commanded targets
    stages_done: int
    reason: str = ""

    def to_row(self) -> dict:
        return {
            "success": int(self.success),
            "completion_time_s": round(self.completion_time, 3),
            "rollbacks": self.rollback_count,
            "jitter": self.jitter_count,
            "i_star_mean": round(self.i_star_mean, 4),
            "i_star_std": round(self.i_star_std, 4),
            "tracking_rms_m": round(self.tracking_rms, 6),
            "stages_done": self.stages_done,
            "reason": self.reason,
        }


class _StageTracker:
    def __init__(self, goals: list[GoalStage], frame: Pose2, dt: float):
        self.goals = goals
        self.frame = frame
        self.dt = dt
        self.stage = 0
        self.held = 0.0
        self.done_time = None

    def update(self, t: float, state: PredictedState) -> bool:
        if self.stage >= len(self.goals):
            return True
        goal = self.goals[self.stage]
        if goal.satisfied(state, self.frame):
            self.held += self.dt
            if self.held >= goal.hold_s - 1e-9:
                self.stage += 1
                self.held = 0.0
                if self.stage >= len(self.goals):
                    self.done_time = t
                    return True
        else:
            self.held = 0.0
        return False


def run_episode(
    policy,
    scenario: SimScenario,
    plant_cfg: PlantConfig,
    exec_cfg: ExecutorConfig,
    seed: int,
    task_frame: Pose2 = Pose2(),
    start_velocity: float = 0.0,
) -> tuple[EpisodeMetrics, EpisodeLog]:
    """One deterministic virtual-time episode.

    The scenario's start pose (origin of its script, shifted by task_frame)
    is perturbed inside the randomization disk/heading range; goals are
    checked every control tick against the plant's true state and must be
    held for their dwell times in order.
    """
    rng = np.random.default_rng([seed, 0xEA])
    r = scenario.randomize_radius * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    dth = rng.uniform(-scenario.randomize_heading, scenario.randomize_heading)
    start = task_frame.compose(Pose2(r * math.cos(phi), r * math.sin(phi), dth))

    plant = Plant(
        plant_cfg,
        base=start,
        hand_rel=scenario.script.hand_at(0.0),
        grip=scenario.script.grip_at(0.0),
        v0=start_velocity,
    )
    exec_cfg = replace(
        exec_cfg, max_ticks=int(round(scenario.time_limit / exec_cfg.dt)), seed=seed
    )
    tracker = _StageTracker(scenario.goals, task_frame, exec_cfg.dt)

    def on_tick(tick, t, pl) -> bool:
        state, _, _ = pl.read_state()
        return tracker.update(t, state)

    log = run_executor(policy, plant, exec_cfg, tick_callback=on_tick)

    i_stars = log.i_star_values()
    err_sq = [
        (e["payload"]["ex"] ** 2 + e["payload"]["ey"] ** 2)
        for e in log.events
        if e["kind"] == "command" and "ex" in e["payload"]
    ]
    success = tracker.done_time is not None
    return (
        EpisodeMetrics(
            success=success,
            completion_time=tracker.done_time if success else scenario.time_limit,
            rollback_count=log.rollback_count,
            jitter_count=log.jitter_count,
            i_star_mean=float(np.mean(i_stars)) if i_stars else 0.0,
            i_star_std=float(np.std(i_stars)) if i_stars else 0.0,
            tracking_rms=math.sqrt(float(np.mean(err_sq))) if err_sq else 0.0,
            stages_done=tracker.stage,
            reason="" if success else f"timeout at stage {tracker.stage}",
        ),
        log,
    )


@dataclass(frozen=True)
class Condition:
    name: str
    matching: bool = True
    label_frame: str = "relative"
    latency_ms: float = 142.0
    jitter_ms: float = 0.0
    locomotion_variation: bool = False  # per-trial rigid shift of the whole task


def _trial_task_frame(trial_seed: int, enabled: bool) -> Pose2:
    if not enabled:
        return Pose2()
    rng = np.random.default_rng([trial_seed, 0xF0])
    r = 0.25 * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return Pose2(r * math.cos(phi), r * math.sin(phi), rng.uniform(-0.35, 0.35))


def run_condition_trial(
    cond: Condition,
    scenario_name: str,
    trial_seed: int,
    plant_cfg: PlantConfig | None = None,
) -> tuple[EpisodeMetrics, EpisodeLog]:
    from .executor import LatencyConfig

    plant_cfg = plant_cfg or PlantConfig()
    scenario = make_scenario(scenario_name)
    frame = _trial_task_frame(trial_seed, cond.locomotion_variation)
    expert = scripted_expert(scenario, seed=trial_seed)
    policy = ExpertReplayPolicy(expert, task_frame=frame, label_frame=cond.label_frame)
    lat = LatencyConfig.scaled_to(cond.latency_ms / 1000.0)
    lat.jitter_std = cond.jitter_ms / 1000.0
    exec_cfg = ExecutorConfig(
        matching=cond.matching,
        latency=lat,
        plant_response_s=0.0 if plant_cfg.kinematic else plant_cfg.tau_base,
    )
    return run_episode(policy, scenario, plant_cfg, exec_cfg, trial_seed, task_frame=frame)


def compare_conditions(
    conditions: list[Condition],
    scenario_name: str,
    n_trials: int,
    master_seed: int = 0,
    plant_cfg: PlantConfig | None = None,
) -> tuple[list[dict], dict]:
    """Run the condition matrix; same trial seeds across conditions.

    Returns per-episode rows (CSV-ready) and an aggregate summary keyed by
    condition name.
    """
    rows = []
    aggregate = {}
    for cond in conditions:
        metrics = []
        for trial in range(n_trials):
            trial_seed = int(
                np.random.SeedSequence([master_seed, trial]).generate_state(1)[0]
            )
            m, _ = run_condition_trial(cond, scenario_name, trial_seed, plant_cfg)
            metrics.append(m)
            row = {"condition": cond.name, "scenario": scenario_name, "trial": trial}
            row.update(m.to_row())
            rows.append(row)
        n = len(metrics)
        aggregate[cond.name] = {
            "trials": n,
            "success_rate": sum(m.success for m in metrics) / n,
            "mean_time_s": round(
                float(np.mean([m.completion_time for m in metrics])), 3
            ),
            "mean_rollbacks": round(float(np.mean([m.rollback_count for m in metrics])), 3),
            "mean_jitter": round(float(np.mean([m.jitter_count for m in metrics])), 3),
            "i_star_mean": round(float(np.mean([m.i_star_mean for m in metrics])), 3),
        }
    return rows, aggregate

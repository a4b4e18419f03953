"""Raw multi-rate capture streams -> decoupled 10 Hz demonstration dataset.

The chain: quality filter, map the hand trajectory into the chest world frame,
resample everything onto a uniform grid (nearest image, linear position, slerp
rotation), optionally smooth, decouple the hand pose against the chest pose,
project the chest onto the ground plane, and map fingertip marker distance to
a normalized gripper aperture.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .anchoring import VioTrajectory
from .geometry import (
    Pose2,
    Pose3,
    quat_canonical,
    quat_conj,
    quat_mul,
    slerp,
    wrap_angle,
    yaw_project,
)
from .jsonl import read_jsonl, write_jsonl


class PipelineError(ValueError):
    """Raised when a session cannot be assembled into a dataset."""


@dataclass(frozen=True)
class GripperCalib:
    """One-time open/close calibration of the fingertip marker distance [m]."""

    d_closed: float
    d_open: float

    def __post_init__(self):
        if not self.d_open > self.d_closed:
            raise ValueError("d_open must exceed d_closed")


@dataclass(frozen=True)
class BaseCommand:
    """Differential-drive command: forward velocity [m/s] and yaw rate [rad/s]."""

    v: float
    omega: float


@dataclass
class RawSession:
    """Unprocessed capture streams of one demonstration."""

    session_id: str
    chest: VioTrajectory
    hand: VioTrajectory
    cross_node: Pose3 | None  # maps hand-world coords into the chest world
    marker_t: np.ndarray  # fingertip distance stream timestamps [s]
    marker_d: np.ndarray  # fingertip distances [m]
    chest_images: list[tuple[float, str]] = field(default_factory=list)
    hand_images: list[tuple[float, str]] = field(default_factory=list)

    def __post_init__(self):
        self.marker_t = np.asarray(self.marker_t, dtype=float)
        self.marker_d = np.asarray(self.marker_d, dtype=float)


@dataclass
class PipelineConfig:
    rate_hz: float = 10.0
    smoothing: bool = True
    savgol_window: int = 9
    savgol_order: int = 2
    cov_threshold: float = 0.01  # m^2, trace
    workspace_bound: float = 5.0  # m, axis-aligned displacement box half-size


@dataclass
class FilterReport:
    accepted: bool
    reasons: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DemoStep:
    """One 10 Hz record: planar base pose, chest-relative hand pose, aperture."""

    t: float
    base: Pose2
    hand_rel: Pose3
    grip: float
    chest_image_ref: str | None = None
    hand_image_ref: str | None = None


@dataclass
class DemoDataset:
    steps: list[DemoStep]
    session_id: str = ""
    filter_report: FilterReport | None = None

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class ResampledSession:
    """All streams aligned to one uniform grid, hand already in chest world."""

    t: np.ndarray
    chest_pos: np.ndarray  # (N, 3)
    chest_quat: np.ndarray  # (N, 4)
    hand_pos: np.ndarray
    hand_quat: np.ndarray
    marker_d: np.ndarray
    chest_image_refs: list[str | None]
    hand_image_refs: list[str | None]


def _nearest_ref(grid: np.ndarray, stream: list[tuple[float, str]]) -> list[str | None]:
    if not stream:
        return [None] * len(grid)
    ts = np.array([s[0] for s in stream])
    refs = [s[1] for s in stream]
    out = []
    for t in grid:
        out.append(refs[int(np.argmin(np.abs(ts - t)))])
    return out


def _resample_traj(traj: VioTrajectory, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos = np.empty((len(grid), 3))
    quat = np.empty((len(grid), 4))
    for i, t in enumerate(grid):
        p = traj.sample_at(float(t))
        pos[i] = p.translation
        quat[i] = p.rotation
    return pos, quat


def map_hand_into_chest_world(hand: VioTrajectory, cross_node: Pose3) -> VioTrajectory:
    """Re-express every hand sample through the inter-node transform."""
    pos = np.empty_like(hand.pos)
    quat = np.empty_like(hand.quat)
    for i in range(len(hand.t)):
        mapped = cross_node.compose(Pose3(hand.quat[i], hand.pos[i]))
        pos[i] = mapped.translation
        quat[i] = mapped.rotation
    return VioTrajectory(hand.node_id, hand.t.copy(), pos, quat, hand.cov_trace.copy())


def resample_to_grid(session: RawSession, rate_hz: float = 10.0) -> ResampledSession:
    """Align all modalities on a uniform grid covering the streams' overlap.

    The grid starts at the latest stream start and ends at the earliest stream
    end; images use nearest-neighbor lookup, positions linear interpolation,
    rotations slerp. The hand trajectory must already be mapped into the chest
    world (see map_hand_into_chest_world).
    """
    if len(session.marker_t) == 0:
        raise PipelineError("marker stream is empty")
    t0 = max(session.chest.t_start, session.hand.t_start, float(session.marker_t[0]))
    t1 = min(session.chest.t_end, session.hand.t_end, float(session.marker_t[-1]))
    dt = 1.0 / rate_hz
    n = int(math.floor((t1 - t0) / dt + 1e-9)) + 1
    if t1 < t0 or n < 1:
        raise PipelineError("streams have no temporal overlap")
    # the last point can drift past t1 by float error; clamp into the overlap
    grid = np.minimum(t0 + dt * np.arange(n), t1)
    chest_pos, chest_quat = _resample_traj(session.chest, grid)
    hand_pos, hand_quat = _resample_traj(session.hand, grid)
    marker = np.interp(grid, session.marker_t, session.marker_d)
    return ResampledSession(
        t=grid,
        chest_pos=chest_pos,
        chest_quat=chest_quat,
        hand_pos=hand_pos,
        hand_quat=hand_quat,
        marker_d=marker,
        chest_image_refs=_nearest_ref(grid, session.chest_images),
        hand_image_refs=_nearest_ref(grid, session.hand_images),
    )


def savgol_smooth(series: np.ndarray, window: int = 9, order: int = 2) -> np.ndarray:
    """Savitzky-Golay smoothing of a uniformly sampled series.

    Fits a local least-squares polynomial of the given order in a centered
    window and evaluates it at the center. Edges shrink to the largest
    symmetric window that fits. Reproduces polynomials up to `order` exactly.
    """
    series = np.asarray(series, dtype=float)
    n = len(series)
    if window % 2 == 0:
        raise ValueError("window must be odd")
    if window < 5:
        raise ValueError("window must be >= 5")
    if window > n:
        raise ValueError(f"window {window} exceeds series length {n}")
    half = window // 2
    # center-evaluation weights for each half-width actually used
    weights: dict[int, np.ndarray] = {}
    for h in set(min(half, i, n - 1 - i) for i in range(n)):
        x = np.arange(-h, h + 1, dtype=float)
        deg = min(order, 2 * h)
        A = np.vander(x, deg + 1, increasing=True)
        # value of the LS fit at x=0 is the first row of (A^T A)^-1 A^T
        weights[h] = np.linalg.solve(A.T @ A, A.T)[0]
    out = np.empty(n)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = weights[h] @ series[i - h : i + h + 1]
    return out


def smooth_pose_arrays(
    pos: np.ndarray, quat: np.ndarray, window: int, order: int
) -> tuple[np.ndarray, np.ndarray]:
    """Component-wise smoothing; quaternions renormalized afterwards.

    Component-wise filtering of quaternions is valid for the small
    inter-sample rotations of a 10 Hz stream; samples are hemisphere-aligned
    to their predecessor first so no sign flips corrupt the fit.
    """
    sp = np.column_stack([savgol_smooth(pos[:, k], window, order) for k in range(3)])
    aligned = quat.copy()
    for i in range(1, len(aligned)):
        if float(np.dot(aligned[i - 1], aligned[i])) < 0.0:
            aligned[i] = -aligned[i]
    sq = np.column_stack([savgol_smooth(aligned[:, k], window, order) for k in range(4)])
    sq = np.stack([quat_canonical(q) for q in sq])
    return sp, sq


def quality_filter(
    session: RawSession,
    cov_threshold: float = 0.01,
    workspace_bound: float = 5.0,
) -> FilterReport:
    """Accept/reject a session; rejection is a value, never an exception."""
    reasons = []
    for traj in (session.chest, session.hand):
        if np.any(traj.cov_trace > cov_threshold):
            reasons.append(f"covariance: {traj.node_id} trace exceeds {cov_threshold} m^2")
    for traj in (session.chest, session.hand):
        disp = np.max(np.abs(traj.pos - traj.pos[0]), axis=0)
        if np.any(disp > workspace_bound):
            reasons.append(
                f"workspace: {traj.node_id} displacement {disp.max():.2f} m exceeds "
                f"{workspace_bound} m bound"
            )
    return FilterReport(accepted=not reasons, reasons=reasons)


def decouple_step(chest_world: Pose3, hand_world: Pose3) -> Pose3:
    """Hand pose relative to the chest; cancels shared locomotion.

    Both poses must be expressed in the chest world frame.
    """
    return chest_world.inverse().compose(hand_world)


def project_nonholonomic(
    poses: list[Pose2], dt: float = 0.1
) -> tuple[list[BaseCommand], np.ndarray]:
    """Project a free planar trajectory onto differential-drive commands.

    Finite differences at the grid rate give (xdot, ydot, thetadot); the
    feasible command is v = xdot*cos(theta) + ydot*sin(theta), omega = thetadot
    (wrapped differencing). The discarded lateral component
    v_perp = -xdot*sin(theta) + ydot*cos(theta) is returned for diagnostics.
    """
    if len(poses) < 2:
        raise ValueError("need at least two poses")
    cmds = []
    residuals = np.empty(len(poses) - 1)
    for i in range(len(poses) - 1):
        a, b = poses[i], poses[i + 1]
        xd = (b.x - a.x) / dt
        yd = (b.y - a.y) / dt
        thd = wrap_angle(b.theta - a.theta) / dt
        c, s = math.cos(a.theta), math.sin(a.theta)
        cmds.append(BaseCommand(v=xd * c + yd * s, omega=thd))
        residuals[i] = -xd * s + yd * c
    return cmds, residuals


def lateral_quantile(residuals: np.ndarray, q: float = 0.99) -> float:
    """Nearest-rank empirical quantile of the absolute lateral residuals."""
    residuals = np.abs(np.asarray(residuals, dtype=float))
    if len(residuals) == 0:
        raise ValueError("empty residual series")
    if not 0.0 < q <= 1.0:
        raise ValueError("quantile must be in (0, 1]")
    ordered = np.sort(residuals)
    rank = max(1, int(math.ceil(q * len(ordered))))
    return float(ordered[rank - 1])


def saturation_filter(
    v_perp: np.ndarray, clip: float = 0.05, tau: float = 0.2, dt: float = 0.1
) -> np.ndarray:
    """Clamp lateral velocity to +-clip, then first-order low-pass (tau)."""
    alpha = 1.0 - math.exp(-dt / tau)
    y = 0.0
    out = np.empty(len(v_perp))
    for i, u in enumerate(np.asarray(v_perp, dtype=float)):
        u = min(max(u, -clip), clip)
        y += alpha * (u - y)
        out[i] = y
    return out


def grip_from_markers(d: float, calib: GripperCalib) -> float:
    """Linear map of marker distance to aperture in [0, 1], clamped."""
    g = (d - calib.d_closed) / (calib.d_open - calib.d_closed)
    return min(max(g, 0.0), 1.0)


def assemble_dataset(
    session: RawSession,
    calib: GripperCalib,
    config: PipelineConfig | None = None,
) -> DemoDataset:
    """Run the full chain on one session and emit the 10 Hz dataset.

    Raises PipelineError when the session fails the quality filter or the
    streams do not overlap. Timestamps are rebased to start at 0.
    """
    config = config or PipelineConfig()
    report = quality_filter(session, config.cov_threshold, config.workspace_bound)
    if not report.accepted:
        raise PipelineError("session rejected: " + "; ".join(report.reasons))
    if session.cross_node is None:
        raise PipelineError("cross-node transform missing; run anchoring first")

    hand_in_wc = map_hand_into_chest_world(session.hand, session.cross_node)
    aligned = resample_to_grid(
        RawSession(
            session_id=session.session_id,
            chest=session.chest,
            hand=hand_in_wc,
            cross_node=session.cross_node,
            marker_t=session.marker_t,
            marker_d=session.marker_d,
            chest_images=session.chest_images,
            hand_images=session.hand_images,
        ),
        config.rate_hz,
    )

    chest_pos, chest_quat = aligned.chest_pos, aligned.chest_quat
    hand_pos, hand_quat = aligned.hand_pos, aligned.hand_quat
    if config.smoothing and len(aligned.t) >= config.savgol_window:
        chest_pos, chest_quat = smooth_pose_arrays(
            chest_pos, chest_quat, config.savgol_window, config.savgol_order
        )
        hand_pos, hand_quat = smooth_pose_arrays(
            hand_pos, hand_quat, config.savgol_window, config.savgol_order
        )

    steps = []
    t0 = aligned.t[0]
    for i in range(len(aligned.t)):
        chest = Pose3(chest_quat[i], chest_pos[i])
        hand = Pose3(hand_quat[i], hand_pos[i])
        steps.append(
            DemoStep(
                t=round(float(aligned.t[i] - t0), 9),
                base=yaw_project(chest),
                hand_rel=decouple_step(chest, hand),
                grip=grip_from_markers(float(aligned.marker_d[i]), calib),
                chest_image_ref=aligned.chest_image_refs[i],
                hand_image_ref=aligned.hand_image_refs[i],
            )
        )
    return DemoDataset(steps=steps, session_id=session.session_id, filter_report=report)


def make_action_labels(dataset: DemoDataset) -> np.ndarray:
    """Per-step 11-D action labels.

    Layout: base increments (dx, dy, dtheta) expressed in the step-t base
    frame; hand translation increment (3) in the chest frame; hand rotation
    increment as a canonical unit quaternion (4, w >= 0); absolute gripper
    aperture (1). Row t moves the state from step t to step t+1.
    """
    if len(dataset) < 2:
        raise ValueError("need at least two steps to form labels")
    labels = np.empty((len(dataset) - 1, 11))
    for i in range(len(dataset) - 1):
        a, b = dataset.steps[i], dataset.steps[i + 1]
        d = b.base.relative_to(a.base)
        dq = quat_canonical(quat_mul(b.hand_rel.rotation, quat_conj(a.hand_rel.rotation)))
        labels[i, 0:3] = [d.x, d.y, d.theta]
        labels[i, 3:6] = b.hand_rel.translation - a.hand_rel.translation
        labels[i, 6:10] = dq
        labels[i, 10] = b.grip
    return labels


def integrate_labels(
    base0: Pose2, hand0: Pose3, grip0: float, labels: np.ndarray
) -> list[DemoStep]:
    """Chain action labels from an initial state; inverse of make_action_labels."""
    steps = [DemoStep(t=0.0, base=base0, hand_rel=hand0, grip=grip0)]
    for i, row in enumerate(np.asarray(labels, dtype=float)):
        prev = steps[-1]
        base = prev.base.compose(Pose2(row[0], row[1], row[2]))
        hand = Pose3(
            quat_canonical(quat_mul(row[6:10], prev.hand_rel.rotation)),
            prev.hand_rel.translation + row[3:6],
        )
        steps.append(DemoStep(t=0.1 * (i + 1), base=base, hand_rel=hand, grip=float(row[10])))
    return steps


# ---------------------------------------------------------------------------
# Dataset file format: JSONL, one step per line:
#   {"t", "base": [x, y, theta], "hand_rel": [7], "grip", "chest_image",
#    "hand_image"}
# ---------------------------------------------------------------------------


def save_dataset(path, dataset: DemoDataset) -> None:
    records = []
    for s in dataset.steps:
        rec = {
            "t": s.t,
            "base": s.base.to_list(),
            "hand_rel": s.hand_rel.to_list(),
            "grip": s.grip,
        }
        if s.chest_image_ref is not None:
            rec["chest_image"] = s.chest_image_ref
        if s.hand_image_ref is not None:
            rec["hand_image"] = s.hand_image_ref
        records.append(rec)
    write_jsonl(path, records)


def load_dataset(path, session_id: str = "") -> DemoDataset:
    steps = [
        DemoStep(
            t=float(rec["t"]),
            base=Pose2.from_list(rec["base"]),
            hand_rel=Pose3.from_list(rec["hand_rel"]),
            grip=float(rec["grip"]),
            chest_image_ref=rec.get("chest_image"),
            hand_image_ref=rec.get("hand_image"),
        )
        for rec in read_jsonl(path)
    ]
    return DemoDataset(steps=steps, session_id=session_id)

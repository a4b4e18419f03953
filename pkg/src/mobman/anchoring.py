"""Unify independently initialized per-sensor world frames via a static board.

Each camera-IMU node runs odometry in its own world frame. A fiducial board,
seen by both nodes, anchors the two frames: every detection gives the board
pose in one node's world frame (trajectory sample * camera extrinsic *
board-in-camera), the detections are averaged, and the chest-to-hand world
transform is the product of the two anchors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose3, geodesic_so3, slerp
from .jsonl import read_json, read_jsonl, write_json

CHEST = "chest"
HAND = "hand"


class TimestampError(ValueError):
    """A query time falls outside a trajectory's span."""


@dataclass
class VioTrajectory:
    """Timestamped pose stream of one node, in that node's own world frame.

    Arrays are parallel: t [s] strictly increasing, pos (N, 3) [m],
    quat (N, 4) as (w, x, y, z), cov_trace (N,) [m^2].
    """

    node_id: str
    t: np.ndarray
    pos: np.ndarray
    quat: np.ndarray
    cov_trace: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.pos = np.asarray(self.pos, dtype=float)
        self.quat = np.asarray(self.quat, dtype=float)
        self.cov_trace = np.asarray(self.cov_trace, dtype=float)
        if len(self.t) == 0:
            raise ValueError("trajectory must contain at least one sample")
        if np.any(np.diff(self.t) <= 0.0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        if np.any(self.cov_trace < 0.0):
            raise ValueError("covariance trace must be nonnegative")

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def sample_at(self, t: float) -> Pose3:
        """Interpolated pose at time t: linear position, slerp rotation."""
        if t < self.t_start or t > self.t_end:
            raise TimestampError(
                f"t={t} outside trajectory span [{self.t_start}, {self.t_end}] of {self.node_id}"
            )
        j = int(np.searchsorted(self.t, t, side="right"))
        if j == 0:
            return Pose3(self.quat[0], self.pos[0])
        if j >= len(self.t):
            return Pose3(self.quat[-1], self.pos[-1])
        i = j - 1
        s = (t - self.t[i]) / (self.t[j] - self.t[i])
        pos = (1.0 - s) * self.pos[i] + s * self.pos[j]
        return Pose3(slerp(self.quat[i], self.quat[j], s), pos)

    def cov_at(self, t: float) -> float:
        if t < self.t_start or t > self.t_end:
            raise TimestampError(f"t={t} outside trajectory span of {self.node_id}")
        return float(np.interp(t, self.t, self.cov_trace))


@dataclass(frozen=True)
class Extrinsic:
    """Fixed camera-to-IMU transform of one node (camera coords -> IMU frame)."""

    node_id: str
    T_imu_from_camera: Pose3


@dataclass(frozen=True)
class TagDetection:
    """One board sighting: board pose in the node's camera frame at time t."""

    node_id: str
    t: float
    T_cam_tag: Pose3


@dataclass
class AnchorResult:
    """Averaged board pose in one node's world frame, with residual stats."""

    node_id: str
    T_world_tag: Pose3
    detection_count: int
    position_rms: float
    rotation_rms: float
    ill_conditioned: bool = False
    rejected_count: int = 0


def board_pose_in_world(traj: VioTrajectory, ext: Extrinsic, det: TagDetection) -> Pose3:
    """Board pose in the node's world frame from a single detection.

    Chains trajectory sample (interpolated to the detection time), the fixed
    camera extrinsic, and the detected board-in-camera pose. Raises
    TimestampError for detections outside the trajectory span.
    """
    T_world_imu = traj.sample_at(det.t)
    return T_world_imu.compose(ext.T_imu_from_camera).compose(det.T_cam_tag)


def rotation_spread(poses: list[Pose3]) -> float:
    """Largest geodesic angle [rad] between any rotation and the first one."""
    if not poses:
        return 0.0
    q0 = poses[0].rotation
    return max(geodesic_so3(q0, p.rotation) for p in poses)


def average_poses(poses: list[Pose3]) -> Pose3:
    """Least-squares average: arithmetic mean translation, chordal mean rotation.

    Quaternions are hemisphere-aligned to the first pose before the
    component-wise mean; the mean is renormalized. Exact for identical inputs
    and accurate for small spreads; spreads beyond 90 degrees should be
    flagged by the caller (see rotation_spread).
    """
    if not poses:
        raise ValueError("cannot average an empty pose list")
    trans = np.mean([p.translation for p in poses], axis=0)
    q0 = poses[0].rotation
    acc = np.zeros(4)
    for p in poses:
        q = p.rotation
        if float(np.dot(q0, q)) < 0.0:
            q = -q
        acc += q
    return Pose3(acc, trans)


def anchor_node(
    traj: VioTrajectory,
    ext: Extrinsic,
    detections: list[TagDetection],
    cov_threshold: float = 0.01,
) -> AnchorResult:
    """Anchor one node: average the board pose over all valid detections.

    A detection is valid when its timestamp lies inside the trajectory span
    and the interpolated covariance trace at that time is below cov_threshold.
    """
    board_poses = []
    rejected = 0
    for det in detections:
        if det.node_id != traj.node_id:
            continue
        if det.t < traj.t_start or det.t > traj.t_end:
            rejected += 1
            continue
        if traj.cov_at(det.t) > cov_threshold:
            rejected += 1
            continue
        board_poses.append(board_pose_in_world(traj, ext, det))
    if not board_poses:
        raise ValueError(f"no valid detections for node {traj.node_id}")
    mean = average_poses(board_poses)
    pos_sq = [float(np.sum((p.translation - mean.translation) ** 2)) for p in board_poses]
    rot_sq = [geodesic_so3(p.rotation, mean.rotation) ** 2 for p in board_poses]
    return AnchorResult(
        node_id=traj.node_id,
        T_world_tag=mean,
        detection_count=len(board_poses),
        position_rms=math.sqrt(sum(pos_sq) / len(pos_sq)),
        rotation_rms=math.sqrt(sum(rot_sq) / len(rot_sq)),
        ill_conditioned=rotation_spread(board_poses) > math.pi / 2.0,
        rejected_count=rejected,
    )


def cross_node_transform(anchor_chest: Pose3, anchor_hand: Pose3) -> Pose3:
    """Transform mapping hand-world coordinates into the chest world frame."""
    return anchor_chest.compose(anchor_hand.inverse())


# ---------------------------------------------------------------------------
# File formats. Trajectory records: {"node", "t", "pose": [7], "cov_trace"};
# detection records: {"node", "t", "tag_pose": [7]}; extrinsics JSON:
# {node: [7], ...}. Poses are [px, py, pz, qw, qx, qy, qz] in SI units.
# ---------------------------------------------------------------------------


def load_trajectories(path) -> dict[str, VioTrajectory]:
    rows: dict[str, list] = {}
    for rec in read_jsonl(path):
        rows.setdefault(rec["node"], []).append(
            (float(rec["t"]), rec["pose"], float(rec.get("cov_trace", 0.0)))
        )
    out = {}
    for node, samples in rows.items():
        samples.sort(key=lambda r: r[0])
        out[node] = VioTrajectory(
            node_id=node,
            t=np.array([s[0] for s in samples]),
            pos=np.array([s[1][0:3] for s in samples], dtype=float),
            quat=np.array([s[1][3:7] for s in samples], dtype=float),
            cov_trace=np.array([s[2] for s in samples]),
        )
    return out


def save_trajectories(path, trajs: dict[str, VioTrajectory]) -> None:
    from .jsonl import write_jsonl

    records = []
    for traj in trajs.values():
        for i in range(len(traj.t)):
            records.append(
                {
                    "node": traj.node_id,
                    "t": float(traj.t[i]),
                    "pose": Pose3(traj.quat[i], traj.pos[i]).to_list(),
                    "cov_trace": float(traj.cov_trace[i]),
                }
            )
    records.sort(key=lambda r: (r["t"], r["node"]))
    write_jsonl(path, records)


def load_detections(path) -> list[TagDetection]:
    return [
        TagDetection(rec["node"], float(rec["t"]), Pose3.from_list(rec["tag_pose"]))
        for rec in read_jsonl(path)
    ]


def save_detections(path, detections: list[TagDetection]) -> None:
    from .jsonl import write_jsonl

    write_jsonl(
        path,
        [
            {"node": d.node_id, "t": d.t, "tag_pose": d.T_cam_tag.to_list()}
            for d in detections
        ],
    )


def load_extrinsics(path) -> dict[str, Extrinsic]:
    doc = read_json(path)
    return {node: Extrinsic(node, Pose3.from_list(vals)) for node, vals in doc.items()}


def save_extrinsics(path, extrinsics: dict[str, Extrinsic]) -> None:
    write_json(path, {e.node_id: e.T_imu_from_camera.to_list() for e in extrinsics.values()})


def anchor_result_to_dict(res: AnchorResult) -> dict:
    return {
        "node": res.node_id,
        "T_world_tag": res.T_world_tag.to_list(),
        "detection_count": res.detection_count,
        "rejected_count": res.rejected_count,
        "position_rms_m": res.position_rms,
        "rotation_rms_rad": res.rotation_rms,
        "ill_conditioned": res.ill_conditioned,
    }

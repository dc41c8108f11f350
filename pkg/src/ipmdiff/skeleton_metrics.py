"""Full-body poses: mapping to the pendulum state, pose CSV I/O and evaluation metrics.

Poses are arrays of shape ``(..., 22, 3)`` in meters with z pointing up. Pose
trajectories are ``(frames, agents, 22, 3)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .ipm_core import DT, L_MIN, IPMState

N_JOINTS = 22
DEFAULT_FOOT_HEIGHT = 0.05
POSE_HEADER = ["frame", "agent", "joint", "x", "y", "z"]


class PoseError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    joints: tuple
    parents: tuple
    hip: int
    left_ankle: int
    right_ankle: int
    foot_joints: tuple

    def __post_init__(self):
        if len(self.joints) != N_JOINTS or len(self.parents) != N_JOINTS:
            raise ValueError(f"topology must list exactly {N_JOINTS} joints")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ValueError("topology must have exactly one root")
        for j in range(N_JOINTS):
            seen, k = set(), j
            while self.parents[k] >= 0:
                if k in seen or not 0 <= self.parents[k] < N_JOINTS:
                    raise ValueError(f"joint {j} does not reach the root")
                seen.add(k)
                k = self.parents[k]

    @property
    def bones(self) -> list[tuple[int, int]]:
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonTopology":
        joints = tuple(d["joints"])
        index = {name: i for i, name in enumerate(joints)}

        def idx(v):
            return int(v) if isinstance(v, int) else index[v]

        return cls(
            joints=joints,
            parents=tuple(int(p) for p in d["parents"]),
            hip=idx(d["hip"]),
            left_ankle=idx(d["left_ankle"]),
            right_ankle=idx(d["right_ankle"]),
            foot_joints=tuple(idx(v) for v in d["foot_joints"]),
        )


def load_topology(path=None) -> SkeletonTopology:
    """Read a topology file; ``None`` gives the bundled 22-joint default."""
    if path is None:
        text = resources.files("ipmdiff").joinpath("data/smpl22.yaml").read_text()
    else:
        text = Path(path).read_text()
    return SkeletonTopology.from_dict(yaml.safe_load(text))


def _check_pose(pose):
    pose = np.asarray(pose, dtype=float)
    if pose.shape[-2:] != (N_JOINTS, 3):
        raise PoseError(f"pose must have shape (..., {N_JOINTS}, 3), got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise PoseError("pose contains non-finite coordinates")
    return pose


# skeleton -> pendulum --------------------------------------------------------


def skeleton_to_ipm(pose, yaw=0.0, topology: SkeletonTopology | None = None, l_min: float = L_MIN):
    """Map a pose to ``(IPMState, l)``.

    The cart sits at the horizontal ankle midpoint, the point mass at the hip.
    Angles are read in the yaw-rotated local frame by inverting the rod-end map
    ``[x + l sin(theta), y - l cos(theta) sin(phi), l cos(theta) cos(phi)]``.
    Works on batched poses; every output then carries the batch shape.
    """
    topo = topology or load_topology()
    pose = _check_pose(pose)
    cart = 0.5 * (pose[..., topo.left_ankle, :2] + pose[..., topo.right_ankle, :2])
    hip = pose[..., topo.hip, :]
    dx, dy = hip[..., 0] - cart[..., 0], hip[..., 1] - cart[..., 1]
    dz = hip[..., 2]
    l = np.sqrt(dx * dx + dy * dy + dz * dz)
    if np.any(l < l_min * (1 - 1e-12)):  # admit rounding at the boundary
        raise PoseError(f"degenerate pose: rod length below {l_min}")
    c, s = np.cos(yaw), np.sin(yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    theta = np.arcsin(np.clip(lx / l, -1.0, 1.0))
    phi = np.arctan2(-ly, dz)
    return IPMState(cart[..., 0], cart[..., 1], theta, phi), l


def ipm_to_hip(q, l, yaw=0.0):
    """World hip position for pendulum state ``q`` (the forward map)."""
    q = np.asarray(q, dtype=float)
    st, ct = np.sin(q[..., 2]), np.cos(q[..., 2])
    sp, cp = np.sin(q[..., 3]), np.cos(q[..., 3])
    lx, ly, lz = l * st, -l * ct * sp, l * ct * cp
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([q[..., 0] + c * lx - s * ly, q[..., 1] + s * lx + c * ly, lz], axis=-1)


def pose_from_ipm(q, l, yaw=0.0, topology=None, stance: float = 0.1):
    """Stick-figure pose whose ankles straddle the cart and whose hip is the rod end.

    Foot joints sit on the ground ahead of their parent; every other joint
    hangs 5 cm per tree level above the hip. A synthetic target, not anatomy.
    """
    topo = topology or load_topology()
    q = np.asarray(q, float)
    yaw = np.broadcast_to(np.asarray(yaw, float), q.shape[:-1])
    hip = ipm_to_hip(q, np.asarray(l, float), yaw)
    zero = np.zeros_like(yaw)
    side = np.stack([-np.sin(yaw), np.cos(yaw), zero], axis=-1) * stance
    ahead = np.stack([np.cos(yaw), np.sin(yaw), zero], axis=-1) * 0.12
    cart = np.stack([q[..., 0], q[..., 1], zero], axis=-1)
    pose = np.zeros(q.shape[:-1] + (N_JOINTS, 3))
    fixed = {topo.hip: hip, topo.left_ankle: cart + side, topo.right_ankle: cart - side}

    def depth(j):
        d = 0
        while topo.parents[j] >= 0:
            j, d = topo.parents[j], d + 1
        return d

    for j in sorted(range(N_JOINTS), key=depth):
        if j in fixed:
            pose[..., j, :] = fixed[j]
        elif j in topo.foot_joints:
            pose[..., j, :] = pose[..., topo.parents[j], :] + ahead
        else:
            pose[..., j, :] = hip + np.array([0.0, 0.0, 0.05 * depth(j)])
    return pose


def ipm_states(poses, yaw=0.0, topology=None):
    """``(frames, agents, 4)`` states and ``(frames, agents)`` rod lengths."""
    st, l = skeleton_to_ipm(poses, yaw, topology)
    return np.stack(st, axis=-1), l


def ipm_velocity_estimate(poses, dt: float = DT, yaw=0.0, topology=None) -> np.ndarray:
    """Rates of the mapped pendulum states: central differences inside, one-sided at the ends."""
    q, _ = ipm_states(poses, yaw, topology)
    if q.shape[0] < 2:
        raise PoseError("velocity estimate needs at least 2 frames")
    return np.gradient(q, dt, axis=0)


# metrics ---------------------------------------------------------------------


def _bone_lengths(poses, topo):
    p, c = np.array(topo.bones).T
    return np.linalg.norm(poses[..., c, :] - poses[..., p, :], axis=-1)


def foot_skating(poses, topology=None, H: float = DEFAULT_FOOT_HEIGHT) -> float:
    """Mean of ``v_f (2 - 2^(h/H))`` over foot-joint frames with height ``h < H``, in cm.

    ``v_f`` is the horizontal foot displacement between consecutive frames and
    ``h`` the height at the later frame. Returns 0 when no foot frame qualifies.
    """
    if H <= 0:
        raise ValueError("foot height threshold must be positive")
    topo = topology or load_topology()
    feet = np.asarray(poses, float)[:, :, list(topo.foot_joints), :]
    if feet.shape[0] < 2:
        return 0.0
    v = np.linalg.norm(np.diff(feet[..., :2], axis=0), axis=-1) * 100.0
    h = feet[1:, ..., 2]
    mask = h < H
    if not mask.any():
        return 0.0
    return float(np.mean(v[mask] * (2.0 - 2.0 ** (h[mask] / H))))


def evaluate_metrics(pred, gt, topology: SkeletonTopology | None = None, H: float = DEFAULT_FOOT_HEIGHT) -> dict:
    """MPJPE, hipADE, hipFDE and MBLE in meters; FSE (of ``pred``) in centimeters."""
    topo = topology or load_topology()
    pred, gt = _check_pose(pred), _check_pose(gt)
    if pred.shape != gt.shape or pred.ndim != 4:
        raise PoseError(f"pose trajectories must match as (frames, agents, 22, 3): {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=-1)
    hip = err[..., topo.hip]
    return {
        "MPJPE": float(err.mean()),
        "hipADE": float(hip.mean()),
        "hipFDE": float(hip[-1].mean()),
        "MBLE": float(np.abs(_bone_lengths(gt, topo) - _bone_lengths(pred, topo)).mean()),
        "FSE": foot_skating(pred, topo, H),
    }


# pose CSV --------------------------------------------------------------------


def poses_to_csv(poses) -> str:
    poses = _check_pose(poses)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSE_HEADER)
    T, N = poses.shape[:2]
    for t in range(T):
        for n in range(N):
            for j in range(N_JOINTS):
                w.writerow([t, n, j, *(format(float(v), ".17g") for v in poses[t, n, j])])
    return buf.getvalue()


def read_pose_csv(path) -> np.ndarray:
    """Read ``frame, agent, joint, x, y, z`` rows into ``(frames, agents, 22, 3)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != POSE_HEADER:
            raise PoseError(f"{path}: expected header {','.join(POSE_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != 6:
                    raise ValueError(f"expected 6 fields, got {len(row)}")
                t, n, j = (int(v) for v in row[:3])
                if not 0 <= j < N_JOINTS or t < 0 or n < 0:
                    raise ValueError("index out of range")
                rows.append((t, n, j, *(float(v) for v in row[3:])))
            except ValueError as exc:
                raise PoseError(f"{path}: malformed row {lineno}: {exc}") from exc
    if not rows:
        raise PoseError(f"{path}: no pose rows")
    T = max(r[0] for r in rows) + 1
    N = max(r[1] for r in rows) + 1
    out = np.full((T, N, N_JOINTS, 3), np.nan)
    for t, n, j, *xyz in rows:
        out[t, n, j] = xyz
    if np.isnan(out).any():
        raise PoseError(f"{path}: missing (frame, agent, joint) entries")
    return out


def convert_pose_table(rows, joint_map: dict, frame_key="frame", agent_key="agent", joint_key="joint",
                       axes=("x", "y", "z"), scale: float = 1.0) -> np.ndarray:
    """Convert externally named pose records into the internal array layout.

    ``rows`` is an iterable of mappings; ``joint_map`` maps source joint names
    to internal joint indices and isolates dataset-specific naming. Source
    joints not listed are ignored.
    """
    recs = []
    for k, r in enumerate(rows):
        name = r[joint_key]
        if name not in joint_map:
            continue
        try:
            recs.append((int(r[frame_key]), int(r[agent_key]), int(joint_map[name]),
                         *(float(r[a]) * scale for a in axes)))
        except (KeyError, ValueError) as exc:
            raise PoseError(f"record {k}: {exc}") from exc
    if not recs:
        raise PoseError("no convertible records")
    frames = sorted({r[0] for r in recs})
    agents = sorted({r[1] for r in recs})
    fi = {f: i for i, f in enumerate(frames)}
    ai = {a: i for i, a in enumerate(agents)}
    out = np.full((len(frames), len(agents), N_JOINTS, 3), np.nan)
    for f, a, j, *xyz in recs:
        out[fi[f], ai[a], j] = xyz
    if np.isnan(out).any():
        raise PoseError("converted data does not cover all 22 joints for every frame and agent")
    return out


def convert_pose_file(src, joint_map_path, **kw) -> np.ndarray:
    """Read a CSV with named columns and a YAML ``source name -> joint index/name`` map."""
    topo = load_topology()
    index = {name: i for i, name in enumerate(topo.joints)}
    raw = yaml.safe_load(Path(joint_map_path).read_text())
    joint_map = {k: (v if isinstance(v, int) else index[v]) for k, v in raw.items()}
    with open(src, newline="") as fh:
        return convert_pose_table(csv.DictReader(fh), joint_map, **kw)

"""Replaying a primary trajectory on a follower through a fitted map.

The follower tracks the mapped target with a proportional pose controller.
In ``point`` mode the commanded twist is integrated directly; in ``chain``
mode it is resolved to joint velocities by regularised least squares over a
serial revolute chain.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geomcore import (IDENTITY_QUAT, quat_conj, quat_exp, quat_log, quat_mul,
                       quat_normalize, quat_slerp)
from .mapping import DiffeoMap, map_pose

DEFAULT_KP = 2.0
DEFAULT_DT = 0.002


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "orientation",
                           quat_normalize(np.asarray(self.orientation, dtype=float).reshape(4)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-stamped poses: ``times (N,)``, ``positions (N, 3)``, ``orientations (N, 4)``."""
    times: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.orientations, dtype=float).reshape(-1, 4)
        if len(t) < 1 or len(p) != len(t) or len(q) != len(t):
            raise TrajectoryError("trajectory arrays differ in length")
        if np.any(np.diff(t) <= 0):
            raise TrajectoryError("trajectory time must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise TrajectoryError("non-finite trajectory sample")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "orientations", quat_normalize(q))

    def __len__(self):
        return len(self.times)

    def sample(self, t):
        """Pose at time ``t``: linear in position, slerp in orientation, clamped at the ends."""
        times = self.times
        if t <= times[0]:
            return self.positions[0], self.orientations[0]
        if t >= times[-1]:
            return self.positions[-1], self.orientations[-1]
        i = int(np.searchsorted(times, t, side="right")) - 1
        a = (t - times[i]) / (times[i + 1] - times[i])
        p = self.positions[i] + a * (self.positions[i + 1] - self.positions[i])
        q = quat_slerp(self.orientations[i], self.orientations[i + 1], a)
        return p, q


def waypoint_trajectory(waypoints, orientations=None, speed=0.1, hold=0.5):
    """Straight segments through ``waypoints`` at constant ``speed`` with a ``hold`` at each.

    Returns ``(Trajectory, holds)`` where ``holds`` lists
    ``(waypoint_index, t_start, t_end)`` for every hold phase.
    """
    W = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    if orientations is None:
        Q = np.tile(IDENTITY_QUAT, (len(W), 1))
    else:
        Q = np.asarray(orientations, dtype=float).reshape(-1, 4)
    times, pos, ori, holds = [], [], [], []
    t = 0.0
    for i, (w, q) in enumerate(zip(W, Q)):
        if i > 0:
            dist = float(np.linalg.norm(w - W[i - 1]))
            t += max(dist / speed, 1e-6)
        times.append(t)
        pos.append(w)
        ori.append(q)
        if hold > 0:
            holds.append((i, t, t + hold))
            t += hold
            times.append(t)
            pos.append(w)
            ori.append(q)
    return Trajectory(np.array(times), np.array(pos), np.array(ori)), holds


def rotation_error(q_target, q_current):
    """Full-angle rotation vector taking ``q_current`` to ``q_target``."""
    return 2.0 * quat_log(quat_mul(q_target, quat_conj(q_current)))


def proportional_velocity(target: Pose, current: Pose, k_p=DEFAULT_KP):
    """``(linear, angular)`` twist proportional to the pose error."""
    if not k_p > 0:
        raise ValueError("k_p must be positive")
    linear = k_p * (target.position - current.position)
    angular = k_p * rotation_error(target.orientation, current.orientation)
    return linear, angular


def resolve_ik(chain, desired_twist, weight=1.0):
    """Minimizer of ``|J qd - xd|^2 + weight |qd|^2``: ``(J^T J + weight I)^-1 J^T xd``.

    ``chain`` is a :class:`SerialChain` (its Jacobian is taken at the current
    angles) or a ``(6, n)`` Jacobian array.
    """
    J = chain.jacobian() if isinstance(chain, SerialChain) else np.asarray(chain, dtype=float)
    xd = np.asarray(desired_twist, dtype=float).reshape(-1)
    A = J.T @ J + weight * np.eye(J.shape[1])
    return np.linalg.solve(A, J.T @ xd)


def _rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=float)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _matrix_to_quat(R):
    # Shepperd's method
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = [0.0] * 4
        q[0] = (R[k, j] - R[j, k]) / s
        q[i + 1] = 0.25 * s
        q[j + 1] = (R[j, i] + R[i, j]) / s
        q[k + 1] = (R[k, i] + R[i, k]) / s
    return quat_normalize(np.array(q))


@dataclass
class Joint:
    axis: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise ValueError("joint axis must be non-zero")
        self.axis = a / n
        self.offset = np.asarray(self.offset, dtype=float)


@dataclass
class SerialChain:
    """Revolute chain. Joint ``i`` sits at ``offset`` in the previous joint's frame."""
    joints: list
    theta: np.ndarray
    tool_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ValueError("a chain needs at least one joint")
        self.theta = np.asarray(self.theta, dtype=float).copy()
        if self.theta.shape != (len(self.joints),):
            raise ValueError("one joint angle per joint")

    def forward(self, theta=None):
        theta = self.theta if theta is None else theta
        R = np.eye(3)
        p = np.asarray(self.base, dtype=float).copy()
        for joint, th in zip(self.joints, theta):
            p = p + R @ joint.offset
            R = R @ _rotation_matrix(joint.axis, th)
        p = p + R @ np.asarray(self.tool_offset, dtype=float)
        return Pose(p, _matrix_to_quat(R))

    def jacobian(self, theta=None, h=1e-6):
        """Numerical geometric Jacobian, ``(6, n)``: linear rows then angular rows."""
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        J = np.zeros((6, len(theta)))
        for i in range(len(theta)):
            d = np.zeros_like(theta)
            d[i] = h
            a, b = self.forward(theta + d), self.forward(theta - d)
            J[:3, i] = (a.position - b.position) / (2 * h)
            J[3:, i] = rotation_error(a.orientation, b.orientation) / (2 * h)
        return J


def default_chain():
    """Generic six-joint elbow arm (base yaw, three pitch joints, wrist yaw/pitch).

    The wrist yaw starts away from zero: at zero the last pitch axis lines up
    with the other three and the Jacobian loses rank.
    """
    z, y = (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)
    joints = [Joint(z, (0.0, 0.0, 0.9)), Joint(y, (0.0, 0.0, 0.1)),
              Joint(y, (0.0, 0.0, 0.45)), Joint(y, (0.0, 0.0, 0.4)),
              Joint(z, (0.0, 0.0, 0.1)), Joint(y, (0.0, 0.0, 0.1))]
    return SerialChain(joints, np.array([0.5, 0.6, 0.9, 0.5, 0.7, 0.3]),
                       tool_offset=np.array([0.0, 0.0, 0.1]))


@dataclass
class FollowerState:
    mode: str = "point"
    pose: Pose | None = None
    chain: SerialChain | None = None
    ik_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("point", "chain"):
            raise ValueError(f"unknown follower mode {self.mode!r}")
        if self.mode == "chain" and self.chain is None:
            self.chain = default_chain()
        if self.mode == "point" and self.pose is None:
            raise ValueError("point mode needs an initial pose")

    def current_pose(self):
        return self.chain.forward() if self.mode == "chain" else self.pose


@dataclass
class ReplicationResult:
    follower: Trajectory
    targets: Trajectory
    speed: np.ndarray
    error_norm: np.ndarray

    @property
    def velocity_log(self):
        return np.column_stack([self.follower.times, self.speed])


def simulate_replication(m: DiffeoMap, primary: Trajectory, follower: FollowerState,
                         dt=DEFAULT_DT, k_p=DEFAULT_KP, duration=None):
    """Track ``map(primary(t))`` from ``follower``'s initial state.

    Runs from the first sample time for ``duration`` (default: the primary's
    span). Logged per tick: follower pose, mapped target, follower linear
    speed and the six-dimensional pose error norm before the update.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not isinstance(primary, Trajectory):
        raise TrajectoryError("primary must be a Trajectory")
    t0 = primary.times[0]
    span = primary.times[-1] - t0 if duration is None else duration
    n = int(np.floor(span / dt + 1e-9)) + 1

    chain = None
    if follower.mode == "chain":
        chain = SerialChain(follower.chain.joints, follower.chain.theta.copy(),
                            follower.chain.tool_offset, follower.chain.base)
        pose = chain.forward()
    else:
        pose = follower.pose

    times = t0 + dt * np.arange(n)
    fpos, fori = np.zeros((n, 3)), np.zeros((n, 4))
    tpos, tori = np.zeros((n, 3)), np.zeros((n, 4))
    speed, err = np.zeros(n), np.zeros(n)
    for i, t in enumerate(times):
        p, q = primary.sample(t)
        tp, tq = map_pose(m, p, q)
        target = Pose(tp, tq)
        lin, ang = proportional_velocity(target, pose, k_p)
        err[i] = np.linalg.norm(np.concatenate([lin, ang])) / k_p
        fpos[i], fori[i] = pose.position, pose.orientation
        tpos[i], tori[i] = target.position, target.orientation
        if chain is None:
            speed[i] = np.linalg.norm(lin)
            pose = Pose(pose.position + dt * lin,
                        quat_mul(quat_exp(0.5 * dt * ang), pose.orientation))
        else:
            J = chain.jacobian()
            qd = resolve_ik(J, np.concatenate([lin, ang]), follower.ik_weight)
            speed[i] = np.linalg.norm((J @ qd)[:3])
            chain.theta = chain.theta + dt * qd
            pose = chain.forward()
    return ReplicationResult(Trajectory(times, fpos, fori), Trajectory(times, tpos, tori),
                             speed, err)


TRAJECTORY_COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz")


def write_trajectory_csv(traj: Trajectory, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for t, p, q in zip(traj.times, traj.positions, traj.orientations):
            w.writerow([repr(float(x)) for x in (t, *p, *q)])


def read_trajectory_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or any(c not in rows[0] for c in TRAJECTORY_COLUMNS):
        raise TrajectoryError(f"{path}: expected columns {', '.join(TRAJECTORY_COLUMNS)}")
    data = np.array([[float(r[c]) for c in TRAJECTORY_COLUMNS] for r in rows])
    return Trajectory(data[:, 0], data[:, 1:4], data[:, 4:8])


def write_velocity_csv(result: ReplicationResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "speed_norm"))
        for t, s in zip(result.follower.times, result.speed):
            w.writerow([repr(float(t)), repr(float(s))])


def initial_follower(m: DiffeoMap, primary: Trajectory, mode="point"):
    """Follower placed at the mapped first sample (point mode) or the default chain."""
    if mode == "chain":
        return FollowerState("chain", chain=default_chain())
    p, q = map_pose(m, primary.positions[0], primary.orientations[0])
    return FollowerState("point", Pose(p, q))

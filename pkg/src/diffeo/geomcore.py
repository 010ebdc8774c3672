"""Geometry primitives shared by the mapping, fitting and replication code.

Conventions
-----------

- Vectors are float arrays of shape ``(..., 3)``; every function broadcasts
  over leading batch dimensions.
- Quaternions are ``(..., 4)`` arrays in ``(w, x, y, z)`` order.
- ``quat_log`` returns the half-angle rotation vector, so for a rotation of
  angle ``theta`` about unit ``axis`` it yields ``(theta / 2) * axis`` and its
  norm lies in ``[0, pi/2]``. ``quat_exp`` is its inverse.
- Sign ambiguity (``q`` vs ``-q``) is resolved by flipping to ``w >= 0``
  before taking a log, which keeps every log on the short arc.
- Matrices are row-major ``(..., 3, 3)`` arrays acting on column vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
DEFAULT_RHO_SIG = 10.0

# Bounds on the continuous twisted-affine parameters.
SCALE_RANGE = (0.5, 2.0)
SHEAR_RANGE = (0.0, 1.0)
ANGLE_RANGE = (-np.pi / 2, np.pi / 2)


class DomainError(ValueError):
    """Raised when a geometric primitive receives non-finite input."""


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("non-finite input")


def rbf(p, rho, c):
    """Gaussian kernel ``exp(-rho^2 |p - c|^2)``.

    Broadcasts over ``p`` (``(..., 3)``) and ``rho``; the result has the
    broadcast batch shape.
    """
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    rho = np.asarray(rho, dtype=float)
    _check_finite(p, c, rho)
    if np.any(rho < 0):
        raise DomainError("rho must be non-negative")
    d2 = np.sum((p - c) ** 2, axis=-1)
    return np.exp(-(rho ** 2) * d2)


# -- quaternions -------------------------------------------------------------

def quat_mul(a, b):
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """Flip sign so that ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def quat_log(q):
    """Half-angle rotation vector of a unit quaternion.

    Stable for every unit quaternion, including rotations near ``pi``.
    """
    q = quat_canonical(q)
    _check_finite(q)
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    half = np.arctan2(s, w)
    small = s < 1e-12
    # half / s -> 1 / w as s -> 0
    factor = np.where(small, 1.0 / np.where(small, w, 1.0),
                      half / np.where(small, 1.0, s))
    return v * factor[..., None]


def quat_exp(v):
    """Inverse of :func:`quat_log`: unit quaternion from a half-angle vector."""
    v = np.asarray(v, dtype=float)
    _check_finite(v)
    a = np.linalg.norm(v, axis=-1)
    # np.sinc(x) = sin(pi x) / (pi x)
    s = np.sinc(a / np.pi)
    q = np.concatenate([np.cos(a)[..., None], v * s[..., None]], axis=-1)
    return quat_normalize(q)


def quat_pow(q, t):
    """``q^t`` along the short arc; broadcasts ``t`` against the batch of ``q``."""
    t = np.asarray(t, dtype=float)
    return quat_exp(t[..., None] * quat_log(q))


def quat_angle(q):
    """Full rotation angle in ``[0, pi]``."""
    return 2.0 * np.linalg.norm(quat_log(q), axis=-1)


def quat_rotate(q, p):
    """Rotate vectors ``p`` by unit quaternions ``q`` (the sandwich ``q p q̄``)."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, p)
    return p + w * t + np.cross(u, t)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)
    return quat_exp(axis * (0.5 * angle)[..., None])


def rot_z(angle):
    return quat_from_axis_angle([0.0, 0.0, 1.0], angle)


def quat_between(a, b):
    """Minimal rotation carrying direction ``a`` onto direction ``b``.

    Antiparallel inputs rotate by ``pi`` about ``a × (1, 0, 0)``, or about
    ``a × (0, 1, 0)`` when that cross product vanishes. A zero-length input
    yields the identity.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    degenerate = (na[..., 0] < 1e-9) | (nb[..., 0] < 1e-9)
    a = a / np.where(na < 1e-9, 1.0, na)
    b = b / np.where(nb < 1e-9, 1.0, nb)
    dot = np.sum(a * b, axis=-1)
    q = np.concatenate([(1.0 + dot)[..., None], np.cross(a, b)], axis=-1)

    anti = (dot < -1.0 + 1e-12) & ~degenerate
    if np.any(anti):
        ax = np.cross(a, np.array([1.0, 0.0, 0.0]))
        weak = np.linalg.norm(ax, axis=-1) < 1e-6
        ax = np.where(weak[..., None], np.cross(a, np.array([0.0, 1.0, 0.0])), ax)
        ax = ax / np.linalg.norm(ax, axis=-1, keepdims=True)
        flip = np.concatenate([np.zeros_like(dot)[..., None], ax], axis=-1)
        q = np.where(anti[..., None], flip, q)
    q = np.where(degenerate[..., None], IDENTITY_QUAT, q)
    return quat_normalize(q)


def quat_slerp(a, b, t):
    """Spherical interpolation from ``a`` (t=0) to ``b`` (t=1)."""
    rel = quat_mul(b, quat_conj(a))
    return quat_normalize(quat_mul(quat_pow(rel, t), a))


# -- rotation matrices -------------------------------------------------------

def _stack_matrix(rows):
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def r_roll(phi):
    """Rotation about x."""
    phi = np.asarray(phi, dtype=float)
    c, s = np.cos(phi), np.sin(phi)
    one, zero = np.ones_like(phi), np.zeros_like(phi)
    return _stack_matrix([[one, zero, zero], [zero, c, -s], [zero, s, c]])


def r_pitch(theta):
    """Rotation about y."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    one, zero = np.ones_like(theta), np.zeros_like(theta)
    return _stack_matrix([[c, zero, s], [zero, one, zero], [-s, zero, c]])


def r_yaw(psi):
    """Rotation about z."""
    psi = np.asarray(psi, dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    one, zero = np.ones_like(psi), np.zeros_like(psi)
    return _stack_matrix([[c, -s, zero], [s, c, zero], [zero, zero, one]])


def r_scaling(ax, ay, az):
    return np.diag([ax, ay, az]).astype(float)


def r_shear(sxy, sxz, syz):
    return np.array([[1.0, sxy, sxz], [0.0, 1.0, syz], [0.0, 0.0, 1.0]])


def r_reflection(rx, ry, rz):
    return np.diag([rx, ry, rz]).astype(float)


def r_rotation(phi, theta, psi):
    return r_yaw(psi) @ r_pitch(theta) @ r_roll(phi)


PROJECTOR_XY = np.diag([1.0, 1.0, 0.0])


def r_twist(phi_t, theta_t):
    """``P·R_pitch(theta_t)·P·R_roll(phi_t) + (I - P)`` with ``P = diag(1, 1, 0)``.

    The product is taken literally. It reduces to
    ``[[cos θ, 0, 0], [0, cos φ, -sin φ], [0, 0, 1]]``, which is not
    orthogonal for general angles.
    """
    P = PROJECTOR_XY
    return P @ r_pitch(theta_t) @ P @ r_roll(phi_t) + (np.eye(3) - P)


def twist_angle(x, amplitude, rho_sig=DEFAULT_RHO_SIG):
    """Sigmoid-scheduled twist angle ``amplitude / (1 + exp(-rho_sig x))``."""
    x = np.asarray(x, dtype=float)
    # expit form avoids overflow for large |rho_sig x|
    z = rho_sig * x
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return amplitude * sig


@dataclass(frozen=True)
class TwistedAffineParams:
    """Continuous (A), discrete (B) and translation (T) twisted-affine parameters.

    The map evaluates as ``R_TA(d) d + mu_init + t`` with ``d = p - mu_init``,
    where a fitted ``t`` carries the mapped init centroid onto ``mu_goal``
    (plain ``mu_goal - mu_init`` when there is no twist).
    """
    a_x: float = 1.0
    a_y: float = 1.0
    a_z: float = 1.0
    s_xy: float = 0.0
    s_xz: float = 0.0
    s_yz: float = 0.0
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0
    r_x: int = 1
    r_y: int = 1
    r_z: int = 1
    phi_t0: float = 0.0
    theta_t0: float = 0.0
    rho_sig: float = DEFAULT_RHO_SIG
    t: tuple = (0.0, 0.0, 0.0)
    mu_init: tuple = (0.0, 0.0, 0.0)
    mu_goal: tuple = (0.0, 0.0, 0.0)

    CONTINUOUS = ("a_x", "a_y", "a_z", "s_xy", "s_xz", "s_yz", "phi", "theta", "psi")
    DISCRETE = ("r_x", "r_y", "r_z", "phi_t0", "theta_t0")

    @property
    def continuous(self):
        return np.array([getattr(self, k) for k in self.CONTINUOUS])

    @property
    def discrete(self):
        return tuple(getattr(self, k) for k in self.DISCRETE)

    def with_continuous(self, values):
        return replace(self, **{k: float(v) for k, v in zip(self.CONTINUOUS, values)})

    def linear_part(self):
        """``R_scaling·R_shear·R_rotation·R_reflection`` (everything but the twist)."""
        return (r_scaling(self.a_x, self.a_y, self.a_z)
                @ r_shear(self.s_xy, self.s_xz, self.s_yz)
                @ r_rotation(self.phi, self.theta, self.psi)
                @ r_reflection(self.r_x, self.r_y, self.r_z))

    def to_dict(self):
        out = {k: float(getattr(self, k)) for k in self.CONTINUOUS}
        out.update({k: int(getattr(self, k)) for k in ("r_x", "r_y", "r_z")})
        out.update(phi_t0=float(self.phi_t0), theta_t0=float(self.theta_t0),
                   rho_sig=float(self.rho_sig), t=[float(x) for x in self.t],
                   mu_init=[float(x) for x in self.mu_init],
                   mu_goal=[float(x) for x in self.mu_goal])
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("t", "mu_init", "mu_goal"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d)


def continuous_bounds():
    return [SCALE_RANGE] * 3 + [SHEAR_RANGE] * 3 + [ANGLE_RANGE] * 3


def make_rotation_factors(params: TwistedAffineParams, p):
    """``R_TA`` evaluated at position(s) ``p``.

    The twist angles read ``p``'s x and y, so ``p`` should already be in the
    frame the map evaluates in (the recentered frame for fitted maps).
    Returns ``(..., 3, 3)``.
    """
    p = np.asarray(p, dtype=float)
    phi_t = twist_angle(p[..., 0], params.phi_t0, params.rho_sig)
    theta_t = twist_angle(p[..., 1], params.theta_t0, params.rho_sig)
    return params.linear_part() @ r_twist(phi_t, theta_t)


def apply_twist(d, phi_t0, theta_t0, rho_sig):
    """Closed form of ``R_twist(d) d`` without building matrices."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    phi = twist_angle(x, phi_t0, rho_sig)
    theta = twist_angle(y, theta_t0, rho_sig)
    return np.stack([np.cos(theta) * x,
                     np.cos(phi) * y - np.sin(phi) * z,
                     z], axis=-1)

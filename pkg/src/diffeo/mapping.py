"""Forward evaluation of composed workspace maps.

A :class:`DiffeoMap` is an optional twisted-affine prefix followed by a chain
of RBF-weighted composition steps. Position steps and orientation steps are
paired by index: step ``j`` of the orientation chain weights its rotation by
the kernel evaluated at the position after position steps ``0..j-1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geomcore import (IDENTITY_QUAT, TwistedAffineParams, apply_twist, quat_mul,
                       quat_normalize, quat_pow, quat_rotate, rbf)


class StepKind(str, Enum):
    TRANSLATION = "translation"
    SPIN = "spin"
    ORBITAL = "orbital"


class Method(str, Enum):
    DIFF = "DIFF"
    RDIFF = "RDIFF"
    TADIFF = "TADIFF"


def eq7_bound(v_norm):
    """Upper bound on a translation step's rho that keeps the step invertible."""
    if v_norm <= 0:
        return np.inf
    return np.exp(0.5) / (np.sqrt(2.0) * v_norm)


@dataclass(frozen=True)
class CompositionStep:
    kind: StepKind
    rho: float
    c: tuple = (0.0, 0.0, 0.0)
    v_translation: tuple = (0.0, 0.0, 0.0)
    v_rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    orbital_about_c3: bool = False

    @classmethod
    def translation(cls, rho, c, v):
        return cls(StepKind.TRANSLATION, float(rho), _tup(c), _tup(v))

    @classmethod
    def spin(cls, rho, c, v):
        return cls(StepKind.SPIN, float(rho), _tup(c), v_rotation=_tup(v))

    @classmethod
    def orbital(cls, rho, c, v3, about_c3=False):
        return cls(StepKind.ORBITAL, float(rho), _tup(c), v_rotation=_tup(v3),
                   orbital_about_c3=about_c3)

    @property
    def is_trivial(self):
        return (not any(self.v_translation)
                and tuple(self.v_rotation) == tuple(IDENTITY_QUAT))

    def weight(self, p):
        return rbf(p, self.rho, np.asarray(self.c))

    def apply_position(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind is StepKind.SPIN:
            return p
        k = self.weight(p)
        out = p
        if self.kind is StepKind.ORBITAL:
            q = quat_pow(np.asarray(self.v_rotation), k)
            if self.orbital_about_c3:
                c = np.asarray(self.c)
                out = quat_rotate(q, p - c) + c
            else:
                out = quat_rotate(q, p)
        return out + k[..., None] * np.asarray(self.v_translation)

    def apply_orientation(self, p, q):
        if self.kind is not StepKind.SPIN:
            return np.asarray(q, dtype=float)
        k = self.weight(p)
        return quat_normalize(quat_mul(quat_pow(np.asarray(self.v_rotation), k), q))

    def to_dict(self):
        d = {"kind": self.kind.value, "rho": self.rho, "c": list(self.c)}
        if self.kind is not StepKind.SPIN:
            d["v_translation"] = list(self.v_translation)
        if self.kind is not StepKind.TRANSLATION:
            d["v_rotation"] = list(self.v_rotation)
        if self.orbital_about_c3:
            d["orbital_about_c3"] = True
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(StepKind(d["kind"]), float(d["rho"]), _tup(d["c"]),
                   _tup(d.get("v_translation", (0.0, 0.0, 0.0))),
                   _tup(d.get("v_rotation", (1.0, 0.0, 0.0, 0.0))),
                   bool(d.get("orbital_about_c3", False)))


def _tup(v):
    return tuple(float(x) for x in np.asarray(v, dtype=float).ravel())


def apply_twisted_affine(params: TwistedAffineParams, p):
    """``R_TA(d) d + mu_init + t`` with ``d = p - mu_init``."""
    p = np.asarray(p, dtype=float)
    mu = np.asarray(params.mu_init)
    d = p - mu
    twisted = apply_twist(d, params.phi_t0, params.theta_t0, params.rho_sig)
    return twisted @ params.linear_part().T + mu + np.asarray(params.t)


@dataclass(frozen=True)
class DiffeoMap:
    method: Method
    position_steps: tuple = ()
    orientation_steps: tuple = ()
    ta_prefix: TwistedAffineParams | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.method is Method.TADIFF and self.ta_prefix is None:
            raise ValueError("TADIFF maps need a twisted-affine prefix")
        if self.method is Method.DIFF and any(
                s.kind is StepKind.ORBITAL for s in self.position_steps):
            raise ValueError("DIFF maps only hold translation steps")

    @property
    def n_steps(self):
        return max(len(self.position_steps), len(self.orientation_steps))

    def to_dict(self):
        return {
            "method": self.method.value,
            "ta_prefix": None if self.ta_prefix is None else self.ta_prefix.to_dict(),
            "position_steps": [s.to_dict() for s in self.position_steps],
            "orientation_steps": [s.to_dict() for s in self.orientation_steps],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        ta = d.get("ta_prefix")
        return cls(Method(d["method"]),
                   tuple(CompositionStep.from_dict(s) for s in d.get("position_steps", [])),
                   tuple(CompositionStep.from_dict(s) for s in d.get("orientation_steps", [])),
                   None if ta is None else TwistedAffineParams.from_dict(ta),
                   dict(d.get("metadata", {})))

    def to_json(self):
        # json emits repr() floats, which round-trip exactly
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def identity_map(method=Method.DIFF):
    return DiffeoMap(method)


def map_position(m: DiffeoMap, p):
    """Push position(s) ``p`` (``(..., 3)``) through the map."""
    p = np.asarray(p, dtype=float)
    if m.ta_prefix is not None:
        p = apply_twisted_affine(m.ta_prefix, p)
    for step in m.position_steps:
        p = step.apply_position(p)
    return p


def map_pose(m: DiffeoMap, p, q):
    """Map positions and orientations together; returns ``(p_hat, q_hat)``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if m.ta_prefix is not None:
        p = apply_twisted_affine(m.ta_prefix, p)
    n = m.n_steps
    for j in range(n):
        if j < len(m.orientation_steps):
            q = m.orientation_steps[j].apply_orientation(p, q)
        if j < len(m.position_steps):
            p = m.position_steps[j].apply_position(p)
    return p, q


def map_orientation(m: DiffeoMap, p, q):
    return map_pose(m, p, q)[1]


def _central_difference(fn, p, h):
    offsets = np.concatenate([np.eye(3) * h, -np.eye(3) * h])
    out = fn(p[..., None, :] + offsets)
    return np.swapaxes((out[..., :3, :] - out[..., 3:, :]) / (2.0 * h), -1, -2)


def numerical_jacobian(m: DiffeoMap, p, h=1e-4, chained=True):
    """Central-difference Jacobian of :func:`map_position`, shape ``(..., 3, 3)``.

    Entry ``[..., i, j]`` is ``d out_i / d p_j``. By default each composition
    step is differenced at the point it actually receives and the 3x3 factors
    are multiplied (chain rule). Long chains can amplify the map by 100x or
    more while nearly folding, and a single difference across the whole chain
    then loses the determinant's sign; per-step differences stay accurate.
    ``chained=False`` differences the composed map directly.
    """
    p = np.asarray(p, dtype=float)
    if not chained:
        return _central_difference(lambda x: map_position(m, x), p, h)
    jac = np.broadcast_to(np.eye(3), p.shape[:-1] + (3, 3))
    for factor in _step_jacobians(m, p, h):
        jac = factor @ jac
    return np.array(jac)


def _step_jacobians(m: DiffeoMap, p, h):
    """Per-step Jacobian factors, each at the point that step receives."""
    if m.ta_prefix is not None:
        yield _central_difference(lambda x: apply_twisted_affine(m.ta_prefix, x), p, h)
        p = apply_twisted_affine(m.ta_prefix, p)
    for step in m.position_steps:
        if step.kind is StepKind.SPIN or step.is_trivial:
            continue
        yield _central_difference(step.apply_position, p, h)
        p = step.apply_position(p)


def jacobian_det(m: DiffeoMap, p, h=1e-4):
    """Jacobian determinant as the product of per-step determinants.

    Same value as ``det(numerical_jacobian(m, p))`` but each factor is a
    well-scaled 3x3, so the sign survives chains whose product is nearly
    singular.
    """
    p = np.asarray(p, dtype=float)
    det = np.ones(p.shape[:-1])
    for factor in _step_jacobians(m, p, h):
        det = det * np.linalg.det(factor)
    return det


def spectral_norm(mat):
    """Largest singular value of each ``(..., 3, 3)`` matrix."""
    return np.linalg.svd(np.asarray(mat, dtype=float), compute_uv=False)[..., 0]

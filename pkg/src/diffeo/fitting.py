"""Fitting composed maps to paired key points.

Three fitters share one greedy loop:

- :func:`fit_diff` grows a chain of translation and spin steps.
- :func:`fit_rdiff` also proposes an orbital (origin-centred rotation) step
  every iteration and keeps whichever position candidate scores lower.
- :func:`fit_tadiff` fits a twisted-affine prefix first, then refines the
  residual with the DIFF loop.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .geomcore import (IDENTITY_QUAT, TwistedAffineParams, apply_twist,
                       continuous_bounds, quat_between, quat_conj, quat_log, quat_mul,
                       quat_normalize, quat_pow, quat_rotate)
from .mapping import (CompositionStep, DiffeoMap, Method, apply_twisted_affine,
                      eq7_bound)

log = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class ConfigurationError(ValueError):
    """Inputs that cannot be fitted (mismatched or degenerate key points)."""


@dataclass(frozen=True, eq=False)
class KeyPointSet:
    """Ordered key points of one workspace.

    ``positions`` is ``(K, 3)`` in meters, ``orientations`` ``(K, 4)`` unit
    quaternions in ``(w, x, y, z)`` order.
    """
    ids: tuple
    positions: np.ndarray
    orientations: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        ori = np.array(self.orientations, dtype=float).reshape(-1, 4)
        ids = tuple(str(i) for i in self.ids)
        if len(pos) < 1:
            raise ConfigurationError("a key point set needs at least one point")
        if len(ids) != len(pos) or len(ori) != len(pos):
            raise ConfigurationError("ids, positions and orientations differ in length")
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate key point ids")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(ori))):
            raise ConfigurationError("non-finite key point")
        ori = quat_normalize(ori)
        pos.flags.writeable = False
        ori.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", ori)

    @classmethod
    def from_positions(cls, positions, orientations=None, ids=None):
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        if orientations is None:
            orientations = np.tile(IDENTITY_QUAT, (len(positions), 1))
        if ids is None:
            ids = [str(i + 1) for i in range(len(positions))]
        return cls(tuple(ids), positions, orientations)

    def __len__(self):
        return len(self.ids)

    @property
    def centroid(self):
        return self.positions.mean(axis=0)

    def moved(self, positions=None, orientations=None):
        return KeyPointSet(self.ids,
                           self.positions if positions is None else positions,
                           self.orientations if orientations is None else orientations)


@dataclass
class FitConfig:
    position_threshold: float = 0.005
    orientation_threshold: float = 0.01
    j_max: int = 100
    rho_count: int = 64
    rho_min: float = 0.1
    rho_max: float = 100.0
    bound_safety: float = 0.99
    ta_restarts: int = 3
    rho_sig: float = 10.0
    seed: int = 0
    orbital_about_c3: bool = False

    def __post_init__(self):
        if self.position_threshold <= 0 or self.orientation_threshold <= 0:
            raise ConfigurationError("thresholds must be positive")
        if self.j_max < 1:
            raise ConfigurationError("j_max must be at least 1")
        if not 0 < self.rho_min < self.rho_max or self.rho_count < 2:
            raise ConfigurationError("bad rho grid")


@dataclass
class FitDiagnostics:
    iterations: int
    final_position_cost: float
    final_orientation_cost: float
    converged: bool
    per_iteration_costs: list = field(default_factory=list)
    per_iteration_orientation_costs: list = field(default_factory=list)
    ta_residual: float | None = None

    def to_dict(self):
        d = {
            "iterations": self.iterations,
            "final_position_cost": self.final_position_cost,
            "final_orientation_cost": self.final_orientation_cost,
            "converged": self.converged,
            "per_iteration_costs": list(self.per_iteration_costs),
            "per_iteration_orientation_costs": list(self.per_iteration_orientation_costs),
        }
        if self.ta_residual is not None:
            d["ta_residual"] = self.ta_residual
        return d


# -- costs -------------------------------------------------------------------

def _positions(s):
    return s.positions if isinstance(s, KeyPointSet) else np.asarray(s, dtype=float)


def _orientations(s):
    return s.orientations if isinstance(s, KeyPointSet) else np.asarray(s, dtype=float)


def _check_aligned(a, b):
    if len(a) != len(b):
        raise ConfigurationError(f"key point counts differ: {len(a)} vs {len(b)}")
    if isinstance(a, KeyPointSet) and isinstance(b, KeyPointSet) and a.ids != b.ids:
        raise ConfigurationError("key point ids are not aligned")


def position_errors(points, goals):
    return np.linalg.norm(_positions(goals) - _positions(points), axis=-1)


def orientation_errors(points, goals):
    """Half-angle log norm of ``q_goal ⊗ conj(q)`` per point."""
    rel = quat_mul(_orientations(goals), quat_conj(_orientations(points)))
    return np.linalg.norm(quat_log(rel), axis=-1)


def cost_position(points, goals):
    """Mean Euclidean key-point error (meters)."""
    _check_aligned(points, goals)
    return float(np.mean(position_errors(points, goals)))


def cost_orientation(points, goals):
    """Mean quaternion-log error (radians, half-angle convention)."""
    _check_aligned(points, goals)
    return float(np.mean(orientation_errors(points, goals)))


def derive_orbital(points, goals):
    """Orbital rotations ``r_k`` carrying each goal direction onto the current one.

    Directions are taken from the coordinate origin. The goal-side rotation is
    the identity, so ``conj(r_k)`` turns the current point toward its goal.
    Points at the origin get the identity.
    """
    _check_aligned(points, goals)
    return quat_between(_positions(goals), _positions(points))


# -- rho line search ---------------------------------------------------------

def _line_search(cost_fn, hi, cfg: FitConfig):
    """Minimize ``cost_fn`` over rho in ``[rho_min, hi]``.

    ``cost_fn`` takes an array of rho values and returns costs (``inf`` marks
    an infeasible rho). A log-spaced grid is scanned, then golden-section
    search refines between the neighbours of the best grid point. Ties go to
    the larger rho.
    """
    grid = np.geomspace(cfg.rho_min, cfg.rho_max, cfg.rho_count)
    if hi < cfg.rho_max:
        grid = np.append(grid[grid < hi], hi)
    costs = np.asarray(cost_fn(grid), dtype=float)
    best = float(np.min(costs))
    if not np.isfinite(best):
        return None, np.inf
    tol = 1e-15 + 1e-12 * abs(best)
    i = int(np.nonzero(costs <= best + tol)[0][-1])
    rho, cost = float(grid[i]), float(costs[i])
    if len(grid) < 2:
        return rho, cost

    lo = np.log(grid[max(i - 1, 0)])
    up = np.log(grid[min(i + 1, len(grid) - 1)])
    f = lambda u: float(cost_fn(np.array([np.exp(u)]))[0])
    a, b = lo, up
    x1, x2 = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(40):
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = f(x2)
    u, fu = (x1, f1) if f1 < f2 else (x2, f2)
    if fu < cost - tol:
        rho, cost = min(float(np.exp(u)), hi), fu
    return rho, cost


def _kernel(P, c, rhos):
    d2 = np.sum((P - c) ** 2, axis=-1)
    return np.exp(-(np.asarray(rhos)[:, None] ** 2) * d2[None, :])


def _translation_cost_fn(P, G, c, v):
    def fn(rhos):
        moved = P[None] + _kernel(P, c, rhos)[..., None] * v
        return np.mean(np.linalg.norm(G[None] - moved, axis=-1), axis=-1)
    return fn


def _orbital_apply(P, rhos, c, v3, about_c3):
    """Orbital step for each rho: ``P`` ``(M, 3)`` -> ``(R, M, 3)``."""
    k = _kernel(P.reshape(-1, 3), c, rhos).reshape((len(rhos),) + P.shape[:-1])
    q = quat_pow(v3, k)
    if about_c3:
        return quat_rotate(q, P[None] - c) + c
    return quat_rotate(q, P[None])


def _orbital_cost_fn(P, G, c, v3, about_c3, probe, h=1e-4):
    offsets = np.concatenate([np.eye(3) * h, -np.eye(3) * h])
    probes = (probe[:, None, :] + offsets).reshape(-1, 3)

    def fn(rhos):
        rhos = np.asarray(rhos, dtype=float)
        moved = _orbital_apply(P, rhos, c, v3, about_c3)
        cost = np.mean(np.linalg.norm(G[None] - moved, axis=-1), axis=-1)
        out = _orbital_apply(probes, rhos, c, v3, about_c3).reshape(len(rhos), -1, 6, 3)
        jac = (out[:, :, :3, :] - out[:, :, 3:, :]) / (2 * h)
        ok = np.all(np.linalg.det(jac) > 0, axis=-1)
        return np.where(ok, cost, np.inf)
    return fn


def _spin_cost_fn(P, Q, GQ, c, v2):
    def fn(rhos):
        w = _kernel(P, c, rhos)
        moved = quat_mul(quat_pow(v2, w), Q[None])
        rel = quat_mul(GQ[None], quat_conj(moved))
        return np.mean(np.linalg.norm(quat_log(rel), axis=-1), axis=-1)
    return fn


def _bbox_corners(P):
    lo, hi = P.min(axis=0), P.max(axis=0)
    return np.array(list(itertools.product(*zip(lo, hi))))


def optimize_rho(step: CompositionStep, points, goals, bound=None, cfg: FitConfig | None = None):
    """Best kernel width for a candidate step whose centre and payload are fixed.

    ``points``/``goals`` are key point sets (or arrays). For translation
    steps the invertibility bound is applied automatically unless ``bound``
    is given. Returns ``(rho, cost)``; ``rho`` is ``None`` when every
    candidate is infeasible.
    """
    cfg = cfg or FitConfig()
    P, G = _positions(points), _positions(goals)
    c = np.asarray(step.c)
    if step.kind.value == "translation":
        v = np.asarray(step.v_translation)
        if bound is None:
            bound = eq7_bound(np.linalg.norm(v))
        hi = cfg.bound_safety * bound
        return _line_search(_translation_cost_fn(P, G, c, v), hi, cfg)
    hi = np.inf if bound is None else bound
    if step.kind.value == "orbital":
        probe = np.concatenate([P, _bbox_corners(P)])
        fn = _orbital_cost_fn(P, G, c, np.asarray(step.v_rotation), step.orbital_about_c3, probe)
        return _line_search(fn, hi, cfg)
    fn = _spin_cost_fn(P, _orientations(points), _orientations(goals), c,
                       np.asarray(step.v_rotation))
    return _line_search(fn, hi, cfg)


# -- greedy chain ------------------------------------------------------------

_NULL_TRANSLATION = CompositionStep.translation(0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
_NULL_SPIN = CompositionStep.spin(0.0, (0.0, 0.0, 0.0), IDENTITY_QUAT)


def _mean_err(P, G):
    return float(np.mean(np.linalg.norm(G - P, axis=-1)))


def _translation_step(P, G, m, cfg, fp):
    """Translation toward the worst point; halves the shift until cost does not rise."""
    c = P[m]
    v = G[m] - P[m]
    for _ in range(60):
        step = CompositionStep.translation(1.0, c, v)
        rho, _ = optimize_rho(step, P, G, cfg=cfg)
        step = CompositionStep.translation(rho, c, v)
        moved = step.apply_position(P)
        cost = _mean_err(moved, G)
        if cost <= fp:
            return step, moved, cost
        v = 0.5 * v
    return _NULL_TRANSLATION, P, fp


def _orbital_step(P, G, cfg):
    r = derive_orbital(P, G)
    err = np.linalg.norm(quat_log(r), axis=-1)
    o = int(np.argmax(err))
    if err[o] < 1e-12:
        return None, None, np.inf
    step = CompositionStep.orbital(1.0, P[o], quat_conj(r[o]), about_c3=cfg.orbital_about_c3)
    rho, _ = optimize_rho(step, P, G, cfg=cfg)
    if rho is None:
        return None, None, np.inf
    step = replace(step, rho=rho)
    moved = step.apply_position(P)
    return step, moved, _mean_err(moved, G)


def _spin_step(P, Q, GQ, cfg, fo):
    err = orientation_errors(Q, GQ)
    n = int(np.argmax(err))
    v2 = quat_normalize(quat_mul(GQ[n], quat_conj(Q[n])))
    step = CompositionStep.spin(1.0, P[n], v2)
    rho, _ = optimize_rho(step, KeyPointSet.from_positions(P, Q),
                          KeyPointSet.from_positions(P, GQ), cfg=cfg)
    step = replace(step, rho=rho)
    moved = step.apply_orientation(P, Q)
    cost = float(np.mean(orientation_errors(moved, GQ)))
    if cost > fo:
        return _NULL_SPIN, Q, fo
    return step, moved, cost


def _fit_chain(P, Q, G, GQ, cfg: FitConfig, use_orbital: bool):
    P, Q = np.array(P, dtype=float), np.array(Q, dtype=float)
    pos_steps, ori_steps = [], []
    fp, fo = _mean_err(P, G), float(np.mean(orientation_errors(Q, GQ)))
    pcosts, ocosts = [fp], [fo]
    n_orbital = 0
    while len(pos_steps) < cfg.j_max and not (
            fp < cfg.position_threshold and fo < cfg.orientation_threshold):
        if fp >= cfg.position_threshold:
            m = int(np.argmax(np.linalg.norm(G - P, axis=-1)))
            # full-length translation candidate, as the algorithm states it
            t_step = CompositionStep.translation(1.0, P[m], G[m] - P[m])
            rho, _ = optimize_rho(t_step, P, G, cfg=cfg)
            t_step = replace(t_step, rho=rho)
            t_moved = t_step.apply_position(P)
            t_cost = _mean_err(t_moved, G)
            pstep, newP, newfp = t_step, t_moved, t_cost
            if use_orbital:
                o_step, o_moved, o_cost = _orbital_step(P, G, cfg)
                if o_step is not None and o_cost < t_cost:
                    pstep, newP, newfp = o_step, o_moved, o_cost
            if newfp > fp:
                pstep, newP, newfp = _translation_step(P, G, m, cfg, fp)
            if pstep.kind.value == "orbital":
                n_orbital += 1
        else:
            pstep, newP, newfp = _NULL_TRANSLATION, P, fp

        if fo >= cfg.orientation_threshold:
            ostep, newQ, newfo = _spin_step(P, Q, GQ, cfg, fo)
        else:
            ostep, newQ, newfo = _NULL_SPIN, Q, fo

        pos_steps.append(pstep)
        ori_steps.append(ostep)
        P, Q, fp, fo = newP, newQ, newfp, newfo
        pcosts.append(fp)
        ocosts.append(fo)
        log.debug("iteration %d: position %.6g m, orientation %.6g rad (%s)",
                  len(pos_steps), fp, fo, pstep.kind.value)

    converged = fp < cfg.position_threshold and fo < cfg.orientation_threshold
    diag = FitDiagnostics(len(pos_steps), fp, fo, converged, pcosts, ocosts)
    return pos_steps, ori_steps, diag, n_orbital


def _prepare(inits, goals):
    _check_aligned(inits, goals)
    return (np.array(inits.positions), np.array(inits.orientations),
            np.array(goals.positions), np.array(goals.orientations))


def _metadata(diag, **extra):
    md = diag.to_dict()
    md.update(extra)
    return md


def fit_diff(inits: KeyPointSet, goals: KeyPointSet, cfg: FitConfig | None = None):
    """Greedy translation/spin composition. Returns ``(DiffeoMap, FitDiagnostics)``."""
    cfg = cfg or FitConfig()
    P, Q, G, GQ = _prepare(inits, goals)
    ps, os_, diag, _ = _fit_chain(P, Q, G, GQ, cfg, use_orbital=False)
    m = DiffeoMap(Method.DIFF, tuple(ps), tuple(os_), None, _metadata(diag))
    return m, diag


def fit_rdiff(inits: KeyPointSet, goals: KeyPointSet, cfg: FitConfig | None = None):
    """Greedy composition with orbital candidates. Returns ``(DiffeoMap, FitDiagnostics)``."""
    cfg = cfg or FitConfig()
    P, Q, G, GQ = _prepare(inits, goals)
    ps, os_, diag, n_orb = _fit_chain(P, Q, G, GQ, cfg, use_orbital=True)
    m = DiffeoMap(Method.RDIFF, tuple(ps), tuple(os_), None,
                  _metadata(diag, orbital_steps=n_orb))
    return m, diag


# -- twisted affine ----------------------------------------------------------

def discrete_candidates():
    """All 32 reflection/twist combinations, identity first."""
    return list(itertools.product((1, -1), (1, -1), (1, -1), (0.0, np.pi), (0.0, np.pi)))


def _linear_batch(X, refl_diag):
    """``S·Sh·R·Refl`` for each row of ``X`` (``(N, 9)``) -> ``(N, 3, 3)``."""
    ax, ay, az, sxy, sxz, syz, phi, theta, psi = X.T
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    # R_yaw(psi) R_pitch(theta) R_roll(phi)
    rot = np.stack([
        np.stack([cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf], -1),
        np.stack([sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf], -1),
        np.stack([-st, ct * sf, ct * cf], -1),
    ], -2)
    r0, r1, r2 = rot[:, 0], rot[:, 1], rot[:, 2]
    # scaling @ shear (upper unitriangular) applied row-wise
    out = np.stack([ax[:, None] * (r0 + sxy[:, None] * r1 + sxz[:, None] * r2),
                    ay[:, None] * (r1 + syz[:, None] * r2),
                    az[:, None] * r2], -2)
    return out * refl_diag


def ta_cost_batch(X, twisted, target, refl_diag, squared=False):
    """Residual of ``L(x) w_k`` against ``target_k`` for each parameter row.

    Mean Euclidean norm by default; ``squared=True`` gives the mean squared
    norm used as the smooth first stage.
    """
    L = _linear_batch(np.atleast_2d(X), refl_diag)
    mapped = np.einsum("nij,kj->nki", L, twisted)
    sq = np.sum((target[None] - mapped) ** 2, axis=-1)
    return np.mean(sq if squared else np.sqrt(sq), axis=-1)


def ta_cost(x, twisted, target, refl_diag):
    return float(ta_cost_batch(x, twisted, target, refl_diag)[0])


def _ta_value_and_grad(x, twisted, target, refl_diag, squared, h=1e-7):
    # central differences, all 19 probes in one batch
    steps = np.eye(len(x)) * h
    X = np.concatenate([x[None], x + steps, x - steps])
    f = ta_cost_batch(X, twisted, target, refl_diag, squared)
    n = len(x)
    return f[0], (f[1:n + 1] - f[n + 1:]) / (2 * h)


_TA_OPTIONS = {"ftol": 1e-10, "gtol": 1e-10, "maxiter": 500}


def _ta_local(x0, twisted, target, refl, bounds):
    """Smooth least-squares descent, then a polish on the mean-norm cost."""
    lo, hi = (np.array(b) for b in zip(*bounds))
    x = x0
    for squared in (True, False):
        res = minimize(_ta_value_and_grad, x, args=(twisted, target, refl, squared), jac=True,
                       method="L-BFGS-B", bounds=bounds, options=_TA_OPTIONS)
        x = np.clip(res.x, lo, hi)
    return x, ta_cost(x, twisted, target, refl)


def fit_twisted_affine(inits, goals, cfg: FitConfig | None = None):
    """Fit the twisted-affine prefix. Returns ``(TwistedAffineParams, residual)``.

    Both point sets are centred on their centroids. The translation is then
    whatever puts the centroid of the mapped inits on the goal centroid; for
    an untwisted map that is just the centroid offset. Each of the 32
    discrete combinations gets a bounded quasi-Newton search over the nine
    continuous parameters from ``cfg.ta_restarts`` starting points (identity
    first, then uniform draws inside the bounds). The lowest residual wins;
    ties keep the earlier combination. Points are processed in coordinate
    order, so the result does not depend on how they are labeled.
    """
    cfg = cfg or FitConfig()
    _check_aligned(inits, goals)
    P, G = _positions(inits), _positions(goals)
    # canonical point order, so relabeling cannot change the floating-point path
    order = np.lexsort(np.concatenate([G, P], axis=1).T[::-1])
    P, G = P[order], G[order]
    if len(P) != 4:
        log.warning("twisted-affine fit assumes four key points, got %d", len(P))
    mu_i, mu_g = P.mean(axis=0), G.mean(axis=0)
    D = P - mu_i
    if np.max(np.linalg.norm(D, axis=-1)) < 1e-9:
        raise ConfigurationError("initial key points are all coincident")
    target = G - mu_g
    bounds = continuous_bounds()
    lo, hi = (np.array(b) for b in zip(*bounds))
    x_identity = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0], dtype=float)

    best = (np.inf, None, None, None)
    for bi, (rx, ry, rz, pt, tt) in enumerate(discrete_candidates()):
        twisted = apply_twist(D, pt, tt, cfg.rho_sig)
        shift = twisted.mean(axis=0)
        centred = twisted - shift
        refl = np.array([rx, ry, rz], dtype=float)
        rng = np.random.default_rng([cfg.seed, bi])
        starts = [x_identity] + [rng.uniform(lo, hi) for _ in range(max(cfg.ta_restarts, 1) - 1)]
        for x0 in starts:
            x, f = _ta_local(x0, centred, target, refl, bounds)
            if f < best[0]:
                best = (f, x, (rx, ry, rz, pt, tt), shift)
    f, x, (rx, ry, rz, pt, tt), shift = best
    params = TwistedAffineParams(r_x=rx, r_y=ry, r_z=rz, phi_t0=pt, theta_t0=tt,
                                 rho_sig=cfg.rho_sig, mu_init=tuple(mu_i),
                                 mu_goal=tuple(mu_g)).with_continuous(x)
    t = mu_g - mu_i - params.linear_part() @ shift
    return replace(params, t=tuple(float(v) for v in t)), f


def fit_tadiff(inits: KeyPointSet, goals: KeyPointSet, cfg: FitConfig | None = None):
    """Twisted-affine prefix plus DIFF refinement. Returns ``(DiffeoMap, FitDiagnostics)``."""
    cfg = cfg or FitConfig()
    P, Q, G, GQ = _prepare(inits, goals)
    params, residual = fit_twisted_affine(inits, goals, cfg)
    P_ta = apply_twisted_affine(params, P)
    ps, os_, diag, _ = _fit_chain(P_ta, Q, G, GQ, cfg, use_orbital=False)
    diag.ta_residual = residual
    m = DiffeoMap(Method.TADIFF, tuple(ps), tuple(os_), params, _metadata(diag))
    return m, diag


FITTERS = {Method.DIFF: fit_diff, Method.RDIFF: fit_rdiff, Method.TADIFF: fit_tadiff}


def fit(method, inits, goals, cfg=None):
    return FITTERS[Method(method)](inits, goals, cfg)

"""Map quality metrics and batch statistics."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .fitting import FitConfig, KeyPointSet, fit, position_errors
from .mapping import DiffeoMap, Method, jacobian_det, map_position, numerical_jacobian, spectral_norm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradientGridSpec:
    """Axis-aligned sampling box for gradient checks.

    ``bounds`` is ``(lo, hi)``; ``None`` means the key-point bounding box
    grown by ``margin`` on every side.
    """
    bounds: tuple | None = None
    spacing: float = 0.02
    margin: float = 0.05

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")

    def points(self, keypoints=None):
        if self.bounds is None:
            if keypoints is None:
                raise ValueError("grid bounds need key points")
            P = np.asarray(keypoints, dtype=float).reshape(-1, 3)
            lo, hi = P.min(axis=0) - self.margin, P.max(axis=0) + self.margin
        else:
            lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        if np.any(hi < lo):
            raise ValueError("degenerate grid bounds")
        axes = [lo[i] + self.spacing * np.arange(int(np.floor((hi[i] - lo[i]) / self.spacing + 1e-9)) + 1)
                for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass
class EvaluationReport:
    method: str
    mean_keypoint_error: float
    max_keypoint_error: float
    max_gradient: float
    min_jacobian_det: float
    rbf_iterations: int
    converged: bool
    grid_points: int
    wall_time: float | None = None

    def to_dict(self):
        return asdict(self)


def grid_gradient_stats(m: DiffeoMap, grid_points, h=1e-4, chunk=4096):
    """``(max spectral norm, min determinant)`` of the Jacobian over points."""
    gmax, dmin = -np.inf, np.inf
    for start in range(0, len(grid_points), chunk):
        pts = grid_points[start:start + chunk]
        gmax = max(gmax, float(np.max(spectral_norm(numerical_jacobian(m, pts, h)))))
        dmin = min(dmin, float(np.min(jacobian_det(m, pts, h))))
    return gmax, dmin


def evaluate_map(m: DiffeoMap, inits: KeyPointSet, goals: KeyPointSet,
                 grid: GradientGridSpec | None = None) -> EvaluationReport:
    grid = grid or GradientGridSpec()
    err = position_errors(map_position(m, inits.positions), goals.positions)
    pts = grid.points(inits.positions)
    gmax, dmin = grid_gradient_stats(m, pts)
    md = m.metadata
    return EvaluationReport(
        method=m.method.value,
        mean_keypoint_error=float(np.mean(err)),
        max_keypoint_error=float(np.max(err)),
        max_gradient=gmax,
        min_jacobian_det=dmin,
        rbf_iterations=int(md.get("iterations", m.n_steps)),
        converged=bool(md.get("converged", True)),
        grid_points=len(pts),
    )


def boxplot_stats(values):
    """Quartiles, 1.5 IQR whiskers and outliers."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        return {}
    q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return {
        "q1": q1, "median": med, "q3": q3,
        "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
        "outliers": [float(x) for x in v[(v < q1 - 1.5 * iqr) | (v > q3 + 1.5 * iqr)]],
        "min": float(v[0]), "max": float(v[-1]),
    }


@dataclass
class BatchSummary:
    method: str
    n_environments: int
    success_rate: float
    max_over_envs_positional_error: float
    mean_iterations: float
    gradient_distribution: dict
    error_distribution: dict
    per_environment: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _run_env(args):
    env_id, inits, goals, method, cfg, grid = args
    t0 = time.perf_counter()
    try:
        m, diag = fit(method, inits, goals, cfg)
    except Exception as exc:  # recorded, the batch goes on
        log.warning("env %s %s failed: %s", env_id, method, exc)
        return {"env_id": env_id, "method": Method(method).value, "converged": False,
                "final_error": float("nan"), "iterations": 0, "max_gradient": float("nan"),
                "min_jacobian_det": float("nan"), "error": str(exc), "map": None}
    fit_time = time.perf_counter() - t0
    rep = evaluate_map(m, inits, goals, grid)
    return {"env_id": env_id, "method": m.method.value, "converged": diag.converged,
            "final_error": diag.final_position_cost, "iterations": diag.iterations,
            "max_gradient": rep.max_gradient, "min_jacobian_det": rep.min_jacobian_det,
            "mean_keypoint_error": rep.mean_keypoint_error, "wall_time": fit_time,
            "per_iteration_costs": diag.per_iteration_costs, "map": m.to_dict()}


def summarize(method, records):
    records = sorted(records, key=lambda r: r["env_id"])
    n = len(records)
    ok = [r for r in records if r.get("error") is None]
    errs = [r["final_error"] for r in ok]
    grads = [r["max_gradient"] for r in ok]
    return BatchSummary(
        method=Method(method).value,
        n_environments=n,
        success_rate=sum(bool(r["converged"]) for r in records) / n,
        max_over_envs_positional_error=float(max(errs)) if errs else float("nan"),
        mean_iterations=float(np.mean([r["iterations"] for r in ok])) if ok else float("nan"),
        gradient_distribution=boxplot_stats(grads),
        error_distribution=boxplot_stats(errs),
        per_environment=records,
    )


def run_batch(environments, methods, cfg: FitConfig | None = None,
              grid: GradientGridSpec | None = None, workers: int | None = None,
              keep_maps: bool = False):
    """Fit and evaluate every method on every ``(inits, goals)`` pair.

    Returns ``{method_name: BatchSummary}``. ``workers > 1`` fans
    environments out to a process pool; results are reordered by environment
    index before aggregation, so the summaries do not depend on scheduling.
    """
    if len(environments) < 1:
        raise ValueError("a batch needs at least one environment")
    cfg = cfg or FitConfig()
    methods = [Method(m) for m in methods]
    jobs = [(i, inits, goals, m, cfg, grid)
            for i, (inits, goals) in enumerate(environments) for m in methods]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_env, jobs, chunksize=1))
    else:
        results = [_run_env(j) for j in jobs]
    out = {}
    for m in methods:
        recs = [r for r in results if r["method"] == m.value]
        if not keep_maps:
            for r in recs:
                r.pop("map", None)
        out[m.value] = summarize(m, recs)
    return out


def write_report(summaries, path):
    doc = {name: s.to_dict() for name, s in summaries.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


CSV_COLUMNS = ("env_id", "method", "max_gradient", "final_error", "iterations", "converged")


def write_distribution_csv(summaries, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for s in summaries.values():
            for r in s.per_environment:
                w.writerow([r["env_id"], s.method, repr(r["max_gradient"]),
                            repr(r["final_error"]), r["iterations"], int(bool(r["converged"]))])

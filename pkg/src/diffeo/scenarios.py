"""Scenario generation and workspace/map file I/O.

Workspace file::

    {"name": "...",
     "keypoints": [{"id": "1", "position": [x, y, z], "orientation": [w, x, y, z]}, ...],
     "sub_keypoints": {"per_axis": 3, "spacing": 0.05}}      # optional

A scenario directory holds ``scenario.json`` listing its environments, each a
pair of workspace files (primary = inits, replica = goals). Random draws use
numpy's PCG64 generator seeded with the scenario seed.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fitting import KeyPointSet
from .geomcore import IDENTITY_QUAT, quat_mul, quat_rotate, rot_z
from .mapping import DiffeoMap
from .replication import Trajectory, read_trajectory_csv, waypoint_trajectory, write_trajectory_csv

EXP1_PRIMARY = ((0.79, 0.48, 1.02), (0.55, 0.16, 1.22), (0.45, 0.41, 1.26), (0.68, 0.24, 1.02))
EXP1_REPLICA = ((0.50, 0.20, 1.20), (0.70, 0.20, 1.20), (0.70, 0.40, 1.20), (0.50, 0.40, 1.20))
EXP1_ORDER = (1, 2, 3, 4, 1, 3, 2, 4)

SIM2_RANGE = (0.1, 0.6)

# Irregular quadrilateral on a horizontal plane whose centroid lies on the
# z axis, so rotating the plane about its vertical axis is also a rotation
# about the coordinate origin.
SIM1_TARGETS = ((0.25, 0.05, 0.4), (0.05, 0.22, 0.4), (-0.2, 0.08, 0.4), (-0.1, -0.35, 0.4))


@dataclass
class Scenario:
    name: str
    environments: list
    metadata: dict = field(default_factory=dict)
    trajectory: Trajectory | None = None
    holds: list = field(default_factory=list)


def expand_sub_keypoints(kps: KeyPointSet, per_axis=3, spacing=0.05):
    """Replace every key point by a ``per_axis^3`` grid centred on it.

    The centre keeps its id; the others get ``"<id>.<i><j><k>"``.
    """
    if per_axis < 1 or per_axis % 2 == 0:
        raise ValueError("per_axis must be a positive odd number")
    half = per_axis // 2
    offs = [(i, j, k) for i, j, k in itertools.product(range(-half, half + 1), repeat=3)]
    ids, pos, ori = [], [], []
    for kid, p, q in zip(kps.ids, kps.positions, kps.orientations):
        for o in offs:
            ids.append(kid if o == (0, 0, 0) else f"{kid}." + "".join(str(x + half) for x in o))
            pos.append(p + spacing * np.array(o, dtype=float))
            ori.append(q)
    return KeyPointSet(tuple(ids), np.array(pos), np.array(ori))


def keypoints_to_workspace(kps: KeyPointSet, name="workspace", sub_keypoints=None):
    doc = {"name": name, "keypoints": [
        {"id": i, "position": [float(x) for x in p], "orientation": [float(x) for x in q]}
        for i, p, q in zip(kps.ids, kps.positions, kps.orientations)]}
    if sub_keypoints:
        doc["sub_keypoints"] = dict(sub_keypoints)
    return doc


def workspace_to_keypoints(doc):
    try:
        pts = doc["keypoints"]
        ids = [str(k["id"]) for k in pts]
        pos = [k["position"] for k in pts]
        ori = [k.get("orientation", list(IDENTITY_QUAT)) for k in pts]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed workspace document: {exc}") from exc
    kps = KeyPointSet(tuple(ids), np.array(pos, dtype=float), np.array(ori, dtype=float))
    sub = doc.get("sub_keypoints")
    if sub:
        kps = expand_sub_keypoints(kps, int(sub.get("per_axis", 3)), float(sub.get("spacing", 0.05)))
    return kps


def load_workspace(path):
    with open(path) as fh:
        return workspace_to_keypoints(json.load(fh))


def save_workspace(kps, path, name="workspace", sub_keypoints=None):
    with open(path, "w") as fh:
        json.dump(keypoints_to_workspace(kps, name, sub_keypoints), fh, indent=2)


def load_map(path):
    return DiffeoMap.from_json(Path(path).read_text())


def save_map(m: DiffeoMap, path):
    Path(path).write_text(m.to_json())


# -- generators ----------------------------------------------------------------

def rigid_about_vertical(kps: KeyPointSet, angle, translation=(0.0, 0.0, 0.0)):
    """Rotate ``kps`` by ``angle`` about the vertical axis through its centroid, then shift."""
    c = kps.centroid
    q = rot_z(angle)
    pos = quat_rotate(q, kps.positions - c) + c + np.asarray(translation, dtype=float)
    ori = quat_mul(q, kps.orientations)
    return KeyPointSet(kps.ids, pos, ori)


def generate_sim1(angles_deg=(0.0, 45.0, 90.0), translation=(0.0, 0.0, 0.0),
                  targets=SIM1_TARGETS, per_axis=3, spacing=0.05):
    """Rotated-plane environments: each target expanded into a sub-key-point grid.

    Orientations stay identity on both sides; only positions are rotated.
    """
    base = expand_sub_keypoints(KeyPointSet.from_positions(targets), per_axis, spacing)
    envs = []
    for a in angles_deg:
        moved = rigid_about_vertical(base, np.deg2rad(a), translation)
        envs.append((base, KeyPointSet(base.ids, moved.positions, base.orientations)))
    meta = {"angles_deg": [float(a) for a in angles_deg], "translation": list(map(float, translation)),
            "per_axis": per_axis, "spacing": spacing}
    return Scenario("sim1", envs, meta)


def generate_sim2(n=100, seed=0, low=SIM2_RANGE[0], high=SIM2_RANGE[1], k=4):
    """``n`` environments of ``k`` init and ``k`` goal points drawn uniformly from ``[low, high]^3``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    envs = []
    for _ in range(n):
        inits = rng.uniform(low, high, (k, 3))
        goals = rng.uniform(low, high, (k, 3))
        envs.append((KeyPointSet.from_positions(inits), KeyPointSet.from_positions(goals)))
    meta = {"n": n, "seed": seed, "range": [low, high], "k": k, "generator": "numpy.PCG64"}
    return Scenario("sim2", envs, meta)


def exp1_trajectory(speed=0.1, hold=0.5, order=EXP1_ORDER):
    waypoints = [EXP1_PRIMARY[i - 1] for i in order]
    return waypoint_trajectory(waypoints, speed=speed, hold=hold)


def builtin_exp1(speed=0.1, hold=0.5):
    inits = KeyPointSet.from_positions(EXP1_PRIMARY)
    goals = KeyPointSet.from_positions(EXP1_REPLICA)
    traj, holds = exp1_trajectory(speed, hold)
    meta = {"order": list(EXP1_ORDER), "speed": speed, "hold": hold}
    return Scenario("exp1", [(inits, goals)], meta, traj, holds)


def build_scenario(name, n=100, seed=0):
    if name == "sim1":
        return generate_sim1()
    if name == "sim2":
        return generate_sim2(n, seed)
    if name == "exp1":
        return builtin_exp1()
    raise ValueError(f"unknown scenario {name!r}")


def save_scenario(sc: Scenario, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (inits, goals) in enumerate(sc.environments):
        if len(sc.environments) == 1:
            prim, repl = "primary.json", "replica.json"
        else:
            (out / f"env_{i:03d}").mkdir(exist_ok=True)
            prim, repl = f"env_{i:03d}/primary.json", f"env_{i:03d}/replica.json"
        save_workspace(inits, out / prim, f"{sc.name}-{i}-primary")
        save_workspace(goals, out / repl, f"{sc.name}-{i}-replica")
        entries.append({"id": i, "primary": prim, "replica": repl})
    doc = {"name": sc.name, "metadata": sc.metadata, "environments": entries}
    if sc.trajectory is not None:
        write_trajectory_csv(sc.trajectory, out / "trajectory.csv")
        doc["trajectory"] = "trajectory.csv"
        doc["holds"] = [list(h) for h in sc.holds]
    (out / "scenario.json").write_text(json.dumps(doc, indent=2))
    return out


def load_scenario(path):
    root = Path(path)
    doc = json.loads((root / "scenario.json").read_text())
    envs = [(load_workspace(root / e["primary"]), load_workspace(root / e["replica"]))
            for e in doc["environments"]]
    traj = None
    if doc.get("trajectory"):
        traj = read_trajectory_csv(root / doc["trajectory"])
    holds = [tuple(h) for h in doc.get("holds", [])]
    return Scenario(doc["name"], envs, doc.get("metadata", {}), traj, holds)

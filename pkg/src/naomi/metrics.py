"""Trajectory-quality statistics for imputed sequences.

Single-trajectory functions take a (T, 2) array.  ``walls`` is the
(lo, hi) range the ball centre may occupy on both axes, i.e. the table
shrunk by the ball radius when that is known.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .losses import mse_loss

WALL_DELTA = 0.01
MIN_CHORD = 1e-9

ALL_METRICS = (
    "l2_loss", "sinuosity", "step_change", "reflection_to_wall",
    "path_length", "oob_rate", "path_difference", "player_distance",
)


def l2_loss(imputed, truth, mask) -> float:
    """Mean squared error over missing steps of one sequence."""
    import warnings

    from .losses import AllObservedWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AllObservedWarning)
        return float(mse_loss(imputed, truth, mask).data)


def _steps(traj: np.ndarray) -> np.ndarray:
    return np.diff(np.asarray(traj, dtype=np.float64), axis=0)


def turning_points(traj) -> np.ndarray:
    """Indices p where some velocity component flips sign between the
    step arriving at p and the step leaving it."""
    d = _steps(traj)
    flips = (d[:-1] * d[1:] < 0).any(axis=1)
    return np.flatnonzero(flips) + 1


def wall_contacts(traj, walls=(0.0, 1.0), delta: float = WALL_DELTA) -> np.ndarray:
    lo, hi = walls
    traj = np.asarray(traj)
    near = ((traj - lo) <= delta) | ((hi - traj) <= delta)
    return np.flatnonzero(near.any(axis=1))


def segments(traj, walls=(0.0, 1.0), delta: float = WALL_DELTA) -> list[tuple[int, int]]:
    """Split points (inclusive index pairs) at wall contacts and turning points."""
    T = len(traj)
    if T < 2:
        return []
    cuts = set(turning_points(traj).tolist()) | set(wall_contacts(traj, walls, delta).tolist())
    out = []
    start = 0
    for p in range(1, T):
        if p in cuts or p == T - 1:
            out.append((start, p))
            start = p
    return out


def segment_sinuosity(points) -> float | None:
    """Arclength over endpoint chord; None for a degenerate chord."""
    pts = np.asarray(points, dtype=np.float64)
    arc = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    chord = np.linalg.norm(pts[-1] - pts[0])
    if chord < MIN_CHORD:
        return None
    return float(arc / chord)


def sinuosity(traj, walls=(0.0, 1.0), delta: float = WALL_DELTA) -> float:
    """Arclength-weighted mean sinuosity of segments with >= 3 points.

    Returns NaN when no segment qualifies.
    """
    traj = np.asarray(traj, dtype=np.float64)
    if len(traj) < 3:
        raise ValueError("sinuosity needs at least 3 points")
    num = den = 0.0
    for a, b in segments(traj, walls, delta):
        if b - a < 2:
            continue
        pts = traj[a:b + 1]
        s = segment_sinuosity(pts)
        if s is None:
            continue
        arc = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
        num += s * arc
        den += arc
    return num / den if den > 0 else float("nan")


def step_change(traj) -> float:
    """Mean absolute change of step length between consecutive steps."""
    lengths = np.linalg.norm(_steps(traj), axis=1)
    if lengths.size < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(lengths))))


def reflection_points(traj) -> list[tuple[int, int, float]]:
    """Estimated (step index, coordinate, position) of every reflection.

    For a sign flip between steps u and u+1 on coordinate c, the step that
    actually hit the wall is u or u+1, so the incoming line is taken
    through points (u-1, u) and the outgoing one through (u+2, u+3); their
    intersection locates the reflection.  Flips too close to either end,
    or with parallel lines, are skipped.
    """
    traj = np.asarray(traj, dtype=np.float64)
    d = _steps(traj)
    T = len(traj)
    found = []
    for u in range(len(d) - 1):
        for c in range(traj.shape[1]):
            if d[u, c] * d[u + 1, c] >= 0:
                continue
            if u - 1 < 0 or u + 3 > T - 1:
                continue
            v_in = traj[u, c] - traj[u - 1, c]
            v_out = traj[u + 3, c] - traj[u + 2, c]
            if v_in == v_out:
                continue
            # x_in(t) = traj[u] + v_in (t - u); x_out(t) = traj[u+2] + v_out (t - u - 2)
            t_hit = (traj[u + 2, c] - traj[u, c] + v_in * u - v_out * (u + 2)) / (v_in - v_out)
            found.append((u, c, float(traj[u, c] + v_in * (t_hit - u))))
    return found


def reflection_to_wall(traj, walls=(0.0, 1.0)) -> tuple[float, bool]:
    """Mean distance from estimated reflection points to the nearest wall.

    Returns (value, had_reflections); with no reflections the value is 0.
    """
    lo, hi = walls
    points = reflection_points(traj)
    if not points:
        return 0.0, False
    dist = [min(abs(x - lo), abs(hi - x)) for _, _, x in points]
    return float(np.mean(dist)), True


def _agents(traj) -> np.ndarray:
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim == 3:
        return traj
    T, D = traj.shape
    if D % 2:
        raise ValueError(f"multi-agent data needs an even dimension, got {D}")
    return traj.reshape(T, D // 2, 2).transpose(1, 0, 2)


def multi_agent_stats(trajectories, court=((0.0, 1.0), (0.0, 1.0))) -> dict[str, float]:
    """Path length, out-of-bounds rate, path difference and player distance.

    ``trajectories`` is (K, T, 2) or a (T, 2K) sequence.  ``court`` gives
    ((x_lo, x_hi), (y_lo, y_hi)).
    """
    agents = _agents(trajectories)
    K, T, _ = agents.shape
    lengths = np.linalg.norm(np.diff(agents, axis=1), axis=2).sum(axis=1)
    (x_lo, x_hi), (y_lo, y_hi) = court
    x, y = agents[..., 0], agents[..., 1]
    out = (x < x_lo) | (x > x_hi) | (y < y_lo) | (y > y_hi)
    stats = {
        "path_length": float(lengths.mean()),
        "oob_rate": float(out.mean()),
        "path_difference": float(lengths.max() - lengths.min()),
    }
    if K >= 2:
        pair = [np.linalg.norm(agents[a] - agents[b], axis=1) for a, b in combinations(range(K), 2)]
        stats["player_distance"] = float(np.mean(np.mean(pair, axis=0)))
    return stats


@dataclass
class MetricsReport:
    values: dict[str, float] = field(default_factory=dict)
    per_sequence: dict[str, list[float]] = field(default_factory=dict)
    flags: dict[str, int] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        flat = dict(self.values)
        flat.update({f"flag_{k}": v for k, v in self.flags.items()})
        flat.update({f"setting_{k}": v for k, v in self.settings.items()})
        return json.dumps(flat, sort_keys=True)

    def to_table(self) -> str:
        rows = [(k, f"{v:.6g}") for k, v in self.values.items()]
        rows += [(f"flag:{k}", str(v)) for k, v in self.flags.items()]
        rows += [(f"setting:{k}", str(v)) for k, v in self.settings.items()]
        if not rows:
            return ""
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>12}" for k, v in rows)

    def percentiles(self, name: str, q=(25, 50, 75)) -> list[float]:
        return np.percentile(self.per_sequence[name], q).tolist()


def evaluate(imputed, truth=None, masks=None, metrics=ALL_METRICS, walls=(0.0, 1.0),
             court=None, delta: float = WALL_DELTA) -> MetricsReport:
    """Aggregate metrics over a set of (N, T, D) imputed sequences.

    Each scalar is the mean of its per-sequence values; sequences with an
    undefined value (no valid sinuosity segment) are skipped and counted
    in ``flags``.
    """
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; valid: {', '.join(ALL_METRICS)}")
    imputed = np.asarray(imputed, dtype=np.float64)
    N, T, D = imputed.shape
    court = court if court is not None else (tuple(walls), tuple(walls))
    report = MetricsReport(settings={"wall_delta": delta, "walls": list(walls)})
    per: dict[str, list[float]] = {m: [] for m in metrics}
    flags: dict[str, int] = {}
    for n in range(N):
        seq = imputed[n]
        agents = _agents(seq)
        if "l2_loss" in per:
            if truth is None or masks is None:
                raise ValueError("l2_loss needs truth and masks")
            per["l2_loss"].append(l2_loss(seq, truth[n], masks[n]))
        if "sinuosity" in per and T >= 3:
            vals = [sinuosity(a, walls, delta) for a in agents]
            vals = [v for v in vals if np.isfinite(v)]
            if vals:
                per["sinuosity"].append(float(np.mean(vals)))
            else:
                flags["sinuosity_no_segment"] = flags.get("sinuosity_no_segment", 0) + 1
        if "step_change" in per:
            per["step_change"].append(float(np.mean([step_change(a) for a in agents])))
        if "reflection_to_wall" in per:
            vals = [reflection_to_wall(a, walls) for a in agents]
            hit = [v for v, ok in vals if ok]
            per["reflection_to_wall"].append(float(np.mean(hit)) if hit else 0.0)
            if not hit:
                flags["no_reflection"] = flags.get("no_reflection", 0) + 1
        wanted = {"path_length", "oob_rate", "path_difference", "player_distance"} & set(per)
        if wanted:
            stats = multi_agent_stats(agents, court)
            for k in wanted:
                if k in stats:
                    per[k].append(stats[k])
    for k, vals in per.items():
        if vals:
            report.values[k] = float(np.mean(vals))
            report.per_sequence[k] = vals
    report.flags = flags
    return report

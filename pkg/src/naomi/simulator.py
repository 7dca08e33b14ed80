"""Frictionless single-ball billiards on the unit square."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class BilliardsConfig:
    ball_radius: float = 0.02
    speed_min: float = 0.01
    speed_max: float = 0.03
    timesteps: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ball_radius < 0.5:
            raise ValueError(f"ball_radius must lie in [0, 0.5), got {self.ball_radius}")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("speeds must be positive with speed_min <= speed_max")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.ball_radius, 1.0 - self.ball_radius

    def to_dict(self) -> dict:
        return {"env": "billiards", "table": [0.0, 1.0], **asdict(self)}


def rollout(position, velocity, timesteps: int, bounds=(0.0, 1.0)):
    """Positions (timesteps, 2) and velocities (timesteps, 2) of one ball.

    ``velocity`` is displacement per step.  A step that crosses a wall is
    folded back (x' = 2 * wall - x) and that velocity component negated,
    so reflections are specular and the speed never changes.
    """
    lo, hi = bounds
    pos = np.array(position, dtype=np.float64)
    vel = np.array(velocity, dtype=np.float64)
    positions = np.empty((timesteps, 2))
    velocities = np.empty((timesteps, 2))
    positions[0], velocities[0] = pos, vel
    for t in range(1, timesteps):
        pos = pos + vel
        for c in range(2):
            # one fold suffices when the step is shorter than the table
            while pos[c] > hi or pos[c] < lo:
                if pos[c] > hi:
                    pos[c] = 2.0 * hi - pos[c]
                else:
                    pos[c] = 2.0 * lo - pos[c]
                vel[c] = -vel[c]
        positions[t], velocities[t] = pos, vel
    return positions, velocities


def simulate(config: BilliardsConfig, n_sequences: int,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """``n_sequences`` trajectories of shape (timesteps, 2)."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    lo, hi = config.bounds
    out = np.empty((n_sequences, config.timesteps, 2))
    for k in range(n_sequences):
        start = rng.uniform(lo, hi, size=2)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(config.speed_min, config.speed_max)
        vel = speed * np.array([np.cos(angle), np.sin(angle)])
        out[k], _ = rollout(start, vel, config.timesteps, (lo, hi))
    return out

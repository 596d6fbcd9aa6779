"""
Episode environments: bounded arena, spherical obstacles, target assignment,
lidar sensing and the ground-truth collision predicate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from egcbf.exceptions import InfeasibleConfigurationError, IntegrationError
from egcbf.models.dynamics import AgentState, stack_states
from egcbf.models.liegroup import (
    P_SLICE,
    R_SLICE,
    STATE_DIM,
    GroupElement,
    act_points,
    act_states,
    rot_z,
    yaw_of,
)
from utils.logger_config import get_logger

logger = get_logger(__name__)

MAX_PLACEMENT_ATTEMPTS = 10_000
# occupied volume fraction above which sampling is reported as dense
DENSITY_WARNING_FRACTION = 0.05


class WorldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    side_length: float = Field(2.0, gt=0)
    num_agents: int = Field(8, ge=1)
    num_obstacles: int = Field(5, ge=0)
    obstacle_radius_min: float = Field(0.05, gt=0)
    obstacle_radius_max: float = Field(0.15, gt=0)
    safety_radius: float = Field(0.1, gt=0)
    sensing_range: float = Field(0.5, gt=0)
    comm_range: float = Field(1.0, gt=0)
    lidar_rays: int = Field(32, ge=1)
    episode_len: int = Field(256, ge=1)
    reach_radius: float = Field(0.1, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _ranges(self):
        if not self.comm_range > self.sensing_range > self.safety_radius > 0:
            raise ValueError("ranges must satisfy comm_range > sensing_range > safety_radius > 0")
        if self.obstacle_radius_max < self.obstacle_radius_min:
            raise ValueError("obstacle_radius_max must be >= obstacle_radius_min")
        return self

    @property
    def density(self) -> float:
        return self.num_agents / self.side_length**3


@dataclass
class Episode:
    """Mutable simulation state of one rollout (single writer)."""

    states: np.ndarray  # (N, 18)
    targets: np.ndarray  # (N, 3)
    obstacle_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    obstacle_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int = 0
    t: int = 0
    rng: np.random.Generator | None = None

    @property
    def num_agents(self) -> int:
        return self.states.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, P_SLICE]

    def agent_state(self, i: int) -> AgentState:
        return AgentState.from_vector(self.states[i])

    def copy(self) -> "Episode":
        return replace(
            self,
            states=self.states.copy(),
            targets=self.targets.copy(),
            obstacle_centers=self.obstacle_centers.copy(),
            obstacle_radii=self.obstacle_radii.copy(),
        )

    def advance(self, model, controls: np.ndarray) -> None:
        try:
            self.states = model.step_batch(self.states, controls)
        except IntegrationError as e:
            raise e.with_seed(self.seed) from e
        self.t += 1

    def to_json(self):
        return {
            "seed": self.seed,
            "t": self.t,
            "states": self.states.tolist(),
            "targets": self.targets.tolist(),
            "obstacle_centers": self.obstacle_centers.tolist(),
            "obstacle_radii": self.obstacle_radii.tolist(),
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            states=np.asarray(data["states"], dtype=np.float64).reshape(-1, STATE_DIM),
            targets=np.asarray(data["targets"], dtype=np.float64).reshape(-1, 3),
            obstacle_centers=np.asarray(data["obstacle_centers"], dtype=np.float64).reshape(-1, 3),
            obstacle_radii=np.asarray(data["obstacle_radii"], dtype=np.float64).reshape(-1),
            seed=int(data.get("seed", 0)),
            t=int(data.get("t", 0)),
        )


@dataclass(frozen=True)
class LidarScan:
    """Per-ray hit points; ``hit`` marks rays that intersected an obstacle within range."""

    origin: np.ndarray
    directions: np.ndarray  # (w, 3) world-frame unit vectors
    distances: np.ndarray  # (w,) inf on miss
    hit: np.ndarray  # (w,) bool

    @property
    def points(self) -> np.ndarray:
        """Hit points of the rays that hit, in ray order."""
        idx = np.flatnonzero(self.hit)
        return self.origin + self.directions[idx] * self.distances[idx, None]

    @property
    def ray_indices(self) -> np.ndarray:
        return np.flatnonzero(self.hit)

    def padded(self) -> np.ndarray:
        """Observations [y, q0]: hit position with identity rotation and zero twist."""
        return pad_points(self.points)


def pad_points(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((points.shape[0], STATE_DIM))
    out[:, P_SLICE] = points
    out[:, R_SLICE] = np.eye(3).reshape(9)
    return out


def density_warnings(cfg: WorldConfig) -> list[str]:
    volume = cfg.side_length**3
    ball = 4.0 / 3.0 * math.pi
    occupied = cfg.num_agents * ball * cfg.safety_radius**3
    occupied += cfg.num_obstacles * ball * cfg.obstacle_radius_max**3
    warnings = []
    if occupied / volume > DENSITY_WARNING_FRACTION:
        warnings.append(
            f"occupied volume fraction {occupied / volume:.3f} exceeds {DENSITY_WARNING_FRACTION}; "
            "safe controls may not exist for every episode"
        )
    if cfg.sensing_range < 2 * cfg.safety_radius:
        warnings.append("sensing range is less than twice the safety radius")
    return warnings


def _place(rng, cfg, accept, what):
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        candidate = rng.uniform(0.0, cfg.side_length, 3)
        if accept(candidate):
            return candidate
    raise InfeasibleConfigurationError(
        f"could not place {what} after {MAX_PLACEMENT_ATTEMPTS} attempts "
        f"(N={cfg.num_agents}, l={cfg.side_length}, obstacles={cfg.num_obstacles})"
    )


def _clear_of(points, radius):
    def accept(candidate):
        return all(np.linalg.norm(candidate - q) > radius for q in points)

    return accept


def sample_episode(cfg: WorldConfig, random_yaw: bool = False, seed: int | None = None) -> Episode:
    """
    Sample agents, targets and obstacles uniformly in [0, l]^3 with rejection so that
    no agent pair, target pair or agent/target-obstacle pair starts closer than r.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    r = cfg.safety_radius

    for message in density_warnings(cfg):
        logger.warning(f"Dense world configuration: {message}")

    radii = rng.uniform(cfg.obstacle_radius_min, cfg.obstacle_radius_max, cfg.num_obstacles)
    centers = np.stack(
        [rng.uniform(0.0, cfg.side_length, 3) for _ in range(cfg.num_obstacles)]
    ) if cfg.num_obstacles else np.zeros((0, 3))

    def clear_of_obstacles(candidate):
        if not len(radii):
            return True
        return bool(np.all(np.linalg.norm(centers - candidate, axis=1) - radii > r))

    positions, targets = [], []
    for i in range(cfg.num_agents):
        others = _clear_of(positions, r)
        positions.append(
            _place(rng, cfg, lambda c: others(c) and clear_of_obstacles(c), f"agent {i}")
        )
    for i in range(cfg.num_agents):
        others = _clear_of(targets, r)
        targets.append(
            _place(rng, cfg, lambda c: others(c) and clear_of_obstacles(c), f"target {i}")
        )

    states = []
    for p in positions:
        R = rot_z(rng.uniform(-math.pi, math.pi)) if random_yaw else np.eye(3)
        states.append(AgentState(p=p, R=R))

    return Episode(
        states=stack_states(states),
        targets=np.asarray(targets).reshape(-1, 3),
        obstacle_centers=centers,
        obstacle_radii=radii,
        seed=seed,
        rng=rng,
    )


def fibonacci_directions(w: int) -> np.ndarray:
    """w unit vectors on a Fibonacci-sphere lattice (deterministic)."""
    if w == 1:
        return np.array([[1.0, 0.0, 0.0]])
    k = np.arange(w, dtype=np.float64)
    z = 1.0 - 2.0 * (k + 0.5) / w
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    phi = golden * k
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def ray_sphere_distances(origin, directions, centers, radii, max_range):
    """Nearest intersection distance per ray (inf on miss). Origins inside a sphere hit at 0."""
    w = directions.shape[0]
    best = np.full(w, np.inf)
    for c, rho in zip(centers, radii):
        oc = origin - c
        b = directions @ oc
        cterm = oc @ oc - rho * rho
        if cterm <= 0.0:
            best[:] = 0.0
            continue
        disc = b * b - cterm
        ok = disc >= 0.0
        t = np.where(ok, -b - np.sqrt(np.where(ok, disc, 0.0)), np.inf)
        t = np.where(t >= 0.0, t, np.inf)
        best = np.minimum(best, t)
    best[best > max_range] = np.inf
    return best


def lidar(x, obstacle_centers, obstacle_radii, cfg: WorldConfig) -> LidarScan:
    """Cast the yaw-anchored ray lattice from the agent position."""
    if isinstance(x, AgentState):
        p, yaw = x.p, yaw_of(x.R)
    else:
        p, yaw = x[P_SLICE], yaw_of(np.asarray(x)[R_SLICE].reshape(3, 3))
    directions = fibonacci_directions(cfg.lidar_rays) @ rot_z(yaw).T
    distances = ray_sphere_distances(
        np.asarray(p, dtype=np.float64),
        directions,
        np.asarray(obstacle_centers).reshape(-1, 3),
        np.asarray(obstacle_radii).reshape(-1),
        cfg.sensing_range,
    )
    return LidarScan(
        origin=np.array(p, dtype=np.float64),
        directions=directions,
        distances=distances,
        hit=np.isfinite(distances),
    )


def scan_all(episode: Episode, cfg: WorldConfig) -> list[LidarScan]:
    return [
        lidar(s, episode.obstacle_centers, episode.obstacle_radii, cfg) for s in episode.states
    ]


def is_safe(states, obstacle_centers, obstacle_radii, cfg: WorldConfig):
    """
    Returns (per-agent flags, global flag). Agent i is safe iff every other agent is
    strictly farther than r and every obstacle surface is strictly ahead of it.
    """
    X = np.asarray(states, dtype=np.float64)
    pos = X[:, P_SLICE] if X.shape[-1] == STATE_DIM else X.reshape(-1, 3)
    n = pos.shape[0]
    flags = np.ones(n, dtype=bool)

    if n > 1:
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        flags &= dist.min(axis=1) > cfg.safety_radius

    centers = np.asarray(obstacle_centers, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(obstacle_radii, dtype=np.float64).reshape(-1)
    if len(radii):
        surface = np.linalg.norm(pos[:, None, :] - centers[None], axis=-1) - radii[None]
        flags &= surface.min(axis=1) > 0.0

    return flags, bool(np.all(flags))


def reached(episode: Episode, cfg: WorldConfig) -> np.ndarray:
    return np.linalg.norm(episode.positions - episode.targets, axis=1) < cfg.reach_radius


def transform_episode(g: GroupElement, episode: Episode) -> Episode:
    """Apply phi_g to every state and move targets and obstacle centres with the scene."""
    return replace(
        episode,
        states=act_states(g, episode.states),
        targets=act_points(g, episode.targets),
        obstacle_centers=act_points(g, episode.obstacle_centers),
        obstacle_radii=episode.obstacle_radii.copy(),
    )

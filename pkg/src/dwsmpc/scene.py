"""Planar environments, scene/problem sampling and a top-down rasterizer.

Three environment analogs share one arm base at the origin:

* ``table``: a single plate below the workspace; obstacles rest above it.
* ``shelf``: two horizontal plates forming a slot the arm reaches into.
* ``drawer``: a three-sided box opening upwards.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from . import arm as arm_mod
from . import collision as col
from .arm import ArmSpec
from .collision import Box, Disc, Pose2, shape_from_dict
from .rng import generator

EPS_SAFE = 0.01
GOAL_REACH_TOL = 1e-3
MAX_REJECTIONS = 1000

# fixed palette indexed by obstacle index
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.70, 0.15],
        [0.15, 0.25, 0.95],
        [0.95, 0.80, 0.05],
        [0.80, 0.15, 0.85],
        [0.05, 0.80, 0.85],
    ]
)
WALL_GRAY = 0.5
DEFAULT_BOUNDS = (-0.2, -0.6, 1.0, 0.6)


class SamplingError(RuntimeError):
    """Rejection sampling ran out of budget."""


@dataclass(frozen=True)
class Wall:
    shape: col.Shape
    pose: Pose2

    def to_dict(self):
        return {"shape": self.shape.to_dict(), "pose": self.pose.to_list()}


@dataclass(frozen=True)
class Obstacle:
    shape: col.Shape
    pose: Pose2
    color: int

    def to_dict(self):
        return {"shape": self.shape.to_dict(), "pose": self.pose.to_list(), "color": self.color}

    @classmethod
    def from_dict(cls, d) -> "Obstacle":
        return cls(shape_from_dict(d["shape"]), Pose2.from_list(d["pose"]), int(d["color"]))


@dataclass(frozen=True)
class Scene:
    walls: tuple[Wall, ...] = ()
    obstacles: tuple[Obstacle, ...] = ()
    bounds: tuple[float, float, float, float] = DEFAULT_BOUNDS

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        colors = [o.color for o in self.obstacles]
        if len(set(colors)) != len(colors):
            raise ValueError("obstacle colors must be distinct")
        if any(not 0 <= c < len(PALETTE) for c in colors):
            raise ValueError(f"color ids must lie in [0, {len(PALETTE)})")
        x0, y0, x1, y1 = self.bounds
        if not (x0 < x1 and y0 < y1):
            raise ValueError("bounds must be [xmin, ymin, xmax, ymax] with min < max")

    def bodies(self):
        """Collision bodies, walls first."""
        return [(w.shape, w.pose) for w in self.walls] + [(o.shape, o.pose) for o in self.obstacles]

    def without_obstacle(self, index: int) -> "Scene":
        obs = list(self.obstacles)
        del obs[index]
        return replace(self, obstacles=tuple(obs))

    def with_obstacle(self, obstacle: Obstacle) -> "Scene":
        return replace(self, obstacles=self.obstacles + (obstacle,))

    def to_dict(self):
        return {
            "walls": [w.to_dict() for w in self.walls],
            "obstacles": [o.to_dict() for o in self.obstacles],
            "bounds": list(self.bounds),
        }

    @classmethod
    def from_dict(cls, d) -> "Scene":
        try:
            walls = [Wall(shape_from_dict(w["shape"]), Pose2.from_list(w["pose"])) for w in d["walls"]]
            obs = [Obstacle.from_dict(o) for o in d["obstacles"]]
            bounds = tuple(float(b) for b in d["bounds"])
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"malformed scene document: {exc!r}") from exc
        if len(bounds) != 4:
            raise ValueError("bounds must have four entries")
        return cls(tuple(walls), tuple(obs), bounds)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Problem:
    scene: Scene
    q_start: np.ndarray
    goal: np.ndarray
    q_goal_hint: np.ndarray | None = None

    def __post_init__(self):
        for name in ("q_start", "goal", "q_goal_hint"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float)
                v.setflags(write=False)
                object.__setattr__(self, name, v)
        if self.goal.shape != (2,):
            raise ValueError("goal must be a 2D point")

    def to_dict(self):
        d = {"scene": self.scene.to_dict(), "q_start": self.q_start.tolist(), "goal": self.goal.tolist()}
        if self.q_goal_hint is not None:
            d["q_goal_hint"] = self.q_goal_hint.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "Problem":
        hint = d.get("q_goal_hint")
        return cls(Scene.from_dict(d["scene"]), d["q_start"], d["goal"], hint)


@dataclass(frozen=True)
class EnvironmentSpec:
    """Wall layout, obstacle budget and sampling regions of one environment analog.

    Regions are ``(xmin, ymin, xmax, ymax)`` rectangles in meters.
    """

    name: str
    walls: tuple[Wall, ...]
    count_range: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.035, 0.06)
    obstacle_region: tuple[float, float, float, float] = (0.3, -0.5, 0.95, 0.5)
    goal_region: tuple[float, float, float, float] = (0.3, -0.5, 0.95, 0.5)
    start_region: tuple[float, float, float, float] = (-0.2, 0.3, 0.7, 0.9)
    bounds: tuple[float, float, float, float] = DEFAULT_BOUNDS
    gap: float = 0.03  # free space kept between sampled obstacles, walls and the base
    base_clearance: float = 0.25

    def __post_init__(self):
        lo, hi = self.count_range
        if not (0 <= lo <= hi <= 5):
            raise ValueError("count range must satisfy 0 <= lo <= hi <= 5")
        if not (0 < self.size_range[0] <= self.size_range[1]):
            raise ValueError("size range must be positive and ordered")


def _plate(x0, x1, y, thickness=0.03) -> Wall:
    return Wall(Box((x1 - x0) / 2, thickness / 2), Pose2((x0 + x1) / 2, y))


def _post(x, y0, y1, thickness=0.03) -> Wall:
    return Wall(Box(thickness / 2, (y1 - y0) / 2), Pose2(x, (y0 + y1) / 2))


def table_env(**kw) -> EnvironmentSpec:
    defaults = dict(
        walls=(_plate(-0.2, 1.0, -0.3),),
        count_range=(1, 3),
        obstacle_region=(0.3, -0.24, 0.9, 0.35),
        goal_region=(0.35, -0.22, 0.85, 0.1),
    )
    return EnvironmentSpec("table", **{**defaults, **kw})


def shelf_env(**kw) -> EnvironmentSpec:
    defaults = dict(
        walls=(_plate(0.45, 0.95, 0.2), _plate(0.45, 0.95, -0.2)),
        count_range=(1, 5),
        size_range=(0.035, 0.055),
        obstacle_region=(0.25, -0.5, 0.95, 0.5),
        goal_region=(0.5, -0.12, 0.8, 0.12),
    )
    return EnvironmentSpec("shelf", **{**defaults, **kw})


def drawer_env(**kw) -> EnvironmentSpec:
    defaults = dict(
        walls=(_plate(-0.2, 1.0, -0.45), _post(0.4, -0.435, -0.12), _post(0.85, -0.435, -0.12)),
        count_range=(1, 3),
        obstacle_region=(0.25, -0.4, 0.95, 0.45),
        goal_region=(0.48, -0.38, 0.77, -0.18),
    )
    return EnvironmentSpec("drawer", **{**defaults, **kw})


ENVIRONMENTS = {"table": table_env, "shelf": shelf_env, "drawer": drawer_env}


def environment(name: str, **kw) -> EnvironmentSpec:
    try:
        return ENVIRONMENTS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


def _uniform_in(rng, rect, size=None):
    x0, y0, x1, y1 = rect
    return rng.uniform((x0, y0), (x1, y1), size=None if size is None else (size, 2))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
def sample_scene(env: EnvironmentSpec, seed) -> Scene:
    rng = generator(seed)
    count = int(rng.integers(env.count_range[0], env.count_range[1] + 1))
    base = (Disc(env.base_clearance), Pose2())
    placed: list[Obstacle] = []
    rejections = 0
    while len(placed) < count:
        size = rng.uniform(*env.size_range)
        if rng.random() < 0.5:
            shape = Disc(size)
        else:
            shape = Box(size, size * rng.uniform(0.6, 1.4))
        c = _uniform_in(rng, env.obstacle_region)
        pose = Pose2(float(c[0]), float(c[1]))
        others = [(w.shape, w.pose) for w in env.walls] + [(o.shape, o.pose) for o in placed] + [base]
        if all(_separation(shape, pose, s, p) > env.gap for s, p in others):
            placed.append(Obstacle(shape, pose, len(placed)))
            continue
        rejections += 1
        if rejections >= MAX_REJECTIONS:
            raise SamplingError(f"could not place {count} obstacles in {env.name!r} after {MAX_REJECTIONS} rejections")
    return Scene(env.walls, tuple(placed), env.bounds)


def _separation(shape_a, pose_a, shape_b, pose_b) -> float:
    # box-box is not a supported pair; the sampled box is replaced by its bounding disc
    if isinstance(shape_a, Box) and isinstance(shape_b, Box):
        shape_a = Disc(float(np.hypot(shape_a.hx, shape_a.hy)))
    return col.signed_distance(shape_a, pose_a, shape_b, pose_b)


def _in_rect(p, rect):
    x0, y0, x1, y1 = rect
    return (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)


def _sample_free(spec: ArmSpec, scene: Scene, rng, accept, margin: float, budget: int, batch: int = 64):
    lo, hi = np.array(spec.q_lower), np.array(spec.q_upper)
    drawn = 0
    while drawn < budget:
        m = min(batch, budget - drawn)
        q = rng.uniform(lo, hi, size=(m, spec.n))
        drawn += m
        ok = accept(q) & (col.clearance(spec, q, scene) >= margin)
        if np.any(ok):
            return q[int(np.argmax(ok))]
    return None


def sample_problem(
    scene: Scene,
    spec: ArmSpec,
    seed,
    goal_region=None,
    start_region=None,
    eps_safe: float = EPS_SAFE,
    budget: int = 20000,
) -> Problem:
    """Collision-free start and a reachable goal with its configuration hint.

    The goal is the end effector of a sampled collision-free ``q_goal`` whose
    end effector lies in ``goal_region`` (default: the scene bounds).  When
    ``start_region`` is given, the start's end effector must lie inside it.
    """
    rng = generator(seed)
    region = scene.bounds if goal_region is None else goal_region
    if start_region is None:
        accept_start = lambda q: np.ones(len(q), bool)  # noqa: E731
    else:
        accept_start = lambda q: _in_rect(arm_mod.end_effector(spec, q), start_region)  # noqa: E731
    q_start = _sample_free(spec, scene, rng, accept_start, eps_safe, budget)
    if q_start is None:
        raise SamplingError("no collision-free start configuration within budget")
    q_goal = _sample_free(
        spec, scene, rng, lambda q: _in_rect(arm_mod.end_effector(spec, q), region), eps_safe, budget
    )
    if q_goal is None:
        raise SamplingError("no reachable collision-free goal within budget")
    goal = arm_mod.end_effector(spec, q_goal)
    return Problem(scene, q_start, goal, q_goal)


def sample_env_problem(env: EnvironmentSpec, spec: ArmSpec, scene: Scene, seed, **kw) -> Problem:
    return sample_problem(scene, spec, seed, goal_region=env.goal_region, start_region=env.start_region, **kw)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------
def pixel_centers(bounds, resolution: int) -> np.ndarray:
    """World coordinates of pixel centers, shape (res, res, 2); row 0 is the top edge."""
    x0, y0, x1, y1 = bounds
    xs = x0 + (np.arange(resolution) + 0.5) * (x1 - x0) / resolution
    ys = y1 - (np.arange(resolution) + 0.5) * (y1 - y0) / resolution
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X, Y], axis=-1)


def shape_mask(shape: col.Shape, pose: Pose2, points: np.ndarray) -> np.ndarray:
    """Inside test for world points (..., 2)."""
    p = pose.to_local(points)
    if isinstance(shape, Disc):
        return np.einsum("...i,...i->...", p, p) <= shape.r**2
    if isinstance(shape, Box):
        return (np.abs(p[..., 0]) <= shape.hx) & (np.abs(p[..., 1]) <= shape.hy)
    if isinstance(shape, col.Capsule):
        x = np.clip(p[..., 0], -shape.hl, shape.hl)
        return (p[..., 0] - x) ** 2 + p[..., 1] ** 2 <= shape.r**2
    raise TypeError(f"cannot rasterize {type(shape).__name__}")


def render(scene: Scene, resolution: int = 64) -> np.ndarray:
    """Top-down RGB image in [0, 1], shape (res, res, 3)."""
    pts = pixel_centers(scene.bounds, resolution)
    img = np.ones((resolution, resolution, 3))
    for w in scene.walls:
        img[shape_mask(w.shape, w.pose, pts)] = WALL_GRAY
    for o in scene.obstacles:
        img[shape_mask(o.shape, o.pose, pts)] = PALETTE[o.color]
    return img


def occupancy(scene: Scene, resolution: int = 32) -> np.ndarray:
    """Binary occupancy grid over the bounds (1 = occupied by a wall or obstacle)."""
    pts = pixel_centers(scene.bounds, resolution)
    grid = np.zeros((resolution, resolution))
    for shape, pose in scene.bodies():
        grid[shape_mask(shape, pose, pts)] = 1.0
    return grid


def obstacle_masks(scene: Scene, resolution: int = 64) -> np.ndarray:
    """Per-obstacle visible pixel masks, shape (n_obstacles, res, res)."""
    pts = pixel_centers(scene.bounds, resolution)
    masks = np.zeros((len(scene.obstacles), resolution, resolution), dtype=bool)
    taken = np.zeros((resolution, resolution), dtype=bool)
    for i in reversed(range(len(scene.obstacles))):
        o = scene.obstacles[i]
        m = shape_mask(o.shape, o.pose, pts) & ~taken
        masks[i] = m
        taken |= m
    return masks

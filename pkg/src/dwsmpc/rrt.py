"""RRT-Connect in joint space, shortcut smoothing and arc-length resampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import collision as col
from .arm import ArmSpec
from .rng import generator


@dataclass(frozen=True)
class RRTParams:
    step: float = 0.15  # extension step, rad
    max_iters: int = 5000
    goal_bias: float = 0.05
    eps_check: float = 0.0  # clearance required along dense edge checks

    @property
    def resolution(self) -> float:
        return self.step / 10


@dataclass
class Tree:
    nodes: np.ndarray
    parents: np.ndarray
    size: int = 1

    @classmethod
    def rooted(cls, root, capacity: int) -> "Tree":
        nodes = np.empty((capacity, len(root)))
        nodes[0] = root
        return cls(nodes, np.full(capacity, -1, dtype=int))

    def add(self, q, parent: int) -> int:
        if self.size == len(self.nodes):
            self.nodes = np.concatenate([self.nodes, np.empty_like(self.nodes)])
            self.parents = np.concatenate([self.parents, np.full(len(self.parents), -1, dtype=int)])
        self.nodes[self.size] = q
        self.parents[self.size] = parent
        self.size += 1
        return self.size - 1

    def nearest(self, q) -> int:
        d = self.nodes[: self.size] - q
        return int(np.argmin(np.einsum("ij,ij->i", d, d)))

    def branch(self, idx: int) -> np.ndarray:
        """Configurations from node ``idx`` back to the root."""
        out = []
        while idx >= 0:
            out.append(self.nodes[idx])
            idx = self.parents[idx]
        return np.array(out)


@dataclass
class RRTResult:
    path: np.ndarray | None
    iterations: int
    tree_sizes: tuple[int, int]

    @property
    def success(self) -> bool:
        return self.path is not None


def densify(a, b, resolution: float) -> np.ndarray:
    """Points from a to b (inclusive) spaced at most ``resolution`` apart."""
    n = max(1, int(np.ceil(np.linalg.norm(b - a) / resolution)))
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    out = a + s * (b - a)
    out[0], out[-1] = a, b
    return out


def edge_valid(spec: ArmSpec, scene, a, b, resolution: float, eps: float = 0.0) -> bool:
    return bool(np.all(col.clearance(spec, densify(a, b, resolution), scene) >= eps))


def path_valid(spec: ArmSpec, scene, path, resolution: float, eps: float = 0.0) -> bool:
    pts = np.concatenate([densify(a, b, resolution) for a, b in zip(path[:-1], path[1:])]) if len(path) > 1 else path
    return bool(np.all(col.clearance(spec, pts, scene) >= eps))


def path_length(path) -> float:
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


def rrt_connect(
    spec: ArmSpec, scene, q_start, q_goal, params: RRTParams = RRTParams(), seed=0
) -> RRTResult:
    """Bidirectional RRT with greedy connection; returns the path start → q_goal."""
    rng = generator(seed)
    q_start, q_goal = np.asarray(q_start, float), np.asarray(q_goal, float)
    res, eps = params.resolution, params.eps_check
    for name, q in (("start", q_start), ("goal", q_goal)):
        if col.clearance(spec, q, scene) < eps:
            raise ValueError(f"{name} configuration is in collision")
    if np.allclose(q_start, q_goal, rtol=0, atol=1e-12):
        return RRTResult(q_start[None].copy(), 0, (1, 1))
    lo, hi = np.array(spec.q_lower), np.array(spec.q_upper)
    cap = 256
    ta, tb = Tree.rooted(q_start, cap), Tree.rooted(q_goal, cap)
    a_is_start = True

    def extend(tree, target):
        i = tree.nearest(target)
        near = tree.nodes[i]
        delta = target - near
        dist = np.linalg.norm(delta)
        new = target if dist <= params.step else near + delta * (params.step / dist)
        if not edge_valid(spec, scene, near, new, res, eps):
            return None
        return tree.add(new, i)

    def connect(tree, target):
        """Greedy steps toward target, checked in one batch; returns (last node, reached)."""
        i = tree.nearest(target)
        near = tree.nodes[i]
        dist = np.linalg.norm(target - near)
        n_steps = max(1, int(np.ceil(dist / params.step)))
        pts = densify(near, target, res)
        ok = col.clearance(spec, pts, scene) >= eps
        n_ok = len(pts) if ok.all() else int(np.argmin(ok))  # leading valid points
        last, reached = None, False
        for k in range(1, n_steps + 1):
            s = min(k * params.step / dist, 1.0) if dist > 0 else 1.0
            # node k is valid if every dense point up to it is
            if int(np.floor(s * (len(pts) - 1) + 1e-9)) >= n_ok:
                break
            i = tree.add(near + s * (target - near), i)
            last, reached = i, k == n_steps
        return last, reached

    for it in range(1, params.max_iters + 1):
        if rng.random() < params.goal_bias:
            target = tb.nodes[0]
        else:
            target = rng.uniform(lo, hi)
        ia = extend(ta, target)
        if ia is not None:
            ib, reached = connect(tb, ta.nodes[ia])
            if reached:
                half_a, half_b = ta.branch(ia)[::-1], tb.branch(ib)[1:]
                path = np.concatenate([half_a, half_b])
                if not a_is_start:
                    path = path[::-1]
                return RRTResult(path, it, (ta.size, tb.size) if a_is_start else (tb.size, ta.size))
        ta, tb = tb, ta
        a_is_start = not a_is_start
    sizes = (ta.size, tb.size) if a_is_start else (tb.size, ta.size)
    return RRTResult(None, params.max_iters, sizes)


def shortcut(spec: ArmSpec, scene, path, iters: int = 100, seed=0, params: RRTParams = RRTParams()) -> np.ndarray:
    """Random shortcutting; new segments are subdivided at the extension step."""
    rng = generator(seed)
    path = np.asarray(path, float)
    for _ in range(iters):
        if len(path) < 3:
            break
        i, j = sorted(rng.choice(len(path), size=2, replace=False))
        if j - i < 2:
            continue
        old = path_length(path[i : j + 1])
        if np.linalg.norm(path[j] - path[i]) >= old:
            continue
        if edge_valid(spec, scene, path[i], path[j], params.resolution, params.eps_check):
            seg = densify(path[i], path[j], params.step)
            path = np.concatenate([path[:i], seg, path[j + 1 :]])
    return path


def resample(path, T: int) -> np.ndarray:
    """T+1 points equally spaced in joint-space arc length along the polyline."""
    if T < 1:
        raise ValueError("T must be at least 1")
    path = np.asarray(path, float)
    end = path[-1]
    keep = np.concatenate([[True], np.linalg.norm(np.diff(path, axis=0), axis=1) > 0])
    path = path[keep]
    if len(path) == 1:
        return np.repeat(path, T + 1, axis=0)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, cum[-1], T + 1)
    out = np.stack([np.interp(s, cum, path[:, j]) for j in range(path.shape[1])], axis=1)
    out[0], out[-1] = path[0], end
    return out


def plan(spec: ArmSpec, problem, params: RRTParams = RRTParams(), seed=0, smooth_iters: int = 100):
    """RRT-Connect to the problem's goal hint followed by shortcutting; None on failure."""
    if problem.q_goal_hint is None:
        raise ValueError("problem carries no goal configuration hint")
    res = rrt_connect(spec, problem.scene, problem.q_start, problem.q_goal_hint, params, seed)
    if not res.success:
        return None
    return shortcut(spec, problem.scene, res.path, smooth_iters, seed, params)

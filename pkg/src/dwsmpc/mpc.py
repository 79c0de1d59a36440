"""Closed-loop receding-horizon simulation on a simulated clock.

A global plan (warm-start candidates → full-horizon OCP refinement, best of the
batch) is made whenever a task starts or the scene changes.  The MPC re-solves
a short window at the replan rate, tracking the time-aligned slice of the
global plan, and the control loop applies u = u_ff + K (x − x*) between replans.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import arm as arm_mod
from . import collision as col
from . import ocp, rrt
from . import scene as S
from .arm import ArmSpec
from .rng import derive_seed, generator


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Task:
    time: float
    goal: tuple[float, float]
    q_goal_hint: tuple[float, ...] | None = None  # only used by planners that need a configuration


@dataclass(frozen=True)
class Event:
    time: float
    kind: str  # "remove" or "insert"
    obstacle: dict | None = None  # insert: Obstacle.to_dict(); remove: {"index": i}

    def __post_init__(self):
        if self.kind not in ("remove", "insert"):
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class EpisodeConfig:
    control_hz: int = 1000
    replan_hz: int = 100
    N_h: int = 15
    dt: float = 0.01
    duration: float = 3.0
    noise_sigma: float = 0.0  # actuation noise, N·m per joint and control tick
    tasks: tuple[Task, ...] = ()
    events: tuple[Event, ...] = ()
    replan_iters: int = 5
    plan_T: int = 50
    plan_dt: float = 0.05
    plan_iters: int = 150
    plan_margin: float = 0.02  # extra clearance of the global plan, covers motion between its coarse nodes
    plan_speed_scale: float = 0.8  # plan below the joint velocity limits so the tracker can catch up
    plan_tol: float = 1e-3  # feasibility tolerance of the global plan; the MPC re-enforces constraints
    eps_safe: float = 0.01
    solver_margin: float = 0.0025
    goal_tol: float = 0.01
    feedback: bool = True
    weights: ocp.Weights = field(default_factory=ocp.Weights)
    # the window tracks the plan; a stage goal term would pull it off the plan towards the window end
    mpc_weights: ocp.Weights = field(default_factory=lambda: ocp.Weights(q_ee=(0.0, 0.0), q_pos=10.0, q_vel=0.1))

    def __post_init__(self):
        if self.control_hz % self.replan_hz:
            raise ValueError("control rate must be a multiple of the replan rate")
        if self.N_h < 2:
            raise ValueError("N_h must be at least 2")
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("duration and dt must be positive")

    @property
    def ratio(self) -> int:
        return self.control_hz // self.replan_hz

    def solver_weights(self, extra: float = 0.0, window: bool = False) -> ocp.Weights:
        w = self.mpc_weights if window else self.weights
        return replace(w, eps_safe=self.eps_safe + self.solver_margin + extra)

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        d["mpc_weights"] = self.mpc_weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "EpisodeConfig":
        d = dict(d)
        d["tasks"] = tuple(Task(t["time"], tuple(t["goal"]), None if t.get("q_goal_hint") is None else tuple(t["q_goal_hint"])) for t in d.get("tasks", ()))
        d["events"] = tuple(Event(**e) for e in d.get("events", ()))
        for k in ("weights", "mpc_weights"):
            if k in d:
                d[k] = ocp.Weights.from_dict(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# warm starts
# ---------------------------------------------------------------------------
class HoldWarmStart:
    """Cold start: stay at the current configuration."""

    def candidates(self, problem: S.Problem, T: int, seed: int) -> np.ndarray:
        return np.repeat(np.asarray(problem.q_start, float)[None, None], T + 1, axis=1)


class RRTWarmStart:
    """RRT-Connect to the task's configuration hint, resampled to T+1 nodes."""

    def __init__(self, spec: ArmSpec, params: rrt.RRTParams = rrt.RRTParams(), smooth_iters: int = 100):
        self.spec, self.params, self.smooth_iters = spec, params, smooth_iters

    def candidates(self, problem: S.Problem, T: int, seed: int) -> np.ndarray | None:
        path = rrt.plan(self.spec, problem, self.params, seed, self.smooth_iters)
        return None if path is None else rrt.resample(path, T)[None]


class DiffusionWarmStart:
    """Batch of diffusion samples conditioned on the current state, goal and scene."""

    def __init__(self, trained, encoders, steps: int = 10, batch: int = 10, guidance=None):
        from . import diffusion

        self._d = diffusion
        self.trained, self.encoders = trained, encoders
        self.steps, self.batch, self.guidance = steps, batch, guidance

    def candidates(self, problem: S.Problem, T: int, seed: int) -> np.ndarray:
        if self.trained.model.config.T != T:
            raise ValueError(f"denoiser horizon {self.trained.model.config.T} != plan horizon {T}")
        cond = self._d.encode_condition(problem, self.trained.variant, self.encoders)
        return self._d.sample(cond, self.trained, self.steps, seed, self.batch, self.guidance,
                              problem.scene if self.guidance is not None else None)


def refine_candidates(spec: ArmSpec, scene, x0, goal, cands: np.ndarray, dt: float, weights: ocp.Weights, iters: int,
                      params: ocp.SolverParams = ocp.SolverParams()):
    """Full-horizon OCP on every candidate; returns the solutions ordered best first.

    Order: feasible before infeasible, then lower cost, then lower violation.
    """
    x_ref = ocp.build_reference(cands, dt)
    x_ref[:, 0] = x0
    prob = ocp.OCPProblem(spec, scene, x0, goal, x_ref, dt, weights)
    sols = ocp.solve(ocp.ArmOCP(prob), (x_ref, None), params, max_iters=iters, batched=True)
    return sorted(sols, key=lambda s: (not s.feasible, s.cost if s.feasible else s.max_violation))


# ---------------------------------------------------------------------------
# receding horizon helpers
# ---------------------------------------------------------------------------
def shift_warm_start(solution: ocp.OCPSolution):
    """(X, U) for the next replan: drop the first node and repeat the last."""
    X = np.concatenate([solution.states[1:], solution.states[-1:]])
    U = np.concatenate([solution.controls[1:], solution.controls[-1:]])
    return X, U


class GlobalPlan:
    """Time-stamped full-horizon state trajectory."""

    def __init__(self, states: np.ndarray, dt: float, t0: float):
        self.states, self.dt, self.t0 = states, dt, t0

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (len(self.states) - 1)

    def at(self, t) -> np.ndarray:
        """Interpolated states at times t; after the end the final configuration with zero velocity."""
        t = np.atleast_1d(np.asarray(t, float))
        s = (t - self.t0) / self.dt
        n = self.states.shape[1] // 2
        out = np.stack([np.interp(s, np.arange(len(self.states)), self.states[:, j]) for j in range(2 * n)], axis=1)
        out[s >= len(self.states) - 1, n:] = 0.0
        return out

    def remaining_ee_length(self, spec: ArmSpec, t: float, samples: int = 200) -> float:
        ts = np.linspace(max(t, self.t0), max(self.t_end, t), samples)
        return ee_path_length(spec, self.at(ts)[:, : spec.n])


def ee_path_length(spec: ArmSpec, q_traj) -> float:
    p = arm_mod.end_effector(spec, np.asarray(q_traj))
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# episode
# ---------------------------------------------------------------------------
@dataclass
class EpisodeLog:
    spec: ArmSpec
    time: np.ndarray
    states: np.ndarray
    torques: np.ndarray
    clearance: np.ndarray
    goal_error: np.ndarray
    tracking_error: np.ndarray
    markers: list  # (time, label)
    replan_latency: list
    plan_records: list  # one dict per global plan
    failed: bool = False
    diagnostic: str = ""
    eps_safe: float = 0.01
    goal_tol: float = 0.01

    @property
    def hard_collisions(self) -> int:
        return int(np.sum(self.clearance < 0))

    @property
    def margin_violations(self) -> int:
        return int(np.sum(self.clearance < self.eps_safe))

    @property
    def success(self) -> bool:
        return (not self.failed) and self.hard_collisions == 0 and bool(len(self.goal_error)) and self.goal_error[-1] <= self.goal_tol

    def summary(self, budget: float) -> dict:
        lat = np.asarray(self.replan_latency)
        return {
            "success": self.success,
            "failed": self.failed,
            "diagnostic": self.diagnostic,
            "hard_collision_ticks": self.hard_collisions,
            "margin_violation_ticks": self.margin_violations,
            "min_clearance": float(self.clearance.min()) if len(self.clearance) else None,
            "final_goal_error": float(self.goal_error[-1]) if len(self.goal_error) else None,
            "mean_tracking_error": float(self.tracking_error.mean()) if len(self.tracking_error) else None,
            "replans": len(lat),
            "latency_mean": float(lat.mean()) if len(lat) else None,
            "latency_p95": float(np.percentile(lat, 95)) if len(lat) else None,
            "latency_max": float(lat.max()) if len(lat) else None,
            "budget_breaches": int(np.sum(lat > budget)),
            "markers": self.markers,
            "plans": self.plan_records,
        }

    def to_csv(self) -> str:
        n = self.spec.n
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", *[f"q{j}" for j in range(n)], *[f"v{j}" for j in range(n)], *[f"u{j}" for j in range(n)],
                    "clearance", "goal_error", "tracking_error", "marker"])
        marks = {}
        for t, label in self.markers:
            marks.setdefault(round(t, 9), []).append(label)
        for k, t in enumerate(self.time):
            w.writerow([f"{t:.6f}", *(f"{v:.9g}" for v in self.states[k]), *(f"{v:.9g}" for v in self.torques[k]),
                        f"{self.clearance[k]:.9g}", f"{self.goal_error[k]:.9g}", f"{self.tracking_error[k]:.9g}",
                        ";".join(marks.get(round(t, 9), []))])
        return buf.getvalue()


def _apply_event(scene: S.Scene, ev: Event) -> S.Scene:
    if ev.kind == "remove":
        idx = (ev.obstacle or {}).get("index", 0)
        if not 0 <= idx < len(scene.obstacles):
            raise ValueError(f"no obstacle {idx} to remove")
        return scene.without_obstacle(idx)
    return scene.with_obstacle(S.Obstacle.from_dict(ev.obstacle))


def run_episode(spec: ArmSpec, scene: S.Scene, x0, config: EpisodeConfig, warm_start, seed: int = 0) -> EpisodeLog:
    """Simulate one episode; the simulated clock advances regardless of wall-clock latency."""
    cfg = config
    n = spec.n
    rng = generator(derive_seed(seed, 7))
    x = np.asarray(x0, float).copy()
    n_ticks = int(round(cfg.duration * cfg.control_hz))
    h = 1.0 / cfg.control_hz
    tasks = sorted(cfg.tasks, key=lambda t: t.time)
    events = sorted(cfg.events, key=lambda e: e.time)
    weights = cfg.solver_weights(window=True)
    goal, task = None, None
    plan: GlobalPlan | None = None
    sol: ocp.OCPSolution | None = None
    sol_t = 0.0
    need_plan = False
    markers, latency, plans = [], [], []
    segments = [(0, scene)]  # (first tick, scene in force)
    ts, xs, us, track = [], [], [], []
    failed, diag = False, ""
    u_lim = np.asarray(spec.u_limit)
    plan_spec = replace(spec, v_limit=tuple(cfg.plan_speed_scale * v for v in spec.v_limit))
    for tick in range(n_ticks):
        t = tick * h
        while events and events[0].time <= t + 1e-12:
            ev = events.pop(0)
            scene = _apply_event(scene, ev)
            segments.append((tick, scene))
            markers.append((t, f"event:{ev.kind}"))
            need_plan = goal is not None
        while tasks and tasks[0].time <= t + 1e-12:
            task = tasks.pop(0)
            goal = np.asarray(task.goal, float)
            markers.append((t, "task"))
            need_plan = True
        if goal is not None and tick % cfg.ratio == 0:
            try:
                if need_plan:
                    rec = {"time": t, "old_remaining_length": None if plan is None else plan.remaining_ee_length(spec, t)}
                    w0 = time.perf_counter()
                    problem = S.Problem(scene, x[:n].copy(), goal, None if task.q_goal_hint is None else np.asarray(task.q_goal_hint))
                    cands = warm_start.candidates(problem, cfg.plan_T, derive_seed(seed, tick))
                    if cands is None:
                        cands = HoldWarmStart().candidates(problem, cfg.plan_T, 0)
                    best = refine_candidates(plan_spec, scene, x, goal, cands, cfg.plan_dt, cfg.solver_weights(cfg.plan_margin), cfg.plan_iters,
                                             ocp.SolverParams(tol_c=cfg.plan_tol))[0]
                    plan = GlobalPlan(best.states, cfg.plan_dt, t)
                    rec.update(new_length=plan.remaining_ee_length(spec, t), feasible=best.feasible, cost=best.cost,
                               seconds=time.perf_counter() - w0)
                    plans.append(rec)
                    sol = None
                    need_plan = False
                w0 = time.perf_counter()
                ref = plan.at(t + cfg.dt * np.arange(cfg.N_h))
                window_goal = arm_mod.end_effector(spec, ref[-1, :n]) if t + cfg.dt * (cfg.N_h - 1) < plan.t_end else goal
                prob = ocp.OCPProblem(spec, scene, x, window_goal, ref, cfg.dt, weights)
                if sol is None:
                    guess = (ref, None)
                else:
                    guess = shift_warm_start(sol)
                sol = ocp.solve(ocp.ArmOCP(prob), guess, max_iters=cfg.replan_iters)
                sol_t = t
                latency.append(time.perf_counter() - w0)
            except ocp.SolverError as exc:
                failed, diag = True, f"solver abort at t={t:.3f}: {exc}"
                markers.append((t, "abort"))
                break
        if sol is not None:
            tau = (t - sol_t) / cfg.dt
            x_star = sol.states[0] + tau * (sol.states[1] - sol.states[0])
            u = sol.controls[0] + (sol.gains[0] @ (x - x_star) if cfg.feedback else 0.0)
            track.append(float(np.linalg.norm(x[:n] - x_star[:n])))
        else:
            u = arm_mod.gravity_compensation(spec, x[:n])
            track.append(0.0)
        if cfg.noise_sigma > 0:
            u = u + rng.normal(0.0, cfg.noise_sigma, n)
        u = np.clip(u, -u_lim, u_lim)
        ts.append(t)
        xs.append(x.copy())
        us.append(u)
        x = arm_mod.step(spec, x, u, h)
        if not np.all(np.isfinite(x)):
            failed, diag = True, f"non-finite state at t={t:.3f}"
            break
    states = np.array(xs) if xs else np.zeros((0, 2 * n))
    clr = np.empty(len(states))
    bounds = [t for t, _ in segments[1:]] + [len(states)]
    for (a, sc), b in zip(segments, bounds):
        if b > a:
            clr[a:b] = col.clearance(spec, states[a:b, :n], sc)
    ge = np.full(len(ts), np.inf) if goal is None else np.linalg.norm(arm_mod.end_effector(spec, states[:, :n]) - goal, axis=1)
    return EpisodeLog(spec, np.array(ts), states, np.array(us) if us else np.zeros((0, n)), clr, ge, np.array(track),
                      markers, latency, plans, failed, diag, cfg.eps_safe, cfg.goal_tol)


def removal_scenario(noise_sigma: float = 0.0, duration: float = 2.0, remove_at: float = 0.25, **overrides):
    """Table scene with a disc between start and goal that disappears shortly after the start.

    Returns ``(spec, scene, x0, config, q_goal)``; ``q_goal`` is a collision-free
    configuration for the goal and serves as the RRT hint.
    """
    from .collision import Disc, Pose2

    spec = ArmSpec()
    q0 = np.array([0.9, -0.5, -0.6])
    q_goal = np.array([0.59460402, -1.10297478, -0.92554465])
    goal = tuple(float(v) for v in arm_mod.end_effector(spec, q_goal))
    scene = S.Scene(walls=S.environment("table").walls, obstacles=(S.Obstacle(Disc(0.06), Pose2(0.7, 0.2, 0.0), 0),))
    cfg = EpisodeConfig(duration=duration, noise_sigma=noise_sigma, tasks=(Task(0.0, goal, tuple(q_goal)),),
                        events=(Event(remove_at, "remove", {"index": 0}),), **overrides)
    return spec, scene, np.concatenate([q0, np.zeros(3)]), cfg, q_goal

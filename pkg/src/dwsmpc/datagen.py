"""Expert trajectory generation and the JSON-lines dataset format.

Pipeline per problem: sample scene → sample problem → RRT-Connect → shortcut
→ arc-length resample to T+1 nodes → OCP refinement → independent re-check.
"""
from __future__ import annotations

import json
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import arm as arm_mod
from . import collision as col
from . import ocp, rrt
from . import scene as S
from .arm import ArmSpec
from .rng import derive_seed

FORMAT = "dwsmpc-dataset"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


class GenerationAborted(RuntimeError):
    def __init__(self, report: "GenerationReport"):
        super().__init__(
            f"acceptance rate {report.acceptance_rate:.1%} below minimum after {report.attempted} problems"
        )
        self.report = report


@dataclass(frozen=True)
class DatagenParams:
    T: int = 50
    dt: float = 0.05
    eps_safe: float = 0.01  # margin every stored record must keep
    solver_margin: float = 0.0025  # extra margin inside the OCP so unconverged tails still clear eps_safe
    goal_tol: float = 0.01
    ocp_iters: int = 250
    smooth_iters: int = 100
    rrt: rrt.RRTParams = field(default_factory=lambda: rrt.RRTParams(max_iters=6000))
    weights: ocp.Weights = field(default_factory=ocp.Weights)
    min_acceptance: float = 0.1
    abort_after: int = 20  # attempts before the acceptance rate can abort a run

    def solver_weights(self) -> ocp.Weights:
        d = self.weights.to_dict()
        d["eps_safe"] = self.eps_safe + self.solver_margin
        return ocp.Weights.from_dict(d)

    def to_dict(self):
        d = asdict(self)
        d["rrt"] = asdict(self.rrt)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "DatagenParams":
        d = dict(d)
        if "rrt" in d:
            d["rrt"] = rrt.RRTParams(**d["rrt"])
        if "weights" in d:
            d["weights"] = ocp.Weights.from_dict(d["weights"])
        return cls(**d)


@dataclass
class DatasetRecord:
    scene: S.Scene
    q_start: np.ndarray
    goal: np.ndarray
    trajectory: np.ndarray  # (T+1, n) joint configurations
    cost: float
    seed: int

    def problem(self) -> S.Problem:
        return S.Problem(self.scene, self.q_start, self.goal)

    def to_dict(self):
        return {
            "scene": self.scene.to_dict(),
            "q_start": self.q_start.tolist(),
            "goal": self.goal.tolist(),
            "trajectory": self.trajectory.tolist(),
            "cost": self.cost,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "DatasetRecord":
        return cls(
            S.Scene.from_dict(d["scene"]),
            np.asarray(d["q_start"], float),
            np.asarray(d["goal"], float),
            np.asarray(d["trajectory"], float),
            float(d["cost"]),
            int(d["seed"]),
        )


def record_violations(record: DatasetRecord, spec: ArmSpec, eps_safe: float, goal_tol: float) -> list[str]:
    """Reasons a record breaks the dataset invariants, re-derived from scratch (empty if valid)."""
    traj = record.trajectory
    out = []
    if traj.ndim != 2 or traj.shape[1] != spec.n or len(traj) < 2:
        return [f"trajectory shape {traj.shape}"]
    if not np.all(np.isfinite(traj)):
        return ["non-finite trajectory"]
    if not np.allclose(traj[0], record.q_start, rtol=0, atol=1e-9):
        out.append("trajectory does not start at q_start")
    clr = col.clearance(spec, traj, record.scene).min()
    if clr < eps_safe:
        out.append(f"clearance {clr:.4f} < {eps_safe}")
    err = float(np.linalg.norm(arm_mod.end_effector(spec, traj[-1]) - record.goal))
    if err > goal_tol:
        out.append(f"goal error {err:.4f} > {goal_tol}")
    return out


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------
@dataclass
class Attempt:
    scene_index: int
    problem_index: int
    seed: int
    record: DatasetRecord | None
    reason: str | None  # rejection reason
    seconds: float


def expert_solve(spec: ArmSpec, problem: S.Problem, params: DatagenParams, seed: int):
    """RRT → resample → OCP for one problem; returns (solution or None, reason or None)."""
    path = rrt.plan(spec, problem, params.rrt, seed, params.smooth_iters)
    if path is None:
        return None, "rrt_failure"
    x_ref = ocp.build_reference(rrt.resample(path, params.T), params.dt)
    x0 = np.concatenate([problem.q_start, np.zeros(spec.n)])
    ocp_problem = ocp.OCPProblem(spec, problem.scene, x0, problem.goal, x_ref, params.dt, params.solver_weights())
    sol = ocp.solve_problem(ocp_problem, x_ref, max_iters=params.ocp_iters)
    return sol, None


def _attempt(args) -> Attempt:
    env, spec, params, seed, s, j = args
    t0 = time.perf_counter()
    scene = S.sample_scene(env, derive_seed(seed, s))
    pseed = derive_seed(seed, s, j)
    try:
        problem = S.sample_env_problem(env, spec, scene, pseed, eps_safe=params.eps_safe)
    except S.SamplingError:
        return Attempt(s, j, pseed, None, "sampling_failure", time.perf_counter() - t0)
    try:
        sol, reason = expert_solve(spec, problem, params, pseed)
    except ocp.SolverError:
        sol, reason = None, "solver_error"
    if sol is None:
        return Attempt(s, j, pseed, None, reason, time.perf_counter() - t0)
    rec = DatasetRecord(scene, np.array(problem.q_start), np.array(problem.goal), sol.states[:, : spec.n], sol.cost, pseed)
    bad = record_violations(rec, spec, params.eps_safe, params.goal_tol)
    if bad:
        reason = "goal_tolerance" if bad[0].startswith("goal") else "ocp_infeasible"
        return Attempt(s, j, pseed, None, reason, time.perf_counter() - t0)
    return Attempt(s, j, pseed, rec, None, time.perf_counter() - t0)


@dataclass
class GenerationReport:
    env: str
    attempted: int = 0
    accepted: int = 0
    rejections: dict = field(default_factory=dict)
    path_lengths: list = field(default_factory=list)  # joint-space length of accepted trajectories
    seconds: float = 0.0
    log: list = field(default_factory=list)  # (scene, problem, seed, reason) per rejection

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempted if self.attempted else 0.0

    def add(self, a: Attempt):
        self.attempted += 1
        self.seconds += a.seconds
        if a.record is not None:
            self.accepted += 1
            self.path_lengths.append(rrt.path_length(a.record.trajectory))
        else:
            self.rejections[a.reason] = self.rejections.get(a.reason, 0) + 1
            self.log.append([a.scene_index, a.problem_index, a.seed, a.reason])

    def summary(self) -> dict:
        lengths = np.asarray(self.path_lengths)
        dist = {}
        if len(lengths):
            q = np.percentile(lengths, [0, 25, 50, 75, 100])
            dist = dict(zip(["min", "p25", "median", "p75", "max"], map(float, q)), mean=float(lengths.mean()))
        return {
            "env": self.env,
            "attempted": self.attempted,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "rejections": dict(sorted(self.rejections.items())),
            "path_length": dist,
            "seconds": self.seconds,
            "rejected": self.log,
        }


def generate(
    env: S.EnvironmentSpec,
    spec: ArmSpec,
    n_scenes: int,
    problems_per_scene: int,
    params: DatagenParams = DatagenParams(),
    seed: int = 0,
    workers: int = 1,
    progress=None,
):
    """Run the expert pipeline; returns (records, report) in deterministic task order.

    Raises :class:`GenerationAborted` when the acceptance rate is below
    ``params.min_acceptance`` once ``abort_after`` problems have been tried,
    or at the end of the run.
    """
    tasks = [(env, spec, params, seed, s, j) for s in range(n_scenes) for j in range(problems_per_scene)]
    report = GenerationReport(env.name)
    records = []

    def consume(attempts):
        for a in attempts:
            report.add(a)
            if a.record is not None:
                records.append(a.record)
            if progress is not None:
                progress(report)
            if report.attempted >= params.abort_after and report.acceptance_rate < params.min_acceptance:
                raise GenerationAborted(report)

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            consume(pool.map(_attempt, tasks, chunksize=4))
    else:
        consume(map(_attempt, tasks))
    if report.attempted and report.acceptance_rate < params.min_acceptance:
        raise GenerationAborted(report)
    return records, report


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
def make_header(spec: ArmSpec, T: int, env: str = "", dt: float | None = None) -> dict:
    h = {"format": FORMAT, "version": FORMAT_VERSION, "T": T, "n": spec.n, "arm": spec.digest(), "env": env}
    if dt is not None:
        h["dt"] = dt
    return h


def write_dataset(path, header: dict, records) -> None:
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_dict(), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path, spec: ArmSpec | None = None, T: int | None = None):
    """Load (header, records); rejects foreign headers and names the first bad line."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetError(f"{path}: empty file, missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line 1: malformed header ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise DatasetError(f"{path}: line 1: not a {FORMAT} header")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format version {header.get('version')}")
    if spec is not None and (header.get("n") != spec.n or header.get("arm") != spec.digest()):
        raise DatasetError(f"{path}: header arm {header.get('arm')} does not match spec {spec.digest()}")
    if T is not None and header.get("T") != T:
        raise DatasetError(f"{path}: header horizon T={header.get('T')} does not match {T}")
    records = []
    shape = (header["T"] + 1, header["n"])
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = DatasetRecord.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: line {lineno}: malformed record ({exc})") from exc
        if rec.trajectory.shape != shape:
            raise DatasetError(f"{path}: line {lineno}: trajectory shape {rec.trajectory.shape} != {shape}")
        records.append(rec)
    return header, records


def dataset_stats(records, spec: ArmSpec) -> dict:
    lengths = np.array([rrt.path_length(r.trajectory) for r in records])
    scenes = Counter(r.scene.digest() for r in records)
    return {
        "records": len(records),
        "scenes": len(scenes),
        "path_length_mean": float(lengths.mean()) if len(lengths) else None,
        "cost_mean": float(np.mean([r.cost for r in records])) if records else None,
    }

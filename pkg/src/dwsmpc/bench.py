"""Evaluation harness: method comparison, conditioning and guidance ablations, steps × iterations sweep.

Every returned trajectory is re-checked here with the collision module:
success means no penetration along the densely interpolated path and an end
effector within ``goal_tol`` of the goal at the last node.
"""
from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import arm as arm_mod
from . import collision as col
from . import diffusion as D
from . import ocp, rrt
from . import scene as S
from . import slot_encoder
from .arm import ArmSpec
from .rng import derive_seed

TAGS = ("diffusion+ocp", "ocp_cold", "rrt_connect", "diffusion_only", "diffusion_guided_only")
LEARNED = ("diffusion+ocp", "diffusion_only", "diffusion_guided_only")


class MissingWeightsError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    tag: str
    variant: str = "slots"
    steps: int = 10
    ocp_iters: int = 20
    batch: int = 10
    guidance: D.Guidance = field(default_factory=D.Guidance)  # used by diffusion_guided_only only
    rrt_iters: int = 2000

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown method {self.tag!r}; choose from {TAGS}")
        if self.variant not in D.VARIANTS:
            raise ValueError(f"unknown conditioning variant {self.variant!r}")
        if min(self.steps, self.batch, self.ocp_iters) < 1:
            raise ValueError("steps, batch and ocp_iters must be positive")

    @property
    def learned(self) -> bool:
        return self.tag in LEARNED

    @property
    def name(self) -> str:
        if self.tag == "ocp_cold":
            return f"ocp_cold[it={self.ocp_iters}]"
        if self.tag == "rrt_connect":
            return "rrt_connect"
        it = f",it={self.ocp_iters}" if self.tag == "diffusion+ocp" else ""
        return f"{self.tag}[{self.variant},S={self.steps}{it}]"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MethodSpec":
        d = dict(d)
        if "guidance" in d:
            d["guidance"] = D.Guidance(**d["guidance"])
        return cls(**d)


@dataclass(frozen=True)
class BenchConfig:
    T: int = 50
    dt: float = 0.05
    goal_tol: float = 0.01
    eps_safe: float = 0.01
    solver_margin: float = 0.0025
    check_resolution: float = 0.02  # joint-space spacing of the dense re-check, rad
    weights: ocp.Weights = field(default_factory=ocp.Weights)

    def solver_weights(self) -> ocp.Weights:
        return replace(self.weights, eps_safe=self.eps_safe + self.solver_margin)


@dataclass(frozen=True)
class BenchProblem:
    env: str
    scene_index: int
    index: int
    problem: S.Problem


@dataclass
class MetricsRow:
    method: str
    n: int
    success_rate: float
    avg_cost: float
    mean_time: float
    mean_penetration: float
    mean_encode: float = 0.0
    mean_sample: float = 0.0
    mean_refine: float = 0.0
    steps: int | None = None
    ocp_iters: int | None = None


ROW_FIELDS = ("env", "scene", "problem", "method", "success", "feasible", "cost", "penetration", "ee_error",
              "min_clearance", "t_encode", "t_sample", "t_refine", "t_total")


# ---------------------------------------------------------------------------
# problem sets and models
# ---------------------------------------------------------------------------
def problem_suite(envs=("table", "shelf", "drawer"), scenes_per_env: int = 5, problems_per_scene: int = 30,
                  seed: int = 1000, spec: ArmSpec = ArmSpec()) -> list[BenchProblem]:
    """Seeded scenes per environment with several start/goal problems each."""
    out = []
    for e, name in enumerate(envs):
        env = S.environment(name)
        for s in range(scenes_per_env):
            scene = S.sample_scene(env, derive_seed(seed, e, s))
            k = attempt = 0
            while k < problems_per_scene:
                try:
                    p = S.sample_env_problem(env, spec, scene, derive_seed(seed, e, s, attempt))
                except S.SamplingError:
                    p = None
                attempt += 1
                if p is not None:
                    out.append(BenchProblem(name, s, k, p))
                    k += 1
                if attempt > 20 * problems_per_scene:
                    raise S.SamplingError(f"{name} scene {s}: too few feasible problems")
    return out


@dataclass
class ModelBank:
    """Trained denoisers per (environment, variant) plus the scene encoders."""

    encoders: D.Encoders
    models: dict = field(default_factory=dict)

    def get(self, env: str, variant: str) -> D.TrainedModel:
        try:
            return self.models[(env, variant)]
        except KeyError:
            raise MissingWeightsError(f"no denoiser weights for env={env!r}, variant={variant!r}") from None


def model_path(model_dir, env: str, variant: str) -> Path:
    return Path(model_dir) / f"{env}_{variant}.dwsw"


def load_models(model_dir, envs, variants, spec: ArmSpec = ArmSpec(), slot_path=None) -> ModelBank:
    """Load whatever denoisers exist; missing ones surface in :func:`check_models`."""
    slot_model = None
    if slot_path is not None and Path(slot_path).exists():
        slot_model = slot_encoder.load(slot_path)
    bank = ModelBank(D.Encoders(spec, slot_model))
    for env in envs:
        for v in variants:
            p = model_path(model_dir, env, v)
            if p.exists():
                bank.models[(env, v)] = D.load(p, spec)
    return bank


def check_models(method: MethodSpec, problems, bank: ModelBank | None) -> None:
    """Reject a learned method before any evaluation when a needed denoiser or encoder is missing."""
    if not method.learned:
        return
    if bank is None:
        raise MissingWeightsError(f"{method.name} needs trained denoiser weights")
    for env in sorted({bp.env for bp in problems}):
        bank.get(env, method.variant)
    if method.variant == "slots" and bank.encoders.slot_model is None:
        raise MissingWeightsError("slots conditioning needs trained slot-encoder weights")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------
def recheck(spec: ArmSpec, problem: S.Problem, q_traj, cfg: BenchConfig) -> dict:
    """Independent success check of a configuration trajectory (T+1, n)."""
    q_traj = np.asarray(q_traj, float)
    dense_ok = rrt.path_valid(spec, problem.scene, q_traj, cfg.check_resolution, eps=0.0)
    ee_error = float(np.linalg.norm(arm_mod.end_effector(spec, q_traj[-1]) - problem.goal))
    return {
        "success": bool(dense_ok and ee_error <= cfg.goal_tol),
        "penetration": col.penetration_depth(q_traj, spec, problem.scene),
        "ee_error": ee_error,
        "min_clearance": float(col.clearance(spec, q_traj, problem.scene).min()),
    }


def _trajectory_scores(spec: ArmSpec, problem: S.Problem, q_batch, cfg: BenchConfig):
    """(feasible, cost, penetration) of raw configuration trajectories, as the OCP would score them."""
    X = ocp.build_reference(q_batch, cfg.dt)
    prob = ocp.OCPProblem(spec, problem.scene, X[0, 0], problem.goal, X, cfg.dt, cfg.solver_weights())
    model = ocp.ArmOCP(prob)
    U = model.initial_controls(X)
    cost = model.cost(X, U)
    d = col.pair_distances(spec, q_batch, problem.scene)
    feasible = d.min(axis=(-1, -2)) >= cfg.eps_safe if d.shape[-1] else np.ones(len(q_batch), bool)
    pen = np.maximum(0.0, -d).sum(axis=(-1, -2))
    return feasible, cost, pen


def _best_index(feasible, cost, penetration) -> int:
    keys = [(not f, c, p) for f, c, p in zip(feasible, cost, penetration)]
    return min(range(len(keys)), key=keys.__getitem__)


def _refine(spec, problem, q_batch, iters, cfg: BenchConfig):
    x0 = np.concatenate([problem.q_start, np.zeros(spec.n)])
    X = ocp.build_reference(q_batch, cfg.dt)
    X[:, 0] = x0
    prob = ocp.OCPProblem(spec, problem.scene, x0, problem.goal, X, cfg.dt, cfg.solver_weights())
    sols = ocp.solve(ocp.ArmOCP(prob), (X, None), max_iters=iters, batched=True)
    states = np.stack([s.states for s in sols])
    return states[..., : spec.n], np.array([s.feasible for s in sols]), np.array([s.cost for s in sols])


def run_problem(method: MethodSpec, bp: BenchProblem, bank: ModelBank | None, seed: int,
                spec: ArmSpec = ArmSpec(), cfg: BenchConfig = BenchConfig()) -> dict:
    """Generate (and refine) a trajectory for one problem and score it."""
    p = bp.problem
    t_enc = t_smp = t_ref = 0.0
    t0 = time.perf_counter()
    if method.tag == "ocp_cold":
        hold = np.repeat(p.q_start[None, None], cfg.T + 1, axis=1)
        q, feas, cost = _refine(spec, p, hold, method.ocp_iters, cfg)
        t_ref = time.perf_counter() - t0
        q, feas, cost = q[0], bool(feas[0]), float(cost[0])
    elif method.tag == "rrt_connect":
        path = rrt.plan(spec, p, rrt.RRTParams(max_iters=method.rrt_iters), seed)
        traj = np.repeat(p.q_start[None], cfg.T + 1, axis=0) if path is None else rrt.resample(path, cfg.T)
        t_smp = time.perf_counter() - t0
        f, c, _ = _trajectory_scores(spec, p, traj[None], cfg)
        q, feas, cost = traj, bool(f[0]), float(c[0])
    else:
        trained = bank.get(bp.env, method.variant)
        cond = D.encode_condition(p, method.variant, bank.encoders)
        t1 = time.perf_counter()
        t_enc = t1 - t0
        guided = method.tag == "diffusion_guided_only"
        samples = D.sample(cond, trained, method.steps, seed, method.batch,
                           method.guidance if guided else None, p.scene if guided else None)
        t2 = time.perf_counter()
        t_smp = t2 - t1
        if method.tag == "diffusion+ocp":
            qs, fs, cs = _refine(spec, p, samples, method.ocp_iters, cfg)
            ps = np.array([col.penetration_depth(x, spec, p.scene) for x in qs])
            t_ref = time.perf_counter() - t2
        else:
            qs = samples
            fs, cs, ps = _trajectory_scores(spec, p, samples, cfg)
        b = _best_index(fs, cs, ps)
        q, feas, cost = qs[b], bool(fs[b]), float(cs[b])
    t_total = time.perf_counter() - t0
    chk = recheck(spec, p, q, cfg)
    return {
        "env": bp.env, "scene": bp.scene_index, "problem": bp.index, "method": method.name,
        "success": chk["success"], "feasible": feas, "cost": cost, "penetration": chk["penetration"],
        "ee_error": chk["ee_error"], "min_clearance": chk["min_clearance"],
        "t_encode": t_enc, "t_sample": t_smp, "t_refine": t_ref, "t_total": t_total,
    }


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
def aggregate(rows, method: str | None = None) -> MetricsRow:
    """Pure aggregation of per-problem rows."""
    if not rows:
        raise ValueError("no rows to aggregate")

    def mean(k):
        return float(np.mean([float(r[k]) for r in rows]))

    return MetricsRow(
        method=method or rows[0]["method"],
        n=len(rows),
        success_rate=float(np.mean([_as_bool(r["success"]) for r in rows])),
        avg_cost=mean("cost"),
        mean_time=mean("t_total"),
        mean_penetration=mean("penetration"),
        mean_encode=mean("t_encode"),
        mean_sample=mean("t_sample"),
        mean_refine=mean("t_refine"),
    )


def _as_bool(v) -> bool:
    return v if isinstance(v, bool) else str(v) == "True"


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ROW_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _job(args):
    method, bp, bank, seed, spec, cfg = args
    return run_problem(method, bp, bank, seed, spec, cfg)


def evaluate(method: MethodSpec, problems, bank: ModelBank | None = None, seed: int = 0, spec: ArmSpec = ArmSpec(),
             cfg: BenchConfig = BenchConfig(), workers: int = 1, csv_path=None, log=None):
    """(MetricsRow, per-problem rows); problem k uses seed derive_seed(seed, k)."""
    check_models(method, problems, bank)
    jobs = [(method, bp, bank, derive_seed(seed, k), spec, cfg) for k, bp in enumerate(problems)]
    rows = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_job, jobs, chunksize=4))
    else:
        for k, job in enumerate(jobs):
            rows.append(_job(job))
            if log and (k + 1) % 25 == 0:
                log(f"{method.name}: {k + 1}/{len(jobs)} success {np.mean([r['success'] for r in rows]):.2f}")
    if csv_path is not None:
        write_rows(csv_path, rows)
    return aggregate(rows, method.name), rows


def sweep_heatmap(problems, bank: ModelBank, steps=(3, 5, 8, 10, 15, 20), iters=(1, 5, 10, 15, 20),
                  variant: str = "slots", seed: int = 0, batch: int = 10, spec: ArmSpec = ArmSpec(),
                  cfg: BenchConfig = BenchConfig(), workers: int = 1, log=None) -> list[MetricsRow]:
    """diffusion+ocp over the grid of diffusion steps × OCP iterations; one MetricsRow per cell."""
    grid = []
    for s in steps:
        for it in iters:
            m = MethodSpec("diffusion+ocp", variant, steps=s, ocp_iters=it, batch=batch)
            row, _ = evaluate(m, problems, bank, seed, spec, cfg, workers)
            row.steps, row.ocp_iters = s, it
            grid.append(row)
            if log:
                log(f"S={s} iters={it}: success {row.success_rate:.3f} time {row.mean_time:.2f} s")
    return grid


def write_metrics(path, rows: list[MetricsRow]) -> None:
    """Gnuplot-friendly CSV: one line per MetricsRow."""
    names = [f.name for f in fields(MetricsRow)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for r in rows:
            w.writerow([getattr(r, k) for k in names])

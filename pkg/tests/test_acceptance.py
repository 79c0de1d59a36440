"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 1-5 run live.  The trained-pipeline criteria (6, 7, and the noisy part
of 8) read the artifacts written by the scripts in ``scripts/`` and recompute
their statistics from the per-problem / per-episode records; criterion 9
re-validates the stored datasets.
"""
import csv
import json
import subprocess
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, central_diff, rel_err
from dwsmpc import arm, bench, collision as col, datagen, diffusion as D, mpc, ocp
from dwsmpc import autodiff as A
from dwsmpc import scene as S
from dwsmpc import slot_encoder as SE
from dwsmpc.rng import derive_seed

ROOT = Path(__file__).resolve().parents[1]
ART = ROOT / "artifacts"
SPEC = arm.ArmSpec()
EPS = 0.01


def report(k: int, ok: bool, detail: str):
    ACCEPTANCE[k] = f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}"
    assert ok, ACCEPTANCE[k]


def need(path: Path) -> Path:
    assert path.exists(), f"missing artifact {path.relative_to(ROOT)}; run the scripts listed in the README"
    return path


# ---------------------------------------------------------------------------
# 1. numerical core
# ---------------------------------------------------------------------------
def test_criterion_1_numerical_core():
    rng = np.random.default_rng(0)
    # autodiff, f32 forward against an f64 finite-difference oracle
    net = A.nn.MLP([4, 16, 16, 2], rng, activation="gelu")
    x, y = rng.normal(size=(6, 4)).astype(np.float32), rng.normal(size=(6, 2)).astype(np.float32)
    A.mse_loss(net(A.Tensor(x)), y).backward()
    ad_err = 0.0
    for p in net.named_parameters().values():
        orig = p.data.copy()

        def f(val, p=p):
            p.data = val
            with A.no_grad():
                return A.mse_loss(net(A.Tensor(x.astype(np.float64))), y.astype(np.float64)).data

        fd = central_diff(f, orig.astype(np.float64), 1e-3)
        p.data = orig
        ad_err = max(ad_err, rel_err(p.grad, fd))
    # FK Jacobian and dynamics against f64 finite differences
    fk_err = dyn_err = rt_err = 0.0
    for _ in range(5):
        q, v, a = rng.uniform(-2, 2, 3), rng.normal(size=3), rng.normal(size=3)
        J = arm.jacobian(SPEC, q)
        fd = np.stack([(arm.end_effector(SPEC, q + h) - arm.end_effector(SPEC, q - h)) / 2e-6
                       for h in 1e-6 * np.eye(3)], axis=1)
        fk_err = max(fk_err, rel_err(J, fd))
        G = arm.gravity_jacobian(SPEC, q)
        fd = np.stack([(arm.gravity_compensation(SPEC, q + h) - arm.gravity_compensation(SPEC, q - h)) / 2e-6
                       for h in 1e-6 * np.eye(3)], axis=1)
        dyn_err = max(dyn_err, rel_err(G, fd))
        tau = arm.rnea(SPEC, q, v, a)
        rt_err = max(rt_err, float(np.abs(arm.forward_dynamics(SPEC, q, v, tau) - a).max()))
        M = arm.mass_matrix(SPEC, q)
        assert np.array_equal(M, M.T) or np.abs(M - M.T).max() < 1e-12
        assert np.linalg.eigvalsh(M).min() > 0
    # the numerical-core test modules as a timed suite
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           "tests/test_autodiff.py", "tests/test_arm.py"], cwd=ROOT, capture_output=True, text=True)
    suite = time.perf_counter() - t0
    ok = ad_err < 1e-3 and fk_err < 1e-5 and dyn_err < 1e-5 and rt_err < 1e-8 and proc.returncode == 0 and suite < 60
    report(1, ok, f"autodiff rel err {ad_err:.1e}, FK {fk_err:.1e}, gravity Jacobian {dyn_err:.1e}, "
                  f"RNEA round trip {rt_err:.1e}, core suite {'green' if proc.returncode == 0 else 'RED'} in {suite:.0f} s")


# ---------------------------------------------------------------------------
# 2. solver oracle
# ---------------------------------------------------------------------------
def test_criterion_2_lqr_oracle():
    T, dt = 20, 0.1
    Am = np.array([[1.0, dt], [0.0, 1.0]])
    Bm = np.array([[0.5 * dt**2], [dt]])
    Q, R, QT = np.diag([1.0, 0.1]), np.array([[0.01]]), 10.0 * np.eye(2)
    model = ocp.LQModel(Am, Bm, Q, R, QT, np.array([1.0, -0.5]), T)
    # discrete Riccati recursion written out here
    P, gains = QT, []
    for _ in range(T):
        K = -np.linalg.solve(R + Bm.T @ P @ Bm, Bm.T @ P @ Am)
        P = Q + Am.T @ P @ (Am + Bm @ K)
        gains.append(K)
    gains = gains[::-1]
    xs, us = [model.x0], []
    for K in gains:
        us.append(K @ xs[-1])
        xs.append(Am @ xs[-1] + Bm @ us[-1])
    xs, us, gains = np.array(xs), np.array(us), np.array(gains)
    sol = ocp.solve(model)
    err = max(np.abs(sol.states - xs).max(), np.abs(sol.controls - us).max(), np.abs(sol.gains - gains).max())
    warm = ocp.solve(model, (xs, us))
    ok = err <= 1e-6 and warm.converged and warm.iterations <= 2
    report(2, ok, f"max deviation from Riccati {err:.1e}; warm start with the optimum: {warm.iterations} iterations")


# ---------------------------------------------------------------------------
# 3. constraint enforcement
# ---------------------------------------------------------------------------
def test_criterion_3_feasible_solutions_recheck():
    env = S.environment("shelf")
    T, dt = 20, 0.1
    problems, k = [], 0
    while len(problems) < 200:
        k += 1
        try:
            scene = S.sample_scene(env, derive_seed(3, k))
            problems.append(S.sample_env_problem(env, SPEC, scene, derive_seed(3, k, 1)))
        except S.SamplingError:
            continue
    flagged = moved = 0
    worst = np.inf
    for p in problems:
        x0 = np.concatenate([p.q_start, np.zeros(3)])
        # a straight joint-space line (usually through obstacles) and a hold start (collision-free)
        for q_hat, iters in ((np.linspace(p.q_start, p.q_goal_hint, T + 1), 25), (np.repeat(p.q_start[None], T + 1, 0), 40)):
            ref = ocp.build_reference(q_hat, dt)
            prob = ocp.OCPProblem(SPEC, p.scene, x0, p.goal, ref, dt, ocp.Weights(eps_safe=EPS))
            sol = ocp.solve(ocp.ArmOCP(prob), max_iters=iters)
            if sol.feasible:
                flagged += 1
                moved += int(np.abs(sol.states[:, :3] - p.q_start).max() > 1e-3)
                worst = min(worst, float(col.clearance(SPEC, sol.states[:, :3], p.scene).min()))
    ok = flagged > 0 and worst >= EPS - 1e-4
    report(3, ok, f"{flagged}/400 solves on 200 shelf problems flagged feasible ({moved} moved off the start); "
                  f"worst re-checked clearance {worst:.5f} m (bound {EPS - 1e-4:.4f})")


# ---------------------------------------------------------------------------
# 4. diffusion correctness
# ---------------------------------------------------------------------------
def test_criterion_4_diffusion():
    sched = D.make_schedule()
    rng = np.random.default_rng(0)
    worst_z = 0.0
    for i in (1, 10, 50, 100):
        x0 = np.full((100_000, 1), 0.7)
        xi = D.q_sample(x0, i, rng.standard_normal(x0.shape), sched)
        ab = sched.alpha_bar[i]
        mean, var = np.sqrt(ab) * 0.7, 1 - ab
        se_mean = np.sqrt(var / len(xi))
        se_var = var * np.sqrt(2 / (len(xi) - 1))
        worst_z = max(worst_z, abs(xi.mean() - mean) / se_mean, abs(xi.var(ddof=1) - var) / se_var)
    cfg = D.DenoiserConfig(T=50, width=64, token_dim=D.Encoders(SPEC).token_dim("cspace"), variant="cspace")
    trained = D.TrainedModel(D.Denoiser(cfg, 3), sched, SPEC)
    scene = S.sample_scene(S.environment("table"), 4)
    p = S.sample_env_problem(S.environment("table"), SPEC, scene, 4)
    cond = D.encode_condition(p, "cspace", D.Encoders(SPEC))
    a = D.sample(cond, trained, 10, seed=5, batch=4)
    b = D.sample(cond, trained, 10, seed=5, batch=4)
    g0 = D.sample(cond, trained, 10, seed=5, batch=4, guidance=D.Guidance(scale=0.0), scene=scene)
    deterministic = a.tobytes() == b.tobytes()
    identity = g0.tobytes() == a.tobytes()
    inpaint = all(np.array_equal(D.sample(cond, trained, s, seed=1, batch=3)[:, 0], np.repeat(p.q_start[None], 3, 0))
                  for s in (1, 5, 100))
    ok = worst_z < 3 and deterministic and identity and inpaint
    report(4, ok, f"q_sample worst |z| {worst_z:.2f} over 1e5 draws; deterministic {deterministic}; "
                  f"guidance 0 bit-identical {identity}; node-0 inpainting exact {inpaint}")


# ---------------------------------------------------------------------------
# 5. slot properties
# ---------------------------------------------------------------------------
def test_criterion_5_slots():
    model = SE.SlotModel(SE.SlotConfig(), seed=2)
    envs = [S.environment(n) for n in ("table", "shelf", "drawer")]
    images = SE.as_float(SE.render_dataset(envs, 6, seed=9))
    noise = model.init_noise(3, len(images))
    with A.no_grad():
        slots, attn = model.encode_batch(images, noise)
        norm_dev = float(np.abs(attn.data.sum(axis=-1) - 1).max())
        equivariant = True
        for perm in ([1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]):
            s2, _ = model.encode_batch(images, noise[:, perm])
            equivariant &= np.array_equal(slots.data[:, perm], s2.data)
    enc = D.Encoders(SPEC, model)
    cfg = D.DenoiserConfig(T=50, width=64, token_dim=model.config.dim, variant="slots")
    trained = D.TrainedModel(D.Denoiser(cfg, 4), D.make_schedule(), SPEC)
    scene = S.sample_scene(envs[1], 6)
    p = S.sample_env_problem(envs[1], SPEC, scene, 6)
    cond = D.encode_condition(p, "slots", enc)
    ref = D.sample(cond, trained, 10, seed=2, batch=2)
    invariant = all(D.sample(cond.permuted(perm), trained, 10, seed=2, batch=2).tobytes() == ref.tobytes()
                    for perm in ([3, 1, 0, 2], [1, 2, 3, 0]))
    ok = norm_dev <= 1e-5 and equivariant and invariant
    report(5, ok, f"attention normalization deviation {norm_dev:.1e}; slot-init equivariance exact {equivariant}; "
                  f"token-permutation invariance of samples {invariant}")


# ---------------------------------------------------------------------------
# 6. pipeline trend
# ---------------------------------------------------------------------------
def test_criterion_6_pipeline_trend():
    out = ART / "bench"
    training = json.loads(need(ART / "models" / "training.json").read_text())
    rates = {}
    for tag in bench.TAGS:
        rows = bench.read_rows(need(out / f"rows_{tag}.csv"))
        assert len(rows) == 450, f"{tag}: expected the 15×30 suite, found {len(rows)} rows"
        rates[tag] = bench.aggregate(rows).success_rate
    variant = json.loads(need(out / "compare.json").read_text())["diffusion+ocp"]["method_spec"]["variant"]
    used = [training[f"{env}_{variant}"] for env in ("table", "shelf", "drawer")]
    max_records = max(v["records"] for v in used)
    cpu_hours = sum(v["cpu_seconds"] for v in used) / 3600
    gap = rates["diffusion+ocp"] - rates["ocp_cold"]
    cold_lowest = all(rates["ocp_cold"] <= r for t, r in rates.items() if t != "ocp_cold")
    ok = gap >= 0.20 and cold_lowest and max_records <= 2000 and cpu_hours <= 2.0
    report(6, ok, "success " + ", ".join(f"{t} {r:.3f}" for t, r in rates.items())
           + f"; gap {gap * 100:+.1f} points; cold lowest {cold_lowest}; "
             f"{variant} conditioning, ≤{max_records} records/env, {cpu_hours:.2f} CPU-h denoiser training")


# ---------------------------------------------------------------------------
# 7. heatmap trend
# ---------------------------------------------------------------------------
def test_criterion_7_heatmap():
    with open(need(ART / "bench" / "heatmap.csv"), newline="") as f:
        cells = {(int(r["steps"]), int(r["ocp_iters"])): r for r in csv.DictReader(f)}
    succ = lambda s, it: float(cells[(s, it)]["success_rate"])  # noqa: E731
    times = defaultdict(list)
    for (s, _), r in cells.items():
        times[s].append(float(r["mean_time"]))
    steps = sorted(times)
    mean_t = [float(np.mean(times[s])) for s in steps]
    monotone = all(b >= a for a, b in zip(mean_t, mean_t[1:]))
    ok = len(cells) == 30 and succ(10, 15) >= succ(3, 1) and monotone
    report(7, ok, f"success(S=10,it=15) {succ(10, 15):.3f} vs success(S=3,it=1) {succ(3, 1):.3f}; "
                  "mean time by S " + ", ".join(f"{s}:{t:.2f}s" for s, t in zip(steps, mean_t)))


# ---------------------------------------------------------------------------
# 8. MPC episode
# ---------------------------------------------------------------------------
def test_criterion_8_mpc_removal():
    spec, scene, x0, cfg, _ = mpc.removal_scenario()
    log = mpc.run_episode(spec, scene, x0, cfg, mpc.RRTWarmStart(spec), seed=0)
    plan = log.plan_records[-1]
    shorter = plan["old_remaining_length"] is not None and plan["new_length"] < plan["old_remaining_length"]
    runs = json.loads(need(ART / "mpc" / "summary.json").read_text())["episodes"]
    noisy = [r for r in runs if r["noise_sigma"] > 0]
    collisions = sum(r["hard_collision_ticks"] for r in noisy)
    ok = shorter and log.hard_collisions == 0 and len(noisy) == 20 and collisions == 0
    report(8, ok, f"replanned length {plan['new_length']:.3f} m vs remaining {plan['old_remaining_length']:.3f} m; "
                  f"hard collisions over {len(noisy)} noisy episodes: {collisions}")


# ---------------------------------------------------------------------------
# 9. dataset integrity
# ---------------------------------------------------------------------------
def test_criterion_9_dataset_integrity():
    total = bad = 0
    for env in ("table", "shelf", "drawer"):
        _, records = datagen.read_dataset(need(ART / "data" / f"{env}.jsonl"), SPEC)
        for r in records:
            clear = col.clearance(SPEC, r.trajectory, r.scene).min()
            ee = np.linalg.norm(arm.end_effector(SPEC, r.trajectory[-1]) - r.goal)
            total += 1
            bad += int(not (clear >= EPS and ee <= 0.01))
    ok = total > 0 and bad == 0
    report(9, ok, f"{total - bad}/{total} records re-validate (clearance ≥ {EPS} m, terminal ee error ≤ 0.01 m)")

import numpy as np
import pytest

from dwsmpc import arm, bench as B, diffusion as D
from dwsmpc import scene as S
from dwsmpc.collision import Disc, Pose2

SPEC = arm.ArmSpec()
CFG = B.BenchConfig(T=10)
EMPTY = S.EnvironmentSpec("empty", walls=(), count_range=(0, 0))


def trivial_set(count=5, seed=0):
    """Obstacle-free problems whose goal lies a small joint displacement away."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        q0 = rng.uniform(-0.8, 0.8, 3)
        qg = q0 + rng.uniform(-0.3, 0.3, 3)
        out.append(B.BenchProblem("empty", 0, k, S.Problem(S.Scene(), q0, arm.end_effector(SPEC, qg), qg)))
    return out


@pytest.fixture(scope="module")
def bank():
    enc = D.Encoders(SPEC, probes=D.ConfigurationProbes(SPEC, count=8))
    cfg = D.DenoiserConfig(T=CFG.T, width=16, heads=2, blocks=1, token_dim=8, variant="cspace")
    trained = D.TrainedModel(D.Denoiser(cfg, 0), D.make_schedule(), SPEC)
    return B.ModelBank(enc, {("table", "cspace"): trained, ("empty", "cspace"): trained})


@pytest.fixture(scope="module")
def table_set():
    return B.problem_suite(("table",), scenes_per_env=1, problems_per_scene=3, seed=5)


def test_method_spec_validation_and_roundtrip():
    with pytest.raises(ValueError):
        B.MethodSpec("magic")
    with pytest.raises(ValueError):
        B.MethodSpec("diffusion+ocp", variant="pixels")
    with pytest.raises(ValueError):
        B.MethodSpec("ocp_cold", ocp_iters=0)
    m = B.MethodSpec("diffusion_guided_only", variant="cspace", steps=5, guidance=D.Guidance(scale=2.0))
    assert B.MethodSpec.from_dict(m.to_dict()) == m
    assert m.learned and not B.MethodSpec("rrt_connect").learned
    assert B.MethodSpec("diffusion+ocp", steps=8, ocp_iters=15).name == "diffusion+ocp[slots,S=8,it=15]"


def test_problem_suite_is_seeded_and_sized(table_set):
    again = B.problem_suite(("table",), scenes_per_env=1, problems_per_scene=3, seed=5)
    assert len(table_set) == 3 and [bp.index for bp in table_set] == [0, 1, 2]
    for a, b in zip(table_set, again):
        assert a.problem.scene == b.problem.scene
        np.testing.assert_array_equal(a.problem.q_start, b.problem.q_start)


def test_recheck_accepts_straight_line_and_rejects_penetration_and_misses():
    bp = trivial_set(1)[0]
    p = bp.problem
    line = np.linspace(p.q_start, p.q_goal_hint, CFG.T + 1)
    assert B.recheck(SPEC, p, line, CFG)["success"]
    assert not B.recheck(SPEC, p, line[:-1], CFG)["success"]  # stops short of the goal
    mid = arm.joint_positions(SPEC, line[5])[2]
    blocked = S.Problem(S.Scene(obstacles=(S.Obstacle(Disc(0.03), Pose2(*mid), 0),)), p.q_start, p.goal)
    r = B.recheck(SPEC, blocked, line, CFG)
    assert not r["success"] and r["penetration"] > 0 and r["min_clearance"] < 0


def test_recheck_uses_dense_interpolation():
    # two nodes on either side of a thin wall: nodes are clear, the swept segment is not
    q_a, q_b = np.array([0.6, 0.0, 0.0]), np.array([-0.6, 0.0, 0.0])
    wall = S.Obstacle(Disc(0.02), Pose2(0.85, 0.0), 0)
    p = S.Problem(S.Scene(obstacles=(wall,)), q_a, arm.end_effector(SPEC, q_b))
    r = B.recheck(SPEC, p, np.stack([q_a, q_b]), CFG)
    assert r["min_clearance"] > 0 and r["ee_error"] < 1e-12 and not r["success"]


def test_cold_ocp_solves_trivial_set():
    m, rows = B.evaluate(B.MethodSpec("ocp_cold", ocp_iters=40), trivial_set(), cfg=CFG)
    assert m.success_rate == 1.0 and m.n == 5
    assert all(r["feasible"] for r in rows)


def test_rrt_baseline_succeeds_on_trivial_set():
    m, _ = B.evaluate(B.MethodSpec("rrt_connect"), trivial_set(3), cfg=CFG)
    assert m.success_rate == 1.0 and m.mean_refine == 0.0


def test_missing_weights_rejected_before_evaluation(table_set, bank):
    calls = []
    with pytest.raises(B.MissingWeightsError):
        B.evaluate(B.MethodSpec("diffusion+ocp"), table_set, None, cfg=CFG, log=calls.append)
    with pytest.raises(B.MissingWeightsError):
        B.evaluate(B.MethodSpec("diffusion_only", variant="occupancy"), table_set, bank, cfg=CFG)
    with pytest.raises(B.MissingWeightsError):
        B.check_models(B.MethodSpec("diffusion_only", variant="slots"), table_set,
                       B.ModelBank(bank.encoders, {("table", "slots"): None}))
    B.check_models(B.MethodSpec("ocp_cold"), table_set, None)
    assert calls == []


def test_load_models_reports_absent_files(tmp_path, bank):
    D.save(bank.models[("table", "cspace")], B.model_path(tmp_path, "table", "cspace"))
    loaded = B.load_models(tmp_path, ["table", "shelf"], ["cspace"], SPEC)
    assert ("table", "cspace") in loaded.models and ("shelf", "cspace") not in loaded.models
    with pytest.raises(B.MissingWeightsError):
        loaded.get("shelf", "cspace")


@pytest.mark.parametrize("tag", ["diffusion+ocp", "diffusion_only", "diffusion_guided_only"])
def test_learned_methods_are_deterministic(table_set, bank, tag):
    m = B.MethodSpec(tag, variant="cspace", steps=3, ocp_iters=2, batch=3)
    _, a = B.evaluate(m, table_set[:2], bank, seed=4, cfg=CFG)
    _, b = B.evaluate(m, table_set[:2], bank, seed=4, cfg=CFG)
    cols = ("success", "feasible", "cost", "penetration", "ee_error", "min_clearance")
    assert [[r[k] for k in cols] for r in a] == [[r[k] for k in cols] for r in b]
    assert all(r["t_encode"] > 0 and r["t_sample"] > 0 for r in a)
    assert all((r["t_refine"] > 0) == (tag == "diffusion+ocp") for r in a)


def test_best_of_batch_order():
    feasible = np.array([False, True, True, True])
    cost = np.array([0.1, 5.0, 3.0, 3.0])
    pen = np.array([0.0, 0.0, 0.2, 0.1])
    assert B._best_index(feasible, cost, pen) == 3
    assert B._best_index(~feasible, cost, pen) == 0


def test_aggregation_is_recomputable_from_csv(tmp_path, table_set):
    path = tmp_path / "rows.csv"
    m, rows = B.evaluate(B.MethodSpec("ocp_cold", ocp_iters=3), table_set, cfg=CFG, csv_path=path)
    back = B.aggregate(B.read_rows(path))
    assert back.n == m.n and back.success_rate == m.success_rate
    for k in ("avg_cost", "mean_time", "mean_penetration", "mean_refine"):
        assert getattr(back, k) == pytest.approx(getattr(m, k), rel=1e-8)
    with pytest.raises(ValueError):
        B.aggregate([])


def test_parallel_workers_match_serial(table_set):
    m = B.MethodSpec("ocp_cold", ocp_iters=3)
    _, serial = B.evaluate(m, table_set, cfg=CFG)
    _, par = B.evaluate(m, table_set, cfg=CFG, workers=2)
    assert [r["cost"] for r in serial] == [r["cost"] for r in par]


def test_sweep_grid_dimensions(tmp_path, table_set, bank):
    grid = B.sweep_heatmap(table_set[:1], bank, steps=(1, 3), iters=(1, 2), variant="cspace", batch=2, cfg=CFG)
    assert [(r.steps, r.ocp_iters) for r in grid] == [(1, 1), (1, 2), (3, 1), (3, 2)]
    B.write_metrics(tmp_path / "grid.csv", grid)
    lines = (tmp_path / "grid.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("method,n,success_rate")

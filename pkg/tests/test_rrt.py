import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwsmpc import collision as col, rrt, scene as S
from dwsmpc.arm import ArmSpec
from dwsmpc.collision import Disc, Pose2

SPEC = ArmSpec()
PARAMS = rrt.RRTParams()


def recheck(path, scene, resolution=PARAMS.resolution):
    """Independent dense re-check: per-segment linear interpolation at the given resolution."""
    for a, b in zip(path[:-1], path[1:]):
        n = int(np.ceil(np.linalg.norm(b - a) / resolution)) + 1
        pts = np.linspace(a, b, n + 1)
        for q in pts:
            if col.min_clearance(SPEC, q, scene)[0] < 0:
                return False
    return True


def blocked_scene():
    return S.Scene(obstacles=(S.Obstacle(Disc(0.12), Pose2(0.55, 0.35), 0), S.Obstacle(Disc(0.1), Pose2(0.6, -0.3), 1)))


def test_start_equals_goal_single_node():
    q = np.array([0.2, 0.3, -0.1])
    res = rrt.rrt_connect(SPEC, S.Scene(), q, q)
    assert res.success and res.path.shape == (1, 3)


def test_empty_scene_connects_on_first_iteration():
    rng = np.random.default_rng(0)
    for seed in range(5):
        a, b = rng.uniform(SPEC.q_lower, SPEC.q_upper, (2, 3)) * 0.3
        res = rrt.rrt_connect(SPEC, S.Scene(), a, b, seed=seed)
        assert res.success and res.iterations == 1
        np.testing.assert_array_equal(res.path[0], a)
        np.testing.assert_array_equal(res.path[-1], b)


def test_colliding_start_rejected():
    sc = S.Scene(obstacles=(S.Obstacle(Disc(0.1), Pose2(0.3, 0.0), 0),))
    with pytest.raises(ValueError, match="start"):
        rrt.rrt_connect(SPEC, sc, np.zeros(3), np.array([1.5, 0.0, 0.0]))


def test_paths_valid_and_steps_bounded():
    sc = blocked_scene()
    a, b = np.array([1.2, 0.2, 0.1]), np.array([-1.0, 0.3, 0.2])
    res = rrt.rrt_connect(SPEC, sc, a, b, seed=3)
    assert res.success
    steps = np.linalg.norm(np.diff(res.path, axis=0), axis=1)
    assert steps.max() <= PARAMS.step + 1e-12
    assert recheck(res.path, sc)


def test_failure_is_a_result_not_an_error():
    sc = S.Scene(S.shelf_env().walls)
    p = S.sample_env_problem(S.shelf_env(), SPEC, sc, 0)
    res = rrt.rrt_connect(SPEC, sc, p.q_start, p.q_goal_hint, rrt.RRTParams(max_iters=2), seed=0)
    if not res.success:
        assert res.path is None and res.iterations == 2


def test_deterministic_per_seed():
    sc = blocked_scene()
    a, b = np.array([1.2, 0.2, 0.1]), np.array([-1.0, 0.3, 0.2])
    r1 = rrt.rrt_connect(SPEC, sc, a, b, seed=5)
    r2 = rrt.rrt_connect(SPEC, sc, a, b, seed=5)
    np.testing.assert_array_equal(r1.path, r2.path)


@pytest.mark.slow
def test_slot_problem_set_paths_recheck():
    env = S.shelf_env()
    successes = 0
    for seed in range(100):
        sc = S.sample_scene(env, seed)
        p = S.sample_env_problem(env, SPEC, sc, seed)
        res = rrt.rrt_connect(SPEC, sc, p.q_start, p.q_goal_hint, seed=seed)
        if res.success:
            successes += 1
            assert rrt.path_valid(SPEC, sc, res.path, PARAMS.resolution)
    print(f"slot-scene RRT success rate: {successes / 100:.2f}")
    assert successes > 0


def test_shortcut_keeps_straight_path():
    path = rrt.densify(np.zeros(3), np.array([0.6, -0.3, 0.3]), 0.15)
    out = rrt.shortcut(SPEC, S.Scene(), path, iters=50, seed=0)
    assert rrt.path_length(out) == pytest.approx(rrt.path_length(path), abs=1e-12)


def test_shortcut_zigzag_near_direct():
    rng = np.random.default_rng(1)
    a, b = np.zeros(3), np.array([1.0, -0.5, 0.4])
    mids = np.linspace(a, b, 8)[1:-1] + rng.normal(0, 0.3, (6, 3))
    path = np.vstack([a, mids, b])
    out = rrt.shortcut(SPEC, S.Scene(), path, iters=200, seed=0)
    assert rrt.path_length(out) <= 1.1 * np.linalg.norm(b - a)


def test_shortcut_monotone_and_valid():
    sc = blocked_scene()
    a, b = np.array([1.2, 0.2, 0.1]), np.array([-1.0, 0.3, 0.2])
    path = rrt.rrt_connect(SPEC, sc, a, b, seed=3).path
    out = rrt.shortcut(SPEC, sc, path, iters=100, seed=1)
    assert rrt.path_length(out) <= rrt.path_length(path) + 1e-12
    assert recheck(out, sc)
    np.testing.assert_array_equal(out[0], a)
    np.testing.assert_array_equal(out[-1], b)


def test_resample_two_points_midpoint():
    out = rrt.resample(np.array([[0.0, 0.0], [1.0, 2.0]]), 2)
    np.testing.assert_allclose(out, [[0, 0], [0.5, 1.0], [1, 2]])


def test_resample_node_count_and_rejects_zero():
    out = rrt.resample(np.random.default_rng(0).normal(size=(7, 3)), 50)
    assert out.shape == (51, 3)
    with pytest.raises(ValueError):
        rrt.resample(np.zeros((2, 3)), 0)


def arc_position(path, point):
    """Arc-length coordinate of a point known to lie on the polyline."""
    seg = np.diff(path, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    best, pos = np.inf, 0.0
    for k in range(len(seg)):
        s = np.clip((point - path[k]) @ seg[k] / (lens[k] ** 2), 0, 1)
        d = np.linalg.norm(path[k] + s * seg[k] - point)
        if d < best - 1e-12:
            best, pos = d, cum[k] + s * lens[k]
    return pos


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 60))
def test_resample_arc_length_uniform(seed, m, T):
    path = np.cumsum(np.random.default_rng(seed).uniform(0.1, 1.0, (m, 3)), axis=0)  # monotone, no backtracking
    out = rrt.resample(path, T)
    np.testing.assert_array_equal(out[0], path[0])
    np.testing.assert_array_equal(out[-1], path[-1])
    total = rrt.path_length(path)
    pos = np.array([arc_position(path, p) for p in out])
    assert np.max(np.abs(np.diff(pos) - total / T)) < 1e-9

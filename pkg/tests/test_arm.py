import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwsmpc import arm
from dwsmpc.arm import ArmSpec
from conftest import jacobian_fd, rel_err

SPEC = ArmSpec()


# ---------------------------------------------------------------------------
# independent energy-based oracle (written without the module's dynamics)
# ---------------------------------------------------------------------------
def com_positions(spec, q):
    theta = np.cumsum(q)
    out, base = [], np.zeros(2)
    for i in range(spec.n):
        u = np.array([np.cos(theta[i]), np.sin(theta[i])])
        out.append(base + spec.com[i] * u)
        base = base + spec.lengths[i] * u
    return np.array(out)


def com_velocities(spec, q, v):
    theta, omega = np.cumsum(q), np.cumsum(v)
    out, base = [], np.zeros(2)
    for i in range(spec.n):
        du = omega[i] * np.array([-np.sin(theta[i]), np.cos(theta[i])])
        out.append(base + spec.com[i] * du)
        base = base + spec.lengths[i] * du
    return np.array(out)


def lagrangian(spec, q, v):
    cdot = com_velocities(spec, q, v)
    omega = np.cumsum(v)
    kinetic = 0.5 * sum(m * c @ c for m, c in zip(spec.masses, cdot)) + 0.5 * np.sum(np.array(spec.inertias) * omega**2)
    g = np.array(spec.gravity)
    potential = -sum(m * g @ c for m, c in zip(spec.masses, com_positions(spec, q)))
    return kinetic - potential


def potential_energy(spec, q):
    g = np.array(spec.gravity)
    return -sum(m * g @ c for m, c in zip(spec.masses, com_positions(spec, q)))


def euler_lagrange_torque(spec, q, v, a):
    n = spec.n

    def dl_dv(qq, vv):
        # L is quadratic in v, so a unit-step central difference is exact
        return np.array([(lagrangian(spec, qq, vv + e) - lagrangian(spec, qq, vv - e)) / 2 for e in np.eye(n)])

    dt = 1e-4
    p_plus = dl_dv(q + v * dt + 0.5 * a * dt**2, v + a * dt)
    p_minus = dl_dv(q - v * dt + 0.5 * a * dt**2, v - a * dt)
    dpdt = (p_plus - p_minus) / (2 * dt)
    hq = 1e-6
    dl_dq = np.array([(lagrangian(spec, q + hq * e, v) - lagrangian(spec, q - hq * e, v)) / (2 * hq) for e in np.eye(n)])
    return dpdt - dl_dq


# ---------------------------------------------------------------------------
def test_fk_stretched():
    np.testing.assert_allclose(arm.end_effector(SPEC, np.zeros(3)), [0.9, 0.0], atol=1e-12)


def test_fk_rotated():
    np.testing.assert_allclose(arm.end_effector(SPEC, [np.pi / 2, 0, 0]), [0.0, 0.9], atol=1e-12)


def test_fk_frames_shapes_and_wrong_length():
    frames, p = arm.forward_kinematics(SPEC, np.zeros(3))
    assert frames.shape == (3, 3) and p.shape == (2,)
    with pytest.raises(ValueError, match="expected 3"):
        arm.forward_kinematics(SPEC, np.zeros(2))


def test_jacobian_q_zero_first_column():
    J = arm.jacobian(SPEC, np.zeros(3))
    np.testing.assert_allclose(J[:, 0], [0.0, 0.9], atol=1e-12)


def test_jacobian_single_link():
    one = ArmSpec.rod_arm([0.5], [1.0])
    q = 0.7
    np.testing.assert_allclose(arm.jacobian(one, [q])[:, 0], [-0.5 * np.sin(q), 0.5 * np.cos(q)], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_finite_difference(seed):
    q = np.random.default_rng(seed).uniform(-2, 2, 3)
    fd = jacobian_fd(lambda z: arm.end_effector(SPEC, z), q, h=1e-6)
    np.testing.assert_allclose(arm.jacobian(SPEC, q), fd, atol=1e-6)


def test_rnea_single_link_statics():
    one = ArmSpec.rod_arm([0.5], [2.0], com=(0.3,))
    tau = arm.rnea(one, [0.0], [0.0], [0.0])
    assert tau[0] == pytest.approx(2.0 * 9.81 * 0.3)


def test_rnea_zero_gravity_static():
    q = np.random.default_rng(1).uniform(-2, 2, 3)
    tau = arm.rnea(SPEC, q, np.zeros(3), np.zeros(3), gravity=(0.0, 0.0))
    np.testing.assert_allclose(tau, 0.0, atol=1e-14)


@pytest.mark.parametrize("seed", range(6))
def test_rnea_matches_euler_lagrange(seed):
    rng = np.random.default_rng(seed)
    q, v, a = rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3), rng.uniform(-3, 3, 3)
    oracle = euler_lagrange_torque(SPEC, q, v, a)
    assert rel_err(arm.rnea(SPEC, q, v, a), oracle) < 1e-5


def test_mass_matrix_single_link():
    one = ArmSpec.rod_arm([0.5], [2.0], com=(0.3,), inertias=(0.07,))
    assert arm.mass_matrix(one, [0.4])[0, 0] == pytest.approx(0.07 + 2.0 * 0.3**2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_mass_matrix_symmetric_positive_definite(q):
    M = arm.mass_matrix(SPEC, np.array(q))
    assert np.max(np.abs(M - M.T)) < 1e-10
    assert np.min(np.linalg.eigvalsh(M)) > 0


@pytest.mark.parametrize("seed", range(4))
def test_mass_matrix_unit_acceleration_columns(seed):
    q = np.random.default_rng(seed).uniform(-2, 2, 3)
    zero = np.zeros(3)
    cols = [arm.rnea(SPEC, q, zero, e) - arm.rnea(SPEC, q, zero, zero) for e in np.eye(3)]
    np.testing.assert_allclose(arm.mass_matrix(SPEC, q), np.array(cols).T, atol=1e-12)


def test_forward_dynamics_zero_acc_cases():
    rng = np.random.default_rng(2)
    q, v = rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 3)
    np.testing.assert_allclose(arm.forward_dynamics(SPEC, q, v, arm.rnea(SPEC, q, v, np.zeros(3))), 0.0, atol=1e-10)
    np.testing.assert_allclose(arm.forward_dynamics(SPEC, q, np.zeros(3), arm.gravity_compensation(SPEC, q)), 0.0, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_forward_inverse_roundtrip(seed):
    rng = np.random.default_rng(seed)
    q, v, u = rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3), rng.uniform(-10, 10, 3)
    acc = arm.forward_dynamics(SPEC, q, v, u)
    np.testing.assert_allclose(arm.rnea(SPEC, q, v, acc), u, atol=1e-8)


def test_batched_dynamics_match_loop():
    rng = np.random.default_rng(4)
    q, v, a = rng.uniform(-2, 2, (5, 3)), rng.uniform(-2, 2, (5, 3)), rng.uniform(-2, 2, (5, 3))
    batch = arm.rnea(SPEC, q, v, a)
    for i in range(5):
        np.testing.assert_allclose(batch[i], arm.rnea(SPEC, q[i], v[i], a[i]), atol=1e-12)
    np.testing.assert_allclose(arm.mass_matrix(SPEC, q)[3], arm.mass_matrix(SPEC, q[3]), atol=1e-12)


def test_gravity_compensation_zero_gravity():
    nog = ArmSpec(gravity=(0.0, 0.0))
    np.testing.assert_allclose(arm.gravity_compensation(nog, np.array([0.3, -1.0, 2.0])), 0.0, atol=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_gravity_compensation_is_potential_gradient(seed):
    q = np.random.default_rng(seed).uniform(-2, 2, 3)
    fd = jacobian_fd(lambda z: potential_energy(SPEC, z), q, h=1e-6)
    assert rel_err(arm.gravity_compensation(SPEC, q), fd) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_gravity_jacobian_fd(seed):
    q = np.random.default_rng(seed).uniform(-2, 2, 3)
    fd = jacobian_fd(lambda z: arm.gravity_compensation(SPEC, z), q, h=1e-6)
    assert rel_err(arm.gravity_jacobian(SPEC, q), fd) < 1e-5


def test_step_gravity_comp_holds_state():
    q = np.array([0.4, -0.8, 1.1])
    x = np.concatenate([q, np.zeros(3)])
    np.testing.assert_allclose(arm.step(SPEC, x, arm.gravity_compensation(SPEC, q), 0.01), x, atol=1e-12)


def test_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        arm.step(SPEC, np.zeros(6), np.zeros(3), 0.0)


def test_single_link_free_fall_matches_fine_reference():
    one = ArmSpec.rod_arm([0.5], [1.0])
    ref = np.array([0.0, 0.0])
    # fine-step reference with a plain RK4 on the closed-form pendulum equation
    m, lc, inertia = 1.0, 0.25, 1.0 * 0.5**2 / 12
    J = inertia + m * lc**2

    def f(s):
        return np.array([s[1], -m * 9.81 * lc * np.cos(s[0]) / J])

    h = 1e-5
    for _ in range(50000):
        k1 = f(ref); k2 = f(ref + h / 2 * k1); k3 = f(ref + h / 2 * k2); k4 = f(ref + h * k3)
        ref = ref + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    x = np.array([0.0, 0.0])
    for _ in range(5000):
        x = arm.step(one, x, [0.0], 1e-4)
    assert abs(x[0] - ref[0]) < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_step_derivatives_fd(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(-2, 2, 3), rng.uniform(-1.5, 1.5, 3)])
    u = rng.uniform(-5, 5, 3)
    x_next, fx, fu = arm.step_derivatives(SPEC, x, u, 0.02)
    np.testing.assert_allclose(x_next, arm.step(SPEC, x, u, 0.02), atol=1e-12)
    fd_x = jacobian_fd(lambda z: arm.step(SPEC, z, u, 0.02), x, h=1e-6)
    fd_u = jacobian_fd(lambda z: arm.step(SPEC, x, z, 0.02), u, h=1e-6)
    assert rel_err(fx, fd_x) < 1e-5
    assert rel_err(fu, fd_u) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_kinetic_energy_drift_zero_gravity(seed):
    spec = ArmSpec(gravity=(0.0, 0.0))
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 3)])
    e0 = arm.kinetic_energy(spec, x[:3], x[3:])
    for _ in range(1000):
        x = arm.step(spec, x, np.zeros(3), 1e-3)
    e1 = arm.kinetic_energy(spec, x[:3], x[3:])
    assert abs(e1 - e0) / e0 < 0.01


def test_armspec_json_roundtrip_and_validation():
    assert ArmSpec.from_json(SPEC.to_json()) == SPEC
    with pytest.raises(ValueError, match="positive"):
        ArmSpec(masses=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError, match="lower < upper"):
        ArmSpec(q_lower=(1.0, -1.0, -1.0), q_upper=(0.5, 1.0, 1.0))

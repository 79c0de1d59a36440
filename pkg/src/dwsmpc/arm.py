"""Planar N-link revolute arm: kinematics, rigid-body dynamics, integrator.

All functions broadcast over leading batch axes: ``q`` may be ``(n,)`` or
``(..., n)``.  Dynamics routines are written so they also accept complex
input, which gives exact first derivatives by complex-step differentiation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

_CSTEP = 1e-30


@dataclass(frozen=True)
class ArmSpec:
    lengths: tuple[float, ...] = (0.4, 0.3, 0.2)
    masses: tuple[float, ...] = (2.0, 1.5, 1.0)
    com: tuple[float, ...] = (0.2, 0.15, 0.1)
    inertias: tuple[float, ...] = (2.0 * 0.4**2 / 12, 1.5 * 0.3**2 / 12, 1.0 * 0.2**2 / 12)
    q_lower: tuple[float, ...] = (-1.9, -2.4, -2.4)
    q_upper: tuple[float, ...] = (1.9, 2.4, 2.4)
    v_limit: tuple[float, ...] = (3.0, 3.0, 3.0)
    u_limit: tuple[float, ...] = (40.0, 20.0, 8.0)
    gravity: tuple[float, float] = (0.0, -9.81)
    link_radius: float = 0.04

    def __post_init__(self):
        n = len(self.lengths)
        for name in ("masses", "com", "inertias", "q_lower", "q_upper", "v_limit", "u_limit"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"ArmSpec.{name} has {len(getattr(self, name))} entries, expected {n}")
        for name in ("lengths", "masses", "inertias", "v_limit", "u_limit"):
            if min(getattr(self, name)) <= 0:
                raise ValueError(f"ArmSpec.{name} must be strictly positive")
        if any(lo >= hi for lo, hi in zip(self.q_lower, self.q_upper)):
            raise ValueError("ArmSpec joint limits need lower < upper")
        if self.link_radius <= 0:
            raise ValueError("link radius must be positive")

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.lengths))

    def arrays(self):
        return (np.asarray(self.lengths), np.asarray(self.masses), np.asarray(self.com),
                np.asarray(self.inertias))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArmSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArmSpec":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def rod_arm(cls, lengths, masses, **kw) -> "ArmSpec":
        """Uniform rods: centre of mass mid-link, inertia m l^2 / 12."""
        lengths = tuple(float(x) for x in lengths)
        masses = tuple(float(x) for x in masses)
        n = len(lengths)
        defaults = dict(
            com=tuple(l / 2 for l in lengths),
            inertias=tuple(m * l * l / 12 for m, l in zip(masses, lengths)),
            q_lower=(-np.pi,) * n, q_upper=(np.pi,) * n,
            v_limit=(10.0,) * n, u_limit=(100.0,) * n,
        )
        defaults.update(kw)
        return cls(lengths=lengths, masses=masses, **defaults)


@dataclass
class State:
    q: np.ndarray
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.zeros_like(self.q) if self.v is None else np.asarray(self.v, dtype=float)
        if self.q.shape != self.v.shape:
            raise ValueError(f"q {self.q.shape} and v {self.v.shape} differ")

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.v])

    @classmethod
    def from_x(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        n = x.shape[-1] // 2
        return cls(x[..., :n], x[..., n:])


def _check(spec: ArmSpec, q) -> np.ndarray:
    q = np.asarray(q)
    if q.shape[-1] != spec.n:
        raise ValueError(f"expected {spec.n} joint values, got shape {q.shape}")
    return q


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------
def joint_positions(spec: ArmSpec, q) -> np.ndarray:
    """Positions of every joint plus the end effector: shape (..., n+1, 2)."""
    q = _check(spec, q)
    theta = np.cumsum(q, axis=-1)
    lengths = np.asarray(spec.lengths)
    steps = np.stack([lengths * np.cos(theta), lengths * np.sin(theta)], axis=-1)
    zero = np.zeros(q.shape[:-1] + (1, 2), dtype=steps.dtype)
    return np.concatenate([zero, np.cumsum(steps, axis=-2)], axis=-2)


def forward_kinematics(spec: ArmSpec, q):
    """Per-link frames and the end-effector position.

    Returns:
        frames: (..., n, 3) rows of (x, y, absolute angle) of each link's
            proximal joint.
        p_ee: (..., 2) end-effector position in metres.
    """
    q = _check(spec, q)
    pts = joint_positions(spec, q)
    theta = np.cumsum(q, axis=-1)
    frames = np.concatenate([pts[..., :-1, :], theta[..., None]], axis=-1)
    return frames, pts[..., -1, :]


def end_effector(spec: ArmSpec, q) -> np.ndarray:
    return joint_positions(spec, q)[..., -1, :]


def point_jacobian(spec: ArmSpec, q, link: int | np.ndarray, point) -> np.ndarray:
    """Jacobian (..., 2, n) of a world point rigidly attached to ``link``.

    ``link`` and ``point`` broadcast against the batch dimensions of ``q``.
    """
    q = _check(spec, q)
    pts = joint_positions(spec, q)[..., :-1, :]  # proximal joint of each link
    point = np.asarray(point)
    rel = point[..., None, :] - pts  # (..., n, 2)
    cols = np.stack([-rel[..., 1], rel[..., 0]], axis=-2)  # (..., 2, n)
    mask = np.arange(spec.n) <= np.asarray(link)[..., None]
    return cols * mask[..., None, :]


def jacobian(spec: ArmSpec, q) -> np.ndarray:
    """End-effector Jacobian ∂p_ee/∂q, shape (..., 2, n)."""
    q = _check(spec, q)
    return point_jacobian(spec, q, spec.n - 1, end_effector(spec, q))


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------
def _excl_cumsum(x):
    return np.cumsum(x, axis=-1) - x


def _rev_cumsum(x):
    c = np.cumsum(x, axis=-1)
    return c[..., -1:] - c + x


class _Chain:
    """Link directions, joint origins and COM positions shared by the dynamics terms."""

    def __init__(self, spec: ArmSpec, q):
        self.spec = spec
        self.lengths, self.masses, self.com, self.inertias = spec.arrays()
        theta = np.cumsum(q, axis=-1)
        self.c, self.s = np.cos(theta), np.sin(theta)
        self.ox = _excl_cumsum(self.lengths * self.c)
        self.oy = _excl_cumsum(self.lengths * self.s)
        self.px = self.ox + self.com * self.c
        self.py = self.oy + self.com * self.s

    def rnea(self, v, a, gravity=None):
        gx, gy = self.spec.gravity if gravity is None else gravity
        c, s, lengths, com, masses = self.c, self.s, self.lengths, self.com, self.masses
        omega = np.cumsum(v, axis=-1)
        alpha = np.cumsum(a, axis=-1)
        w2 = omega * omega
        # α e⊥ − ω² e per link
        tx = -alpha * s - w2 * c
        ty = alpha * c - w2 * s
        # joint-origin accelerations; the base accelerates upward to emulate gravity
        oax = _excl_cumsum(lengths * tx) - gx
        oay = _excl_cumsum(lengths * ty) - gy
        Fx = masses * (oax + com * tx)
        Fy = masses * (oay + com * ty)
        moment = _rev_cumsum(self.inertias * alpha + self.px * Fy - self.py * Fx)
        return moment - (self.ox * _rev_cumsum(Fy) - self.oy * _rev_cumsum(Fx))

    def mass_matrix(self):
        px, py, masses = self.px, self.py, self.masses
        n = self.spec.n
        m_c = _rev_cumsum(np.broadcast_to(masses, px.shape))
        hx, hy = _rev_cumsum(masses * px), _rev_cumsum(masses * py)
        s_c = _rev_cumsum(self.inertias + masses * (px * px + py * py))
        k = np.maximum.outer(np.arange(n), np.arange(n))
        oxi, oyi = self.ox[..., :, None], self.oy[..., :, None]
        oxj, oyj = self.ox[..., None, :], self.oy[..., None, :]
        return (s_c[..., k] - hx[..., k] * (oxi + oxj) - hy[..., k] * (oyi + oyj)
                + m_c[..., k] * (oxi * oxj + oyi * oyj))


def rnea(spec: ArmSpec, q, v, a, gravity=None):
    """Inverse dynamics τ = M(q) a + C(q, v) v + g(q) by recursive Newton–Euler.

    The outward (accelerations) and inward (forces) recursions of a planar
    chain are prefix sums, so both run as cumulative sums over the link axis.
    Complex inputs are supported for complex-step differentiation.
    """
    q = _check(spec, q)
    v = np.asarray(v)
    a = np.asarray(a)
    if not (q.shape == v.shape == a.shape):
        raise ValueError(f"rnea: shapes q{q.shape} v{v.shape} a{a.shape} differ")
    return _Chain(spec, q).rnea(v, a, gravity)


def mass_matrix(spec: ArmSpec, q) -> np.ndarray:
    """Joint-space inertia M(q) from composite-rigid-body quantities.

    For planar chains M_ij = Σ_{k ≥ max(i,j)} I_k + m_k (c_k − o_i)·(c_k − o_j),
    expanded with the composite mass, first moment and second moment of the
    bodies outboard of each joint.
    """
    return _Chain(spec, _check(spec, q)).mass_matrix()


def gravity_compensation(spec: ArmSpec, q) -> np.ndarray:
    q = _check(spec, q)
    zero = np.zeros_like(q, dtype=float)
    return rnea(spec, q, zero, zero)


def bias_forces(spec: ArmSpec, q, v) -> np.ndarray:
    """C(q, v) v + g(q)."""
    return rnea(spec, q, v, np.zeros(np.shape(q)))


def forward_dynamics(spec: ArmSpec, q, v, u) -> np.ndarray:
    """Joint accelerations solving M(q) a = u − C(q, v) v − g(q)."""
    q = _check(spec, q)
    v = np.asarray(v)
    if v.shape != q.shape:
        raise ValueError(f"forward_dynamics: shapes q{q.shape} v{v.shape} differ")
    chain = _Chain(spec, q)
    rhs = np.asarray(u) - chain.rnea(v, np.zeros_like(v))
    return np.linalg.solve(chain.mass_matrix(), rhs[..., None])[..., 0]


def kinetic_energy(spec: ArmSpec, q, v) -> np.ndarray:
    M = mass_matrix(spec, q)
    v = np.asarray(v, dtype=float)
    return 0.5 * np.einsum("...i,...ij,...j->...", v, M, v)


def _cstep_jac(fn, x, n: int) -> np.ndarray:
    """d fn / d x via complex steps; fn maps (..., n) -> (..., m)."""
    x = np.asarray(x, dtype=complex)
    cols = []
    for j in range(n):
        xp = x.copy()
        xp[..., j] += 1j * _CSTEP
        cols.append(np.imag(fn(xp)) / _CSTEP)
    return np.stack(cols, axis=-1)


def rnea_derivatives(spec: ArmSpec, q, v, a):
    """Partial derivatives ∂τ/∂q and ∂τ/∂v of inverse dynamics, (..., n, n)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    dq = _cstep_jac(lambda z: rnea(spec, z, v, a), q, spec.n)
    dv = _cstep_jac(lambda z: rnea(spec, q, z, a), v, spec.n)
    return dq, dv


def gravity_jacobian(spec: ArmSpec, q) -> np.ndarray:
    """∂u_grav/∂q, (..., n, n)."""
    q = np.asarray(q, dtype=float)
    zero = np.zeros(q.shape)
    return _cstep_jac(lambda z: rnea(spec, z, zero, zero), q, spec.n)


def step(spec: ArmSpec, x, u, dt: float) -> np.ndarray:
    """Semi-implicit Euler on x = (q, v): v' = v + a dt, q' = q + v' dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    n = spec.n
    q, v = x[..., :n], x[..., n:]
    acc = forward_dynamics(spec, q, v, u)
    v_next = v + acc * dt
    return np.concatenate([q + v_next * dt, v_next], axis=-1)


def step_derivatives(spec: ArmSpec, x, u, dt: float):
    """Next state and its Jacobians ∂x'/∂x (..., 2n, 2n), ∂x'/∂u (..., 2n, n).

    Uses ∂a/∂q = −M⁻¹ ∂τ/∂q|_a, ∂a/∂v = −M⁻¹ ∂τ/∂v|_a, ∂a/∂u = M⁻¹ with the
    inverse-dynamics partials evaluated at the forward-dynamics solution.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = spec.n
    q, v = x[..., :n], x[..., n:]
    M = mass_matrix(spec, q)
    Minv = np.linalg.inv(M)
    acc = np.einsum("...ij,...j->...i", Minv, u - bias_forces(spec, q, v))
    dtau_dq, dtau_dv = rnea_derivatives(spec, q, v, acc)
    da_dq = -Minv @ dtau_dq
    da_dv = -Minv @ dtau_dv
    eye = np.broadcast_to(np.eye(n), da_dq.shape)
    batch = q.shape[:-1]
    fx = np.zeros(batch + (2 * n, 2 * n))
    fu = np.zeros(batch + (2 * n, n))
    dv_dq = dt * da_dq
    dv_dv = eye + dt * da_dv
    dv_du = dt * Minv
    fx[..., n:, :n] = dv_dq
    fx[..., n:, n:] = dv_dv
    fx[..., :n, :n] = eye + dt * dv_dq
    fx[..., :n, n:] = dt * dv_dv
    fu[..., n:, :] = dv_du
    fu[..., :n, :] = dt * dv_du
    v_next = v + acc * dt
    x_next = np.concatenate([q + v_next * dt, v_next], axis=-1)
    return x_next, fx, fu


def rollout(spec: ArmSpec, x0, controls, dt: float) -> np.ndarray:
    xs = [np.asarray(x0, dtype=float)]
    for u in controls:
        xs.append(step(spec, xs[-1], u, dt))
    return np.stack(xs)

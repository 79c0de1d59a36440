"""Constrained trajectory optimization for the arm.

The optimal control problem

    min  Σ_t ℓ(x_t, u_t) + ℓ_T(x_T)
    s.t. x_{t+1} = f(x_t, u_t),  g(x_t, u_t) ≥ 0

is solved by Gauss–Newton DDP with feasibility-driven gap closing (so an
inconsistent state guess can seed the solver) inside an augmented-Lagrangian
loop for the inequalities.  Everything is batched over a leading axis so that
several warm starts of one problem are refined together.

Models expose ``x0``, ``T``, ``nx``, ``nu`` and the methods ``step``,
``step_derivatives``, ``cost``, ``cost_derivatives`` and ``constraints``;
:class:`ArmOCP` is the arm model and :class:`LQModel` a linear-quadratic one.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import arm as arm_mod
from . import collision as col
from .arm import ArmSpec


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Weights:
    q_ee: tuple[float, float] = (10.0, 10.0)
    q_ee_terminal: tuple[float, float] = (1000.0, 1000.0)
    q_pos: float = 0.1
    q_vel: float = 0.05
    q_u: float = 1e-3
    terminal_x_scale: float = 1.0
    eps_safe: float = 0.01

    def __post_init__(self):
        vals = [*self.q_ee, *self.q_ee_terminal, self.q_pos, self.q_vel, self.q_u, self.terminal_x_scale]
        if min(vals) < 0 or self.eps_safe < 0:
            raise ValueError("weights and eps_safe must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "Weights":
        d = dict(d)
        for k in ("q_ee", "q_ee_terminal"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class SolverParams:
    max_iters: int = 100
    tol_c: float = 1e-4  # constraint tolerance, meters / native units
    inner_tol: float = 1e-6  # relative merit decrease that ends an inner solve
    inner_max: int = 15
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e6
    gap_weight: float = 1e3
    reg_min: float = 1e-8
    reg_max: float = 1e8
    n_alphas: int = 10
    enforce_limits: bool = True
    # a step may not push a collision residual's violation past max(current, guard);
    # stops gap-closing steps from tunnelling links through thin obstacles
    violation_guard: float = 0.02

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SolverParams":
        return cls(**d)


@dataclass
class OCPProblem:
    """One arm OCP.  ``x_ref`` may carry a leading batch axis (several references)."""

    spec: ArmSpec
    scene: object
    x0: np.ndarray
    goal: np.ndarray
    x_ref: np.ndarray
    dt: float
    weights: Weights = field(default_factory=Weights)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        self.x_ref = np.asarray(self.x_ref, dtype=float)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.x0.shape != (2 * self.spec.n,) or self.x_ref.shape[-1] != 2 * self.spec.n:
            raise ValueError("state dimension does not match the arm")
        if self.x_ref.shape[-2] < 2:
            raise ValueError("reference needs at least two nodes")

    @property
    def T(self) -> int:
        return self.x_ref.shape[-2] - 1


def build_reference(q_hat, dt: float) -> np.ndarray:
    """States (q̂_t, v̂_t) with v̂_t = (q̂_{t+1} − q̂_t)/Δt and v̂_T = v̂_{T−1}."""
    q_hat = np.asarray(q_hat, dtype=float)
    if q_hat.shape[-2] < 2:
        raise ValueError("need at least two configurations")
    v = np.diff(q_hat, axis=-2) / dt
    v = np.concatenate([v, v[..., -1:, :]], axis=-2)
    return np.concatenate([q_hat, v], axis=-1)


def hold_reference(q0, T: int) -> np.ndarray:
    """Zero-velocity reference that stays at q0 (the cold start)."""
    return build_reference(np.repeat(np.asarray(q0, float)[None], T + 1, axis=0), 1.0)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------
def _bt(a):
    return np.swapaxes(a, -1, -2)


class ArmOCP:
    """Arm dynamics, goal/regularization/effort costs and collision + box constraints."""

    def __init__(self, problem: OCPProblem, enforce_limits: bool = True):
        p = problem
        self.problem = p
        self.spec = p.spec
        self.n = n = p.spec.n
        self.nx, self.nu = 2 * n, n
        self.T = p.T
        self.x0 = p.x0
        self.dt = p.dt
        self.x_ref = p.x_ref
        w = p.weights
        T = self.T
        self.w_ee = np.tile(np.asarray(w.q_ee, float), (T + 1, 1))
        self.w_ee[T] = w.q_ee_terminal
        wx = np.array([w.q_pos] * n + [w.q_vel] * n)
        self.w_x = np.tile(wx, (T + 1, 1))
        self.w_x[T] *= w.terminal_x_scale
        self.w_u = np.full(n, w.q_u)
        self.eps = w.eps_safe
        self.enforce_limits = enforce_limits
        s = p.spec
        self.q_lo, self.q_hi = np.array(s.q_lower), np.array(s.q_upper)
        self.v_lim = np.broadcast_to(np.asarray(s.v_limit, float), (n,))
        self.u_lim = np.broadcast_to(np.asarray(s.u_limit, float), (n,))
        self.n_pairs = len(col.collision_pairs(s, p.scene))
        self.n_guarded = self.n_pairs  # collision rows lead g_x

    # dynamics
    def step(self, X, U):
        return arm_mod.step(self.spec, X, U, self.dt)

    def step_derivatives(self, X, U):
        return arm_mod.step_derivatives(self.spec, X, U, self.dt)

    # costs
    def cost_terms(self, X, U):
        """Per-node goal, state and effort costs, each (..., T+1) with effort zero at T."""
        n = self.n
        q = X[..., :n]
        r_ee = arm_mod.end_effector(self.spec, q) - self.problem.goal
        c_ee = np.sum(self.w_ee * r_ee**2, axis=-1)
        dx = X - self.x_ref
        c_x = np.sum(self.w_x * dx**2, axis=-1)
        r_u = U - arm_mod.gravity_compensation(self.spec, q[..., :-1, :])
        c_u = np.sum(self.w_u * r_u**2, axis=-1)
        c_u = np.concatenate([c_u, np.zeros(c_u.shape[:-1] + (1,))], axis=-1)
        return c_ee, c_x, c_u

    def cost(self, X, U):
        return sum(c.sum(axis=-1) for c in self.cost_terms(X, U))

    def cost_derivatives(self, X, U):
        """Gradients and Gauss–Newton Hessians of the stage and terminal costs."""
        n, T = self.n, self.T
        q = X[..., :n]
        batch = X.shape[:-2]
        lx = 2 * self.w_x * (X - self.x_ref)
        lxx = np.zeros(batch + (T + 1, self.nx, self.nx))
        idx = np.arange(self.nx)
        lxx[..., idx, idx] = 2 * self.w_x
        # end effector
        J = arm_mod.jacobian(self.spec, q)  # (..., T+1, 2, n)
        r_ee = arm_mod.end_effector(self.spec, q) - self.problem.goal
        WJ = self.w_ee[..., :, None] * J
        lx[..., :n] += 2 * np.einsum("...ki,...k->...i", J, self.w_ee * r_ee)
        lxx[..., :n, :n] += 2 * _bt(J) @ WJ
        # effort relative to gravity compensation
        qr = q[..., :-1, :]
        G = arm_mod.gravity_jacobian(self.spec, qr)  # (..., T, n, n)
        r_u = U - arm_mod.gravity_compensation(self.spec, qr)
        wr = self.w_u * r_u
        lu = 2 * wr
        luu = np.broadcast_to(np.diag(2 * self.w_u), batch + (T, n, n)).copy()
        lx[..., :-1, :n] -= 2 * np.einsum("...ki,...k->...i", G, wr)
        lxx[..., :-1, :n, :n] += 2 * _bt(G) @ (self.w_u[:, None] * G)
        lux = np.zeros(batch + (T, n, self.nx))
        lux[..., :n] = -2 * self.w_u[:, None] * G
        return lx, lu, lxx, luu, lux

    # constraints g ≥ 0
    def constraints(self, X, U, jacobians: bool = False):
        n = self.n
        q, v = X[..., :n], X[..., n:]
        if jacobians:
            d, Jd = col.pair_distances(self.spec, q, self.problem.scene, with_jacobian=True)
        else:
            d = col.pair_distances(self.spec, q, self.problem.scene)
        parts = [d - self.eps]
        if self.enforce_limits:
            parts += [q - self.q_lo, self.q_hi - q, v + self.v_lim, self.v_lim - v]
            gu = np.concatenate([U + self.u_lim, self.u_lim - U], axis=-1)
        else:
            gu = np.zeros(U.shape[:-1] + (0,))
        gx = np.concatenate(parts, axis=-1)
        if not jacobians:
            return gx, gu
        batch = X.shape[:-1]
        Gx = np.zeros(batch + (gx.shape[-1], self.nx))
        P = d.shape[-1]
        Gx[..., :P, :n] = Jd
        if self.enforce_limits:
            eye = np.eye(n)
            Gx[..., P : P + n, :n] = eye
            Gx[..., P + n : P + 2 * n, :n] = -eye
            Gx[..., P + 2 * n : P + 3 * n, n:] = eye
            Gx[..., P + 3 * n :, n:] = -eye
            Gu = np.broadcast_to(np.concatenate([np.eye(n), -np.eye(n)]), U.shape[:-1] + (2 * n, n))
        else:
            Gu = np.zeros(U.shape[:-1] + (0, n))
        return gx, gu, Gx, Gu

    def initial_controls(self, X):
        """Gravity-compensation torques along a state guess."""
        return arm_mod.gravity_compensation(self.spec, X[..., :-1, : self.n])


class LQModel:
    """Time-invariant linear dynamics with quadratic costs and no constraints."""

    def __init__(self, A, B, Q, R, QT, x0, T: int):
        self.A, self.B = np.asarray(A, float), np.asarray(B, float)
        self.Q, self.R, self.QT = (np.asarray(m, float) for m in (Q, R, QT))
        self.x0 = np.asarray(x0, float)
        self.nx, self.nu = self.B.shape
        self.T = T

    def step(self, X, U):
        return X @ self.A.T + U @ self.B.T

    def step_derivatives(self, X, U):
        batch = X.shape[:-1]
        return (
            self.step(X, U),
            np.broadcast_to(self.A, batch + self.A.shape),
            np.broadcast_to(self.B, batch + self.B.shape),
        )

    def cost(self, X, U):
        run = np.einsum("...ti,ij,...tj->...", X[..., :-1, :], self.Q, X[..., :-1, :])
        run += np.einsum("...ti,ij,...tj->...", U, self.R, U)
        return run + np.einsum("...i,ij,...j->...", X[..., -1, :], self.QT, X[..., -1, :])

    def cost_derivatives(self, X, U):
        batch = X.shape[:-2]
        T = self.T
        Qs = np.concatenate([np.broadcast_to(self.Q, (T, self.nx, self.nx)), self.QT[None]])
        lx = 2 * np.einsum("tij,...tj->...ti", Qs, X)
        lxx = np.broadcast_to(2 * Qs, batch + Qs.shape).copy()
        lu = 2 * U @ self.R.T
        luu = np.broadcast_to(2 * self.R, batch + (T, self.nu, self.nu)).copy()
        lux = np.zeros(batch + (T, self.nu, self.nx))
        return lx, lu, lxx, luu, lux

    def constraints(self, X, U, jacobians: bool = False):
        gx = np.zeros(X.shape[:-1] + (0,))
        gu = np.zeros(U.shape[:-1] + (0,))
        if not jacobians:
            return gx, gu
        return gx, gu, np.zeros(X.shape[:-1] + (0, self.nx)), np.zeros(U.shape[:-1] + (0, self.nu))

    def initial_controls(self, X):
        return np.zeros(X.shape[:-2] + (self.T, self.nu))


def riccati_lqr(A, B, Q, R, QT, T: int):
    """Textbook finite-horizon discrete Riccati recursion; gains with u = K x."""
    P = np.asarray(QT, float)
    gains = []
    for _ in range(T):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A + B @ K)
        gains.append(K)
    return gains[::-1]


# ---------------------------------------------------------------------------
# solution
# ---------------------------------------------------------------------------
@dataclass
class OCPSolution:
    states: np.ndarray  # (T+1, nx)
    controls: np.ndarray  # (T, nu), equals the feedforward
    gains: np.ndarray  # (T, nu, nx)
    cost: float
    iterations: int
    max_violation: float
    converged: bool
    feasible: bool
    merit_history: list = field(default_factory=list)

    @property
    def u_ff(self):
        return self.controls

    def to_dict(self):
        return {
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "gains": self.gains.tolist(),
            "cost": self.cost,
            "iterations": self.iterations,
            "max_violation": self.max_violation,
            "converged": self.converged,
            "feasible": self.feasible,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "OCPSolution":
        return cls(
            np.array(d["states"]), np.array(d["controls"]), np.array(d["gains"]), float(d["cost"]),
            int(d["iterations"]), float(d["max_violation"]), bool(d["converged"]), bool(d["feasible"]),
        )


def feedback_policy(solution: OCPSolution, x_measured, t: int) -> np.ndarray:
    """u = u_ff,t + K_t (x − x*_t)."""
    return solution.controls[t] + solution.gains[t] @ (np.asarray(x_measured) - solution.states[t])


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------
def _phr(g, lam, mu):
    """Powell–Hestenes–Rockafellar term for g ≥ 0 and its first/second derivative in g."""
    shifted = lam - mu * g
    act = shifted > 0
    val = np.where(act, shifted**2, 0.0) - lam**2
    return val / (2 * mu), -np.where(act, shifted, 0.0), np.where(act, mu, 0.0)


def _violation(gx, gu):
    """Largest max(0, −g) over nodes 1..T of g_x and all of g_u."""
    v = np.zeros(gx.shape[:-2])
    if gx.shape[-1]:
        v = np.maximum(v, np.max(np.maximum(0, -gx[..., 1:, :]), axis=(-1, -2)))
    if gu.shape[-1]:
        v = np.maximum(v, np.max(np.maximum(0, -gu), axis=(-1, -2)))
    return v


class _Batch:
    """Per-element solver state."""

    def __init__(self, model, X, U, params: SolverParams):
        self.model = model
        self.p = params
        B = X.shape[0]
        self.X, self.U = X, U
        self.gaps = np.zeros_like(X)
        self.gaps[:, 1:] = model.step(X[:, :-1], U) - X[:, 1:]
        gx, gu = model.constraints(X, U)
        self.lam_x = np.zeros_like(gx)
        self.lam_u = np.zeros_like(gu)
        self.mu = np.full(B, params.penalty_init)
        self.reg = np.zeros(B)
        self.mask_x = np.ones(gx.shape[1], bool)
        self.mask_x[0] = False  # x0 is fixed, its constraints carry no decision
        self.n_guarded = getattr(model, "n_guarded", 0)
        self.B = B

    def _mu(self, extra_dims):
        return self.mu.reshape((-1,) + (1,) * extra_dims)

    def merit(self, X, U, gaps, with_violation=False):
        """Augmented-Lagrangian merit of trajectories with leading axes (..., B).

        With ``with_violation`` also returns the constraint violation
        (excluding gaps) so candidates need only one constraint evaluation.
        """
        m = self.model
        mu = self.mu[:, None, None]
        J = m.cost(X, U)
        gx, gu = m.constraints(X, U)
        px, _, _ = _phr(gx, self.lam_x, mu)
        pu, _, _ = _phr(gu, self.lam_u, mu)
        al = (px * self.mask_x[:, None]).sum(axis=(-1, -2)) + pu.sum(axis=(-1, -2))
        merit = J + al + self.p.gap_weight * np.abs(gaps).sum(axis=(-1, -2))
        if not with_violation:
            return merit
        guarded = np.maximum(0.0, -gx[..., 1:, : self.n_guarded])
        return merit, _violation(gx, gu), guarded

    def violation(self, X, U, gaps):
        """Reported violation; unlike the merit it counts node 0, which no decision can repair."""
        gx, gu = self.model.constraints(X, U)
        v = np.maximum(_violation(gx, gu), np.max(np.abs(gaps), axis=(-1, -2)))
        if gx.shape[-1]:
            v = np.maximum(v, np.max(np.maximum(0.0, -gx[..., 0, :]), axis=-1))
        return v

    def derivatives(self):
        m = self.model
        X, U = self.X, self.U
        _, fx, fu = m.step_derivatives(X[:, :-1], U)
        lx, lu, lxx, luu, lux = m.cost_derivatives(X, U)
        gx, gu, Gx, Gu = m.constraints(X, U, jacobians=True)
        mu = self.mu[:, None, None]
        if gx.shape[-1]:
            _, d1, d2 = _phr(gx, self.lam_x, mu)
            d1, d2 = d1 * self.mask_x[:, None], d2 * self.mask_x[:, None]
            lx = lx + np.einsum("btmi,btm->bti", Gx, d1)
            lxx = lxx + np.einsum("btmi,btm,btmj->btij", Gx, d2, Gx)
        if gu.shape[-1]:
            _, d1, d2 = _phr(gu, self.lam_u, mu)
            lu = lu + np.einsum("btmi,btm->bti", Gu, d1)
            luu = luu + np.einsum("btmi,btm,btmj->btij", Gu, d2, Gu)
        return fx, fu, lx, lu, lxx, luu, lux

    def backward(self, derivs, reg):
        """Riccati sweep with gaps; returns k, K, expected decrease terms and a failure mask."""
        fx, fu, lx, lu, lxx, luu, lux = derivs
        B, T = self.B, self.model.T
        nu = lu.shape[-1]
        Vx, Vxx = lx[:, T].copy(), lxx[:, T].copy()
        k = np.zeros((B, T, nu))
        K = np.zeros((B, T, nu, self.model.nx))
        d1 = np.zeros(B)
        d2 = np.zeros(B)
        failed = np.zeros(B, bool)
        eye = np.eye(nu)
        for t in range(T - 1, -1, -1):
            Vx_p = Vx + np.einsum("bij,bj->bi", Vxx, self.gaps[:, t + 1])
            A, Bm = fx[:, t], fu[:, t]
            Qx = lx[:, t] + np.einsum("bji,bj->bi", A, Vx_p)
            Qu = lu[:, t] + np.einsum("bji,bj->bi", Bm, Vx_p)
            VA = Vxx @ A
            Qxx = lxx[:, t] + _bt(A) @ VA
            Qux = lux[:, t] + _bt(Bm) @ VA
            Quu = luu[:, t] + _bt(Bm) @ Vxx @ Bm
            Quu_r = Quu + reg[:, None, None] * eye
            ok = np.all(np.linalg.eigvalsh(0.5 * (Quu_r + _bt(Quu_r))) > 1e-12, axis=-1)
            failed |= ~ok
            Quu_r = np.where(ok[:, None, None], Quu_r, eye)
            kt = -np.linalg.solve(Quu_r, Qu[..., None])[..., 0]
            Kt = -np.linalg.solve(Quu_r, Qux)
            k[:, t], K[:, t] = kt, Kt
            d1 += np.einsum("bi,bi->b", kt, Qu)
            d2 += np.einsum("bi,bij,bj->b", kt, Quu, kt)
            Vx = Qx + np.einsum("bji,bjk,bk->bi", Kt, Quu, kt) + np.einsum("bji,bj->bi", Kt, Qu) + np.einsum("bji,bj->bi", Qux, kt)
            Vxx = Qxx + _bt(Kt) @ Quu @ Kt + _bt(Kt) @ Qux + _bt(Qux) @ Kt
            Vxx = 0.5 * (Vxx + _bt(Vxx))
        return k, K, d1, d2, failed

    def rollout(self, k, K, alphas):
        """Candidate trajectories for every step size: (n_alpha, B, ...)."""
        m = self.model
        a = alphas[:, None, None]
        na = len(alphas)
        X = np.empty((na,) + self.X.shape)
        U = np.empty((na,) + self.U.shape)
        X[:, :, 0] = self.X[:, 0]
        for t in range(m.T):
            dx = X[:, :, t] - self.X[:, t]
            U[:, :, t] = self.U[:, t] + a * k[:, t] + np.einsum("bij,abj->abi", K[:, t], dx)
            X[:, :, t + 1] = m.step(X[:, :, t], U[:, :, t]) - (1 - a) * self.gaps[:, t + 1]
        gaps = (1 - alphas)[:, None, None, None] * self.gaps
        return X, U, gaps


def solve(
    model,
    warm_start=None,
    params: SolverParams = SolverParams(),
    max_iters: int | None = None,
    batched: bool | None = None,
):
    """Refine one or several initial guesses of a model.

    ``warm_start`` is ``(X, U)`` with optional leading batch axis; ``U=None``
    selects the model's initial controls (gravity compensation for the arm).
    Without a warm start the model's reference (arm) or a zero-control rollout
    (others) seeds the solver.  Returns one :class:`OCPSolution` or a list when
    the input is batched.
    """
    max_iters = params.max_iters if max_iters is None else max_iters
    X, U = _initial_guess(model, warm_start)
    single = X.ndim == 2 if batched is None else not batched
    if X.ndim == 2:
        X, U = X[None], U[None]
    X = X.copy()
    X[:, 0] = model.x0
    st = _Batch(model, X, U, params)
    merit, cviol, gviol = st.merit(X, U, st.gaps, with_violation=True)
    if not np.all(np.isfinite(merit)):
        raise SolverError("non-finite cost at the initial guess")
    B = st.B
    alphas = 0.5 ** np.arange(params.n_alphas + 1)
    done = np.zeros(B, bool)
    inner_done = np.zeros(B, bool)
    inner_count = np.zeros(B, int)
    prev_viol = np.full(B, np.inf)
    iters = np.zeros(B, int)
    history = [[float(m)] for m in merit]

    best = _Best(B)
    best.offer(st, np.ones(B, bool))

    it = 0
    while it < max_iters and not np.all(done):
        it += 1
        active = ~done
        iters[active] += 1
        derivs = st.derivatives()
        reg = st.reg.copy()
        k, K, d1, d2, failed = st.backward(derivs, reg)
        while np.any(failed & active):
            bump = failed & active
            if np.any(reg[bump] >= params.reg_max):
                raise SolverError(f"backward pass not positive definite at regularization {reg[bump].max():.1e}")
            reg[bump] = np.maximum(reg[bump] * 10, 1e-6)
            k, K, d1, d2, failed = st.backward(derivs, reg)
        st.reg = reg
        expected = -(d1 + 0.5 * d2)
        gap_norm = np.abs(st.gaps).max(axis=(-1, -2))
        stationary = (expected <= 1e-10 * np.maximum(1.0, np.abs(merit))) & (gap_norm < 1e-12)

        ls = _line_search(st, k, K, alphas, merit, gviol, active & ~stationary)
        accept = ls.found
        rel = (merit - ls.merit) / np.maximum(1.0, np.abs(merit))
        st.X = np.where(accept[:, None, None], ls.X, st.X)
        st.U = np.where(accept[:, None, None], ls.U, st.U)
        st.gaps = np.where(accept[:, None, None], ls.gaps, st.gaps)
        merit = np.where(accept, ls.merit, merit)
        cviol = np.where(accept, ls.cviol, cviol)
        gviol = np.where(accept[:, None, None], ls.gviol, gviol)
        st.reg = np.where(accept, np.where(st.reg > params.reg_min * 10, st.reg / 10, 0.0), st.reg)
        stalled = active & ~stationary & ~accept
        st.reg = np.where(stalled, np.maximum(st.reg * 10, 1e-6), st.reg)
        for b in np.flatnonzero(accept):
            history[b].append(float(merit[b]))
        best.offer(st, accept)

        inner_count[active] += 1
        inner_done = active & (
            stationary | (accept & (rel < params.inner_tol)) | (stalled & (st.reg >= params.reg_max)) | (inner_count >= params.inner_max)
        )
        if np.any(inner_done):
            viol = st.violation(st.X, st.U, st.gaps)
            converged_now = inner_done & (viol <= params.tol_c) & (stationary | (accept & (rel < params.inner_tol)))
            done |= converged_now
            upd = inner_done & ~converged_now
            if np.any(upd):
                gx, gu = st.model.constraints(st.X, st.U)
                mu = st.mu[:, None, None]
                new_lx = np.maximum(0.0, st.lam_x - mu * gx) * st.mask_x[:, None]
                new_lu = np.maximum(0.0, st.lam_u - mu * gu)
                st.lam_x = np.where(upd[:, None, None], new_lx, st.lam_x)
                st.lam_u = np.where(upd[:, None, None], new_lu, st.lam_u)
                # gaps are not multiplier-controlled, so only constraint rows drive the penalty
                grow = upd & (cviol > 0.25 * prev_viol) & (cviol > params.tol_c)
                st.mu = np.where(grow, np.minimum(st.mu * params.penalty_growth, params.penalty_max), st.mu)
                prev_viol = np.where(upd, cviol, prev_viol)
                st.reg = np.where(upd, 0.0, st.reg)
                merit = np.where(upd, st.merit(st.X, st.U, st.gaps), merit)
                for b in np.flatnonzero(upd):
                    history[b].append(None)  # merit function changed
                    history[b].append(float(merit[b]))
            inner_count[inner_done] = 0

    sols = best.finalize(st, iters, done, params, history)
    return sols[0] if single else sols


@dataclass
class _Step:
    found: np.ndarray
    X: np.ndarray
    U: np.ndarray
    gaps: np.ndarray
    merit: np.ndarray
    cviol: np.ndarray
    gviol: np.ndarray


def _line_search(st: _Batch, k, K, alphas, merit, gviol, want) -> _Step:
    """Largest step size per element with strictly lower merit that respects the violation guard.

    All step sizes are rolled out together; the rollout cost is dominated by
    per-node overhead, so one wide batch beats trying them in sequence.
    """
    B = st.B
    bi = np.arange(B)
    with np.errstate(all="ignore"):
        Xc, Uc, Gc = st.rollout(k, K, alphas)
        mc, vc, gc = st.merit(Xc, Uc, Gc, with_violation=True)  # (n_alpha, B)
    guarded = np.all(gc <= np.maximum(gviol, st.p.violation_guard), axis=(-1, -2))
    ok = np.isfinite(mc) & (mc < merit[None]) & guarded
    c = np.argmax(ok, axis=0)
    return _Step(want & ok.any(axis=0), Xc[c, bi], Uc[c, bi], Gc[c, bi], mc[c, bi], vc[c, bi], gc[c, bi])


class _Best:
    """Best iterate per element: gap-free and feasible first, then lowest cost, else lowest violation."""

    def __init__(self, B):
        self.key = [None] * B
        self.X = [None] * B
        self.U = [None] * B
        self.lam = [None] * B

    def offer(self, st: _Batch, which):
        if not np.any(which):
            return
        cost = st.model.cost(st.X, st.U)
        viol = st.violation(st.X, st.U, st.gaps)
        for b in np.flatnonzero(which):
            feas = viol[b] <= st.p.tol_c
            key = (0, cost[b]) if feas else (1, viol[b])
            if self.key[b] is None or key < self.key[b]:
                self.key[b] = key
                self.X[b], self.U[b] = st.X[b].copy(), st.U[b].copy()
                self.lam[b] = (st.lam_x[b].copy(), st.lam_u[b].copy(), st.mu[b])

    def finalize(self, st: _Batch, iters, done, params, history):
        st.X = np.stack(self.X)
        st.U = np.stack(self.U)
        st.gaps = np.zeros_like(st.X)
        st.gaps[:, 1:] = st.model.step(st.X[:, :-1], st.U) - st.X[:, 1:]
        st.lam_x = np.stack([l[0] for l in self.lam])
        st.lam_u = np.stack([l[1] for l in self.lam])
        st.mu = np.array([l[2] for l in self.lam])
        derivs = st.derivatives()
        reg = np.zeros(st.B)
        _, K, _, _, failed = st.backward(derivs, reg)
        while np.any(failed) and reg.max() < params.reg_max:
            reg = np.where(failed, np.maximum(reg * 10, 1e-6), reg)
            _, K, _, _, failed = st.backward(derivs, reg)
        cost = st.model.cost(st.X, st.U)
        viol = st.violation(st.X, st.U, st.gaps)
        return [
            OCPSolution(
                st.X[b], st.U[b], K[b], float(cost[b]), int(iters[b]), float(viol[b]),
                bool(done[b]), bool(viol[b] <= params.tol_c), history[b],
            )
            for b in range(st.B)
        ]


def _initial_guess(model, warm_start):
    if warm_start is None:
        if hasattr(model, "x_ref"):
            X = np.array(model.x_ref, dtype=float)
            return X, model.initial_controls(X)
        U = model.initial_controls(np.zeros((model.T + 1, model.nx)))
        X = [model.x0]
        for t in range(model.T):
            X.append(model.step(X[-1], U[t]))
        return np.array(X), U
    X, U = warm_start
    X = np.array(X, dtype=float)
    U = model.initial_controls(X) if U is None else np.array(U, dtype=float)
    return X, U


def solve_problem(problem: OCPProblem, warm_states=None, params: SolverParams = SolverParams(), max_iters=None):
    """Arm OCP warm-started from states X̂ (or the reference) with gravity-compensation torques."""
    model = ArmOCP(problem, enforce_limits=params.enforce_limits)
    ws = None if warm_states is None else (warm_states, None)
    return solve(model, ws, params, max_iters, batched=problem.x_ref.ndim == 3)

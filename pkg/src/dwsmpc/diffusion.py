"""Denoising diffusion over fixed-length joint trajectories.

Trajectories (T+1, n) are normalized per joint to [-1, 1] by the joint limits.
The denoiser is a small transformer: self-attention over trajectory nodes and
cross-attention to condition tokens (q0, goal and an unordered set of scene
tokens, which carry no positional information).  Sampling runs the ancestral
update over a strided subsequence of the training steps, optionally nudged by
the gradient of a collision + smoothness penalty, and overwrites node 0 with
the measured start configuration.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as A
from . import collision as col
from . import scene as S
from . import slot_encoder
from .arm import ArmSpec
from .autodiff import nn
from .rng import derive_seed, generator

VARIANTS = ("slots", "occupancy", "cspace")


class TrainingError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (K,), betas[i-1] is β_i

    def __post_init__(self):
        b = np.asarray(self.betas, float)
        if b.ndim != 1 or len(b) < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def K(self) -> int:
        return len(self.betas)

    @property
    def alpha_bar(self) -> np.ndarray:
        """(K+1,) with ᾱ_0 = 1."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def to_dict(self):
        return {"betas": self.betas.tolist()}


def make_schedule(K: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear β schedule; K=1 uses ``beta_start``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, K) if K > 1 else np.array([beta_start]))


def q_sample(x0, i, eps, schedule: NoiseSchedule):
    """x_i = √ᾱ_i x0 + √(1 − ᾱ_i) ε; ``i`` is a step index or one per batch element."""
    ab = schedule.alpha_bar[np.asarray(i)]
    x0 = np.asarray(x0)
    ab = ab.reshape(np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)


def strided_steps(K: int, S_: int) -> np.ndarray:
    """S descending step indices from K down to 1 (evenly spaced; S=1 is just K)."""
    if not 1 <= S_ <= K:
        raise ValueError(f"need 1 <= S <= K, got S={S_}, K={K}")
    return np.unique(np.round(np.linspace(K, 1, S_)).astype(int))[::-1]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------
def normalize(q, spec: ArmSpec):
    lo, hi = np.array(spec.q_lower), np.array(spec.q_upper)
    return 2 * (np.asarray(q) - lo) / (hi - lo) - 1


def denormalize(x, spec: ArmSpec):
    lo, hi = np.array(spec.q_lower), np.array(spec.q_upper)
    return lo + (np.asarray(x) + 1) * (hi - lo) / 2


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------
@dataclass
class Condition:
    q0: np.ndarray  # radians (n,)
    goal: np.ndarray  # meters (2,)
    tokens: np.ndarray  # (M, token_dim) scene tokens, unordered
    variant: str

    def permuted(self, perm) -> "Condition":
        return replace(self, tokens=self.tokens[list(perm)])


class OccupancyEmbedder:
    """Frozen random-weight CNN: 32×32 occupancy grid → one token."""

    def __init__(self, dim: int = 64, seed: int = 7, resolution: int = 32):
        rng = generator(seed)
        self.resolution = resolution
        self.w1 = rng.normal(0, np.sqrt(2 / 9), (3, 3, 1, 8)).astype(np.float32)
        self.w2 = rng.normal(0, np.sqrt(2 / 72), (3, 3, 8, 16)).astype(np.float32)
        flat = (resolution // 4) ** 2 * 16
        self.proj = rng.normal(0, np.sqrt(1 / flat), (flat, dim)).astype(np.float32)

    def __call__(self, grid: np.ndarray) -> np.ndarray:
        with A.no_grad():
            x = A.as_tensor(np.asarray(grid, np.float32)[None, :, :, None])
            x = A.relu(A.conv2d(x, A.as_tensor(self.w1), stride=2, padding=1))
            x = A.relu(A.conv2d(x, A.as_tensor(self.w2), stride=2, padding=1))
        return (x.data.reshape(1, -1) @ self.proj).astype(np.float32)


class ConfigurationProbes:
    """P fixed random configurations; a scene becomes their binary collision labels."""

    def __init__(self, spec: ArmSpec, count: int = 256, seed: int = 11):
        rng = generator(seed)
        self.spec = spec
        self.q = rng.uniform(spec.q_lower, spec.q_upper, size=(count, spec.n))

    def __call__(self, scene: S.Scene) -> np.ndarray:
        if not scene.walls and not scene.obstacles:
            return np.zeros((1, len(self.q)), np.float32)
        d = col.pair_distances(self.spec, self.q, scene)
        n_body = len(col.scene_bodies(scene)) * self.spec.n  # body pairs come first; self pairs are ignored
        hit = (d[:, :n_body] < 0).any(axis=1)
        return hit.astype(np.float32)[None]


@dataclass
class Encoders:
    """Everything needed to turn a problem into a :class:`Condition` for each variant."""

    spec: ArmSpec
    slot_model: object = None
    slot_seed: int = 0
    occupancy: OccupancyEmbedder = field(default_factory=OccupancyEmbedder)
    probes: ConfigurationProbes | None = None

    def __post_init__(self):
        if self.probes is None:
            self.probes = ConfigurationProbes(self.spec)

    def token_dim(self, variant: str) -> int:
        if variant == "slots":
            if self.slot_model is None:
                raise ValueError("slots conditioning needs a trained slot encoder")
            return self.slot_model.config.dim
        if variant == "occupancy":
            return self.occupancy.proj.shape[1]
        if variant == "cspace":
            return len(self.probes.q)
        raise ValueError(f"unknown conditioning variant {variant!r}; choose from {VARIANTS}")

    def scene_tokens(self, scene: S.Scene, variant: str) -> np.ndarray:
        if variant == "slots":
            if self.slot_model is None:
                raise ValueError("slots conditioning needs a trained slot encoder")
            return slot_encoder.encode_scene(scene, self.slot_model, self.slot_seed).slots.astype(np.float32)
        if variant == "occupancy":
            return self.occupancy(S.occupancy(scene, self.occupancy.resolution))
        if variant == "cspace":
            return self.probes(scene)
        raise ValueError(f"unknown conditioning variant {variant!r}; choose from {VARIANTS}")


def encode_condition(problem: S.Problem, variant: str, encoders: Encoders) -> Condition:
    tokens = encoders.scene_tokens(problem.scene, variant)
    return Condition(np.asarray(problem.q_start, float), np.asarray(problem.goal, float), tokens, variant)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DenoiserConfig:
    T: int = 50
    n: int = 3
    width: int = 128
    heads: int = 4
    blocks: int = 4
    mlp_ratio: int = 2
    token_dim: int = 32
    variant: str = "slots"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown conditioning variant {self.variant!r}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


def canonical_order(tokens: np.ndarray) -> np.ndarray:
    """Sort each batch element's tokens lexicographically.

    Attention over unpositioned keys is permutation invariant in exact
    arithmetic; a canonical order also makes it invariant bit for bit.
    """
    tokens = np.asarray(tokens)
    out = np.empty_like(tokens)
    for b, tok in enumerate(tokens):
        out[b] = tok[np.lexsort(tok.T[::-1])]
    return out


def timestep_embedding(i, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion steps, shape (B, dim)."""
    i = np.atleast_1d(np.asarray(i, float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = i[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig, rng):
        w = cfg.width
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(w), nn.LayerNorm(w), nn.LayerNorm(w)
        self.self_attn = nn.MultiHeadAttention(w, cfg.heads, rng)
        self.cross_attn = nn.MultiHeadAttention(w, cfg.heads, rng)
        self.mlp = nn.MLP([w, cfg.mlp_ratio * w, w], rng, activation="gelu")

    def forward(self, x, ctx):
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), ctx)
        return x + self.mlp(self.norm3(x))


class Denoiser(nn.Module):
    """ε̂_θ(x_i, i, c) for normalized trajectories x_i of shape (B, T+1, n)."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        rng = generator(seed)
        w = cfg.width
        self.config = cfg
        self.traj_in = nn.Linear(cfg.n, w, rng)
        self.node_pos = nn.parameter(rng.normal(0, 0.02, (cfg.T + 1, w)))
        self.time_mlp = nn.MLP([w, w, w], rng, activation="gelu")
        self.q0_in = nn.Linear(cfg.n, w, rng)
        self.goal_in = nn.Linear(2, w, rng)
        self.scene_in = nn.Linear(cfg.token_dim, w, rng)
        self.ctx_norm = nn.LayerNorm(w)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.blocks)]
        self.out_norm = nn.LayerNorm(w)
        self.out = nn.Linear(w, cfg.n, rng, zero=True)

    def context(self, q0n: np.ndarray, goal: np.ndarray, tokens: np.ndarray) -> A.Tensor:
        """(B, 2 + M, width) condition tokens; q0n is normalized."""
        b = len(q0n)
        q = self.q0_in(A.as_tensor(q0n[:, None].astype(np.float32)))
        g = self.goal_in(A.as_tensor(goal[:, None].astype(np.float32)))
        s = self.scene_in(A.as_tensor(canonical_order(tokens).astype(np.float32)))
        return self.ctx_norm(A.concat([q, g, s.reshape(b, -1, self.config.width)], axis=1))

    def forward(self, x: np.ndarray, i, ctx: A.Tensor) -> A.Tensor:
        cfg = self.config
        t = self.time_mlp(A.as_tensor(timestep_embedding(i, cfg.width)))
        h = self.traj_in(A.as_tensor(np.asarray(x, np.float32))) + self.node_pos
        h = h + t.reshape(len(x), 1, cfg.width)
        for blk in self.blocks:
            h = blk(h, ctx)
        return self.out(self.out_norm(h))


def batch_context(model: Denoiser, conds: list[Condition], spec: ArmSpec) -> A.Tensor:
    q0n = normalize(np.stack([c.q0 for c in conds]), spec)
    goals = np.stack([c.goal for c in conds])
    tokens = np.stack([c.tokens for c in conds])
    return model.context(q0n, goals, tokens)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
def training_loss(model: Denoiser, x0: np.ndarray, ctx: A.Tensor, schedule: NoiseSchedule, rng) -> A.Tensor:
    """E‖ε − ε̂(x_i, i, c)‖² with i uniform in 1..K (mean over elements)."""
    rng = generator(rng)
    b = len(x0)
    i = rng.integers(1, schedule.K + 1, size=b)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    xi = q_sample(x0, i, eps, schedule).astype(np.float32)
    return A.mse_loss(model(xi, i, ctx), A.as_tensor(eps))


@dataclass(frozen=True)
class DiffusionTrainConfig:
    lr: float = 3e-4
    batch_size: int = 64
    steps: int = 4000
    warmup: int = 200
    ema_decay: float = 0.999
    clip_norm: float = 1.0
    K: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def lr_at(self, step: int) -> float:
        # linear warmup then cosine decay to 10%
        warm = min(1.0, (step + 1) / self.warmup)
        return self.lr * warm * (0.55 + 0.45 * np.cos(np.pi * min(1.0, step / self.steps)))


@dataclass
class TrainedModel:
    """Denoiser with EMA weights loaded, plus what sampling needs."""

    model: Denoiser
    schedule: NoiseSchedule
    spec: ArmSpec
    meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.model.config.variant


def prepare_training_set(records, encoders: Encoders, variant: str, spec: ArmSpec):
    """(x0 normalized (R, T+1, n), conditions) for dataset records; scene tokens cached per scene."""
    cache: dict[str, np.ndarray] = {}
    conds = []
    for r in records:
        key = r.scene.digest()
        if key not in cache:
            cache[key] = encoders.scene_tokens(r.scene, variant)
        conds.append(Condition(r.q_start, r.goal, cache[key], variant))
    x0 = normalize(np.stack([r.trajectory for r in records]), spec).astype(np.float32)
    return x0, conds


def _pad_tokens(conds: list[Condition]) -> list[Condition]:
    m = {len(c.tokens) for c in conds}
    if len(m) > 1:
        raise ValueError(f"scene token counts differ within a batch: {sorted(m)}")
    return conds


def train(
    x0: np.ndarray,
    conds: list[Condition],
    spec: ArmSpec,
    cfg: DenoiserConfig,
    tc: DiffusionTrainConfig = DiffusionTrainConfig(),
    seed: int = 0,
    log=None,
    log_every: int = 100,
):
    """Adam on the noise-prediction loss with an EMA copy; returns (TrainedModel, history)."""
    if len(x0) != len(conds) or len(x0) == 0:
        raise ValueError("need one condition per trajectory and at least one trajectory")
    _pad_tokens(conds)
    schedule = make_schedule(tc.K, tc.beta_start, tc.beta_end)
    model = Denoiser(cfg, seed)
    named = model.named_parameters()
    opt = A.Adam(list(named.values()), lr=tc.lr, clip_norm=tc.clip_norm)
    ema = A.EMA(named, tc.ema_decay)
    rng = generator(derive_seed(seed, 1))
    q0n_all = normalize(np.stack([c.q0 for c in conds]), spec).astype(np.float32)
    goals_all = np.stack([c.goal for c in conds]).astype(np.float32)
    tokens_all = np.stack([c.tokens for c in conds]).astype(np.float32)
    history = {"loss": []}
    t0 = time.perf_counter()
    for step in range(tc.steps):
        idx = rng.integers(0, len(x0), size=min(tc.batch_size, len(x0)))
        ctx = model.context(q0n_all[idx], goals_all[idx], tokens_all[idx])
        loss = training_loss(model, x0[idx], ctx, schedule, rng)
        value = float(loss.item())
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite loss at step {step}: batch indices {idx[:8].tolist()}..., "
                f"|x0|max={np.abs(x0[idx]).max():.3g}, |tokens|max={np.abs(tokens_all[idx]).max():.3g}"
            )
        opt.zero_grad()
        A.backward(loss)
        opt.state.lr = tc.lr_at(step)
        opt.step()
        ema.update(named)
        history["loss"].append(value)
        if log is not None and (step + 1) % log_every == 0:
            log(f"step {step + 1} loss {np.mean(history['loss'][-log_every:]):.4f} ({time.perf_counter() - t0:.0f} s)")
    history["seconds"] = time.perf_counter() - t0
    model.load_state_dict(ema.shadow)
    meta = {"train": asdict(tc), "seed": seed, "records": len(x0)}
    return TrainedModel(model, schedule, spec, meta), history


# ---------------------------------------------------------------------------
# guidance
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Guidance:
    scale: float = 1.0
    margin: float = 0.03  # clearance below which the collision penalty is active
    w_collision: float = 1.0
    w_smooth: float = 0.1


def guidance_penalty(q, scene, spec: ArmSpec, g: Guidance) -> float:
    d = col.pair_distances(spec, q, scene)
    hinge = np.maximum(0.0, g.margin - d)
    return float(g.w_collision * np.sum(hinge**2) + g.w_smooth * np.sum(np.diff(q, axis=-2) ** 2))


def guidance_grad(q, scene, spec: ArmSpec, g: Guidance = Guidance()) -> np.ndarray:
    """∂/∂q of the collision + smoothness penalty for trajectories (..., T+1, n) in radians."""
    q = np.asarray(q, float)
    d, J = col.pair_distances(spec, q, scene, with_jacobian=True)
    hinge = np.maximum(0.0, g.margin - d)
    grad = -2 * g.w_collision * np.einsum("...p,...pj->...j", hinge, J)
    dq = np.diff(q, axis=-2)
    grad[..., 1:, :] += 2 * g.w_smooth * dq
    grad[..., :-1, :] -= 2 * g.w_smooth * dq
    return grad


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
def sample(
    condition: Condition,
    trained: TrainedModel,
    steps: int,
    seed: int = 0,
    batch: int = 1,
    guidance: Guidance | None = None,
    scene: S.Scene | None = None,
) -> np.ndarray:
    """(batch, T+1, n) trajectories in radians, node 0 equal to ``condition.q0``.

    Ancestral updates x_t → x_s between consecutive strided steps use the
    posterior of the forward process with β_eff = 1 − ᾱ_t/ᾱ_s.  With guidance,
    the posterior mean is shifted by −scale·σ²·∇penalty (in normalized units).
    Noise is drawn only from the seeded generator, so results are deterministic
    per (weights, condition, steps, seed) and independent of the guidance scale's
    value when it is zero.
    """
    model, sched, spec = trained.model, trained.schedule, trained.spec
    cfg = model.config
    if guidance is not None and scene is None:
        raise ValueError("guidance needs the scene")
    rng = generator(seed)
    ab = sched.alpha_bar
    shape = (batch, cfg.T + 1, cfg.n)
    x = rng.standard_normal(shape)
    q0n = normalize(condition.q0, spec)
    span = (np.array(spec.q_upper) - np.array(spec.q_lower)) / 2
    with A.no_grad():
        ctx = model.context(np.repeat(q0n[None], batch, 0), np.repeat(condition.goal[None], batch, 0),
                            np.repeat(condition.tokens[None], batch, 0))
        ts = strided_steps(sched.K, steps)
        for k, t in enumerate(ts):
            s = ts[k + 1] if k + 1 < len(ts) else 0
            x[:, 0] = q_sample(q0n, t, rng.standard_normal(cfg.n), sched)  # inpaint the known start
            eps = model(x, np.full(batch, t), ctx).data.astype(float)
            x0 = np.clip((x - np.sqrt(1 - ab[t]) * eps) / np.sqrt(ab[t]), -1, 1)
            beta = 1 - ab[t] / ab[s]
            mean = (np.sqrt(ab[s]) * beta / (1 - ab[t])) * x0 + (np.sqrt(ab[t] / ab[s]) * (1 - ab[s]) / (1 - ab[t])) * x
            var = beta * (1 - ab[s]) / (1 - ab[t])
            if guidance is not None:
                grad = guidance_grad(denormalize(np.clip(mean, -1, 1), spec), scene, spec, guidance) * span
                if np.all(np.isfinite(grad)):
                    mean = mean - (guidance.scale * max(var, beta)) * grad
            x = mean + np.sqrt(var) * rng.standard_normal(shape) if s > 0 else mean
    q = denormalize(np.clip(x, -1, 1), spec)
    q[:, 0] = condition.q0
    return q


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
def save(trained: TrainedModel, path, extra: dict | None = None) -> None:
    state = trained.model.state_dict()
    cfg = asdict(trained.model.config)
    meta = {
        "kind": "denoiser",
        "config": cfg,
        "arch": A.architecture_hash(state, cfg),
        "schedule": trained.schedule.to_dict(),
        "arm": trained.spec.digest(),
        **trained.meta,
        **(extra or {}),
    }
    A.save_weights(path, state, meta)


def load(path, spec: ArmSpec) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing denoiser weights: {path}")
    state, meta = A.load_weights(path)
    if meta.get("kind") != "denoiser":
        raise A.WeightFormatError(f"{path}: not denoiser weights (kind={meta.get('kind')!r})")
    if A.architecture_hash(state, meta["config"]) != meta.get("arch"):
        raise A.WeightFormatError(f"{path}: architecture hash mismatch")
    if meta.get("arm") != spec.digest():
        raise A.WeightFormatError(f"{path}: trained for arm {meta.get('arm')}, not {spec.digest()}")
    model = Denoiser(DenoiserConfig(**meta["config"]))
    model.load_state_dict(state)
    sched = NoiseSchedule(np.array(meta["schedule"]["betas"]))
    return TrainedModel(model, sched, spec, {k: v for k, v in meta.items() if k in ("train", "seed", "records", "env")})


def config_json(cfg: DenoiserConfig, tc: DiffusionTrainConfig) -> str:
    return json.dumps({"model": asdict(cfg), "train": asdict(tc)}, indent=1, sort_keys=True)

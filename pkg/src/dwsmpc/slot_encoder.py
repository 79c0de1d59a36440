"""Object-centric scene encoder: CNN backbone, slot attention, spatial-broadcast decoder.

Images are (H, W, 3) arrays in [0, 1] in NHWC layout.  Slots are initialised
i.i.d. from one learned Gaussian, so the encoder is equivariant to the order of
the initial noise draws (bit-exact: the slot softmax sums in sorted order and
every other operation acts on slots row by row).
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as A
from . import scene as S
from .autodiff import nn
from .rng import derive_seed, generator


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class SlotConfig:
    n_slots: int = 4
    dim: int = 32
    iterations: int = 3
    image_size: int = 64
    channels: int = 32  # backbone width
    mlp_hidden: int = 64
    decoder_hidden: int = 64
    decoder_size: int = 32  # broadcast grid; upsampled to image_size
    fourier_bands: int = 3

    def __post_init__(self):
        if self.n_slots < 2 or self.dim < 8 or self.iterations < 1:
            raise ValueError("slot config needs n_slots >= 2, dim >= 8, iterations >= 1")
        if self.image_size % 4 or self.image_size % self.decoder_size:
            raise ValueError("image size must be divisible by 4 and by the decoder grid")

    @property
    def feature_size(self) -> int:
        return self.image_size // 4


@dataclass
class SlotSet:
    slots: np.ndarray  # (N, D)
    masks: np.ndarray  # (N, h, w) attention over slots from the final iteration

    def __len__(self):
        return len(self.slots)


def linear_grid(size: int) -> np.ndarray:
    """(size², 4) position features (x, y, 1 - x, 1 - y) at pixel centers, row-major."""
    c = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(c, c, indexing="ij")
    return np.stack([x, y, 1 - x, 1 - y], axis=-1).reshape(-1, 4).astype(np.float32)


def fourier_grid(size: int, bands: int) -> np.ndarray:
    """(size², 2 + 4·bands) position features: coordinates in [-1, 1] plus sin/cos bands."""
    g = linear_grid(size)[:, :2] * 2 - 1
    feats = [g]
    for k in range(bands):
        feats += [np.sin(np.pi * 2**k * g), np.cos(np.pi * 2**k * g)]
    return np.concatenate(feats, axis=1).astype(np.float32)


class SlotAttention(nn.Module):
    def __init__(self, cfg: SlotConfig, in_dim: int, rng: np.random.Generator):
        d = cfg.dim
        self.dim = d
        self.iterations = cfg.iterations
        self.norm_inputs = nn.LayerNorm(in_dim)
        self.norm_slots = nn.LayerNorm(d)
        self.norm_mlp = nn.LayerNorm(d)
        self.to_q = nn.Linear(d, d, rng, bias=False)
        self.to_k = nn.Linear(in_dim, d, rng, bias=False)
        self.to_v = nn.Linear(in_dim, d, rng, bias=False)
        self.gru = nn.GRUCell(d, d, rng)
        self.mlp = nn.MLP([d, cfg.mlp_hidden, d], rng)
        self.mu = nn.parameter(rng.normal(0, d**-0.5, size=d))
        self.log_sigma = nn.parameter(np.full(d, np.log(d**-0.5)))

    def forward(self, features: A.Tensor, noise: np.ndarray, eps: float = 1e-8):
        """features (B, P, C), noise (B, N, D) → slots (B, N, D), attention (B, P, N)."""
        b, n, d = noise.shape
        slots = self.mu + A.exp(self.log_sigma) * A.as_tensor(noise.astype(np.float32))
        x = self.norm_inputs(features)
        k, v = self.to_k(x), self.to_v(x)
        attn = None
        for _ in range(self.iterations):
            prev = slots
            q = self.to_q(self.norm_slots(slots))
            logits = A.matmul(k, q.swapaxes(-1, -2)) * (d**-0.5)
            attn = A.softmax_sorted(logits, axis=-1)  # competition over slots
            w = attn + eps
            w = w / w.sum(axis=1, keepdims=True)  # weighted mean over pixels
            updates = A.matmul(w.swapaxes(-1, -2), v)
            slots = self.gru(updates.reshape(b * n, d), prev.reshape(b * n, d)).reshape(b, n, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn


class SlotModel(nn.Module):
    """Encoder and decoder parameters for one :class:`SlotConfig`."""

    def __init__(self, cfg: SlotConfig = SlotConfig(), seed: int = 0):
        rng = generator(seed)
        c = cfg.channels
        self.config = cfg
        self.convs = [
            nn.Conv2d(3, c, 5, rng, stride=2, padding=2),
            nn.Conv2d(c, c, 5, rng, stride=2, padding=2),
            nn.Conv2d(c, c, 3, rng, padding=1),
            nn.Conv2d(c, c, 3, rng, padding=1),
        ]
        self.pos_enc = nn.Linear(4, c, rng)
        self.feat_norm = nn.LayerNorm(c)
        self.feat_mlp = nn.MLP([c, c, c], rng)
        self.attention = SlotAttention(cfg, c, rng)
        h = cfg.decoder_hidden
        self.dec_slot = nn.Linear(cfg.dim, h, rng)
        self.dec_pos = nn.Linear(2 + 4 * cfg.fourier_bands, h, rng, bias=False)
        self.dec_mlp = nn.MLP([h, h, h, 4], rng, zero_last=True)  # starts as a flat image
        self._enc_grid = linear_grid(cfg.feature_size)
        self._dec_grid = fourier_grid(cfg.decoder_size, cfg.fourier_bands)

    # -- encoder ------------------------------------------------------------
    def features(self, images: np.ndarray) -> A.Tensor:
        x = A.as_tensor(np.asarray(images, np.float32) * 2 - 1)
        for conv in self.convs:
            x = A.relu(conv(x))
        b, h, w, c = x.shape
        x = x.reshape(b, h * w, c) + self.pos_enc(A.as_tensor(self._enc_grid))
        return self.feat_mlp(self.feat_norm(x))

    def encode_batch(self, images: np.ndarray, noise: np.ndarray):
        """images (B, H, W, 3), noise (B, N, D) → slots (B, N, D), attention (B, P, N)."""
        return self.attention(self.features(images), noise)

    # -- decoder ------------------------------------------------------------
    def decode_batch(self, slots: A.Tensor):
        """slots (B, N, D) → image (B, H, W, 3), alpha masks (B, N, H, W)."""
        cfg = self.config
        b, n, _ = slots.shape
        r = cfg.decoder_size
        h = A.relu(self.dec_slot(slots).reshape(b, n, 1, -1) + self.dec_pos(A.as_tensor(self._dec_grid)))
        out = self.dec_mlp(h)  # (B, N, r², 4)
        rgb = out[..., :3]
        alpha = A.softmax(out[..., 3:], axis=1)
        img = (alpha * rgb).sum(axis=1).reshape(b, r, r, 3)
        alpha = alpha.reshape(b, n, r, r)
        up = cfg.image_size // r
        if up > 1:
            img = A.repeat_interleave(A.repeat_interleave(img, up, 1), up, 2)
            alpha = A.repeat_interleave(A.repeat_interleave(alpha, up, 2), up, 3)
        return img, alpha

    def reconstruction_loss(self, images: np.ndarray, noise: np.ndarray) -> A.Tensor:
        slots, _ = self.encode_batch(images, noise)
        img, _ = self.decode_batch(slots)
        return A.mse_loss(img, A.as_tensor(np.asarray(images, np.float32)))

    def init_noise(self, rng, batch: int) -> np.ndarray:
        cfg = self.config
        return generator(rng).standard_normal((batch, cfg.n_slots, cfg.dim)).astype(np.float32)


# ---------------------------------------------------------------------------
# single-image API
# ---------------------------------------------------------------------------
def encode(image: np.ndarray, model: SlotModel, seed: int = 0, noise: np.ndarray | None = None) -> SlotSet:
    """Slot set of one (H, W, 3) image; deterministic per seed (or per explicit init noise)."""
    cfg = model.config
    if image.shape != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"expected image of shape {(cfg.image_size, cfg.image_size, 3)}, got {image.shape}")
    if noise is None:
        noise = model.init_noise(seed, 1)[0]
    with A.no_grad():
        slots, attn = model.encode_batch(image[None], noise[None])
    f = cfg.feature_size
    return SlotSet(slots.data[0].copy(), attn.data[0].T.reshape(cfg.n_slots, f, f).copy())


def decode(slots: SlotSet | np.ndarray, model: SlotModel):
    """Reconstructed (H, W, 3) image and (N, H, W) alpha masks."""
    arr = slots.slots if isinstance(slots, SlotSet) else np.asarray(slots)
    with A.no_grad():
        img, alpha = model.decode_batch(A.as_tensor(arr[None].astype(np.float32)))
    return img.data[0], alpha.data[0]


def encode_scene(scene: S.Scene, model: SlotModel, seed: int = 0) -> SlotSet:
    return encode(S.render(scene, model.config.image_size).astype(np.float32), model, seed)


# ---------------------------------------------------------------------------
# data and training
# ---------------------------------------------------------------------------
def render_dataset(envs, count: int, seed: int, resolution: int = 64) -> np.ndarray:
    """``count`` renders (uint8) of scenes drawn round-robin from ``envs``."""
    out = np.empty((count, resolution, resolution, 3), np.uint8)
    for i in range(count):
        env = envs[i % len(envs)]
        sc = S.sample_scene(env, derive_seed(seed, i))
        out[i] = np.round(S.render(sc, resolution) * 255)
    return out


def as_float(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / 255 if images.dtype == np.uint8 else images.astype(np.float32)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    batch_size: int = 32
    epochs: int = 6
    warmup: int = 200
    decay_steps: int = 4000  # lr halves every decay_steps
    clip_norm: float = 1.0
    max_steps: int | None = None  # optional cap across epochs

    def lr_at(self, step: int) -> float:
        return self.lr * min(1.0, (step + 1) / self.warmup) * 0.5 ** (step / self.decay_steps)


def validation_loss(model: SlotModel, images: np.ndarray, seed: int = 0, batch: int = 64) -> float:
    total = 0.0
    with A.no_grad():
        for i in range(0, len(images), batch):
            x = as_float(images[i : i + batch])
            total += float(model.reconstruction_loss(x, model.init_noise(derive_seed(seed, i), len(x))).item()) * len(x)
    return total / len(images)


def train(
    images: np.ndarray,
    config: SlotConfig = SlotConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    val_images: np.ndarray | None = None,
    checkpoint_dir=None,
    log=None,
):
    """Train by reconstruction; returns (model, history).

    A checkpoint is written after every epoch when ``checkpoint_dir`` is set;
    a non-finite loss raises :class:`TrainingDiverged` naming the last one.
    """
    model = SlotModel(config, seed)
    mean = as_float(images[: min(len(images), 1000)]).reshape(-1, 3).mean(axis=0)
    model.dec_mlp.layers[-1].bias.data[:3] = mean  # untrained output is the mean color
    params = model.parameters()
    opt = A.Adam(params, lr=train_cfg.lr, clip_norm=train_cfg.clip_norm)
    rng = generator(derive_seed(seed, 1))
    history = {"loss": [], "val": [], "epoch_seconds": []}
    if val_images is not None:
        history["val"].append(validation_loss(model, val_images))
    last_ckpt = None
    step = 0
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(images))
        for i in range(0, len(order) - train_cfg.batch_size + 1, train_cfg.batch_size):
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                break
            x = as_float(images[order[i : i + train_cfg.batch_size]])
            loss = model.reconstruction_loss(x, model.init_noise(rng, len(x)))
            value = float(loss.item())
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step}", last_ckpt)
            opt.zero_grad()
            A.backward(loss)
            opt.state.lr = train_cfg.lr_at(step)
            opt.step()
            history["loss"].append(value)
            step += 1
            if log is not None and step % 50 == 0:
                log(f"step {step} loss {np.mean(history['loss'][-50:]):.5f}")
        history["epoch_seconds"].append(time.perf_counter() - t0)
        if val_images is not None:
            history["val"].append(validation_loss(model, val_images))
            if log is not None:
                log(f"epoch {epoch} val {history['val'][-1]:.5f}")
        if checkpoint_dir is not None:
            last_ckpt = str(Path(checkpoint_dir) / f"slots_epoch{epoch}.dwsw")
            save(model, last_ckpt, {"epoch": epoch, "step": step})
        if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
            break
    return model, history


# ---------------------------------------------------------------------------
# evaluation and persistence
# ---------------------------------------------------------------------------
def mask_purity(model: SlotModel, scenes, seed: int = 0, threshold: float = 0.5) -> float:
    """Fraction of foreground obstacles whose pixels put ≥ threshold attention mass on one slot."""
    f = model.config.feature_size
    hits = total = 0
    for i, sc in enumerate(scenes):
        if not sc.obstacles:
            continue
        ss = encode_scene(sc, model, derive_seed(seed, i))
        masks = S.obstacle_masks(sc, f)
        for m in masks:
            if not m.any():
                continue
            total += 1
            share = ss.masks[:, m].mean(axis=1)
            hits += bool(share.max() >= threshold)
    return hits / total if total else float("nan")


def save(model: SlotModel, path, meta: dict | None = None) -> None:
    state = model.state_dict()
    cfg = asdict(model.config)
    A.save_weights(path, state, {"kind": "slot_encoder", "config": cfg, "arch": A.architecture_hash(state, cfg), **(meta or {})})


def load(path) -> SlotModel:
    state, meta = A.load_weights(path)
    if meta.get("kind") != "slot_encoder":
        raise A.WeightFormatError(f"{path}: not slot-encoder weights (kind={meta.get('kind')!r})")
    model = SlotModel(SlotConfig(**meta["config"]))
    if A.architecture_hash(state, meta["config"]) != meta.get("arch"):
        raise A.WeightFormatError(f"{path}: architecture hash mismatch")
    model.load_state_dict(state)
    return model


def config_json(config: SlotConfig, train_cfg: TrainConfig) -> str:
    return json.dumps({"model": asdict(config), "train": asdict(train_cfg)}, indent=1, sort_keys=True)

"""Conditional denoising diffusion in pixel space.

Forward process: ``z_s = sqrt(abar_s) z0 + sqrt(1 - abar_s) eps`` with
``abar_s`` the running product of per-step retention factors over a linear
beta schedule.  The denoiser is an MLP that predicts the clean image
directly from (noisy image, sinusoidal timestep embedding, condition
embedding); reconstruction runs the deterministic reverse updates that
re-derive the implied noise at each step and re-noise the current clean
estimate to the next (lower) timestep.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, DimensionError, DomainError
from .optim import AdamConfig, ParamStore

TIME_EMBED_DIM = 32
OUTPUT_BAND = 1.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise coefficients; arrays are float64, index 0 = s=1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.beta.shape[0]

    def _check_s(self, s: int) -> int:
        s = int(s)
        if not 1 <= s <= self.n_steps:
            raise DomainError(f"timestep s must be in [1, {self.n_steps}], got {s}")
        return s

    def alpha_bar_at(self, s: int) -> float:
        """Cumulative retention at 1-based timestep ``s``."""
        return float(self.alpha_bar[self._check_s(s) - 1])


def make_schedule(n_steps: int, beta_start: float = 1e-4,
                  beta_end: float = 0.06) -> NoiseSchedule:
    """Linear-beta schedule with running-product cumulative retention.

    The default range is chosen so the terminal ``alpha_bar`` falls below
    0.05 at 100 steps; schedules that retain more terminal signal are
    allowed but warned about, since scoring quality degrades when the
    forward process barely corrupts the input.
    """
    if n_steps < 2:
        raise DomainError(f"n_steps must be >= 2, got {n_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise DomainError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] >= 0.05:
        warnings.warn(
            f"terminal alpha_bar {alpha_bar[-1]:.4f} >= 0.05; the schedule "
            "retains substantial signal at its last step",
            stacklevel=2,
        )
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_noise(schedule: NoiseSchedule, z0: np.ndarray, s: int,
                  eps: np.ndarray) -> np.ndarray:
    """Noise ``z0`` to timestep ``s``: sqrt(abar) z0 + sqrt(1-abar) eps.

    ``eps`` must be drawn by the caller (standard normal, same shape as
    ``z0``).  No clamping is applied.  The result dtype follows ``z0``.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != image shape {z0.shape}")
    abar = schedule.alpha_bar_at(s)
    dt = z0.dtype if z0.dtype in (np.float32, np.float64) else np.dtype(np.float32)
    return dt.type(math.sqrt(abar)) * z0.astype(dt) \
        + dt.type(math.sqrt(1.0 - abar)) * eps.astype(dt)


def invert_forward_noise(schedule: NoiseSchedule, z_s: np.ndarray,
                         x0: np.ndarray, s: int) -> np.ndarray:
    """Recover the noise implied by (z_s, x0) at timestep ``s``.

    Algebraic inverse of ``forward_noise``: feeding the true (z0, eps)
    pair returns eps exactly up to rounding.
    """
    abar = schedule.alpha_bar_at(s)
    return (z_s - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)


def timestep_embedding(s_values, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (n, dim)."""
    s = np.asarray(s_values, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = s * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return emb.astype(np.float32)


class DenoiserNet:
    """Condition-injected MLP predicting the clean image from a noisy one.

    Input is the concatenation (flattened noisy image, timestep embedding,
    condition vector); the output passes through a smooth squash keeping
    predictions inside [-1.5, 1.5].
    """

    def __init__(self, n_pixels: int, cond_dim: int, hidden_sizes: tuple,
                 rng: np.random.Generator, time_dim: int = TIME_EMBED_DIM,
                 dtype=np.float32):
        self.n_pixels = n_pixels
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.hidden_sizes = tuple(hidden_sizes)
        self.store = ParamStore(dtype=dtype)
        sizes = (n_pixels + time_dim + cond_dim, *self.hidden_sizes, n_pixels)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.store.add(f"den.w{i}", w)
            self.store.add(f"den.b{i}", np.zeros(fan_out))
        self.n_layers = len(self.hidden_sizes) + 1

    def _forward(self, x: ag.Tensor) -> ag.Tensor:
        h = x
        for i in range(self.n_layers):
            h = ag.add(ag.matmul(h, self.store[f"den.w{i}"]), self.store[f"den.b{i}"])
            if i < self.n_layers - 1:
                h = ag.silu(h)
        return ag.soft_clamp(h, OUTPUT_BAND)

    def _assemble(self, z_s: np.ndarray, s_values: np.ndarray,
                  cond: np.ndarray) -> np.ndarray:
        if z_s.shape[1] != self.n_pixels:
            raise DimensionError(f"noisy batch has {z_s.shape[1]} pixels, "
                                 f"expected {self.n_pixels}")
        if cond.shape != (z_s.shape[0], self.cond_dim):
            raise DimensionError(f"condition shape {cond.shape} != "
                                 f"({z_s.shape[0]}, {self.cond_dim})")
        t_emb = timestep_embedding(s_values, self.time_dim)
        return np.concatenate(
            [z_s.astype(np.float32), t_emb, cond.astype(np.float32)], axis=1
        )

    def predict_x0(self, z_s: np.ndarray, s_values, cond: np.ndarray) -> np.ndarray:
        """Deterministic clean-image prediction for a batch (no gradients)."""
        z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float32))
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float32))
        s_arr = np.broadcast_to(np.asarray(s_values), (z_s.shape[0],))
        with ag.no_grad():
            return self._forward(ag.Tensor(self._assemble(z_s, s_arr, cond))).data

    def training_loss(self, z0: np.ndarray, s_values: np.ndarray,
                      eps: np.ndarray, cond: np.ndarray,
                      schedule: NoiseSchedule) -> ag.Tensor:
        """MSE between the predicted and true clean images for one batch."""
        coef_sig = np.sqrt(schedule.alpha_bar[np.asarray(s_values) - 1])[:, None]
        coef_noise = np.sqrt(1.0 - schedule.alpha_bar[np.asarray(s_values) - 1])[:, None]
        z_s = (coef_sig * z0 + coef_noise * eps).astype(np.float32)
        x = ag.Tensor(self._assemble(z_s, s_values, cond))
        return ag.mse_loss(self._forward(x), ag.Tensor(z0))

    def save(self, path, schedule: NoiseSchedule, s_star_default: int) -> None:
        arrays = dict(self.store.named_arrays())
        arrays["meta/denoiser"] = np.array(
            [self.n_pixels, self.cond_dim, self.time_dim, *self.hidden_sizes],
            dtype=np.float32,
        )
        arrays["meta/schedule"] = np.array(
            [schedule.n_steps, schedule.beta[0], schedule.beta[-1], s_star_default],
            dtype=np.float32,
        )
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path) -> tuple["DenoiserNet", NoiseSchedule, int]:
        """Rebuild (net, schedule, default injection timestep) from disk."""
        arrays = load_checkpoint(path)
        if "meta/denoiser" not in arrays or "meta/schedule" not in arrays:
            raise ContractError(f"{path}: not a denoiser checkpoint (missing metadata)")
        meta = arrays["meta/denoiser"]
        n_pixels, cond_dim, time_dim = (int(v) for v in meta[:3])
        hidden = tuple(int(v) for v in meta[3:])
        sched_meta = arrays["meta/schedule"]
        schedule = make_schedule(int(sched_meta[0]), float(sched_meta[1]),
                                 float(sched_meta[2]))
        net = cls(n_pixels, cond_dim, hidden, np.random.default_rng(0), time_dim)
        net.store.load_arrays({k: v for k, v in arrays.items() if not k.startswith("meta/")})
        return net, schedule, int(sched_meta[3])


def train_denoiser(images: np.ndarray, tags, conditions: np.ndarray,
                   schedule: NoiseSchedule, epochs: int = 10,
                   batch_size: int = 32, learning_rate: float = 3e-3,
                   hidden_sizes: tuple = (256, 256), seed: int = 0,
                   log_fn=None) -> tuple[DenoiserNet, list]:
    """Train the conditional denoiser on ID images only.

    Each step draws a batch, a uniform timestep and fresh Gaussian noise
    per sample, noises the batch forward, and minimises the MSE between
    the prediction and the clean images.  ``tags`` guards the unsupervised
    premise: any non-"id" record aborts with ContractError.

    Returns the net and the per-epoch mean loss history.
    """
    images = np.asarray(images, dtype=np.float32)
    bad = sorted({t for t in tags if t != "id"})
    if bad:
        raise ContractError(f"denoiser training fed non-ID records: {bad}")
    if conditions.shape[0] != images.shape[0]:
        raise DimensionError(
            f"{conditions.shape[0]} conditions for {images.shape[0]} images"
        )
    rng = np.random.default_rng(seed)
    net = DenoiserNet(images.shape[1], conditions.shape[1], hidden_sizes, rng)
    adam = AdamConfig(learning_rate=learning_rate)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(images.shape[0])
        losses = []
        for start in range(0, images.shape[0], batch_size):
            idx = order[start : start + batch_size]
            z0 = images[idx]
            s = rng.integers(1, schedule.n_steps + 1, size=idx.size)
            eps = rng.standard_normal((idx.size, images.shape[1])).astype(np.float32)
            loss = net.training_loss(z0, s, eps, conditions[idx], schedule)
            net.store.zero_grad()
            loss.backward()
            net.store.adam_step(adam)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log_fn is not None:
            log_fn(epoch, history[-1])
    return net, history


@dataclass(frozen=True)
class ReconstructionConfig:
    """How an input is noised and deterministically denoised for scoring."""

    s_star: int = 50
    n_steps: int = 10
    seed: int = 0

    def validate(self, schedule: NoiseSchedule) -> None:
        if not 1 <= self.s_star <= schedule.n_steps:
            raise DomainError(
                f"s_star must be in [1, {schedule.n_steps}], got {self.s_star}"
            )
        if not 1 <= self.n_steps <= self.s_star:
            raise DomainError(
                f"n_steps must be in [1, s_star={self.s_star}], got {self.n_steps}"
            )

    def with_seed(self, seed: int) -> "ReconstructionConfig":
        return replace(self, seed=seed)


def reverse_timesteps(s_star: int, n_steps: int) -> np.ndarray:
    """Evenly spaced strictly-decreasing timesteps from s_star down to 1."""
    if n_steps == 1:
        return np.array([s_star], dtype=np.int64)
    raw = np.linspace(s_star, 1.0, n_steps)
    return np.floor(raw + 0.5).astype(np.int64)


def reconstruct_batch(net: DenoiserNet, schedule: NoiseSchedule,
                      images: np.ndarray, conditions: np.ndarray,
                      cfg: ReconstructionConfig, seeds) -> np.ndarray:
    """Reconstruct a batch of images through the partial-noising loop.

    Each image is noised to ``cfg.s_star`` with noise drawn from its own
    seed, then walked down the evenly spaced timestep ladder: predict the
    clean image, re-derive the implied noise, and re-noise the prediction
    to the next timestep.  The last prediction, clamped to [-1, 1], is the
    reconstruction.  Per-sample seeds make results independent of batching
    and evaluation order.
    """
    cfg.validate(schedule)
    images = np.atleast_2d(np.asarray(images, dtype=np.float32))
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float32))
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1)
    if seeds.shape[0] != images.shape[0]:
        raise DimensionError(f"{seeds.shape[0]} seeds for {images.shape[0]} images")
    eps = np.stack([
        np.random.default_rng(int(s)).standard_normal(images.shape[1])
        for s in seeds
    ]).astype(np.float32)
    steps = reverse_timesteps(cfg.s_star, cfg.n_steps)
    z = forward_noise(schedule, images, int(steps[0]), eps)
    x0 = None
    for i, s in enumerate(steps):
        x0 = net.predict_x0(z, int(s), conditions)
        if i == len(steps) - 1:
            break
        s_next = int(steps[i + 1])
        eps_hat = invert_forward_noise(schedule, z, x0, int(s))
        abar_next = schedule.alpha_bar_at(s_next)
        z = (np.float32(math.sqrt(abar_next)) * x0
             + np.float32(math.sqrt(1.0 - abar_next)) * eps_hat).astype(np.float32)
    return np.clip(x0, -1.0, 1.0)


def reconstruct(net: DenoiserNet, schedule: NoiseSchedule, image: np.ndarray,
                condition: np.ndarray, cfg: ReconstructionConfig) -> np.ndarray:
    """Single-image reconstruction using ``cfg.seed`` for the noise draw."""
    out = reconstruct_batch(net, schedule, image.reshape(1, -1),
                            condition.reshape(1, -1), cfg, [cfg.seed])
    return out[0].reshape(image.shape)


def reconstruction_error(original: np.ndarray, recon: np.ndarray) -> float:
    """Mean squared pixel difference between an input and its reconstruction."""
    original = np.asarray(original)
    recon = np.asarray(recon)
    if original.shape != recon.shape:
        raise DimensionError(
            f"shape mismatch {original.shape} vs {recon.shape}"
        )
    diff = original.astype(np.float64) - recon.astype(np.float64)
    return float(np.mean(diff * diff))


def reconstruction_errors(net: DenoiserNet, schedule: NoiseSchedule,
                          images: np.ndarray, conditions: np.ndarray,
                          cfg: ReconstructionConfig, seeds) -> np.ndarray:
    """Per-sample reconstruction errors for a batch (fixed chunking)."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float32))
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1)
    errors = np.empty(images.shape[0], dtype=np.float64)
    chunk = 128
    for start in range(0, images.shape[0], chunk):
        sl = slice(start, min(start + chunk, images.shape[0]))
        recon = reconstruct_batch(net, schedule, images[sl], conditions[sl],
                                  cfg, seeds[sl])
        diff = images[sl].astype(np.float64) - recon.astype(np.float64)
        errors[sl] = np.mean(diff * diff, axis=1)
    return errors

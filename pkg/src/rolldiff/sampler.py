"""Guided reverse diffusion: transcription, generation and inpainting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .features import FRAME_RATE, MASK_VALUE, SEGMENT_FRAMES, apply_mask
from .model import RollDenoiser, predict_x0, predict_x0_uncond
from .pianoroll import DEFAULT_THRESHOLD, PianoRoll, binarize
from .schedule import SIGMA_MODES, NoiseSchedule


@dataclass
class SamplerConfig:
    w: float = 0.5
    sigma_mode: str = "ddpm"
    seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    record_every: int | None = None

    def __post_init__(self):
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class SampleResult:
    raw: np.ndarray  # (B, 88, frames) posteriorgram x_0
    rolls: list[PianoRoll]
    trajectory: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def roll(self) -> PianoRoll:
        return self.rolls[0]


def cfg_combine(x0_cond, x0_uncond, w: float):
    """``(1 + w) * cond - w * uncond``; exact at w=0 (cond) and w=-1 (uncond)."""
    if tuple(x0_cond.shape) != tuple(x0_uncond.shape):
        raise ValueError(f"shape mismatch {tuple(x0_cond.shape)} vs {tuple(x0_uncond.shape)}")
    return (1 + w) * x0_cond - w * x0_uncond


def epsilon_from_x0(x_t, x0_hat, t: int, schedule: NoiseSchedule):
    """Noise implied by ``x_t`` and a clean-roll estimate at step ``t``."""
    schedule.check_step(t)
    ab = float(schedule.alpha_bars[t])
    return (x_t - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)


def reverse_step(x_t, x0_hat, t: int, noise, schedule: NoiseSchedule, sigma_mode: str | None = None):
    """One step ``x_t -> x_{t-1}``; ``noise`` is ignored when sigma is zero."""
    mode = sigma_mode or schedule.sigma_mode
    schedule.check_step(t)
    sigma = 0.0 if mode == "ddim" else float(schedule.sigmas_ddpm[t])
    ab_prev = float(schedule.alpha_bars[t - 1])
    var = 1.0 - ab_prev - sigma**2
    if var < 0:
        raise ArithmeticError(f"negative direction variance {var} at t={t}")
    eps_hat = epsilon_from_x0(x_t, x0_hat, t, schedule)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(var) * eps_hat
    if sigma != 0.0:
        out = out + sigma * noise
    return out


def _guided_x0(model, x_t, t, cond, w):
    # skipping a branch whose weight is exactly zero gives the same bits
    if w == -1:
        return predict_x0_uncond(model, x_t, t)
    x0_cond = predict_x0(model, x_t, t, cond)
    if w == 0:
        return x0_cond
    return cfg_combine(x0_cond, predict_x0_uncond(model, x_t, t), w)


@torch.no_grad()
def run_reverse_process(
    denoise,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    cfg: SamplerConfig,
    device="cpu",
):
    """Reverse loop from pure noise at ``t=T`` down to ``x_0``.

    ``denoise(x_t, t)`` returns the guided clean-roll estimate. Noise comes
    from a generator seeded by ``cfg.seed``; the draw order is x_T, then one
    draw per step for ``t > 1``.
    """
    gen = torch.Generator(device="cpu").manual_seed(cfg.seed)
    x = torch.randn(shape, generator=gen).to(device)
    trajectory = []
    for t in range(schedule.T, 0, -1):
        noise = torch.randn(shape, generator=gen).to(device) if t > 1 else torch.zeros(shape, device=device)
        x0_hat = denoise(x, t)
        x = reverse_step(x, x0_hat, t, noise, schedule, cfg.sigma_mode)
        if cfg.record_every and (t - 1) % cfg.record_every == 0:
            trajectory.append((t - 1, x.cpu().numpy().copy()))
    return x, trajectory


def _batched_conditioner(c_mel, device) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(c_mel, dtype=np.float32), device=device)
    return c[None] if c.ndim == 2 else c


def _finish(x0: torch.Tensor, cfg: SamplerConfig, trajectory, frame_rate: float) -> SampleResult:
    raw = x0.cpu().numpy()
    rolls = [binarize(r, cfg.threshold, frame_rate) for r in raw]
    return SampleResult(raw, rolls, trajectory)


def sample(
    model: RollDenoiser,
    schedule: NoiseSchedule,
    c_mel,
    cfg: SamplerConfig = SamplerConfig(),
    frame_rate: float = FRAME_RATE,
) -> SampleResult:
    """Transcribe a conditioner ``(229, frames)`` or batch ``(B, 229, frames)``."""
    if model.cfg.num_steps != schedule.T:
        raise ValueError(f"model trained for T={model.cfg.num_steps}, schedule has T={schedule.T}")
    device = next(model.parameters()).device
    cond = _batched_conditioner(c_mel, device)
    shape = (cond.shape[0], model.cfg.roll_channels, cond.shape[2])
    model.eval()
    x0, traj = run_reverse_process(lambda x, t: _guided_x0(model, x, t, cond, cfg.w), schedule, shape, cfg, device)
    return _finish(x0, cfg, traj, frame_rate)


def generate(
    model: RollDenoiser,
    schedule: NoiseSchedule,
    frames: int = SEGMENT_FRAMES,
    cfg: SamplerConfig = SamplerConfig(w=-1.0),
    batch: int = 1,
    frame_rate: float = FRAME_RATE,
) -> SampleResult:
    """Unconditional generation; ``cfg.w`` is forced to -1."""
    cfg = SamplerConfig(-1.0, cfg.sigma_mode, cfg.seed, cfg.threshold, cfg.record_every)
    c = np.full((batch, model.cfg.mel_bins, frames), MASK_VALUE, dtype=np.float32)
    return sample(model, schedule, c, cfg, frame_rate)


def inpaint(
    model: RollDenoiser,
    schedule: NoiseSchedule,
    c_mel,
    mask,
    cfg: SamplerConfig = SamplerConfig(),
    frame_rate: float = FRAME_RATE,
) -> SampleResult:
    """Transcribe unmasked frames and generate masked ones (mask set to -1)."""
    return sample(model, schedule, apply_mask(c_mel, mask), cfg, frame_rate)


@torch.no_grad()
def predict_discriminative(
    model: RollDenoiser, c_mel, threshold: float = DEFAULT_THRESHOLD, frame_rate: float = FRAME_RATE
) -> SampleResult:
    """Baseline path: one forward pass with ``x_t = 0`` and ``t = 1``."""
    device = next(model.parameters()).device
    cond = _batched_conditioner(c_mel, device)
    x_t = torch.zeros((cond.shape[0], model.cfg.roll_channels, cond.shape[2]), device=device)
    model.eval()
    x0 = predict_x0(model, x_t, 1, cond)
    return _finish(x0, SamplerConfig(w=0.0, threshold=threshold), [], frame_rate)


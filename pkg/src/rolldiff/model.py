"""Gated residual 1D-conv denoiser that predicts the clean roll directly."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import MASK_VALUE, N_MELS
from .pianoroll import NUM_PITCHES


@dataclass
class DenoiserConfig:
    residual_channels: int = 512
    num_layers: int = 15
    kernel_size: int = 9
    dilation_pattern: list[int] = field(default_factory=lambda: [1])
    mel_bins: int = N_MELS
    roll_channels: int = NUM_PITCHES
    time_embedding_dim: int = 128
    time_hidden: int = 512
    num_steps: int = 200

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not self.dilation_pattern or min(self.dilation_pattern) < 1:
            raise ValueError(f"dilation entries must be >= 1, got {self.dilation_pattern}")
        for name in ("residual_channels", "num_layers", "mel_bins", "roll_channels", "time_hidden", "num_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.time_embedding_dim <= 0 or self.time_embedding_dim % 2:
            raise ValueError("time_embedding_dim must be a positive even integer")
        self.dilation_pattern = [int(d) for d in self.dilation_pattern]

    def dilations(self) -> list[int]:
        pat = self.dilation_pattern
        return [pat[i % len(pat)] for i in range(self.num_layers)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def receptive_field(cfg: DenoiserConfig) -> int:
    """Frames of input that can influence one output frame."""
    return 1 + sum((cfg.kernel_size - 1) * d for d in cfg.dilations())


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = 10.0 ** (torch.arange(half, dtype=torch.float32, device=t.device) * 4.0 / max(half - 1, 1))
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.dim = cfg.time_embedding_dim
        self.num_steps = cfg.num_steps
        self.proj1 = nn.Linear(cfg.time_embedding_dim, cfg.time_hidden)
        self.proj2 = nn.Linear(cfg.time_hidden, cfg.time_hidden)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = sinusoidal_embedding(t, self.dim).to(self.proj1.weight.dtype)
        x = F.silu(self.proj1(x))
        return F.silu(self.proj2(x))


class ResidualLayer(nn.Module):
    def __init__(self, channels: int, kernel_size: int, dilation: int, time_hidden: int, mel_bins: int):
        super().__init__()
        self.time_proj = nn.Linear(time_hidden, channels)
        self.mel_proj = nn.Conv1d(mel_bins, channels, 1)
        self.dilated_conv = nn.Conv1d(
            channels, 2 * channels, kernel_size, padding=dilation * (kernel_size - 1) // 2, dilation=dilation
        )
        self.out_proj = nn.Conv1d(channels, 2 * channels, 1)
        nn.init.kaiming_normal_(self.mel_proj.weight)
        nn.init.kaiming_normal_(self.dilated_conv.weight)
        nn.init.kaiming_normal_(self.out_proj.weight)

    def forward(self, x, temb, mel):
        h = x + self.time_proj(temb)[:, :, None] + self.mel_proj(mel)
        gate, filt = self.dilated_conv(h).chunk(2, dim=1)
        h = torch.sigmoid(gate) * torch.tanh(filt)
        residual, skip = self.out_proj(h).chunk(2, dim=1)
        return (x + residual) / math.sqrt(2.0), skip


class RollDenoiser(nn.Module):
    """``f(x_t, t, c_mel) -> x0_hat``, all tensors ``(B, channels, frames)``."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.residual_channels
        self.input_proj = nn.Conv1d(cfg.roll_channels, C, 1)
        self.time_embedding = TimeEmbedding(cfg)
        self.layers = nn.ModuleList(
            ResidualLayer(C, cfg.kernel_size, d, cfg.time_hidden, cfg.mel_bins) for d in cfg.dilations()
        )
        self.skip_proj = nn.Conv1d(C, C, 1)
        self.output_proj = nn.Conv1d(C, cfg.roll_channels, 1)
        nn.init.kaiming_normal_(self.input_proj.weight)
        nn.init.kaiming_normal_(self.skip_proj.weight)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, c_mel: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.input_proj(x_t))
        temb = self.time_embedding(t)
        skip_sum = 0
        for layer in self.layers:
            x, skip = layer(x, temb, c_mel)
            skip_sum = skip_sum + skip
        x = skip_sum / math.sqrt(len(self.layers))
        x = F.relu(self.skip_proj(x))
        return self.output_proj(x)

    def conditioner_parameters(self):
        for layer in self.layers:
            yield from layer.mel_proj.parameters()


def init_model(cfg: DenoiserConfig, seed: int = 0) -> RollDenoiser:
    """Build a denoiser with parameters fully determined by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RollDenoiser(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_step_tensor(t, batch: int, device) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long, device=device)
    if t.ndim == 0:
        t = t.expand(batch)
    return t.reshape(batch)


def predict_x0(model: RollDenoiser, x_t: torch.Tensor, t, c_mel: torch.Tensor) -> torch.Tensor:
    """Checked forward pass. ``t`` may be a scalar or one step per batch element."""
    cfg = model.cfg
    if x_t.ndim != 3 or x_t.shape[1] != cfg.roll_channels:
        raise ValueError(f"x_t must be (B, {cfg.roll_channels}, frames), got {tuple(x_t.shape)}")
    if c_mel.shape != (x_t.shape[0], cfg.mel_bins, x_t.shape[2]):
        raise ValueError(
            f"c_mel must be (B, {cfg.mel_bins}, frames) matching x_t {tuple(x_t.shape)}, got {tuple(c_mel.shape)}"
        )
    t = _as_step_tensor(t, x_t.shape[0], x_t.device)
    if t.min() < 1 or t.max() > cfg.num_steps:
        raise ValueError(f"diffusion step must lie in [1, {cfg.num_steps}]")
    return model(x_t, t, c_mel)


def predict_x0_uncond(model: RollDenoiser, x_t: torch.Tensor, t) -> torch.Tensor:
    """Unconditional branch: same weights, conditioner replaced by the -1 sentinel."""
    mask = torch.full((x_t.shape[0], model.cfg.mel_bins, x_t.shape[2]), MASK_VALUE, dtype=x_t.dtype, device=x_t.device)
    return predict_x0(model, x_t, t, mask)


def time_embedding(model: RollDenoiser, t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.min() < 1 or t.max() > model.cfg.num_steps:
        raise ValueError(f"diffusion step must lie in [1, {model.cfg.num_steps}]")
    return model.time_embedding(t)

"""Noise schedule and closed-form forward process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

ALPHA_START = 0.9999
ALPHA_END = 0.98

SIGMA_MODES = ("ddpm", "ddim")


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step tables, indexed by diffusion step ``t``.

    Index 0 holds the clean-data convention (``alpha_bars[0] == 1``); steps
    ``1..T`` hold the schedule proper. All tables are float64.
    """

    T: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas_ddpm: np.ndarray
    sigma_mode: str = "ddpm"

    def __post_init__(self):
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")
        for arr in (self.alphas, self.alpha_bars, self.sigmas_ddpm):
            if arr.shape != (self.T + 1,):
                raise ValueError("schedule tables must have length T + 1")
            arr.setflags(write=False)

    def with_mode(self, sigma_mode: str) -> "NoiseSchedule":
        return NoiseSchedule(self.T, self.alphas, self.alpha_bars, self.sigmas_ddpm, sigma_mode)

    def check_step(self, t) -> None:
        t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
        if t_arr.size and (t_arr.min() < 1 or t_arr.max() > self.T):
            raise ValueError(f"diffusion step must lie in [1, {self.T}], got {t_arr.min()}..{t_arr.max()}")

    def sigma(self, t: int) -> float:
        """Reverse-step noise scale; zero everywhere in DDIM mode."""
        self.check_step(t)
        if self.sigma_mode == "ddim":
            return 0.0
        return float(self.sigmas_ddpm[t])

    def forward_diffuse(self, x0, t, noise):
        """Corrupt ``x0`` to step ``t``: ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise``.

        Works on numpy arrays or torch tensors. ``t`` is a scalar, or one step
        per leading batch element.
        """
        if tuple(x0.shape) != tuple(noise.shape):
            raise ValueError(f"shape mismatch: roll {tuple(x0.shape)} vs noise {tuple(noise.shape)}")
        self.check_step(t)
        a = _coef(np.sqrt(self.alpha_bars), t, x0)
        b = _coef(np.sqrt(1.0 - self.alpha_bars), t, x0)
        return a * x0 + b * noise

    def to_table(self) -> str:
        """Plain-text audit table: one row per step ``t = 0..T``."""
        lines = [f"# sigma_mode={self.sigma_mode}", "t\talpha\talpha_bar\tsigma"]
        for t in range(self.T + 1):
            sigma = 0.0 if self.sigma_mode == "ddim" else self.sigmas_ddpm[t]
            lines.append(f"{t}\t{self.alphas[t]:.17g}\t{self.alpha_bars[t]:.17g}\t{sigma:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_table(cls, text: str) -> "NoiseSchedule":
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")][1:]
        mode = "ddpm"
        for ln in text.splitlines():
            if ln.startswith("# sigma_mode="):
                mode = ln.split("=", 1)[1].strip()
        vals = np.array([[float(v) for v in r.split("\t")] for r in rows])
        T = len(rows) - 1
        sched = build_linear_schedule(T)
        if not (np.array_equal(vals[:, 1], sched.alphas) and np.array_equal(vals[:, 2], sched.alpha_bars)):
            raise ValueError("schedule table does not match a linear schedule")
        return sched.with_mode(mode)


def _coef(table: np.ndarray, t, like):
    if isinstance(like, torch.Tensor):
        if isinstance(t, torch.Tensor):
            t = t.cpu().numpy()
        c = torch.as_tensor(table[np.asarray(t)], dtype=like.dtype, device=like.device)
    else:
        c = table[np.asarray(t)].astype(like.dtype if like.dtype.kind == "f" else np.float64)
    if c.ndim == 1:
        c = c.reshape((-1,) + (1,) * (like.ndim - 1))
    return c


def build_linear_schedule(T: int = 200, sigma_mode: str = "ddpm") -> NoiseSchedule:
    """Linear-in-alpha schedule from 0.9999 (t=1) to 0.98 (t=T), both ends included."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    alphas = np.empty(T + 1, dtype=np.float64)
    alphas[0] = 1.0
    steps = np.arange(T, dtype=np.float64)
    alphas[1:] = ALPHA_START + steps * (ALPHA_END - ALPHA_START) / (T - 1)
    alphas[T] = ALPHA_END
    alpha_bars = np.cumprod(alphas)
    sigmas = np.zeros(T + 1, dtype=np.float64)
    sigmas[1:] = np.sqrt((1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])) * np.sqrt(1.0 - alphas[1:])
    return NoiseSchedule(T, alphas, alpha_bars, sigmas, sigma_mode)

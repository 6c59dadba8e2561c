"""Training: conditioner dropout, the clean-roll L2 loss and the three schemes."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from typing import Callable, TextIO

import numpy as np
import torch

from .features import MASK_VALUE
from .model import RollDenoiser, predict_x0
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

SCHEMES = ("supervised", "unpaired_pretrain", "mixed_p0_plus_1")


@dataclass
class TrainConfig:
    dropout_p: float = 0.1
    lr: float = 5e-4
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    scheme: str = "supervised"
    discriminative: bool = False
    # probability that a mixed-scheme step draws from the paired set
    mix_ratio: float = 0.5
    log_every: int = 10

    def __post_init__(self):
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, steps >= 0 and lr > 0 are required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def cfg_dropout(c_mel: torch.Tensor, p: float, generator: torch.Generator | None = None):
    """Replace each batch element's conditioner by the -1 sentinel with probability ``p``.

    Returns ``(conditioners, dropped)`` where ``dropped`` is a bool tensor ``(B,)``.
    One uniform draw per element is consumed whatever ``p`` is.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    dropped = torch.rand(c_mel.shape[0], generator=generator) < p
    out = c_mel.clone()
    out[dropped.to(c_mel.device)] = MASK_VALUE
    return out, dropped


def l2_loss(x0_hat: torch.Tensor, roll: torch.Tensor) -> torch.Tensor:
    """Mean squared error over batch, pitch and frame."""
    return torch.mean((roll - x0_hat) ** 2)


def diffusion_loss(
    predict: Callable,
    roll: torch.Tensor,
    c_mel: torch.Tensor,
    t: torch.Tensor,
    noise: torch.Tensor,
    schedule: NoiseSchedule,
    discriminative: bool = False,
) -> torch.Tensor:
    """Loss for one batch given already-drawn steps and noise.

    ``predict(x_t, t, c_mel)`` is the denoiser (or a stub). The discriminative
    baseline replaces ``x_t`` by zeros and ``t`` by ones and keeps everything
    else.
    """
    if discriminative:
        x_t = torch.zeros_like(roll)
        t = torch.ones_like(t)
    else:
        x_t = schedule.forward_diffuse(roll, t, noise)
    return l2_loss(predict(x_t, t, c_mel), roll)


class Trainer:
    """Owns the optimizer and the RNG streams; parameter updates are serialized."""

    def __init__(self, model: RollDenoiser, schedule: NoiseSchedule, cfg: TrainConfig):
        if model.cfg.num_steps != schedule.T:
            raise ValueError(f"model expects T={model.cfg.num_steps}, schedule has T={schedule.T}")
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.device = next(model.parameters()).device
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        # separate stream so source choice never perturbs the t/noise/dropout draws
        self.source_generator = torch.Generator().manual_seed(cfg.seed + 1)
        self.step = 0
        self.samples_seen = 0

    def _predict(self, x_t, t, c_mel):
        return predict_x0(self.model, x_t, t, c_mel)

    def training_step(self, roll: torch.Tensor, c_mel: torch.Tensor | None = None, p: float | None = None) -> float:
        """One optimizer step on a batch; ``c_mel=None`` means no audio (all -1)."""
        p = self.cfg.dropout_p if p is None else p
        roll = roll.to(self.device, torch.float32)
        B, _, frames = roll.shape
        if c_mel is None:
            c_mel = torch.full((B, self.model.cfg.mel_bins, frames), MASK_VALUE)
        elif c_mel.shape[0] != B or c_mel.shape[2] != frames:
            raise ValueError(f"conditioner {tuple(c_mel.shape)} not aligned with roll {tuple(roll.shape)}")
        c_mel = c_mel.to(self.device, torch.float32)

        t = torch.randint(1, self.schedule.T + 1, (B,), generator=self.generator)
        noise = torch.randn(roll.shape, generator=self.generator).to(self.device)
        c_mel, _ = cfg_dropout(c_mel, p, self.generator)

        self.model.train()
        loss = diffusion_loss(
            self._predict, roll, c_mel, t.to(self.device), noise, self.schedule, self.cfg.discriminative
        )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        self.samples_seen += B
        return float(loss.detach())

    def _batch_indices(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self.generator)[: min(self.cfg.batch_size, n)]

    def fit(
        self,
        rolls: torch.Tensor,
        mels: torch.Tensor | None,
        steps: int | None = None,
        p: float | None = None,
        log: TextIO | None = None,
        on_step: Callable[[int, float], None] | None = None,
    ) -> list[float]:
        """Run ``steps`` steps drawing random batches from one dataset."""
        if len(rolls) == 0:
            raise ValueError("dataset is empty")
        steps = self.cfg.steps if steps is None else steps
        p = self.cfg.dropout_p if p is None else p
        losses = []
        for _ in range(steps):
            idx = self._batch_indices(len(rolls))
            loss = self.training_step(rolls[idx], None if mels is None else mels[idx], p)
            losses.append(loss)
            self._log(log, loss, p, "paired" if mels is not None else "unpaired")
            if on_step:
                on_step(self.step, loss)
        return losses

    def _log(self, log, loss, p, source):
        if self.cfg.log_every and self.step % self.cfg.log_every == 0:
            rec = {"step": self.step, "loss": loss, "p": p, "scheme": self.cfg.scheme, "source": source}
            logger.info("step %d loss %.6f", self.step, loss)
            if log is not None:
                log.write(json.dumps(rec) + "\n")
                log.flush()

    def state_dict(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "source_generator": self.source_generator.get_state(),
            "step": self.step,
            "samples_seen": self.samples_seen,
            "config": self.cfg.to_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])
        self.source_generator.set_state(state["source_generator"])
        self.step = state["step"]
        self.samples_seen = state.get("samples_seen", 0)


def train_supervised(trainer: Trainer, rolls, mels, steps=None, log=None, on_step=None) -> list[float]:
    return trainer.fit(rolls, mels, steps, trainer.cfg.dropout_p, log, on_step)


def pretrain_unpaired(trainer: Trainer, rolls, steps=None, log=None, on_step=None) -> list[float]:
    """Unconditional-only training on rolls without audio (conditioner forced to -1)."""
    if rolls is None or len(rolls) == 0:
        raise ValueError("unpaired dataset is empty")
    return trainer.fit(rolls, None, steps, 1.0, log, on_step)


def train_mixed_p0_plus_1(
    trainer: Trainer, paired_rolls, paired_mels, unpaired_rolls, steps=None, log=None, on_step=None
) -> tuple[list[float], list[str]]:
    """Interleave paired batches (never masked) with unpaired batches (always masked).

    Each step picks its source independently: paired with probability
    ``cfg.mix_ratio``. Returns losses and the per-step source names.
    """
    if paired_rolls is None or len(paired_rolls) == 0:
        raise ValueError("paired dataset is empty")
    if unpaired_rolls is None or len(unpaired_rolls) == 0:
        raise ValueError("unpaired dataset is empty")
    steps = trainer.cfg.steps if steps is None else steps
    losses, sources = [], []
    for _ in range(steps):
        use_paired = bool(torch.rand((), generator=trainer.source_generator) < trainer.cfg.mix_ratio)
        if use_paired:
            idx = trainer._batch_indices(len(paired_rolls))
            loss = trainer.training_step(paired_rolls[idx], paired_mels[idx], 0.0)
            source, p = "paired", 0.0
        else:
            idx = trainer._batch_indices(len(unpaired_rolls))
            loss = trainer.training_step(unpaired_rolls[idx], None, 1.0)
            source, p = "unpaired", 1.0
        losses.append(loss)
        sources.append(source)
        trainer._log(log, loss, p, source)
        if on_step:
            on_step(trainer.step, loss)
    return losses, sources


def stack_segments(items: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(items).astype(np.float32))

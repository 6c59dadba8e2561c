"""Checkpoint files: parameters plus everything needed to reproduce features and sampling."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .features import FeatureConfig, MelExtractor
from .model import DenoiserConfig, RollDenoiser
from .schedule import NoiseSchedule

FORMAT_VERSION = 1


class CheckpointMismatch(ValueError):
    """Checkpoint metadata disagrees with what the caller asked for."""


@dataclass
class Checkpoint:
    model: RollDenoiser
    schedule: NoiseSchedule
    features: FeatureConfig
    training: dict = field(default_factory=dict)
    trainer_state: dict | None = None


def save_checkpoint(
    path,
    model: RollDenoiser,
    schedule: NoiseSchedule,
    features: FeatureConfig = FeatureConfig(),
    training: dict | None = None,
    trainer_state: dict | None = None,
) -> None:
    ext = MelExtractor(features)
    payload = {
        "format_version": FORMAT_VERSION,
        "model_state": model.state_dict(),
        "denoiser_config": model.cfg.to_dict(),
        "schedule_table": schedule.to_table(),
        "features": features.to_dict(),
        "feature_norm": ext.norm_constants(),
        "training": dict(training or {}),
        "trainer_state": trainer_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_metadata(path) -> dict:
    """Everything except tensors, for inspection."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    meta = {k: v for k, v in payload.items() if k not in ("model_state", "trainer_state")}
    meta["num_parameters"] = sum(v.numel() for v in payload["model_state"].values())
    meta["has_trainer_state"] = payload.get("trainer_state") is not None
    meta["sha256"] = file_hash(path)
    return meta


def load_checkpoint(path, features: FeatureConfig | None = None, T: int | None = None) -> Checkpoint:
    """Load and validate a checkpoint.

    ``features`` / ``T``, when given, must match what the model was trained
    with; a mismatch raises :class:`CheckpointMismatch` rather than silently
    recomputing anything.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint format {payload.get('format_version')}")
    cfg = DenoiserConfig.from_dict(payload["denoiser_config"])
    schedule = NoiseSchedule.from_table(payload["schedule_table"])
    if schedule.T != cfg.num_steps:
        raise CheckpointMismatch(f"schedule T={schedule.T} but model expects T={cfg.num_steps}")
    if T is not None and T != schedule.T:
        raise CheckpointMismatch(f"requested T={T} but checkpoint was trained with T={schedule.T}")

    stored = FeatureConfig(**payload["features"])
    if features is not None and features != stored:
        raise CheckpointMismatch(f"feature config {features} differs from checkpoint's {stored}")
    norm = MelExtractor(stored).norm_constants()
    if norm != payload["feature_norm"]:
        raise CheckpointMismatch("feature normalization constants changed since the checkpoint was written")

    model = RollDenoiser(cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return Checkpoint(model, schedule, stored, payload.get("training", {}), payload.get("trainer_state"))


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

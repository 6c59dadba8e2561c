"""Audio loading and the log-mel conditioner."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
HOP_LENGTH = 512
FRAME_RATE = SAMPLE_RATE / HOP_LENGTH  # 31.25 Hz
N_MELS = 229
SEGMENT_SAMPLES = 327_680
SEGMENT_FRAMES = SEGMENT_SAMPLES // HOP_LENGTH  # 640

MASK_VALUE = -1.0
FULL_MASK = "full"


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 2048
    hop_length: int = HOP_LENGTH
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f = np.asarray(f, dtype=np.float64)
    mel = f / (200.0 / 3)
    logstep = np.log(6.4) / 27.0
    high = f >= 1000.0
    return np.where(high, 15.0 + np.log(np.maximum(f, 1e-10) / 1000.0) / logstep, mel)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    logstep = np.log(6.4) / 27.0
    return np.where(m >= 15.0, 1000.0 * np.exp(logstep * (m - 15.0)), m * (200.0 / 3))


def mel_filterbank(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Triangular Slaney-normalized filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


class MelExtractor:
    """Immutable log-mel front end.

    Output is ``(log(mel + floor) - log_min) / (log_max - log_min)`` clipped to
    [0, 1], where ``log_min = log(floor)`` and ``log_max`` is the log of the
    largest mel magnitude a full-scale ([-1, 1]) signal can produce. The map
    is fixed, so it does not depend on the clip or the dataset.
    """

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        self.cfg = cfg
        self.window = np.hanning(cfg.n_fft + 1)[:-1]  # periodic Hann
        self.filters = mel_filterbank(cfg)
        peak = self.window.sum() * self.filters.sum(axis=1).max()
        self.log_min = float(np.log(cfg.log_floor))
        self.log_max = float(np.log(peak + cfg.log_floor))

    def norm_constants(self) -> dict:
        return {"log_min": self.log_min, "log_max": self.log_max}

    def num_frames(self, num_samples: int) -> int:
        return -(-num_samples // self.cfg.hop_length)

    def __call__(self, audio: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        audio = np.asarray(audio, dtype=np.float64)
        if audio.ndim != 1:
            raise ValueError("expected mono audio")
        if len(audio) < cfg.n_fft:
            raise ValueError(f"audio has {len(audio)} samples, need at least one window ({cfg.n_fft})")
        n_frames = self.num_frames(len(audio))
        audio = np.pad(audio, (0, n_frames * cfg.hop_length - len(audio)))
        half = cfg.n_fft // 2
        padded = np.pad(audio, (half, half), mode="reflect")
        frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[:: cfg.hop_length][:n_frames]
        spec = np.abs(np.fft.rfft(frames * self.window, axis=-1))
        mel = self.filters @ spec.T
        logmel = np.log(mel + cfg.log_floor)
        out = (logmel - self.log_min) / (self.log_max - self.log_min)
        return np.clip(out, 0.0, 1.0).astype(np.float32)


_default_extractor: MelExtractor | None = None


def mel_conditioner(audio: np.ndarray, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Log-mel conditioner of shape ``(n_mels, ceil(len / hop))`` with values in [0, 1]."""
    global _default_extractor
    if cfg is None or cfg == FeatureConfig():
        if _default_extractor is None:
            _default_extractor = MelExtractor()
        return _default_extractor(audio)
    return MelExtractor(cfg)(audio)


def load_and_resample(path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read WAV (or FLAC when soundfile is installed) as mono float32 at ``sample_rate``."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".flac":
            import soundfile

            audio, sr = soundfile.read(os.fspath(path), dtype="float32", always_2d=False)
        else:
            sr, audio = wavfile.read(os.fspath(path))
    except ImportError as exc:
        raise OSError(f"reading {path.suffix} files needs the optional 'soundfile' package") from exc
    except (ValueError, RuntimeError) as exc:
        raise OSError(f"unreadable audio file {path}: {exc}") from exc

    if audio.dtype.kind in "iu":
        info = np.iinfo(audio.dtype)
        if audio.dtype.kind == "u":
            audio = (audio.astype(np.float64) - (info.max + 1) / 2) / ((info.max + 1) / 2)
        else:
            audio = audio.astype(np.float64) / -info.min
    if audio.ndim == 2:
        audio = audio.mean(axis=1)
    audio = audio.astype(np.float32, copy=False)
    if sr == sample_rate:
        return audio
    g = gcd(int(sr), int(sample_rate))
    return resample_poly(audio, sample_rate // g, int(sr) // g).astype(np.float32)


def write_wav(path, audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(audio) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(os.fspath(path), sample_rate, pcm)


def apply_mask(c: np.ndarray, mask=None) -> np.ndarray:
    """Return a copy of ``c`` with selected frames set to -1 across all mel bins.

    ``mask`` is ``None`` (no-op), :data:`FULL_MASK`, or a boolean array with
    one entry per frame (last axis of ``c``).
    """
    out = np.array(c, dtype=np.float32, copy=True)
    if mask is None:
        return out
    if isinstance(mask, str):
        if mask != FULL_MASK:
            raise ValueError(f"unknown mask selector {mask!r}")
        out[...] = MASK_VALUE
        return out
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (out.shape[-1],):
        raise ValueError(f"mask has shape {mask.shape}, conditioner has {out.shape[-1]} frames")
    out[..., mask] = MASK_VALUE
    return out


def frame_mask(num_frames: int, start_sec: float, end_sec: float, frame_rate: float = FRAME_RATE) -> np.ndarray:
    """Boolean selector for frames whose start time lies in ``[start_sec, end_sec)``."""
    times = np.arange(num_frames) / frame_rate
    return (times >= start_sec) & (times < end_sec)


def cached_conditioner(path, cache_dir, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Conditioner for an audio file, cached under (audio hash, feature config hash)."""
    path = Path(path)
    audio_hash = hashlib.sha256(path.read_bytes()).hexdigest()[:20]
    cache = Path(cache_dir) / f"{audio_hash}-{cfg.digest()}.npz"
    if cache.exists():
        with np.load(cache) as f:
            return f["mel"]
    mel = mel_conditioner(load_and_resample(path, cfg.sample_rate), cfg)
    cache.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(cache, mel=mel)
    return mel

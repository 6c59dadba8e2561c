"""Command-line interface.

Option precedence for every overridable setting: command-line flag, then the
``--config`` file (flat YAML/``key: value`` mapping), then values embedded in
``--checkpoint``, then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoint import CheckpointMismatch, file_hash, load_checkpoint, read_metadata, save_checkpoint
from .data import LAYOUTS, DatasetManifest, LayoutError, ingest, load_segments, make_toy_dataset
from .evaluation import ONSET_TOLERANCE, evaluate_corpus
from .features import SEGMENT_FRAMES, FeatureConfig, frame_mask, load_and_resample, mel_conditioner
from .model import DenoiserConfig, count_parameters, init_model
from .pianoroll import notes_to_midi, roll_to_notes
from .sampler import SamplerConfig, generate, inpaint, predict_discriminative, sample
from .schedule import build_linear_schedule
from .trainer import TrainConfig, Trainer, pretrain_unpaired, train_mixed_p0_plus_1, train_supervised

logger = logging.getLogger("rolldiff")

FEATURE_KEYS = {f for f in FeatureConfig.__dataclass_fields__}

BUILTIN = {
    "seed": 0,
    "steps": 1000,
    "batch_size": 16,
    "lr": 5e-4,
    "p": 0.1,
    "scheme": "supervised",
    "mix_ratio": 0.5,
    "channels": 512,
    "layers": 15,
    "kernel": 9,
    "dilation": "1",
    "diffusion_steps": 200,
    "segment_frames": SEGMENT_FRAMES,
    "log_every": 10,
    "checkpoint_every": 0,
    "w": 0.5,
    "sigma_mode": "ddpm",
    "threshold": 0.5,
    "frames": SEGMENT_FRAMES,
    "tol": ONSET_TOLERANCE,
}


class UsageError(Exception):
    pass


class Settings:
    """Resolves one option through flag > config file > checkpoint > built-in."""

    def __init__(self, args, config: dict, checkpoint_defaults: dict | None = None):
        self.args = args
        self.config = config
        self.ckpt = checkpoint_defaults or {}

    def get(self, key):
        val = getattr(self.args, key, None)
        if val is not None:
            return val
        if key in self.config:
            return self.config[key]
        if key in self.ckpt:
            return self.ckpt[key]
        return BUILTIN.get(key)


def load_config(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must be a key-value mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def requested_features(config: dict) -> FeatureConfig | None:
    keys = FEATURE_KEYS & set(config)
    if not keys:
        return None
    return FeatureConfig(**{k: config[k] for k in keys})


def write_provenance(target: Path, command: str, settings: dict, checkpoint=None) -> Path:
    out = target.with_name(target.name + ".provenance.json") if target.suffix else target / "provenance.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    rec = {
        "command": command,
        "argv": sys.argv[1:],
        "settings": settings,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "checkpoint_sha256": file_hash(checkpoint) if checkpoint else None,
        "rolldiff_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "python": platform.python_version(),
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    out.write_text(json.dumps(rec, indent=2, default=str) + "\n")
    return out


def run_seed(seed: int, index: int) -> int:
    """Independent sampling seed for the ``index``-th run of a multi-file job."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------- subcommands


def cmd_make_toy(args) -> int:
    m = make_toy_dataset(args.items, args.seed, args.out, args.samples, args.notes_per_second)
    print(f"wrote {len(m.entries)} pairs and manifest.json to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    manifest = ingest(args.root, args.layout, args.remove_overlap)
    out = Path(args.out) if args.out else Path(args.root) / "manifest.json"
    manifest.save(out)
    counts = {s: len(manifest.split(s)) for s in ("train", "validation", "test")}
    print(json.dumps({"manifest": str(out), "kind": manifest.kind, "counts": counts, "excluded": len(manifest.excluded)}))
    return 0


def _parse_dilation(val) -> list[int]:
    if isinstance(val, (list, tuple)):
        return [int(v) for v in val]
    return [int(v) for v in str(val).split(",") if v.strip()]


def _train_common(args, pretrain: bool) -> int:
    config = load_config(args.config)
    init = None
    ckpt_defaults = {}
    if args.checkpoint:
        init = load_checkpoint(args.checkpoint, requested_features(config))
        c = init.model.cfg
        ckpt_defaults = {
            "channels": c.residual_channels,
            "layers": c.num_layers,
            "kernel": c.kernel_size,
            "dilation": c.dilation_pattern,
            "diffusion_steps": c.num_steps,
        }
        for k in ("lr", "batch_size", "p", "scheme", "mix_ratio", "seed"):
            if k in init.training:
                ckpt_defaults[k] = init.training[k]
    s = Settings(args, config, ckpt_defaults)

    features = requested_features(config) or (init.features if init else FeatureConfig())
    scheme = "unpaired_pretrain" if pretrain else {"p0-plus-1": "mixed_p0_plus_1"}.get(s.get("scheme"), s.get("scheme"))
    discriminative = bool(s.get("discriminative"))
    if pretrain and discriminative:
        raise UsageError("--discriminative cannot be combined with pretrain")
    if scheme == "mixed_p0_plus_1" and not args.unpaired_manifest:
        raise UsageError("--scheme p0-plus-1 needs --unpaired-manifest")

    dcfg = DenoiserConfig(
        residual_channels=int(s.get("channels")),
        num_layers=int(s.get("layers")),
        kernel_size=int(s.get("kernel")),
        dilation_pattern=_parse_dilation(s.get("dilation")),
        num_steps=int(s.get("diffusion_steps")),
    )
    if init is not None and dcfg != init.model.cfg:
        raise CheckpointMismatch(f"architecture {dcfg} differs from checkpoint's {init.model.cfg}")
    seed = int(s.get("seed"))
    tcfg = TrainConfig(
        dropout_p=float(s.get("p")),
        lr=float(s.get("lr")),
        batch_size=int(s.get("batch_size")),
        steps=int(s.get("steps")),
        seed=seed,
        scheme=scheme,
        discriminative=discriminative,
        mix_ratio=float(s.get("mix_ratio")),
        log_every=int(s.get("log_every")),
    )
    torch.manual_seed(seed)
    model = init.model if init else init_model(dcfg, seed)
    schedule = build_linear_schedule(dcfg.num_steps)
    trainer = Trainer(model, schedule, tcfg)
    if args.resume:
        if init is None or init.trainer_state is None:
            raise UsageError("--resume needs a --checkpoint that contains trainer state")
        trainer.load_state_dict(init.trainer_state)

    seg = int(s.get("segment_frames"))
    manifest = DatasetManifest.load(args.manifest)
    if pretrain:
        manifest = manifest.as_rolls_only() if manifest.kind == "paired" else manifest
    rolls, mels = load_segments(manifest, split="train", segment_frames=seg, cfg=features, cache_dir=args.cache_dir)
    rolls = torch.from_numpy(rolls)
    mels = None if mels is None else torch.from_numpy(mels)
    if not pretrain and mels is None:
        raise UsageError("supervised training needs a paired manifest (use `pretrain` for rolls only)")

    out = Path(args.out)
    meta = {**tcfg.to_dict(), "p": tcfg.dropout_p, "segment_frames": seg, "sampler": {"w": 0.5, "sigma_mode": "ddpm"}}
    every = int(s.get("checkpoint_every"))

    def on_step(step, loss):
        if every and step % every == 0:
            save_checkpoint(out, model, schedule, features, {**meta, "step": step}, trainer.state_dict())

    print(f"training {count_parameters(model)} parameters on {len(rolls)} segments ({scheme})", file=sys.stderr)
    log = open(args.log, "a") if args.log else None
    try:
        if pretrain:
            losses = pretrain_unpaired(trainer, rolls, log=log, on_step=on_step)
        elif scheme == "mixed_p0_plus_1":
            unpaired = DatasetManifest.load(args.unpaired_manifest)
            if unpaired.kind == "paired":
                unpaired = unpaired.as_rolls_only()
            u_rolls, _ = load_segments(unpaired, split="train", segment_frames=seg, cfg=features)
            losses, _ = train_mixed_p0_plus_1(trainer, rolls, mels, torch.from_numpy(u_rolls), log=log, on_step=on_step)
        else:
            losses = train_supervised(trainer, rolls, mels, log=log, on_step=on_step)
    finally:
        if log:
            log.close()
    meta.update(step=trainer.step, epoch=trainer.samples_seen / len(rolls), final_loss=losses[-1] if losses else None)
    save_checkpoint(out, model, schedule, features, meta, trainer.state_dict())
    write_provenance(out, "pretrain" if pretrain else "train", {**meta, "denoiser": dcfg.to_dict()}, args.checkpoint)
    print(json.dumps({"checkpoint": str(out), "steps": trainer.step, "final_loss": meta["final_loss"]}))
    return 0


def cmd_train(args) -> int:
    return _train_common(args, pretrain=False)


def cmd_pretrain(args) -> int:
    return _train_common(args, pretrain=True)


def _load_for_sampling(args):
    config = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint, requested_features(config), config.get("diffusion_steps"))
    s = Settings(args, config, ckpt.training.get("sampler", {}))
    return ckpt, s


def _sampler_config(s: Settings, seed: int, w=None) -> SamplerConfig:
    return SamplerConfig(
        w=float(s.get("w") if w is None else w),
        sigma_mode=s.get("sigma_mode"),
        seed=seed,
        threshold=float(s.get("threshold")),
        record_every=s.get("trajectory_every"),
    )


def _write_outputs(result, out_mid: Path, args, index=0):
    out_mid.parent.mkdir(parents=True, exist_ok=True)
    notes_to_midi(roll_to_notes(result.rolls[index]), out_mid)
    if getattr(args, "save_posteriorgram", False):
        np.savez_compressed(out_mid.with_suffix(".posteriorgram.npz"), posteriorgram=result.raw[index])
    if result.trajectory:
        steps = np.array([t for t, _ in result.trajectory])
        xs = np.stack([x[index] for _, x in result.trajectory])
        np.savez_compressed(out_mid.with_suffix(".trajectory.npz"), steps=steps, x=xs)


def _inputs(path: Path, split: str | None):
    """Audio files named by a single path or a manifest."""
    if path.suffix.lower() == ".json":
        m = DatasetManifest.load(path)
        if m.kind != "paired":
            raise UsageError("transcription needs a manifest with audio")
        entries = m.entries if split is None else m.split(split)
        return [(Path(m.root) / e.audio, Path(e.midi).stem) for e in entries]
    return [(path, path.stem)]


def _conditioner(ckpt, audio_path):
    audio = load_and_resample(audio_path, ckpt.features.sample_rate)
    return mel_conditioner(audio, ckpt.features)


def cmd_transcribe(args) -> int:
    ckpt, s = _load_for_sampling(args)
    seed = int(s.get("seed"))
    inputs = _inputs(Path(args.input), args.split)
    out = Path(args.out)
    single = len(inputs) == 1 and out.suffix.lower() in (".mid", ".midi")
    discriminative = bool(ckpt.training.get("discriminative", False))
    for i, (audio, stem) in enumerate(inputs):
        c = _conditioner(ckpt, audio)
        if discriminative:
            res = predict_discriminative(ckpt.model, c, float(s.get("threshold")), ckpt.features.frame_rate)
        else:
            cfg = _sampler_config(s, seed if single else run_seed(seed, i))
            res = sample(ckpt.model, ckpt.schedule, c, cfg, ckpt.features.frame_rate)
        _write_outputs(res, out if single else out / f"{stem}.mid", args)
        print(f"{audio} -> {out if single else out / (stem + '.mid')}", file=sys.stderr)
    settings = {"w": s.get("w"), "sigma_mode": s.get("sigma_mode"), "seed": seed, "threshold": s.get("threshold"),
                "discriminative": discriminative}
    write_provenance(out, "transcribe", settings, args.checkpoint)
    return 0


def cmd_generate(args) -> int:
    ckpt, s = _load_for_sampling(args)
    seed = int(s.get("seed"))
    frames = int(s.get("frames"))
    cfg = _sampler_config(s, seed, w=-1.0)
    res = generate(ckpt.model, ckpt.schedule, frames, cfg, frame_rate=ckpt.features.frame_rate)
    out = Path(args.out)
    _write_outputs(res, out, args)
    write_provenance(out, "generate", {"frames": frames, "seed": seed, "sigma_mode": cfg.sigma_mode}, args.checkpoint)
    return 0


def cmd_inpaint(args) -> int:
    ckpt, s = _load_for_sampling(args)
    if args.mask_end < args.mask_start:
        raise UsageError("--mask-end must not precede --mask-start")
    seed = int(s.get("seed"))
    out = Path(args.out)
    c = _conditioner(ckpt, Path(args.input))
    mask = frame_mask(c.shape[1], args.mask_start, args.mask_end, ckpt.features.frame_rate)
    cfg = _sampler_config(s, seed)
    res = inpaint(ckpt.model, ckpt.schedule, c, mask, cfg, ckpt.features.frame_rate)
    _write_outputs(res, out, args)
    settings = {"w": cfg.w, "sigma_mode": cfg.sigma_mode, "seed": seed, "mask": [args.mask_start, args.mask_end]}
    write_provenance(out, "inpaint", settings, args.checkpoint)
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    s = Settings(args, config)
    report = evaluate_corpus(args.pred, args.ref, float(s.get("tol")))
    print(report.table())
    if args.report:
        report.write_jsonl(args.report)
        write_provenance(Path(args.report), "evaluate", {"tol": report.tolerance})
    for m in report.missing:
        print(f"missing counterpart: {m}", file=sys.stderr)
    return 0 if report.complete else 1


def cmd_inspect(args) -> int:
    meta = read_metadata(args.checkpoint)
    meta["schedule_table"] = meta["schedule_table"].splitlines()[:4] + ["..."]
    print(json.dumps(meta, indent=2, default=str))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rolldiff", description="Piano transcription, generation and inpainting with a roll diffusion model."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required=False):
        p.add_argument("--config", help="key-value YAML file with option defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint", required=checkpoint_required)

    p = sub.add_parser("make-toy", help="write a synthetic (wav, mid) corpus")
    p.add_argument("out")
    p.add_argument("--items", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=327_680, help="samples per item at 16 kHz")
    p.add_argument("--notes-per-second", type=float, default=2.0)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("ingest", help="build a manifest from a dataset tree")
    p.add_argument("root")
    p.add_argument("--layout", choices=LAYOUTS, default="flat")
    p.add_argument("--remove-overlap", action="store_true", help="maps: drop training pieces that appear in test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    for name, func, help_ in (
        ("train", cmd_train, "train on a paired manifest"),
        ("pretrain", cmd_pretrain, "unconditional pretraining on piano rolls only"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="checkpoint path to write")
        p.add_argument("--resume", action="store_true", help="restore optimizer and RNG state from --checkpoint")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--channels", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--kernel", type=int)
        p.add_argument("--dilation", help="comma-separated cyclic pattern, e.g. 1,2,4")
        p.add_argument("--diffusion-steps", type=int)
        p.add_argument("--segment-frames", type=int)
        p.add_argument("--log", help="append line-delimited JSON training records here")
        p.add_argument("--log-every", type=int)
        p.add_argument("--checkpoint-every", type=int)
        p.add_argument("--cache-dir")
        if name == "train":
            p.add_argument("--p", type=float, help="conditioner dropout probability")
            p.add_argument("--scheme", choices=("supervised", "p0-plus-1"))
            p.add_argument("--unpaired-manifest")
            p.add_argument("--mix-ratio", type=float, help="share of paired batches in p0-plus-1")
            p.add_argument("--discriminative", action="store_const", const=True,
                           help="baseline: x_t = 0 and t = 1 through the same network")
        p.set_defaults(func=func)

    def sampling(p):
        p.add_argument("--w", type=float, help="guidance weight")
        p.add_argument("--sigma-mode", choices=("ddpm", "ddim"))
        p.add_argument("--threshold", type=float)
        p.add_argument("--save-posteriorgram", action="store_true")
        p.add_argument("--trajectory-every", type=int)
        p.add_argument("--diffusion-steps", type=int, help="must match the checkpoint")

    p = sub.add_parser("transcribe", help="audio file or manifest -> MIDI")
    common(p, checkpoint_required=True)
    sampling(p)
    p.add_argument("--input", required=True, help="audio file or manifest.json")
    p.add_argument("--split", help="manifest split to transcribe (default: all)")
    p.add_argument("--out", required=True, help=".mid path for one input, else a directory")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("generate", help="unconditional generation (w = -1)")
    common(p, checkpoint_required=True)
    sampling(p)
    p.add_argument("--frames", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inpaint", help="generate inside [mask-start, mask-end) seconds, transcribe elsewhere")
    common(p, checkpoint_required=True)
    sampling(p)
    p.add_argument("--input", required=True)
    p.add_argument("--mask-start", type=float, required=True)
    p.add_argument("--mask-end", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("evaluate", help="note-wise onset F1 between two MIDI directories")
    p.add_argument("--config")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--tol", type=float)
    p.add_argument("--report", help="line-delimited JSON report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def _check_diffusion_steps(args):
    # sampling commands: an explicit --diffusion-steps must agree with the checkpoint
    if getattr(args, "diffusion_steps", None) is not None and args.command in ("transcribe", "generate", "inpaint"):
        ckpt_T = load_checkpoint(args.checkpoint).schedule.T
        if ckpt_T != args.diffusion_steps:
            raise CheckpointMismatch(f"--diffusion-steps {args.diffusion_steps} but checkpoint uses T={ckpt_T}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _check_diffusion_steps(args)
        return args.func(args)
    except (UsageError, CheckpointMismatch, LayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

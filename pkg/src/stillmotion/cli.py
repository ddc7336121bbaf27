"""Command-line entry point.

Subcommands: gen-data, affinity-stats, train, animate, eval, attn.
Exit codes: 0 success, 2 usage/validation, 3 I/O failure, 4 numeric failure.
Flag precedence: command line > --config JSON file > built-in defaults.
The effective configuration is echoed into every JSON artifact written.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from . import __version__
from .affinity import AffinityStats, corpus_stats, make_preset
from .checkpoint import Checkpoint, load_checkpoint
from .codec import LatentCodec
from .denoiser import Denoiser, DenoiserConfig, extract_cross_attention
from .diffusion import DEFAULT_CFG_SCALE, DEFAULT_DDIM_STEPS, build_schedule
from .errors import ConfigError, DataError, InputDomainError, ModelError, ShapeError
from .evalbench import (
    animate,
    load_condition_image,
    load_manifest,
    run_manifest,
    write_report,
)
from .pvid import write_pvid
from .synth import CANVAS_SIZE, FRAME_COUNT, caption_vocabulary, generate_corpus, load_corpus
from .text import Vocabulary
from .trainer import ClipBatchSource, TrainConfig, Trainer, run_training
from .utils import apply_thread_limits, dump_json

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="root random seed")
    p.add_argument("--deterministic", action="store_true", default=None, help="single-threaded, bit-reproducible execution")
    p.add_argument("--config", type=str, default=None, help="JSON file of flag overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stillmotion", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic moving-shapes corpus")
    p.add_argument("--clips", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", type=str, required=True)
    _add_common(p)

    p = sub.add_parser("affinity-stats", help="compute corpus affinity statistics")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--s-min", type=float, default=None)
    p.add_argument("--s-max", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("train", help="train the base model or the animation adapters")
    p.add_argument("--stage", type=str, choices=["base", "pia"], required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--stats", type=str, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to continue from (required for stage pia)")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--batch-clips", type=int, default=None)
    p.add_argument("--batch-frames", type=int, default=None)
    p.add_argument("--val-clips", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--affinity-mode", type=str, choices=["similarity", "onehot"], default=None)
    p.add_argument("--freeze-temporal", action="store_true", default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--log", type=str, default=None)
    _add_common(p)

    p = sub.add_parser("animate", help="animate a condition image")
    p.add_argument("--image", type=str, required=True, help="PNG or PVID (first frame) at training resolution")
    p.add_argument("--prompt", type=str, required=True)
    p.add_argument("--magnitude", type=str, choices=["light", "middle", "large"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg", type=float, default=None)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--frames-dir", type=str, default=None, help="also dump per-frame PNGs here")
    _add_common(p)

    p = sub.add_parser("eval", help="run a benchmark manifest")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--seeds", type=str, default=None, help='comma-separated, e.g. "1,2,3"')
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg", type=float, default=None)
    p.add_argument("--monotonicity-seeds", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    _add_common(p)

    p = sub.add_parser("attn", help="export cross-attention heatmaps for one prompt token")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--image", type=str, required=True)
    p.add_argument("--prompt", type=str, required=True)
    p.add_argument("--token", type=str, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg", type=float, default=None)
    p.add_argument("--out", type=str, required=True)
    _add_common(p)

    return parser


_DEFAULTS: dict[str, dict] = {
    "gen-data": {"clips": 100, "frames": FRAME_COUNT, "size": CANVAS_SIZE, "seed": 0},
    "affinity-stats": {"s_min": 0.2, "s_max": 1.0, "seed": 0},
    "train": {
        "steps": 1000,
        "batch_clips": 2,
        "batch_frames": 16,
        "val_clips": 0,
        "checkpoint_every": 0,
        "affinity_mode": "similarity",
        "freeze_temporal": False,
        "base_channels": 32,
        "seed": 0,
    },
    "animate": {"magnitude": "middle", "steps": DEFAULT_DDIM_STEPS, "cfg": DEFAULT_CFG_SCALE, "seed": 0},
    "eval": {"seeds": "0", "steps": DEFAULT_DDIM_STEPS, "cfg": DEFAULT_CFG_SCALE, "seed": 0},
    "attn": {"steps": DEFAULT_DDIM_STEPS, "cfg": DEFAULT_CFG_SCALE, "seed": 0},
}


def effective_config(args: argparse.Namespace) -> dict:
    """Merge command line > config file > defaults into one dict."""
    merged = dict(_DEFAULTS.get(args.command, {}))
    merged["deterministic"] = False
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise ConfigError("--config file must hold a JSON object")
        merged.update(overrides)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        merged[key] = value
    return merged


def _echo_config(cfg: dict) -> dict:
    """Provenance copy of the effective config, minus the artifact's own path
    so identical runs to different destinations stay byte-identical."""
    return {k: v for k, v in cfg.items() if k not in ("out", "frames_dir", "log")}


def _parse_seed_list(raw: str) -> list[int]:
    raw = raw.strip()
    if not raw:
        return []
    try:
        return [int(part) for part in raw.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {raw!r}") from exc


# -- commands -------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    if cfg["clips"] < 1:
        raise ConfigError(f"--clips must be >= 1, got {cfg['clips']}")
    entries = generate_corpus(
        count=cfg["clips"],
        out_dir=cfg["out"],
        size=cfg["size"],
        seed=cfg["seed"],
        frame_count=cfg["frames"],
    )
    by_direction: dict[str, int] = {}
    for e in entries:
        by_direction[e.motion.direction] = by_direction.get(e.motion.direction, 0) + 1
    dump_json(
        {"clips": len(entries), "directions": by_direction, "effective_config": _echo_config(cfg)},
        os.path.join(cfg["out"], "corpus.json"),
    )
    print(f"wrote {len(entries)} clips to {cfg['out']} (directions: {by_direction})")
    return EXIT_OK


def cmd_affinity_stats(cfg: dict) -> int:
    entries = load_corpus(cfg["data"])
    stats = corpus_stats(
        (e.load(cfg["data"]) for e in entries), s_min=cfg["s_min"], s_max=cfg["s_max"]
    )
    if stats.degenerate:
        print("warning: degenerate corpus (all distances equal); every frame scores 1.0", file=sys.stderr)
    doc = stats.to_dict()
    doc["effective_config"] = _echo_config(cfg)
    dump_json(doc, cfg["out"])
    print(f"affinity stats over {stats.sample_count} distances -> {cfg['out']}")
    return EXIT_OK


def _default_model(cfg: dict, frame_count: int, size: int) -> tuple[Denoiser, LatentCodec]:
    codec = LatentCodec()
    vocab = Vocabulary(caption_vocabulary())
    h, w = codec.latent_size(size, size)
    model_cfg = DenoiserConfig(
        vocab_size=len(vocab),
        frame_count=frame_count,
        latent_channels=codec.latent_channels,
        base_channels=cfg["base_channels"],
    )
    return Denoiser(model_cfg, vocab), codec


def cmd_train(cfg: dict) -> int:
    entries = load_corpus(cfg["data"])
    if not entries:
        raise DataError(f"empty corpus at {cfg['data']!r}")
    probe = entries[0].load(cfg["data"])
    frame_count, _, size, _ = probe.shape

    stats = None
    if cfg.get("stats"):
        with open(cfg["stats"]) as fh:
            stats = AffinityStats.from_dict(json.load(fh))

    resume = cfg.get("resume")
    if cfg["stage"] == "pia":
        if not resume or not os.path.isdir(resume):
            print("stage pia requires --resume pointing at a stage-base checkpoint", file=sys.stderr)
            return EXIT_USAGE
        if cfg["affinity_mode"] == "similarity" and stats is None:
            print("stage pia with similarity affinity requires --stats", file=sys.stderr)
            return EXIT_USAGE

    if resume:
        ckpt = load_checkpoint(resume)
        model, codec, noise_sched = ckpt.model, ckpt.codec, ckpt.schedule
    else:
        model, codec = _default_model(cfg, frame_count, size)
        noise_sched = build_schedule()

    train_cfg = TrainConfig(
        stage=cfg["stage"],
        steps=cfg["steps"],
        learning_rate=cfg.get("lr"),
        batch_clips=cfg["batch_clips"],
        batch_frames=cfg["batch_frames"],
        seed=cfg["seed"],
        affinity_mode=cfg["affinity_mode"],
        freeze_temporal=bool(cfg["freeze_temporal"]),
        val_clips=cfg["val_clips"],
        checkpoint_every=cfg["checkpoint_every"],
        deterministic=cfg["deterministic"],
    )
    source = ClipBatchSource.build(
        entries,
        cfg["data"],
        codec,
        stats,
        affinity_mode=cfg["affinity_mode"],
        need_affinity=cfg["stage"] == "pia",
    )
    trainer = Trainer(model, codec, noise_sched, train_cfg, source)
    meta = {
        "stage": cfg["stage"],
        "affinity_mode": cfg["affinity_mode"],
        "corpus_size": len(entries),
        "canvas_size": size,
        "resolution": size,
        "stats": stats.to_dict() if stats else None,
        "effective_config": _echo_config(cfg),
    }
    result = run_training(
        trainer,
        cfg["out"],
        train_meta=meta,
        resume_from=resume if _same_stage(resume, cfg["stage"]) else None,
        log_path=cfg.get("log"),
    )
    last = result.losses[-1] if result.losses else float("nan")
    print(f"stage {cfg['stage']}: {trainer.step_count} steps, final loss {last:.4f} -> {cfg['out']}")
    if result.baseline_val_loss is not None and result.final_val_loss is not None:
        print(
            f"validation loss {result.baseline_val_loss:.4f} -> {result.final_val_loss:.4f}"
        )
    return EXIT_OK


def _same_stage(ckpt_path: str | None, stage: str) -> bool:
    if not ckpt_path:
        return False
    try:
        with open(os.path.join(ckpt_path, "model.json")) as fh:
            return json.load(fh).get("train_meta", {}).get("stage") == stage
    except OSError:
        return False


def _load_image_checked(path: str, ckpt: Checkpoint) -> "torch.Tensor":
    image = load_condition_image(path)
    expected = ckpt.train_meta.get("resolution")
    if expected is not None and tuple(image.shape[-2:]) != (expected, expected):
        raise ConfigError(
            f"image is {tuple(image.shape[-2:])}, model was trained at {expected}x{expected}"
        )
    return image


def cmd_animate(cfg: dict) -> int:
    ckpt = load_checkpoint(cfg["model"])
    image = _load_image_checked(cfg["image"], ckpt)
    video = animate(
        ckpt,
        image,
        cfg["prompt"],
        magnitude=cfg["magnitude"],
        seed=cfg["seed"],
        steps=cfg["steps"],
        cfg_scale=cfg["cfg"],
    )
    write_pvid(cfg["out"], video)
    dump_json({"effective_config": _echo_config(cfg), "checkpoint_hash": ckpt.hash}, cfg["out"] + ".json")
    if cfg.get("frames_dir"):
        _dump_frames(video, cfg["frames_dir"])
    print(f"wrote {video.shape[0]}-frame video to {cfg['out']}")
    return EXIT_OK


def _dump_frames(video: "torch.Tensor", out_dir: str) -> None:
    from PIL import Image
    import numpy as np

    os.makedirs(out_dir, exist_ok=True)
    arr = (video.clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    for i in range(arr.shape[0]):
        Image.fromarray(np.ascontiguousarray(arr[i].transpose(1, 2, 0))).save(
            os.path.join(out_dir, f"frame_{i:03d}.png")
        )


def cmd_eval(cfg: dict) -> int:
    ckpt = load_checkpoint(cfg["model"])
    manifest = load_manifest(cfg["manifest"])
    seeds = _parse_seed_list(cfg["seeds"])
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    mono = _parse_seed_list(cfg["monotonicity_seeds"]) if cfg.get("monotonicity_seeds") else None
    report = run_manifest(
        ckpt, manifest, seeds, steps=cfg["steps"], cfg_scale=cfg["cfg"], monotonicity_seeds=mono
    )
    report["effective_config"] = _echo_config(cfg)
    write_report(report, cfg["out"])
    agg = report["aggregate"]
    print(
        f"evaluated {len(report['entries'])} entries: image {agg['image_alignment']:.2f}, "
        f"motion {agg['motion_accuracy']:.2f} -> {cfg['out']}"
    )
    return EXIT_OK


def cmd_attn(cfg: dict) -> int:
    ckpt = load_checkpoint(cfg["model"])
    image = _load_image_checked(cfg["image"], ckpt)
    words = cfg["prompt"].lower().split()
    token = cfg["token"].lower()
    if token not in words:
        raise ConfigError(f"token {token!r} does not occur in the prompt")
    token_index = words.index(token)

    capture: list = []
    video = animate(
        ckpt,
        image,
        cfg["prompt"],
        magnitude="large",
        seed=cfg["seed"],
        steps=cfg["steps"],
        cfg_scale=cfg["cfg"],
        capture=capture,
    )
    maps = _token_maps(capture, token_index, video.shape[0], ckpt)
    os.makedirs(cfg["out"], exist_ok=True)
    _dump_heatmaps(maps, cfg["out"])
    write_pvid(os.path.join(cfg["out"], "video.pvid"), video)
    dump_json(
        {"effective_config": _echo_config(cfg), "token_index": token_index, "checkpoint_hash": ckpt.hash},
        os.path.join(cfg["out"], "attn.json"),
    )
    print(f"wrote {maps.shape[0]} attention heatmaps to {cfg['out']}")
    return EXIT_OK


def _token_maps(capture: list, token_index: int, frames: int, ckpt: Checkpoint) -> "torch.Tensor":
    """Average captured cross-attention on one token over heads, layers and steps."""
    import torch.nn.functional as F_nn

    if not capture:
        raise ModelError("no cross-attention was captured")
    size = None
    total = None
    for entry in capture:
        probs = entry["probs"][..., token_index]  # [(B F), heads, hw]
        lh, lw = entry["size"]
        per_frame = probs.mean(dim=1).reshape(-1, 1, lh, lw).float()
        if size is None:
            size = max(e["size"][0] for e in capture), max(e["size"][1] for e in capture)
        per_frame = F_nn.interpolate(per_frame, size=size, mode="nearest")
        total = per_frame[:frames, 0] if total is None else total + per_frame[:frames, 0]
    return total / len(capture)


def _dump_heatmaps(maps: "torch.Tensor", out_dir: str) -> None:
    from PIL import Image
    import numpy as np

    peak = float(maps.max())
    scale = 255.0 / peak if peak > 0 else 1.0
    for i in range(maps.shape[0]):
        arr = (maps[i].numpy() * scale).clip(0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").resize(
            (arr.shape[1] * 4, arr.shape[0] * 4), Image.NEAREST
        ).save(os.path.join(out_dir, f"attn_{i:03d}.png"))


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "affinity-stats": cmd_affinity_stats,
    "train": cmd_train,
    "animate": cmd_animate,
    "eval": cmd_eval,
    "attn": cmd_attn,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        cfg = effective_config(args)
        apply_thread_limits(bool(cfg.get("deterministic")))
        return _COMMANDS[args.command](cfg)
    except (ConfigError, InputDomainError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ModelError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

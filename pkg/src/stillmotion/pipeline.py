"""End-to-end experiment orchestration: corpus, two-stage training, the
held-out benchmark manifest, and the standard evaluation passes.

This is the programmatic counterpart of chaining the CLI commands; the
acceptance suite and the runnable scripts share it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .affinity import AffinityStats, corpus_stats
from .checkpoint import Checkpoint, load_checkpoint
from .codec import LatentCodec
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import build_schedule
from .evalbench import (
    BenchmarkManifest,
    animate,
    bootstrap_lower_bound,
    image_alignment_score,
    load_condition_image,
    load_manifest,
    magnitude_report,
    motion_accuracy_detailed,
)
from .synth import caption_vocabulary, clip_spec_for_index, generate_clip, generate_corpus, load_corpus
from .text import Vocabulary
from .trainer import ClipBatchSource, TrainConfig, Trainer, run_training
from .utils import derive_seed, dump_json


@dataclass
class ExperimentConfig:
    work_dir: str
    clips: int = 500
    size: int = 32
    frame_count: int = 16
    base_channels: int = 32
    seed: int = 0
    val_clips: int = 50

    stage1_steps: int = 5000
    stage1_lr: float = 2e-4
    batch_frames: int = 16

    stage2_steps: int = 4000
    stage2_lr: float = 1e-3
    batch_clips: int = 2
    ablation_steps: int = 2000

    manifest_entries: int = 30
    eval_ddim_steps: int = 15
    cfg_scale: float = 7.5

    def path(self, *parts: str) -> str:
        return os.path.join(self.work_dir, *parts)


def prepare_corpus(cfg: ExperimentConfig) -> tuple[str, AffinityStats]:
    corpus_dir = cfg.path("corpus")
    if not os.path.isfile(os.path.join(corpus_dir, "captions.jsonl")):
        generate_corpus(cfg.clips, corpus_dir, size=cfg.size, seed=cfg.seed, frame_count=cfg.frame_count)
    entries = load_corpus(corpus_dir)
    stats_path = cfg.path("stats.json")
    if os.path.isfile(stats_path):
        stats = AffinityStats.from_dict(json.load(open(stats_path)))
    else:
        stats = corpus_stats([e.load(corpus_dir) for e in entries])
        dump_json(stats.to_dict(), stats_path)
    return corpus_dir, stats


def fresh_model(cfg: ExperimentConfig) -> tuple[Denoiser, LatentCodec]:
    torch.manual_seed(derive_seed(cfg.seed, "model-init"))
    vocab = Vocabulary(caption_vocabulary())
    codec = LatentCodec()
    model_cfg = DenoiserConfig(
        vocab_size=len(vocab),
        frame_count=cfg.frame_count,
        latent_channels=codec.latent_channels,
        base_channels=cfg.base_channels,
    )
    return Denoiser(model_cfg, vocab), codec


def train_base(cfg: ExperimentConfig, corpus_dir: str, stats: AffinityStats) -> str:
    out = cfg.path("ckpt-base")
    if os.path.isdir(out):
        return out
    model, codec = fresh_model(cfg)
    sched = build_schedule()
    entries = load_corpus(corpus_dir)
    source = ClipBatchSource.build(entries, corpus_dir, codec, stats, need_affinity=False)
    train_cfg = TrainConfig(
        stage="base",
        steps=cfg.stage1_steps,
        learning_rate=cfg.stage1_lr,
        batch_frames=cfg.batch_frames,
        seed=cfg.seed,
        val_clips=cfg.val_clips,
    )
    trainer = Trainer(model, codec, sched, train_cfg, source)
    meta = {"stage": "base", "resolution": cfg.size, "corpus_size": cfg.clips}
    run_training(trainer, out, train_meta=meta, log_path=cfg.path("train-base.jsonl"))
    return out


def train_adapters(
    cfg: ExperimentConfig,
    base_ckpt: str,
    name: str,
    steps: int,
    affinity_mode: str = "similarity",
    freeze_temporal: bool = False,
    stats: AffinityStats | None = None,
    corpus_dir: str | None = None,
    resume_from: str | None = None,
) -> str:
    """Train the condition module + temporal layers on top of a base model."""
    out = cfg.path(f"ckpt-{name}")
    if os.path.isdir(out):
        return out
    start = resume_from or base_ckpt
    loaded = load_checkpoint(start)
    entries = load_corpus(corpus_dir)
    source = ClipBatchSource.build(entries, corpus_dir, loaded.codec, stats, affinity_mode=affinity_mode)
    train_cfg = TrainConfig(
        stage="pia",
        steps=steps,
        learning_rate=cfg.stage2_lr,
        batch_clips=cfg.batch_clips,
        seed=cfg.seed,
        affinity_mode=affinity_mode,
        freeze_temporal=freeze_temporal,
        val_clips=cfg.val_clips,
    )
    trainer = Trainer(loaded.model, loaded.codec, loaded.schedule, train_cfg, source)
    meta = {
        "stage": "pia",
        "affinity_mode": affinity_mode,
        "freeze_temporal": freeze_temporal,
        "resolution": cfg.size,
        "corpus_size": cfg.clips,
        "stats": stats.to_dict() if stats else None,
    }
    run_training(
        trainer,
        out,
        train_meta=meta,
        resume_from=resume_from,
        log_path=cfg.path(f"train-{name}.jsonl"),
    )
    return out


_PROMPT_DIRECTIONS = ("left", "right", "up", "down")


def build_heldout_manifest(cfg: ExperimentConfig, name: str = "manifest") -> str:
    """Benchmark entries never seen in training (fresh seed space).

    Each condition image places its shape near the canvas centre so every
    prompted direction has wall headroom; the three prompts name the image's
    subject plus rotating motion directions, mirroring the training grammar.
    """
    out_dir = cfg.path(name)
    manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.isfile(manifest_path):
        return manifest_path
    os.makedirs(out_dir, exist_ok=True)
    import random

    from PIL import Image

    from .synth import ClipSpec, MotionSpec

    heldout_seed = derive_seed(cfg.seed, "heldout")
    entries = []
    for i in range(cfg.manifest_entries):
        style = clip_spec_for_index(i, heldout_seed, size=cfg.size, frame_count=cfg.frame_count)
        rng = random.Random(derive_seed(heldout_seed, "center", i))
        mid = cfg.size // 2
        center = (rng.randint(mid - 1, mid), rng.randint(mid - 1, mid))
        spec = ClipSpec(
            shape=style.shape,
            shape_color=style.shape_color,
            background_color=style.background_color,
            motion=MotionSpec("static", 0, "translate"),
            frame_count=1,
            size=cfg.size,
            radius=max(2, round(cfg.size / 8)),
            center=center,
        )
        clip = generate_clip(spec, derive_seed(heldout_seed, "clip", i))
        img_path = os.path.join(out_dir, f"entry_{i:03d}.png")
        arr = (clip.frames[0].clamp(0, 1) * 255).round().to(torch.uint8).numpy().transpose(1, 2, 0)
        Image.fromarray(np.ascontiguousarray(arr)).save(img_path)
        subject = f"{style.shape_color} {style.shape}"
        dirs = [_PROMPT_DIRECTIONS[(i + k) % 4] for k in range(3)]
        prompts = [f"{subject} moving {d} fast" for d in dirs]
        entries.append(
            {
                "id": f"entry_{i:03d}",
                "image": f"entry_{i:03d}.png",
                "prompts": prompts,
                "magnitude": "large",
            }
        )
    with open(manifest_path, "w") as fh:
        json.dump({"entries": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


@dataclass
class PairedAlignment:
    per_entry_a: list[float] = field(default_factory=list)
    per_entry_b: list[float] = field(default_factory=list)

    @property
    def diffs(self) -> list[float]:
        return [a - b for a, b in zip(self.per_entry_a, self.per_entry_b)]

    def summary(self, seed: int = 0) -> dict:
        lower = bootstrap_lower_bound(self.diffs, confidence=0.9, seed=seed)
        return {
            "mean_a": sum(self.per_entry_a) / len(self.per_entry_a),
            "mean_b": sum(self.per_entry_b) / len(self.per_entry_b),
            "mean_difference": sum(self.diffs) / len(self.diffs),
            "bootstrap_lower_90": lower,
            "confident": lower > 0.0,
            "entries": len(self.diffs),
        }


def paired_alignment(
    cfg: ExperimentConfig,
    manifest: BenchmarkManifest,
    ckpt_a: Checkpoint,
    ckpt_b: Checkpoint,
    conditioned_a: bool = True,
    conditioned_b: bool = True,
    prompt_index: int = 0,
) -> PairedAlignment:
    """Image alignment of two generation setups on the same entries/seeds."""
    out = PairedAlignment()
    for entry in manifest.entries:
        image = load_condition_image(entry.image)
        prompt = entry.prompts[prompt_index]
        seed = derive_seed(cfg.seed, "paired", entry.id, prompt_index)
        scores = []
        for ckpt, conditioned in ((ckpt_a, conditioned_a), (ckpt_b, conditioned_b)):
            video = animate(
                ckpt,
                image,
                prompt,
                magnitude=entry.magnitude or "large",
                seed=seed,
                steps=cfg.eval_ddim_steps,
                cfg_scale=cfg.cfg_scale,
                conditioned=conditioned,
            )
            scores.append(image_alignment_score(image, video))
        out.per_entry_a.append(scores[0])
        out.per_entry_b.append(scores[1])
    return out


def motion_benchmark(
    cfg: ExperimentConfig,
    manifest: BenchmarkManifest,
    ckpt: Checkpoint,
    min_videos: int = 50,
) -> dict:
    """Generate videos for (entry, prompt) pairs and score motion accuracy."""
    pairs = []
    produced = 0
    for entry in manifest.entries:
        image = load_condition_image(entry.image)
        for p_idx, prompt in enumerate(entry.prompts):
            seed = derive_seed(cfg.seed, "motion", entry.id, p_idx)
            video = animate(
                ckpt,
                image,
                prompt,
                magnitude=entry.magnitude or "large",
                seed=seed,
                steps=cfg.eval_ddim_steps,
                cfg_scale=cfg.cfg_scale,
            )
            pairs.append((video, prompt))
            produced += 1
        if produced >= min_videos:
            break
    accuracy, meta = motion_accuracy_detailed(pairs)
    meta["videos"] = produced
    return {"accuracy": accuracy, **meta}


def monotonicity_benchmark(
    cfg: ExperimentConfig,
    manifest: BenchmarkManifest,
    ckpt: Checkpoint,
    seeds: list[int],
    entry_index: int = 0,
) -> dict:
    entry = manifest.entries[entry_index]
    image = load_condition_image(entry.image)
    return magnitude_report(
        ckpt, image, entry.prompts[0], seeds, steps=cfg.eval_ddim_steps, cfg_scale=cfg.cfg_scale
    )


def run_full_experiment(cfg: ExperimentConfig) -> dict:
    """The whole pipeline; every phase caches into cfg.work_dir, and a
    completed summary for the same config is reused outright."""
    import sys
    import time

    os.makedirs(cfg.work_dir, exist_ok=True)
    summary_path = cfg.path("summary.json")
    if os.path.isfile(summary_path):
        cached = json.load(open(summary_path))
        if cached.get("config") == asdict(cfg):
            return cached

    timings: dict[str, float] = {}

    def phase(name: str, fn):
        start = time.monotonic()
        out = fn()
        timings[name] = round(time.monotonic() - start, 2)
        print(f"[experiment] {name}: {timings[name]:.1f}s", file=sys.stderr, flush=True)
        return out

    corpus_dir, stats = phase("corpus", lambda: prepare_corpus(cfg))
    base = phase("train_base", lambda: train_base(cfg, corpus_dir, stats))

    # main similarity run, with a snapshot at the ablation step count so the
    # ablation comparisons see identically-trained opponents
    snap = phase(
        "train_sim_snap",
        lambda: train_adapters(cfg, base, "sim-snap", cfg.ablation_steps, stats=stats, corpus_dir=corpus_dir),
    )
    main = phase(
        "train_pia",
        lambda: train_adapters(
            cfg, base, "pia", cfg.stage2_steps, stats=stats, corpus_dir=corpus_dir, resume_from=snap
        ),
    )
    onehot = phase(
        "train_onehot",
        lambda: train_adapters(
            cfg, base, "onehot", cfg.ablation_steps, affinity_mode="onehot", stats=stats, corpus_dir=corpus_dir
        ),
    )
    condonly = phase(
        "train_condonly",
        lambda: train_adapters(
            cfg, base, "condonly", cfg.ablation_steps, freeze_temporal=True, stats=stats, corpus_dir=corpus_dir
        ),
    )

    manifest_path = build_heldout_manifest(cfg)
    manifest = load_manifest(manifest_path)
    ckpt_main = load_checkpoint(main)

    conditioning = phase(
        "eval_conditioning",
        lambda: paired_alignment(cfg, manifest, ckpt_main, ckpt_main, conditioned_a=True, conditioned_b=False),
    )
    motion = phase("eval_motion", lambda: motion_benchmark(cfg, manifest, ckpt_main))
    mono = phase(
        "eval_monotonicity", lambda: monotonicity_benchmark(cfg, manifest, ckpt_main, seeds=list(range(10)))
    )
    ablation_aff = phase(
        "eval_ablation_affinity",
        lambda: paired_alignment(cfg, manifest, load_checkpoint(snap), load_checkpoint(onehot)),
    )
    ablation_ta = phase(
        "eval_ablation_frozen_ta",
        lambda: paired_alignment(cfg, manifest, load_checkpoint(snap), load_checkpoint(condonly)),
    )

    summary = {
        "config": asdict(cfg),
        "checkpoints": {"base": base, "pia": main, "sim_snap": snap, "onehot": onehot, "condonly": condonly},
        "manifest": manifest_path,
        "conditioning_vs_ablated": conditioning.summary(cfg.seed),
        "motion": motion,
        "monotonicity": {
            "per_seed": mono["per_seed"],
            "strict_fraction": mono["strict_fraction"],
            "degenerate": mono["degenerate"],
        },
        "ablation_similarity_vs_onehot": ablation_aff.summary(cfg.seed),
        "ablation_joint_vs_condonly": ablation_ta.summary(cfg.seed),
        "timings_seconds": timings,
    }
    dump_json(summary, summary_path)
    return summary

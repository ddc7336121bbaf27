"""Alignment metrics, benchmark manifest runner, motion-magnitude reports,
ablation comparison and user-study CSV aggregation.

Image alignment uses a fixed 8x8 average-pool embedding (cosine similarity
on a x100 scale); text/motion alignment is scored exactly by the motion
oracle instead of a learned embedding, which at this scale measures the
actual claim (the generated motion follows the prompt) without noise.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F_nn
from torch import Tensor

from .affinity import AffinitySchedule, make_preset, one_hot_schedule, rgb_to_hsv, frame_distance
from .checkpoint import Checkpoint
from .diffusion import DEFAULT_CFG_SCALE, sample_video
from .errors import ConfigError, DataError, ShapeError
from .synth import MotionSpec, motion_matches, motion_oracle, parse_motion_phrase
from .utils import derive_seed, dump_json

EMBED_POOL = 8
REPORT_SCHEMA_VERSION = 1
MAGNITUDES = ("light", "middle", "large")


# -- embeddings and scores ----------------------------------------------------


def frame_embedding(frame: Tensor) -> Tensor:
    """8x8 average-pooled RGB, flattened and L2-normalized (zero stays zero)."""
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"expected [3, H, W] frame, got {tuple(frame.shape)}")
    pooled = F_nn.adaptive_avg_pool2d(frame.unsqueeze(0).float(), (EMBED_POOL, EMBED_POOL))
    flat = pooled.flatten()
    norm = flat.norm()
    if float(norm) == 0.0:
        warnings.warn("zero-norm frame embedding; cosine defined as 0", RuntimeWarning, stacklevel=2)
        return flat
    return flat / norm


def image_alignment_score(condition_frame: Tensor, video: Tensor) -> float:
    """Mean cosine similarity (x100) of each frame embedding to the condition."""
    if video.ndim != 4 or video.shape[1] != 3:
        raise ShapeError(f"expected [F, 3, H, W] video, got {tuple(video.shape)}")
    if condition_frame.shape[-2:] != video.shape[-2:]:
        raise ShapeError("condition frame and video spatial sizes differ")
    ref = frame_embedding(condition_frame)
    sims = [float(torch.dot(ref, frame_embedding(video[i]))) for i in range(video.shape[0])]
    return 100.0 * sum(sims) / len(sims)


def motion_accuracy(entries: list[tuple[Tensor, str]]) -> float:
    """Fraction of (video, prompt) pairs where the oracle agrees with the prompt."""
    value, _ = motion_accuracy_detailed(entries)
    return value


def motion_accuracy_detailed(entries: list[tuple[Tensor, str]]) -> tuple[float, dict]:
    scored = 0
    hits = 0
    skipped = 0
    for video, prompt in entries:
        expected = parse_motion_phrase(prompt)
        if expected is None:
            skipped += 1
            continue
        scored += 1
        if motion_matches(expected, motion_oracle(video)):
            hits += 1
    accuracy = hits / scored if scored else 0.0
    return accuracy, {"scored": scored, "hits": hits, "skipped_unparseable": skipped}


# -- generation helpers -------------------------------------------------------


def schedule_for_checkpoint(ckpt: Checkpoint, magnitude: str, frame_count: int) -> AffinitySchedule:
    """The affinity pattern a model was trained with: presets for similarity
    affinity, the one-hot indicator for the one-hot ablation."""
    if ckpt.train_meta.get("affinity_mode") == "onehot":
        return one_hot_schedule(frame_count)
    return make_preset(magnitude, frame_count)


def animate(
    ckpt: Checkpoint,
    image: Tensor,
    prompt: str,
    magnitude: str = "large",
    seed: int = 0,
    steps: int | None = None,
    cfg_scale: float = DEFAULT_CFG_SCALE,
    frame_count: int | None = None,
    conditioned: bool = True,
    capture: list | None = None,
) -> Tensor:
    """Generate an [F, 3, H, W] video in [0, 1] from a condition image."""
    frames = frame_count or ckpt.model.config.frame_count
    sched = ckpt.schedule
    if steps is not None and steps != len(sched.ddim_steps):
        from .diffusion import build_schedule

        sched = build_schedule(
            T=sched.T, beta_start=float(sched.beta[0]), beta_end=float(sched.beta[-1]), ddim_count=steps
        )
    z_cond = ckpt.codec.encode(image.unsqueeze(0)).data[0]
    schedule = schedule_for_checkpoint(ckpt, magnitude, frames)
    if not conditioned:
        z_cond = torch.zeros_like(z_cond)
    prompt_embed = ckpt.model.encode_prompt(prompt)
    z = sample_video(
        ckpt.model,
        z_cond,
        schedule,
        prompt_embed,
        sched,
        w=cfg_scale,
        seed=seed,
        capture=capture,
        conditioned=conditioned,
    )
    return ckpt.codec.decode(z).clamp(0.0, 1.0)


def video_condition_distance(video: Tensor, condition_frame: Tensor) -> float:
    """Mean HSV frame distance of a video to its condition frame."""
    ref = rgb_to_hsv(condition_frame.clamp(0, 1))
    dists = [frame_distance(rgb_to_hsv(video[i].clamp(0, 1)), ref) for i in range(video.shape[0])]
    return sum(dists) / len(dists)


# -- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    prompts: tuple[str, str, str]
    magnitude: str | None = None


@dataclass(frozen=True)
class BenchmarkManifest:
    entries: tuple[ManifestEntry, ...]


def load_manifest(path: str) -> BenchmarkManifest:
    with open(path) as fh:
        doc = json.load(fh)
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    for raw in doc.get("entries", []):
        entry_id = raw.get("id", "<missing id>")
        prompts = raw.get("prompts", [])
        if len(prompts) != 3:
            raise ConfigError(f"manifest entry {entry_id!r} must have exactly 3 prompts, has {len(prompts)}")
        image = raw["image"]
        resolved = image if os.path.isabs(image) else os.path.join(root, image)
        if not os.path.isfile(resolved):
            raise ConfigError(f"manifest entry {entry_id!r}: image {image!r} not found")
        magnitude = raw.get("magnitude")
        if magnitude is not None and magnitude not in MAGNITUDES:
            raise ConfigError(f"manifest entry {entry_id!r}: unknown magnitude {magnitude!r}")
        entries.append(ManifestEntry(id=entry_id, image=resolved, prompts=tuple(prompts), magnitude=magnitude))
    if not entries:
        raise ConfigError(f"manifest {path!r} has no entries")
    return BenchmarkManifest(entries=tuple(entries))


def load_condition_image(path: str) -> Tensor:
    """[3, H, W] float image from a PNG or the first frame of a PVID file."""
    if path.endswith(".pvid"):
        from .pvid import read_pvid

        return read_pvid(path)[0]
    from PIL import Image
    import numpy as np

    with Image.open(path) as img:
        arr = np.array(img.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr).permute(2, 0, 1).to(torch.float32) / 255.0


# -- reports ------------------------------------------------------------------


def magnitude_report(
    ckpt: Checkpoint,
    image: Tensor,
    prompt: str,
    seeds: list[int],
    steps: int | None = None,
    cfg_scale: float = DEFAULT_CFG_SCALE,
) -> dict:
    """Animate one (image, prompt) under all three presets per seed and check
    that motion (HSV distance to the condition frame) orders as
    light <= middle <= large."""
    per_seed = []
    strict = 0
    all_equal = True
    for seed in seeds:
        distances = {}
        for magnitude in MAGNITUDES:
            video = animate(
                ckpt, image, prompt, magnitude=magnitude, seed=seed, steps=steps, cfg_scale=cfg_scale
            )
            distances[magnitude] = video_condition_distance(video, image)
        is_strict = distances["light"] < distances["middle"] < distances["large"]
        strict += int(is_strict)
        if not (distances["light"] == distances["middle"] == distances["large"]):
            all_equal = False
        per_seed.append({"seed": seed, "distances": distances, "strict": is_strict})
    return {
        "floors": {"light": 0.8, "middle": 0.4, "large": 0.2},
        "per_seed": per_seed,
        "strict_fraction": strict / len(seeds) if seeds else 0.0,
        "degenerate": all_equal,
    }


def bootstrap_lower_bound(
    diffs: list[float], confidence: float = 0.9, resamples: int = 2000, seed: int = 0
) -> float:
    """One-sided lower confidence bound on the mean via percentile bootstrap."""
    if not diffs:
        raise ConfigError("no differences to bootstrap")
    gen = torch.Generator().manual_seed(derive_seed(seed, "bootstrap"))
    data = torch.tensor(diffs, dtype=torch.float64)
    n = data.numel()
    idx = torch.randint(0, n, (resamples, n), generator=gen)
    means = data[idx].mean(dim=1)
    q = 1.0 - confidence
    return float(torch.quantile(means, q))


def ablation_compare(
    ckpt_a: Checkpoint,
    ckpt_b: Checkpoint,
    manifest: BenchmarkManifest,
    seed: int = 0,
    steps: int | None = None,
    cfg_scale: float = DEFAULT_CFG_SCALE,
    label_a: str = "model_a",
    label_b: str = "model_b",
) -> dict:
    """Paired image-alignment comparison of two models on one manifest.

    Refuses to compare checkpoints whose architecture, codec or noise
    schedule differ (only the affinity construction may vary).
    """
    for field, va, vb in (
        ("denoiser", ckpt_a.model.config.to_dict(), ckpt_b.model.config.to_dict()),
        ("codec", ckpt_a.codec.to_dict(), ckpt_b.codec.to_dict()),
        ("schedule", ckpt_a.schedule.config_dict(), ckpt_b.schedule.config_dict()),
    ):
        if va != vb:
            raise ConfigError(f"checkpoints differ beyond the affinity channel: {field} mismatch")

    rows = []
    diffs = []
    for entry in manifest.entries:
        image = load_condition_image(entry.image)
        magnitude = entry.magnitude or "large"
        scores = {}
        for label, ckpt in ((label_a, ckpt_a), (label_b, ckpt_b)):
            per_prompt = []
            for p_idx, prompt in enumerate(entry.prompts):
                video = animate(
                    ckpt,
                    image,
                    prompt,
                    magnitude=magnitude,
                    seed=derive_seed(seed, entry.id, p_idx),
                    steps=steps,
                    cfg_scale=cfg_scale,
                )
                per_prompt.append(image_alignment_score(image, video))
            scores[label] = sum(per_prompt) / len(per_prompt)
        rows.append({"id": entry.id, label_a: scores[label_a], label_b: scores[label_b]})
        diffs.append(scores[label_a] - scores[label_b])

    mean_a = sum(r[label_a] for r in rows) / len(rows)
    mean_b = sum(r[label_b] for r in rows) / len(rows)
    lower = bootstrap_lower_bound(diffs, confidence=0.9, seed=seed)
    return {
        "per_entry": rows,
        "mean": {label_a: mean_a, label_b: mean_b},
        "mean_difference": mean_a - mean_b,
        "bootstrap_lower_90": lower,
        "a_beats_b_confident": lower > 0.0,
    }


def run_manifest(
    ckpt: Checkpoint,
    manifest: BenchmarkManifest,
    seeds: list[int],
    steps: int | None = None,
    cfg_scale: float = DEFAULT_CFG_SCALE,
    monotonicity_seeds: list[int] | None = None,
    conditioned: bool = True,
) -> dict:
    """Full evaluation report over a manifest: image alignment, motion
    accuracy and (optionally) the magnitude-monotonicity check per entry."""
    entries_out = []
    for entry in manifest.entries:
        image = load_condition_image(entry.image)
        magnitude = entry.magnitude or "large"
        align_scores = []
        motion_entries = []
        for p_idx, prompt in enumerate(entry.prompts):
            for seed in seeds:
                video = animate(
                    ckpt,
                    image,
                    prompt,
                    magnitude=magnitude,
                    seed=derive_seed(seed, entry.id, p_idx),
                    steps=steps,
                    cfg_scale=cfg_scale,
                    conditioned=conditioned,
                )
                align_scores.append(image_alignment_score(image, video))
                motion_entries.append((video, prompt))
        accuracy, motion_meta = motion_accuracy_detailed(motion_entries)
        record = {
            "id": entry.id,
            "image_alignment": sum(align_scores) / len(align_scores),
            "motion_accuracy": accuracy,
            "motion_meta": motion_meta,
        }
        if monotonicity_seeds:
            record["affinity_monotonicity"] = magnitude_report(
                ckpt, image, entry.prompts[0], monotonicity_seeds, steps=steps, cfg_scale=cfg_scale
            )
        entries_out.append(record)

    aggregate = {
        "image_alignment": sum(e["image_alignment"] for e in entries_out) / len(entries_out),
        "motion_accuracy": sum(e["motion_accuracy"] for e in entries_out) / len(entries_out),
    }
    if monotonicity_seeds:
        aggregate["affinity_monotonicity_strict_fraction"] = sum(
            e["affinity_monotonicity"]["strict_fraction"] for e in entries_out
        ) / len(entries_out)
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "checkpoint_hash": ckpt.hash,
        "seeds": list(seeds),
        "cfg_scale": cfg_scale,
        "conditioned": conditioned,
        "entries": entries_out,
        "aggregate": aggregate,
    }


def write_report(report: dict, path: str) -> None:
    dump_json(report, path)


# -- user study ---------------------------------------------------------------

USER_STUDY_AXES = ("image", "text")


def aggregate_user_study(csv_path: str, methods: list[str] | None = None) -> dict:
    """Preference rate per method and axis from a response CSV.

    Expects the header question_id,method_chosen,axis; rows with an unknown
    method (when ``methods`` is given) or axis are rejected and counted.
    """
    counts: dict[str, dict[str, int]] = {axis: {} for axis in USER_STUDY_AXES}
    rejected = 0
    total = 0
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"question_id", "method_chosen", "axis"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"user study CSV must have columns {sorted(required)}")
        for row in reader:
            total += 1
            method = row["method_chosen"].strip()
            axis = row["axis"].strip()
            if axis not in USER_STUDY_AXES or (methods is not None and method not in methods):
                rejected += 1
                continue
            counts[axis][method] = counts[axis].get(method, 0) + 1
    rates = {}
    for axis, per_method in counts.items():
        n = sum(per_method.values())
        rates[axis] = {m: c / n for m, c in sorted(per_method.items())} if n else {}
    return {"rates": rates, "responses": total, "rejected": rejected}

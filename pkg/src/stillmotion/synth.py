"""Procedural moving-shapes video corpus with templated captions and
ground-truth motion labels, plus the segmentation-based motion oracle used
to verify motion claims on both real and generated videos.

Clips are rasterized with hard edges (no anti-aliasing) so the oracle's
foreground segmentation is exact on clean data. All randomness derives
from (seed, clip index): generation order never changes output.
"""

from __future__ import annotations

import json
import math
import os
import random
from collections import Counter
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import DataError, InputDomainError
from .pvid import read_pvid, write_pvid
from .utils import derive_seed

CANVAS_SIZE = 32
FRAME_COUNT = 16

SHAPE_COLORS = {
    "red": (220, 44, 44),
    "green": (52, 200, 64),
    "blue": (56, 96, 228),
    "yellow": (232, 220, 56),
    "cyan": (64, 212, 212),
    "magenta": (212, 64, 212),
    "orange": (236, 144, 44),
    "purple": (140, 64, 200),
    "pink": (240, 150, 180),
    "teal": (32, 136, 128),
    "lime": (164, 232, 72),
    "white": (240, 240, 240),
}

BACKGROUND_COLORS = {
    "black": (12, 12, 12),
    "darkgray": (72, 72, 72),
    "navy": (16, 24, 80),
    "darkgreen": (16, 64, 32),
    "maroon": (80, 20, 20),
    "slate": (44, 52, 60),
}

SHAPES = ("circle", "square", "triangle")
DIRECTIONS = ("left", "right", "up", "down")
SPEED_WORDS = {"slow": 1, "fast": 2}
GROWTH_RATE = 0.35  # px/frame change of the shape half-extent

_DIR_STEPS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1), "static": (0, 0)}

STATIC_THRESHOLD_PX = 0.5  # mean displacement below this is "static"
AREA_TREND_MIN = 1.0  # px^2/frame slope needed to call grow/shrink
FOREGROUND_THRESHOLD = 0.25  # mean |rgb - background| above this is foreground


@dataclass(frozen=True)
class MotionSpec:
    direction: str  # left | right | up | down | static
    speed: int  # px/frame (0 for static/grow/shrink)
    kind: str  # translate | grow | shrink

    def to_dict(self) -> dict:
        return {"direction": self.direction, "speed": self.speed, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        return cls(direction=d["direction"], speed=int(d["speed"]), kind=d["kind"])


@dataclass(frozen=True)
class ClipSpec:
    shape: str
    shape_color: str
    background_color: str
    motion: MotionSpec
    frame_count: int = FRAME_COUNT
    size: int = CANVAS_SIZE
    radius: float | None = None  # half-extent; drawn from seed when None
    center: tuple[int, int] | None = None  # start (cx, cy); drawn when None
    # Fast trajectories that cannot fit the full clip length travel at full
    # speed until the canvas margin and then hold, instead of erroring.
    clamp_at_walls: bool = False


@dataclass
class VideoClip:
    frames: Tensor  # [F, 3, H, W] in [0, 1]
    caption: str
    motion: MotionSpec
    shape: str
    shape_color: str
    background_color: str
    seed: int


def motion_phrase(motion: MotionSpec) -> str:
    if motion.kind == "grow":
        return "growing"
    if motion.kind == "shrink":
        return "shrinking"
    if motion.speed == 0 or motion.direction == "static":
        return "staying still"
    speed_word = {v: k for k, v in SPEED_WORDS.items()}[motion.speed]
    return f"moving {motion.direction} {speed_word}"


def render_caption(shape_color: str, shape: str, motion: MotionSpec) -> str:
    return f"{shape_color} {shape} {motion_phrase(motion)}"


def parse_motion_phrase(prompt: str) -> MotionSpec | None:
    """Inverse of the caption template; None when the prompt does not parse."""
    words = prompt.lower().split()
    if "growing" in words:
        return MotionSpec("static", 0, "grow")
    if "shrinking" in words:
        return MotionSpec("static", 0, "shrink")
    if "staying" in words and "still" in words:
        return MotionSpec("static", 0, "translate")
    if "moving" in words:
        direction = next((w for w in words if w in DIRECTIONS), None)
        speed = next((SPEED_WORDS[w] for w in words if w in SPEED_WORDS), 1)
        if direction is not None:
            return MotionSpec(direction, speed, "translate")
    return None


def caption_vocabulary() -> list[str]:
    """The closed caption word set, in stable sorted order."""
    words = set(SHAPE_COLORS) | set(SHAPES)
    words |= {"moving", "staying", "still", "growing", "shrinking"}
    words |= set(DIRECTIONS) | set(SPEED_WORDS)
    return sorted(words)


def _shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> Tensor:
    ys = torch.arange(size, dtype=torch.float64).view(-1, 1).expand(size, size)
    xs = torch.arange(size, dtype=torch.float64).view(1, -1).expand(size, size)
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == "square":
        return torch.maximum((xs - cx).abs(), (ys - cy).abs()) <= r
    if shape == "triangle":
        inside_rows = (ys >= cy - r) & (ys <= cy + r)
        return inside_rows & ((xs - cx).abs() <= (ys - (cy - r)) / 2.0)
    raise InputDomainError(f"unknown shape {shape!r}")


def _color_tensor(rgb: tuple[int, int, int]) -> Tensor:
    return torch.tensor(rgb, dtype=torch.float32).view(3, 1, 1) / 255.0


def _trajectory(spec: ClipSpec, cx: int, cy: int, r: float) -> list[tuple[float, float, float]]:
    dx, dy = _DIR_STEPS[spec.motion.direction]
    rate = {"grow": GROWTH_RATE, "shrink": -GROWTH_RATE}.get(spec.motion.kind, 0.0)
    out = []
    for i in range(spec.frame_count):
        px = cx + dx * spec.motion.speed * i
        py = cy + dy * spec.motion.speed * i
        pr = r + rate * i
        if spec.clamp_at_walls:
            lo, hi = 1.0 + pr, spec.size - 2.0 - pr
            px = min(max(px, lo), hi)
            py = min(max(py, lo), hi)
        out.append((px, py, pr))
    return out


def _check_in_canvas(spec: ClipSpec, traj: list[tuple[float, float, float]]) -> None:
    lo, hi = 1.0, spec.size - 2.0
    for cx, cy, r in traj:
        if r < 1.0:
            raise InputDomainError("shape shrinks below 1 px half-extent")
        if cx - r < lo or cx + r > hi or cy - r < lo or cy + r > hi:
            raise InputDomainError(
                f"trajectory leaves the canvas: center ({cx}, {cy}) half-extent {r}"
            )


def generate_clip(spec: ClipSpec, seed: int) -> VideoClip:
    """Deterministic rasterization of one clip; caption rendered from metadata."""
    if spec.shape not in SHAPES:
        raise InputDomainError(f"unknown shape {spec.shape!r}")
    if spec.shape_color not in SHAPE_COLORS or spec.background_color not in BACKGROUND_COLORS:
        raise InputDomainError("unknown color name")

    rng = random.Random(derive_seed(seed, "clip-geometry"))
    f = spec.frame_count
    dx, dy = _DIR_STEPS[spec.motion.direction]
    travel = (0 if spec.clamp_at_walls else spec.motion.speed * (f - 1)) * (abs(dx) + abs(dy))

    base_lo = max(2, round(spec.size / 8))
    base_hi = max(base_lo, round(spec.size * 3 / 16))
    if spec.motion.kind == "grow":
        grow_hi = math.floor((spec.size - 3) / 2 - GROWTH_RATE * (f - 1))
        hi = max(base_lo, min(base_lo + 1, grow_hi))
        r0 = spec.radius if spec.radius is not None else rng.randint(base_lo, hi)
        r_max = r0 + GROWTH_RATE * (f - 1)
    elif spec.motion.kind == "shrink":
        shrink_lo = max(base_lo, int(1 + GROWTH_RATE * (f - 1)) + 1)
        shrink_hi = max(shrink_lo, min(round(spec.size * 0.3), math.floor((spec.size - 3) / 2)))
        r0 = spec.radius if spec.radius is not None else rng.randint(shrink_lo, shrink_hi)
        r_max = r0
    else:
        # cap the radius so the full travel still fits the canvas
        cap = math.floor((spec.size - 3 - travel) / 2)
        hi = min(base_hi, cap) if cap >= base_lo else base_lo
        r0 = spec.radius if spec.radius is not None else rng.randint(base_lo, max(base_lo, hi))
        r_max = r0

    if spec.center is not None:
        cx, cy = spec.center
    else:
        if spec.clamp_at_walls:
            # any in-canvas start works; bias toward the trailing wall so the
            # clip gets the longest possible run at full speed
            lo = math.ceil(1 + r_max)
            hi = math.floor(spec.size - 2 - r_max)
            if lo > hi:
                raise InputDomainError("shape too large for the canvas")
            cx = rng.randint(lo, min(lo + 2, hi)) if dx > 0 else rng.randint(max(hi - 2, lo), hi) if dx < 0 else rng.randint(lo, hi)
            cy = rng.randint(lo, min(lo + 2, hi)) if dy > 0 else rng.randint(max(hi - 2, lo), hi) if dy < 0 else rng.randint(lo, hi)
        else:
            total_x = dx * spec.motion.speed * (f - 1)
            total_y = dy * spec.motion.speed * (f - 1)
            x_lo = math.ceil(1 + r_max + max(0.0, -total_x))
            x_hi = math.floor(spec.size - 2 - r_max - max(0.0, total_x))
            y_lo = math.ceil(1 + r_max + max(0.0, -total_y))
            y_hi = math.floor(spec.size - 2 - r_max - max(0.0, total_y))
            if x_lo > x_hi or y_lo > y_hi:
                raise InputDomainError("no valid start position keeps the trajectory in-canvas")
            cx = rng.randint(x_lo, x_hi)
            cy = rng.randint(y_lo, y_hi)

    traj = _trajectory(spec, cx, cy, float(r0))
    _check_in_canvas(spec, traj)

    bg = _color_tensor(BACKGROUND_COLORS[spec.background_color])
    fg = _color_tensor(SHAPE_COLORS[spec.shape_color])
    frames = bg.expand(f, 3, spec.size, spec.size).clone()
    for i, (px, py, pr) in enumerate(traj):
        mask = _shape_mask(spec.shape, px, py, pr, spec.size)
        frames[i] = torch.where(mask.unsqueeze(0), fg, frames[i])

    return VideoClip(
        frames=frames,
        caption=render_caption(spec.shape_color, spec.shape, spec.motion),
        motion=spec.motion,
        shape=spec.shape,
        shape_color=spec.shape_color,
        background_color=spec.background_color,
        seed=seed,
    )


_DIRECTION_CYCLE = ("left", "right", "up", "down", "static")
_STATIC_KINDS = ("translate", "grow", "shrink")


def motion_for_index(index: int) -> MotionSpec:
    """Round-robin motion assignment: every direction class appears count/5 (+-1)."""
    direction = _DIRECTION_CYCLE[index % 5]
    round_no = index // 5
    if direction == "static":
        kind = _STATIC_KINDS[round_no % 3]
        return MotionSpec("static", 0, kind)
    speed = 1 if round_no % 2 == 0 else 2
    return MotionSpec(direction, speed, "translate")


def clip_spec_for_index(index: int, seed: int, size: int = CANVAS_SIZE, frame_count: int = FRAME_COUNT) -> ClipSpec:
    rng = random.Random(derive_seed(seed, "clip-style", index))
    shape = SHAPES[rng.randrange(len(SHAPES))]
    color_names = sorted(SHAPE_COLORS)
    bg_names = sorted(BACKGROUND_COLORS)
    shape_color = color_names[rng.randrange(len(color_names))]
    background = bg_names[rng.randrange(len(bg_names))]
    while _palette_distance(SHAPE_COLORS[shape_color], BACKGROUND_COLORS[background]) < 90:
        background = bg_names[rng.randrange(len(bg_names))]
    motion = motion_for_index(index)
    # trajectories whose full travel cannot fit the canvas (e.g. speed 2 over
    # 16 frames on 32px) run at full speed and hold at the margin instead
    min_radius = max(2, round(size / 8))
    travel = motion.speed * (frame_count - 1)
    return ClipSpec(
        shape=shape,
        shape_color=shape_color,
        background_color=background,
        motion=motion,
        frame_count=frame_count,
        size=size,
        clamp_at_walls=motion.kind == "translate" and travel > size - 3 - 2 * min_radius,
    )


def _palette_distance(a: tuple[int, int, int], b: tuple[int, int, int]) -> float:
    return sum(abs(x - y) for x, y in zip(a, b)) / 3.0


@dataclass
class CorpusEntry:
    file: str
    caption: str
    motion: MotionSpec
    seed: int
    frames: Tensor | None = field(default=None, repr=False)

    def load(self, root: str) -> Tensor:
        if self.frames is None:
            self.frames = read_pvid(os.path.join(root, self.file))
        return self.frames


def generate_corpus(
    count: int,
    out_dir: str,
    size: int = CANVAS_SIZE,
    seed: int = 0,
    frame_count: int = FRAME_COUNT,
) -> list[CorpusEntry]:
    """Write ``count`` stratified clips as PVID files plus captions.jsonl."""
    if count < 1:
        raise InputDomainError(f"count must be >= 1, got {count}")
    os.makedirs(out_dir, exist_ok=True)
    entries: list[CorpusEntry] = []
    lines = []
    for i in range(count):
        spec = clip_spec_for_index(i, seed, size=size, frame_count=frame_count)
        clip = generate_clip(spec, derive_seed(seed, "clip", i))
        name = f"clip_{i:05d}.pvid"
        try:
            write_pvid(os.path.join(out_dir, name), clip.frames)
        except OSError as exc:
            raise DataError(f"cannot write {os.path.join(out_dir, name)}: {exc}") from exc
        entry = CorpusEntry(file=name, caption=clip.caption, motion=clip.motion, seed=clip.seed, frames=clip.frames)
        entries.append(entry)
        lines.append(
            json.dumps(
                {"file": name, "caption": clip.caption, "motion": clip.motion.to_dict(), "seed": clip.seed},
                sort_keys=True,
            )
        )
    tmp = os.path.join(out_dir, "captions.jsonl.tmp")
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(out_dir, "captions.jsonl"))
    return entries


def load_corpus(corpus_dir: str) -> list[CorpusEntry]:
    path = os.path.join(corpus_dir, "captions.jsonl")
    if not os.path.isfile(path):
        raise DataError(f"no captions.jsonl under {corpus_dir!r}")
    entries = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            entries.append(
                CorpusEntry(
                    file=rec["file"],
                    caption=rec["caption"],
                    motion=MotionSpec.from_dict(rec["motion"]),
                    seed=int(rec["seed"]),
                )
            )
    return entries


# -- motion oracle ----------------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    direction: str  # left | right | up | down | static | empty
    mean_displacement_px: float
    area_trend: float  # px^2 per frame, least-squares slope


def _border_background(frame: Tensor) -> Tensor:
    u8 = (frame.clamp(0, 1) * 255.0).round().to(torch.int64)
    border = torch.cat(
        [u8[:, 0, :], u8[:, -1, :], u8[:, :, 0], u8[:, :, -1]],
        dim=1,
    )  # [3, N]
    triples = [tuple(border[:, i].tolist()) for i in range(border.shape[1])]
    most_common = Counter(triples).most_common(1)[0][0]
    return torch.tensor(most_common, dtype=torch.float32).view(3, 1, 1) / 255.0


def motion_oracle(frames: Tensor, fg_threshold: float = FOREGROUND_THRESHOLD) -> OracleResult:
    """Segment the moving shape against the border background and classify.

    Direction comes from the dominant axis/sign of the mean centroid
    displacement ("static" below 0.5 px/frame); area_trend is the
    least-squares slope of the foreground pixel count over frames.
    """
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise DataError(f"expected [F, 3, H, W] video, got {tuple(frames.shape)}")
    f = frames.shape[0]
    centroids: list[tuple[float, float] | None] = []
    areas: list[float] = []
    for i in range(f):
        bg = _border_background(frames[i])
        dist = (frames[i] - bg).abs().mean(dim=0)
        mask = dist > fg_threshold
        count = int(mask.sum())
        areas.append(float(count))
        if count == 0:
            centroids.append(None)
            continue
        ys, xs = torch.nonzero(mask, as_tuple=True)
        centroids.append((float(xs.to(torch.float64).mean()), float(ys.to(torch.float64).mean())))

    valid = [c for c in centroids if c is not None]
    if not valid:
        return OracleResult("empty", 0.0, 0.0)

    steps = []
    for a, b in zip(centroids[:-1], centroids[1:]):
        if a is not None and b is not None:
            steps.append((b[0] - a[0], b[1] - a[1]))
    if steps:
        dx = sum(s[0] for s in steps) / len(steps)
        dy = sum(s[1] for s in steps) / len(steps)
    else:
        dx = dy = 0.0
    magnitude = (dx * dx + dy * dy) ** 0.5

    # area slope via least squares over frame index
    n = len(areas)
    xs_mean = (n - 1) / 2.0
    ys_mean = sum(areas) / n
    denom = sum((i - xs_mean) ** 2 for i in range(n))
    slope = sum((i - xs_mean) * (a - ys_mean) for i, a in enumerate(areas)) / denom if denom else 0.0

    if magnitude < STATIC_THRESHOLD_PX:
        direction = "static"
    elif abs(dx) >= abs(dy):
        direction = "right" if dx > 0 else "left"
    else:
        direction = "down" if dy > 0 else "up"
    return OracleResult(direction, magnitude, slope)


def motion_matches(expected: MotionSpec, observed: OracleResult) -> bool:
    """Does the oracle's reading of a video agree with a motion label?"""
    if expected.kind == "grow":
        return observed.direction == "static" and observed.area_trend > AREA_TREND_MIN
    if expected.kind == "shrink":
        return observed.direction == "static" and observed.area_trend < -AREA_TREND_MIN
    if expected.direction == "static" or expected.speed == 0:
        return observed.direction == "static" and abs(observed.area_trend) <= AREA_TREND_MIN
    return observed.direction == expected.direction

"""Inter-frame affinity: HSV frame distances, corpus statistics, score
schedules, inference presets and expansion to latent-resolution maps.

A frame's affinity score measures how close it looks to the condition frame
(frame 1 of a clip): 1.0 for the condition frame itself, down to ``s_min``
for the most-changed frames in the corpus. Distances are clamped to the
[2.5th, 97.5th] percentile band of the pooled corpus distances before the
linear map, so outliers cannot stretch the scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import Tensor

from .errors import ConfigError, InputDomainError, ShapeError

PRESET_FLOORS = {"light": 0.8, "middle": 0.4, "large": 0.2}

LOWER_PERCENTILE = 2.5
UPPER_PERCENTILE = 97.5


@dataclass(frozen=True)
class HsvFrame:
    """A frame in HSV space, channels each in [0, 1]."""

    hsv: Tensor  # [3, H, W]

    @property
    def h(self) -> Tensor:
        return self.hsv[0]

    @property
    def s(self) -> Tensor:
        return self.hsv[1]

    @property
    def v(self) -> Tensor:
        return self.hsv[2]

    @property
    def height(self) -> int:
        return int(self.hsv.shape[1])

    @property
    def width(self) -> int:
        return int(self.hsv.shape[2])


@dataclass(frozen=True)
class AffinityStats:
    """Corpus distance percentiles plus the score range they map onto.

    d_lo (2.5th percentile) maps to score 1.0, d_hi (97.5th) to s_min.
    """

    d_lo: float
    d_hi: float
    s_min: float
    s_max: float
    sample_count: int
    degenerate: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.s_min <= self.s_max):
            raise ConfigError(f"need 0 < s_min <= s_max, got ({self.s_min}, {self.s_max})")
        if self.s_max != 1.0:
            # The affinity formula pins the condition frame at 1.0, which is
            # only consistent with the score range when s_max is exactly 1.
            raise ConfigError(f"s_max must be 1.0, got {self.s_max}")
        if self.d_lo < 0 or self.d_hi < self.d_lo:
            raise ConfigError(f"need 0 <= d_lo <= d_hi, got ({self.d_lo}, {self.d_hi})")
        if self.sample_count <= 0:
            raise ConfigError("sample_count must be positive")

    def to_dict(self) -> dict:
        return {
            "d_lo": self.d_lo,
            "d_hi": self.d_hi,
            "s_min": self.s_min,
            "s_max": self.s_max,
            "sample_count": self.sample_count,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AffinityStats":
        return cls(
            d_lo=float(d["d_lo"]),
            d_hi=float(d["d_hi"]),
            s_min=float(d["s_min"]),
            s_max=float(d["s_max"]),
            sample_count=int(d["sample_count"]),
            degenerate=bool(d.get("degenerate", False)),
        )


@dataclass(frozen=True)
class AffinitySchedule:
    """Per-frame affinity scores s^1..s^F; the condition frame scores 1.0."""

    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.scores) < 1:
            raise ConfigError("schedule needs at least one frame")
        if self.scores[0] != 1.0:
            raise ConfigError(f"condition frame must score 1.0, got {self.scores[0]}")

    @property
    def frame_count(self) -> int:
        return len(self.scores)


def rgb_to_hsv(frame: Tensor) -> HsvFrame:
    """Hexcone RGB -> HSV conversion, all channels scaled to [0, 1].

    H is defined as 0 where saturation is 0 (gray pixels).
    """
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"expected [3, H, W] RGB frame, got {tuple(frame.shape)}")
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise InputDomainError("RGB channels must lie in [0, 1]")

    r, g, b = frame[0], frame[1], frame[2]
    maxc = frame.amax(dim=0)
    minc = frame.amin(dim=0)
    v = maxc
    rng = maxc - minc

    safe_rng = torch.where(rng == 0, torch.ones_like(rng), rng)
    s = torch.where(maxc == 0, torch.zeros_like(maxc), rng / torch.where(maxc == 0, torch.ones_like(maxc), maxc))

    rc = (maxc - r) / safe_rng
    gc = (maxc - g) / safe_rng
    bc = (maxc - b) / safe_rng
    h = torch.where(
        maxc == r,
        bc - gc,
        torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc),
    )
    h = (h / 6.0) % 1.0
    h = torch.where(rng == 0, torch.zeros_like(h), h)
    return HsvFrame(torch.stack([h, s, v]))


def frame_distance(frame_a: HsvFrame, frame_b: HsvFrame) -> float:
    """Mean absolute HSV difference over pixels and channels (symmetric)."""
    if frame_a.hsv.shape != frame_b.hsv.shape:
        raise ShapeError(
            f"frame shape mismatch: {tuple(frame_a.hsv.shape)} vs {tuple(frame_b.hsv.shape)}"
        )
    return float((frame_a.hsv.double() - frame_b.hsv.double()).abs().mean())


def clip_distances(frames: Tensor) -> list[float]:
    """HSV distances d^2..d^F of each frame to the condition frame (frame 1)."""
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"expected [F, 3, H, W] video, got {tuple(frames.shape)}")
    cond = rgb_to_hsv(frames[0])
    return [frame_distance(rgb_to_hsv(frames[i]), cond) for i in range(1, frames.shape[0])]


def percentile(values: Sequence[float], p: float) -> float:
    """Linear-interpolation percentile over a full sort of ``values``.

    Matches the standard definition h = (n-1)*p/100 with monotone
    interpolation between the two bracketing order statistics.
    """
    if not values:
        raise InputDomainError("percentile of empty sequence")
    if not (0.0 <= p <= 100.0):
        raise InputDomainError(f"percentile must be in [0, 100], got {p}")
    xs = sorted(float(x) for x in values)
    n = len(xs)
    h = (n - 1) * (p / 100.0)
    lo = math.floor(h)
    hi = math.ceil(h)
    if lo == hi:
        return xs[lo]
    a, b = xs[lo], xs[hi]
    t = h - lo
    d = b - a
    # Interpolate from the nearer endpoint so the result is monotone in p
    # and bit-stable regardless of which side carries rounding error.
    return a + d * t if t < 0.5 else b - d * (1.0 - t)


def corpus_stats(
    clips: Iterable[Tensor],
    s_min: float = 0.2,
    s_max: float = 1.0,
) -> AffinityStats:
    """Pool per-frame distances over a corpus and fit the affinity scale.

    Each clip is an [F, 3, H, W] RGB tensor; frame 1 is its condition frame.
    """
    pool: list[float] = []
    for frames in clips:
        if frames.shape[0] < 2:
            continue
        pool.extend(clip_distances(frames))
    if not pool:
        raise InputDomainError("corpus has no clip with at least two frames")

    d_lo = percentile(pool, LOWER_PERCENTILE)
    d_hi = percentile(pool, UPPER_PERCENTILE)
    degenerate = d_lo == d_hi
    if degenerate:
        warnings.warn(
            "degenerate corpus: all pooled distances coincide; every frame will score 1.0",
            RuntimeWarning,
            stacklevel=2,
        )
    return AffinityStats(
        d_lo=d_lo,
        d_hi=d_hi,
        s_min=s_min,
        s_max=s_max,
        sample_count=len(pool),
        degenerate=degenerate,
    )


def score_distance(d: float, stats: AffinityStats) -> float:
    """Affinity score for one distance: 1.0 at d<=d_lo, s_min at d>=d_hi."""
    if stats.degenerate or d <= stats.d_lo:
        return 1.0
    if d >= stats.d_hi:
        return stats.s_min
    d_norm = (d - stats.d_lo) / (stats.d_hi - stats.d_lo)
    return 1.0 - d_norm * (stats.s_max - stats.s_min)


def score_frames(distances: Sequence[float], stats: AffinityStats) -> AffinitySchedule:
    """Schedule for a clip from its frame distances d^2..d^F.

    The condition frame (distance 0 by definition) is prepended with score 1.0.
    """
    scores = [1.0] + [score_distance(float(d), stats) for d in distances]
    return AffinitySchedule(tuple(scores))


def make_preset(magnitude: str, frame_count: int) -> AffinitySchedule:
    """Inference preset: linear ramp from 1.0 down to the magnitude floor.

    Floors: light=0.8, middle=0.4, large=0.2 (lower floor, larger motion).
    """
    if magnitude not in PRESET_FLOORS:
        raise ConfigError(f"unknown magnitude {magnitude!r}; expected one of {sorted(PRESET_FLOORS)}")
    if frame_count < 1:
        raise ConfigError("frame_count must be >= 1")
    floor = PRESET_FLOORS[magnitude]
    if frame_count == 1:
        return AffinitySchedule((1.0,))
    scores = [1.0 - (i / (frame_count - 1)) * (1.0 - floor) for i in range(frame_count)]
    scores[0] = 1.0
    scores[-1] = floor  # exact endpoint, no accumulated rounding
    return AffinitySchedule(tuple(scores))


def one_hot_schedule(frame_count: int) -> AffinitySchedule:
    """Ablation pattern: 1 at the condition frame, 0 elsewhere.

    Only valid as a raw conditioning channel; it is not a score schedule in
    the [s_min, 1] sense, so it bypasses the range checks by construction.
    """
    if frame_count < 1:
        raise ConfigError("frame_count must be >= 1")
    return AffinitySchedule(tuple([1.0] + [0.0] * (frame_count - 1)))


def expand_to_map(schedule: AffinitySchedule, latent_h: int, latent_w: int) -> Tensor:
    """Per-frame constant maps [F, 1, latent_h, latent_w] of the scores."""
    if latent_h < 1 or latent_w < 1:
        raise ShapeError(f"latent dims must be positive, got ({latent_h}, {latent_w})")
    scores = torch.tensor(schedule.scores, dtype=torch.float32)
    return scores.view(-1, 1, 1, 1).expand(-1, 1, latent_h, latent_w).clone()

"""Lossless latent codec: space-to-depth patchify with a fixed affine map.

Stands in for a learned VAE so the diffusion operates in a compact latent
space with an exact decode(encode(x)) == x roundtrip. With the default
shift/scale of 0.5 the latents of [0, 1] video live in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ShapeError


@dataclass(frozen=True)
class LatentVideo:
    data: Tensor  # [F, C_lat, h, w]
    patch: int
    norm_shift: tuple[float, float, float]
    norm_scale: tuple[float, float, float]


class LatentCodec:
    """Bijective RGB <-> latent transform (pure, stateless given config)."""

    def __init__(
        self,
        patch: int = 2,
        shift: tuple[float, float, float] = (0.5, 0.5, 0.5),
        scale: tuple[float, float, float] = (0.5, 0.5, 0.5),
    ):
        if patch < 1:
            raise ShapeError(f"patch must be >= 1, got {patch}")
        if any(s == 0 for s in scale):
            raise ShapeError("scale entries must be nonzero")
        self.patch = patch
        self.shift = tuple(float(s) for s in shift)
        self.scale = tuple(float(s) for s in scale)

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch * self.patch

    def latent_size(self, height: int, width: int) -> tuple[int, int]:
        return height // self.patch, width // self.patch

    def encode(self, frames: Tensor) -> LatentVideo:
        """[F, 3, H, W] RGB -> normalized space-to-depth latent."""
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"expected [F, 3, H, W], got {tuple(frames.shape)}")
        f, _, height, width = frames.shape
        p = self.patch
        if height % p != 0 or width % p != 0:
            raise ShapeError(f"H, W must be divisible by patch={p}, got {height}x{width}")

        shift = torch.tensor(self.shift, dtype=frames.dtype).view(1, 3, 1, 1)
        scale = torch.tensor(self.scale, dtype=frames.dtype).view(1, 3, 1, 1)
        x = (frames - shift) / scale
        # [F, 3, h, p, w, p] -> [F, 3, p, p, h, w] -> [F, 3*p*p, h, w]
        x = x.reshape(f, 3, height // p, p, width // p, p)
        x = x.permute(0, 1, 3, 5, 2, 4).reshape(f, self.latent_channels, height // p, width // p)
        return LatentVideo(x, self.patch, self.shift, self.scale)

    def decode(self, z: LatentVideo | Tensor) -> Tensor:
        """Exact inverse of encode, back to [F, 3, H, W]."""
        data = z.data if isinstance(z, LatentVideo) else z
        if data.ndim != 4 or data.shape[1] != self.latent_channels:
            raise ShapeError(
                f"expected [F, {self.latent_channels}, h, w] latent, got {tuple(data.shape)}"
            )
        f, _, h, w = data.shape
        p = self.patch
        x = data.reshape(f, 3, p, p, h, w)
        x = x.permute(0, 1, 4, 2, 5, 3).reshape(f, 3, h * p, w * p)
        shift = torch.tensor(self.shift, dtype=data.dtype).view(1, 3, 1, 1)
        scale = torch.tensor(self.scale, dtype=data.dtype).view(1, 3, 1, 1)
        return x * scale + shift

    def to_dict(self) -> dict:
        return {"patch": self.patch, "shift": list(self.shift), "scale": list(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentCodec":
        return cls(patch=int(d["patch"]), shift=tuple(d["shift"]), scale=tuple(d["scale"]))

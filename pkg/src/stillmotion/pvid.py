"""PVID raw video container.

Layout (all integers little-endian):
  magic   4 bytes  b"PVID"
  u32     version (1)
  u32     F, H, W, C
  bytes   F*H*W*C of u8 channel data, row-major per frame
"""

from __future__ import annotations

import struct

import numpy as np
import torch
from torch import Tensor

from .errors import DataError

MAGIC = b"PVID"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def frames_to_u8(frames: Tensor) -> np.ndarray:
    """[F, C, H, W] float video in [0, 1] -> [F, H, W, C] u8 (clamped)."""
    arr = frames.detach().cpu().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8).numpy()
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))


def u8_to_frames(arr: np.ndarray) -> Tensor:
    """[F, H, W, C] u8 -> [F, C, H, W] float32 in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return t.to(torch.float32) / 255.0


def write_pvid(path: str, frames: Tensor) -> None:
    if frames.ndim != 4:
        raise DataError(f"expected [F, C, H, W] video, got {tuple(frames.shape)}")
    f, c, h, w = frames.shape
    data = frames_to_u8(frames)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, f, h, w, c))
        fh.write(data.tobytes())


def read_pvid(path: str) -> Tensor:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DataError(f"{path}: truncated PVID header")
        magic, version, f, h, w, c = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise DataError(f"{path}: unsupported PVID version {version}")
        payload = fh.read(f * h * w * c)
        if len(payload) != f * h * w * c:
            raise DataError(f"{path}: truncated PVID payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(f, h, w, c)
    return u8_to_frames(arr)

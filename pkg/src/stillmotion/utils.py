"""Seeding, thread-cap and small serialization helpers."""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any

import torch

THREAD_ENV_VAR = "PIA_NUM_THREADS"


def derive_seed(seed: int, *parts: Any) -> int:
    """Stable 63-bit sub-seed from a root seed and a tuple of context parts.

    Used everywhere a unit of work (clip index, manifest entry, sampler call)
    needs its own stream: parallel execution order can never change results.
    """
    payload = json.dumps([seed, *[str(p) for p in parts]]).encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def new_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(seed)
    return gen


def thread_cap() -> int | None:
    """Worker-thread cap from the environment, or None if unset/invalid."""
    raw = os.environ.get(THREAD_ENV_VAR)
    if not raw:
        return None
    try:
        cap = int(raw)
    except ValueError:
        return None
    return cap if cap >= 1 else None


def apply_thread_limits(deterministic: bool) -> None:
    """Configure torch threading: single-threaded when deterministic."""
    if deterministic:
        torch.set_num_threads(1)
        return
    cap = thread_cap()
    if cap is not None:
        torch.set_num_threads(cap)


def dump_json(obj: Any, path: str) -> None:
    """Write canonical JSON (sorted keys, fixed separators) atomically."""
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def config_hash(obj: Any) -> str:
    """Short stable hash of a JSON-serializable config, for report provenance."""
    blob = json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]

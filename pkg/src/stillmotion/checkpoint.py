"""Checkpoint directory format.

A checkpoint is a directory holding:
  model.json  - denoiser/codec/schedule config, vocabulary, training
                metadata, and the parameter index (name -> shape, dtype,
                file, byte offset)
  params.bin  - little-endian float32 parameter data, concatenated in
                index order
  train_state.json / optim.bin (optional) - optimizer moments, RNG state
                and step counter so interrupted runs resume exactly

Writes are atomic: everything lands in a temp directory that is then
renamed into place.
"""

from __future__ import annotations

import base64
import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

from .codec import LatentCodec
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, build_schedule
from .errors import DataError
from .text import Vocabulary
from .utils import config_hash

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: Denoiser
    codec: LatentCodec
    schedule: NoiseSchedule
    train_meta: dict
    path: str

    @property
    def hash(self) -> str:
        return config_hash(
            {
                "denoiser": self.model.config.to_dict(),
                "codec": self.codec.to_dict(),
                "schedule": self.schedule.config_dict(),
                "train_meta": self.train_meta,
            }
        )


def _write_params(directory: str, named: dict[str, torch.Tensor]) -> dict[str, dict]:
    index: dict[str, dict] = {}
    offset = 0
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        # sorted name order == JSON index order == concatenation order
        for name, tensor in sorted(named.items()):
            arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
            fh.write(arr.tobytes())
            index[name] = {
                "shape": list(tensor.shape),
                "dtype": "f4",
                "file": "params.bin",
                "offset": offset,
            }
            offset += arr.nbytes
    return index


def _read_params(directory: str, index: dict[str, dict]) -> dict[str, torch.Tensor]:
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        raw = fh.read()
    state: dict[str, torch.Tensor] = {}
    for name, meta in index.items():
        if meta["dtype"] != "f4" or meta["file"] != "params.bin":
            raise DataError(f"unsupported parameter entry for {name}: {meta}")
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(meta["shape"])
        state[name] = torch.from_numpy(arr.copy())
    return state


def save_checkpoint(
    path: str,
    model: Denoiser,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    train_meta: dict | None = None,
    train_state: dict[str, Any] | None = None,
) -> None:
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=os.path.basename(path) + ".tmp", dir=parent)
    try:
        index = _write_params(tmp, dict(model.state_dict()))
        doc = {
            "format_version": FORMAT_VERSION,
            "config": {
                "denoiser": model.config.to_dict(),
                "codec": codec.to_dict(),
                "schedule": schedule.config_dict(),
            },
            "vocab": model.vocab.to_list(),
            "train_meta": train_meta or {},
            "params": index,
        }
        with open(os.path.join(tmp, "model.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if train_state is not None:
            _write_train_state(tmp, train_state)
        if os.path.isdir(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    doc_path = os.path.join(path, "model.json")
    if not os.path.isfile(doc_path):
        raise DataError(f"no model.json under {path!r}")
    with open(doc_path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('format_version')}")

    vocab = Vocabulary.from_list(doc["vocab"])
    config = DenoiserConfig.from_dict(doc["config"]["denoiser"])
    model = Denoiser(config, vocab)
    state = _read_params(path, doc["params"])
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise DataError(f"checkpoint parameter set mismatch: {sorted(missing)[:5]}")
    model.load_state_dict(state)

    codec = LatentCodec.from_dict(doc["config"]["codec"])
    sc = doc["config"]["schedule"]
    schedule = build_schedule(
        T=sc["T"], beta_start=sc["beta_start"], beta_end=sc["beta_end"], ddim_count=sc["ddim_steps"]
    )
    return Checkpoint(
        model=model, codec=codec, schedule=schedule, train_meta=doc.get("train_meta", {}), path=path
    )


def _write_train_state(directory: str, train_state: dict[str, Any]) -> None:
    tensors: dict[str, torch.Tensor] = train_state.get("tensors", {})
    index = _write_params_file(directory, "optim.bin", tensors)
    doc = {
        "step": train_state.get("step", 0),
        "rng_state": base64.b64encode(train_state.get("rng_bytes", b"")).decode(),
        "scalars": train_state.get("scalars", {}),
        "tensors": index,
    }
    with open(os.path.join(directory, "train_state.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_params_file(directory: str, filename: str, named: dict[str, torch.Tensor]) -> dict:
    index: dict[str, dict] = {}
    offset = 0
    with open(os.path.join(directory, filename), "wb") as fh:
        for name, tensor in sorted(named.items()):
            arr = tensor.detach().cpu().to(torch.float64).numpy().astype("<f8")
            fh.write(arr.tobytes())
            index[name] = {"shape": list(tensor.shape), "dtype": "f8", "file": filename, "offset": offset}
            offset += arr.nbytes
    return index


def load_train_state(path: str) -> dict[str, Any] | None:
    doc_path = os.path.join(path, "train_state.json")
    if not os.path.isfile(doc_path):
        return None
    with open(doc_path) as fh:
        doc = json.load(fh)
    with open(os.path.join(path, "optim.bin"), "rb") as fh:
        raw = fh.read()
    tensors: dict[str, torch.Tensor] = {}
    for name, meta in doc["tensors"].items():
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=meta["offset"]).reshape(meta["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    return {
        "step": doc["step"],
        "rng_bytes": base64.b64decode(doc["rng_state"]),
        "scalars": doc.get("scalars", {}),
        "tensors": tensors,
    }

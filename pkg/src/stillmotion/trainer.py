"""Two-stage training.

Stage "base" trains the per-frame text-to-image denoiser on single frames
(temporal attention and condition module inactive). Stage "pia" freezes
every base parameter and jointly trains the condition module and the
temporal attention layers on whole clips, dropping both condition inputs
jointly with probability 0.2 so the model retains text-to-video behaviour
for classifier-free guidance.

All randomness in a run flows from one seeded generator (batch indices,
timesteps, noise, dropout draws), so a (seed, config, corpus) triple fully
determines the checkpoint bytes in single-threaded mode; the generator
state is stored in checkpoints so resumed runs continue the same stream.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import Tensor

from .affinity import AffinityStats, AffinitySchedule, clip_distances, expand_to_map, one_hot_schedule, score_frames
from .checkpoint import load_train_state, save_checkpoint
from .codec import LatentCodec
from .denoiser import Denoiser
from .diffusion import NoiseSchedule
from .errors import ConfigError, ModelError
from .synth import CorpusEntry
from .utils import derive_seed, new_generator

DEFAULT_PIA_LR = 1e-5  # published fine-tuning rate; kept as the CLI default
DEFAULT_BASE_LR = 2e-4


@dataclass
class TrainConfig:
    stage: str  # "base" | "pia"
    steps: int
    learning_rate: float | None = None  # stage default when None
    batch_clips: int = 2
    batch_frames: int = 16  # stage base: single frames per step
    dropout_prob: float = 0.2
    text_dropout_prob: float = 0.1
    seed: int = 0
    s_min: float = 0.2
    s_max: float = 1.0
    affinity_mode: str = "similarity"  # similarity | onehot
    freeze_temporal: bool = False  # ablation: train only the condition module
    val_clips: int = 0
    checkpoint_every: int = 0  # 0 = only at the end
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.stage not in ("base", "pia"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not (0.0 <= self.dropout_prob <= 1.0) or not (0.0 <= self.text_dropout_prob <= 1.0):
            raise ConfigError("dropout probabilities must lie in [0, 1]")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 0 or self.batch_clips < 1 or self.batch_frames < 1:
            raise ConfigError("steps/batch sizes out of range")
        if self.affinity_mode not in ("similarity", "onehot"):
            raise ConfigError(f"unknown affinity_mode {self.affinity_mode!r}")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_PIA_LR if self.stage == "pia" else DEFAULT_BASE_LR


def drop_conditioning(
    z_cond: Tensor, affinity_maps: Tensor, u: float, p: float
) -> tuple[Tensor, Tensor]:
    """Jointly replace both condition inputs with zeros when u < p."""
    if not (0.0 <= p <= 1.0):
        raise ConfigError(f"drop probability must lie in [0, 1], got {p}")
    if u < p:
        return torch.zeros_like(z_cond), torch.zeros_like(affinity_maps)
    return z_cond, affinity_maps


@dataclass
class ClipBatchSource:
    """Corpus clips encoded to latents once, with per-clip affinity maps."""

    latents: Tensor  # [N, F, C, h, w]
    captions: list[str]
    maps: Tensor | None  # [N, F, 1, h, w]; None when built without affinity
    schedules: list[AffinitySchedule]

    @classmethod
    def build(
        cls,
        entries: list[CorpusEntry],
        root: str,
        codec: LatentCodec,
        stats: AffinityStats | None,
        affinity_mode: str = "similarity",
        need_affinity: bool = True,
    ) -> "ClipBatchSource":
        latents, captions, maps, schedules = [], [], [], []
        for entry in entries:
            frames = entry.load(root)
            z0 = codec.encode(frames).data
            latents.append(z0)
            captions.append(entry.caption)
            if not need_affinity:
                continue
            if affinity_mode == "onehot":
                sched = one_hot_schedule(frames.shape[0])
            else:
                if stats is None:
                    raise ConfigError("similarity affinity requires corpus stats")
                sched = score_frames(clip_distances(frames), stats)
            schedules.append(sched)
            maps.append(expand_to_map(sched, z0.shape[-2], z0.shape[-1]))
        return cls(
            latents=torch.stack(latents),
            captions=captions,
            maps=torch.stack(maps) if maps else None,
            schedules=schedules,
        )

    def __len__(self) -> int:
        return self.latents.shape[0]


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    baseline_val_loss: float | None = None
    final_val_loss: float | None = None
    checkpoint_path: str | None = None


class Trainer:
    def __init__(
        self,
        model: Denoiser,
        codec: LatentCodec,
        noise_schedule: NoiseSchedule,
        config: TrainConfig,
        source: ClipBatchSource,
        log_path: str | None = None,
    ):
        self.model = model
        self.codec = codec
        self.noise_schedule = noise_schedule
        self.config = config
        self.log_path = log_path
        self.gen = new_generator(derive_seed(config.seed, "trainer", config.stage))
        self.step_count = 0

        if config.stage == "pia" and source.maps is None:
            raise ConfigError("stage pia needs a batch source built with affinity maps")
        n_val = config.val_clips
        if n_val >= len(source):
            raise ConfigError(f"val_clips {n_val} >= corpus size {len(source)}")
        self.train_slice = slice(0, len(source) - n_val)
        self.val_slice = slice(len(source) - n_val, len(source)) if n_val else None
        self.source = source

        adapter = model.adapter_parameter_names()
        trainable: list[str] = []
        for name, p in model.named_parameters():
            if config.stage == "base":
                train_it = name not in adapter
            else:
                train_it = name in adapter
                if config.freeze_temporal and ".temporal." in name:
                    train_it = False
            p.requires_grad_(train_it)
            if train_it:
                trainable.append(name)
        self.trainable_names = set(trainable)
        params = [p for n, p in model.named_parameters() if n in self.trainable_names]
        if not params:
            raise ConfigError("no trainable parameters for this stage")
        self.optimizer = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999))
        self._alpha_bar = self.noise_schedule.alpha_bar.to(torch.float32)

    # -- shared pieces ------------------------------------------------------

    def _diffuse(self, z0: Tensor, t: Tensor, eps: Tensor) -> Tensor:
        abar = self._alpha_bar[t - 1].to(z0.dtype)
        while abar.ndim < z0.ndim:
            abar = abar.unsqueeze(-1)
        return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps

    def _sample_indices(self, count: int, high: int) -> Tensor:
        return torch.randint(self.train_slice.start, high, (count,), generator=self.gen)

    def _optimize(self, loss: Tensor) -> float:
        if not torch.isfinite(loss):
            raise ModelError(
                f"non-finite loss at step {self.step_count}: {float(loss.detach())!r} "
                f"(stage={self.config.stage}, lr={self.config.lr})"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self._assert_frozen_clean()
        self.optimizer.step()
        return float(loss.detach())

    def _assert_frozen_clean(self) -> None:
        for name, p in self.model.named_parameters():
            if name not in self.trainable_names and p.grad is not None:
                raise AssertionError(f"gradient reached frozen parameter {name!r}")

    # -- stage steps ---------------------------------------------------------

    def stage1_step(self) -> float:
        cfg = self.config
        n_clips = self.train_slice.stop
        clip_idx = self._sample_indices(cfg.batch_frames, n_clips)
        frame_count = self.source.latents.shape[1]
        frame_idx = torch.randint(0, frame_count, (cfg.batch_frames,), generator=self.gen)
        z0 = self.source.latents[clip_idx, frame_idx].unsqueeze(1)  # [B, 1, C, h, w]

        t = torch.randint(1, self.noise_schedule.T + 1, (cfg.batch_frames,), generator=self.gen)
        eps = torch.randn(z0.shape, generator=self.gen)
        z_t = self._diffuse(z0, t, eps)

        u_text = torch.rand(cfg.batch_frames, generator=self.gen)
        prompts = [
            "" if float(u_text[i]) < cfg.text_dropout_prob else self.source.captions[int(clip_idx[i])]
            for i in range(cfg.batch_frames)
        ]
        embed = self.model.encode_prompts(prompts)

        pred = self.model(z_t, t, embed, temporal=False)
        loss = (pred - eps).pow(2).mean()
        value = self._optimize(loss)
        self.step_count += 1
        return value

    def stage2_step(self) -> float:
        cfg = self.config
        n_clips = self.train_slice.stop
        clip_idx = self._sample_indices(cfg.batch_clips, n_clips)
        z0 = self.source.latents[clip_idx]  # [B, F, C, h, w]
        b = z0.shape[0]

        t = torch.randint(1, self.noise_schedule.T + 1, (b,), generator=self.gen)
        eps = torch.randn(z0.shape, generator=self.gen)
        z_t = self._diffuse(z0, t, eps)

        z_cond = z0[:, 0]  # clean latent of the condition frame
        maps = self.source.maps[clip_idx]
        u = torch.rand(b, generator=self.gen)
        dropped_cond, dropped_maps = [], []
        for i in range(b):
            zc, am = drop_conditioning(z_cond[i], maps[i], float(u[i]), cfg.dropout_prob)
            dropped_cond.append(zc)
            dropped_maps.append(am)
        z_cond = torch.stack(dropped_cond)
        maps = torch.stack(dropped_maps)

        prompts = [self.source.captions[int(i)] for i in clip_idx]
        embed = self.model.encode_prompts(prompts)

        pred = self.model(z_t, t, embed, z_cond, maps, temporal=True)
        loss = (pred - eps).pow(2).mean()
        value = self._optimize(loss)
        self.step_count += 1
        return value

    def step(self) -> float:
        return self.stage1_step() if self.config.stage == "base" else self.stage2_step()

    # -- validation ----------------------------------------------------------

    def validation_loss(self) -> float:
        """Deterministic conditioned video loss over the held-out clips.

        Timestep and noise draws are fixed per clip, so the same model always
        gets the same number and different models are comparable.
        """
        if self.val_slice is None:
            raise ConfigError("no validation clips configured")
        total = 0.0
        count = 0
        self.model.eval()
        with torch.no_grad():
            for i in range(self.val_slice.start, self.val_slice.stop):
                g = new_generator(derive_seed(self.config.seed, "val", i))
                z0 = self.source.latents[i : i + 1]
                t = torch.randint(1, self.noise_schedule.T + 1, (1,), generator=g)
                eps = torch.randn(z0.shape, generator=g)
                z_t = self._diffuse(z0, t, eps)
                embed = self.model.encode_prompts([self.source.captions[i]])
                pred = self.model(z_t, t, embed, z0[:, 0], self.source.maps[i : i + 1], temporal=True)
                total += float((pred - eps).pow(2).mean())
                count += 1
        self.model.train()
        return total / count

    # -- persistence ----------------------------------------------------------

    def train_state(self) -> dict:
        tensors: dict[str, Tensor] = {}
        scalars: dict[str, float] = {}
        state = self.optimizer.state_dict()["state"]
        ordered = [n for n, p in self.model.named_parameters() if n in self.trainable_names]
        for group_idx, name in enumerate(ordered):
            if group_idx in state:
                entry = state[group_idx]
                tensors[f"{name}.exp_avg"] = entry["exp_avg"]
                tensors[f"{name}.exp_avg_sq"] = entry["exp_avg_sq"]
                scalars[f"{name}.step"] = float(entry["step"])
        return {
            "step": self.step_count,
            "rng_bytes": self.gen.get_state().numpy().tobytes(),
            "scalars": scalars,
            "tensors": tensors,
        }

    def restore_train_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        rng = torch.from_numpy(np.frombuffer(state["rng_bytes"], dtype=np.uint8).copy())
        self.gen.set_state(rng)
        ordered = [n for n, p in self.model.named_parameters() if n in self.trainable_names]
        opt_state = self.optimizer.state_dict()
        for group_idx, name in enumerate(ordered):
            key_avg = f"{name}.exp_avg"
            if key_avg not in state["tensors"]:
                continue
            opt_state["state"][group_idx] = {
                "step": torch.tensor(state["scalars"][f"{name}.step"]),
                "exp_avg": state["tensors"][key_avg].to(torch.float32),
                "exp_avg_sq": state["tensors"][f"{name}.exp_avg_sq"].to(torch.float32),
            }
        self.optimizer.load_state_dict(opt_state)


def run_training(
    trainer: Trainer,
    out_path: str,
    train_meta: dict | None = None,
    resume_from: str | None = None,
    log_path: str | None = None,
) -> TrainResult:
    """Drive a trainer to config.steps, logging JSONL and checkpointing."""
    cfg = trainer.config
    result = TrainResult()

    if resume_from is not None:
        state = load_train_state(resume_from)
        if state is not None:
            trainer.restore_train_state(state)

    if cfg.val_clips and cfg.stage == "pia" and trainer.step_count == 0:
        result.baseline_val_loss = trainer.validation_loss()

    log_fh = open(log_path, "a") if log_path else None
    meta = dict(train_meta or {})
    meta.setdefault("stage", cfg.stage)
    meta.setdefault("affinity_mode", cfg.affinity_mode)
    try:
        while trainer.step_count < cfg.steps:
            loss = trainer.step()
            result.losses.append(loss)
            if log_fh:
                log_fh.write(
                    json.dumps(
                        {"step": trainer.step_count, "loss": loss, "lr": cfg.lr, "stage": cfg.stage}
                    )
                    + "\n"
                )
            if (
                cfg.checkpoint_every
                and trainer.step_count % cfg.checkpoint_every == 0
                and trainer.step_count < cfg.steps
            ):
                _save(trainer, out_path, meta, result)
        if cfg.val_clips and cfg.stage == "pia":
            result.final_val_loss = trainer.validation_loss()
        _save(trainer, out_path, meta, result)
        result.checkpoint_path = out_path
    finally:
        if log_fh:
            log_fh.close()
    return result


def _save(trainer: Trainer, out_path: str, meta: dict, result: TrainResult) -> None:
    meta = dict(meta)
    meta["steps_completed"] = trainer.step_count
    meta["train_config"] = asdict(trainer.config)
    if result.baseline_val_loss is not None:
        meta["baseline_val_loss"] = result.baseline_val_loss
    if result.final_val_loss is not None:
        meta["final_val_loss"] = result.final_val_loss
    save_checkpoint(
        out_path,
        trainer.model,
        trainer.codec,
        trainer.noise_schedule,
        train_meta=meta,
        train_state=trainer.train_state(),
    )

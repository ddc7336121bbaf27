"""The noise-prediction U-Net: ResBlocks, spatial self-attention, text
cross-attention, temporal attention across the frame axis, and the
zero-initialized condition module injected after the first convolution.

Frames share all spatial weights; temporal attention is the only layer that
mixes information between frames, so disabling it (``temporal=False``)
yields the per-frame base text-to-image model. Both the condition module
and the temporal output projections start at zero, making their insertion
an exact no-op at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F_nn
from torch import Tensor, nn

from .errors import ConfigError, ModelError, ShapeError
from .text import PromptEmbedding, Vocabulary, encode_prompt, encode_prompt_batch


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int
    frame_count: int = 16
    latent_channels: int = 12
    base_channels: int = 32
    levels: int = 2
    attention_levels: tuple[int, ...] = (0, 1)
    text_dim: int = 64
    max_tokens: int = 8
    heads: int = 4
    temporal_positional_encoding: bool = True

    def __post_init__(self) -> None:
        if self.frame_count < 1 or self.base_channels < 1 or self.latent_channels < 1:
            raise ConfigError("frame_count and channel counts must be positive")
        if self.levels < 1:
            raise ConfigError("need at least one level")
        if any(not (0 <= a < self.levels) for a in self.attention_levels):
            raise ConfigError(f"attention_levels {self.attention_levels} outside 0..{self.levels - 1}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.levels))

    @property
    def time_dim(self) -> int:
        return self.base_channels * 4

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "frame_count": self.frame_count,
            "latent_channels": self.latent_channels,
            "base_channels": self.base_channels,
            "levels": self.levels,
            "attention_levels": list(self.attention_levels),
            "text_dim": self.text_dim,
            "max_tokens": self.max_tokens,
            "heads": self.heads,
            "temporal_positional_encoding": self.temporal_positional_encoding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


def _group_count(channels: int) -> int:
    for groups in (8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


def sinusoidal_embedding(positions: Tensor, dim: int) -> Tensor:
    """Standard sin/cos embedding of integer positions -> [N, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=positions.dtype) / max(half - 1, 1)
    )
    args = positions[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = F_nn.pad(emb, (0, 1))
    return emb


def frame_positional_encoding(frame_count: int, dim: int, dtype: torch.dtype) -> Tensor:
    """Sinusoidal encoding of the frame index, valid for any frame count."""
    pos = torch.arange(frame_count, dtype=dtype)
    return sinusoidal_embedding(pos, dim)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_group_count(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_group_count(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F_nn.silu(self.norm1(x)))
        h = h + self.time_proj(F_nn.silu(temb))[:, :, None, None]
        h = self.conv2(F_nn.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Spatial attention within each frame."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)  # [N, HW, C]
        y = self.norm(seq)
        out, _ = _attention(self.to_q(y), self.to_k(y), self.to_v(y), self.heads)
        seq = seq + self.to_out(out)
        return seq.transpose(1, 2).reshape(n, c, h, w)


class CrossAttention(nn.Module):
    """Text conditioning: queries from spatial positions, keys/values from tokens."""

    def __init__(self, channels: int, text_dim: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_dim, channels, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: Tensor, text: Tensor, capture: list | None = None, tag: str = "") -> Tensor:
        n, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)  # [N, HW, C]
        q = self.to_q(self.norm(seq))
        k = self.to_k(text)
        v = self.to_v(text)
        out, probs = _attention(q, k, v, self.heads)
        if capture is not None:
            capture.append({"layer": tag, "probs": probs.detach(), "size": (h, w)})
        seq = seq + self.to_out(out)
        return seq.transpose(1, 2).reshape(n, c, h, w)


class TemporalAttention(nn.Module):
    """Attention across the frame axis at every spatial location.

    The output projection is zero-initialized so a freshly inserted layer is
    an exact no-op; sinusoidal frame-position encodings give it access to
    frame order.
    """

    def __init__(self, channels: int, heads: int, positional: bool = True, use_norm: bool = True):
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.positional = positional
        self.norm = nn.LayerNorm(channels) if use_norm else nn.Identity()
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, x: Tensor, batch: int, frames: int) -> Tensor:
        bf, c, h, w = x.shape
        if bf != batch * frames:
            raise ShapeError(f"batch*frames {batch}*{frames} != leading dim {bf}")
        # [(B F), C, h, w] -> [(B h w), F, C]
        seq = (
            x.reshape(batch, frames, c, h * w)
            .permute(0, 3, 1, 2)
            .reshape(batch * h * w, frames, c)
        )
        y = self.norm(seq)
        if self.positional:
            y = y + frame_positional_encoding(frames, c, y.dtype)
        out, _ = _attention(self.to_q(y), self.to_k(y), self.to_v(y), self.heads)
        seq = seq + self.to_out(out)
        return (
            seq.reshape(batch, h * w, frames, c)
            .permute(0, 2, 3, 1)
            .reshape(bf, c, h, w)
        )


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_head)) v with explicit head split."""
    n, lq, c = q.shape
    lk = k.shape[1]
    dh = c // heads
    qh = q.reshape(n, lq, heads, dh).transpose(1, 2)
    kh = k.reshape(n, lk, heads, dh).transpose(1, 2)
    vh = v.reshape(n, lk, heads, dh).transpose(1, 2)
    probs = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (probs @ vh).transpose(1, 2).reshape(n, lq, c)
    return out, probs


class AttentionStack(nn.Module):
    """The self / cross / temporal attention unit appended to a ResBlock."""

    def __init__(self, channels: int, cfg: DenoiserConfig):
        super().__init__()
        self.sa = SelfAttention(channels, cfg.heads)
        self.ca = CrossAttention(channels, cfg.text_dim, cfg.heads)
        self.temporal = TemporalAttention(
            channels, cfg.heads, positional=cfg.temporal_positional_encoding
        )

    def forward(
        self,
        x: Tensor,
        text: Tensor,
        batch: int,
        frames: int,
        temporal: bool,
        capture: list | None,
        tag: str,
    ) -> Tensor:
        x = self.sa(x)
        x = self.ca(x, text, capture=capture, tag=tag)
        if temporal:
            x = self.temporal(x, batch, frames)
        return x


class DownStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: DenoiserConfig, attn: bool, last: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, cfg.time_dim)
        self.attn = AttentionStack(out_ch, cfg) if attn else None
        self.down = None if last else nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1)


class UpStage(nn.Module):
    def __init__(self, ch: int, below_ch: int | None, cfg: DenoiserConfig, attn: bool):
        super().__init__()
        # `below_ch` is the channel width arriving from the deeper level
        self.up = None if below_ch is None else nn.Conv2d(below_ch, ch, 3, padding=1)
        self.res = ResBlock(2 * ch, ch, cfg.time_dim)
        self.attn = AttentionStack(ch, cfg) if attn else None


class Denoiser(nn.Module):
    """Conditional video noise predictor eps_theta."""

    def __init__(self, config: DenoiserConfig, vocab: Vocabulary):
        super().__init__()
        if len(vocab) != config.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        chs = config.channels

        self.token_embed = nn.Embedding(config.vocab_size, config.text_dim)
        self.time_embed = nn.Sequential(
            nn.Linear(config.base_channels, config.time_dim),
            nn.SiLU(),
            nn.Linear(config.time_dim, config.time_dim),
        )
        self.conv_in = nn.Conv2d(config.latent_channels, config.base_channels, 3, padding=1)

        self.cond_module = nn.Conv2d(config.latent_channels + 1, config.base_channels, 3, padding=1)
        nn.init.zeros_(self.cond_module.weight)
        nn.init.zeros_(self.cond_module.bias)

        self.down = nn.ModuleList()
        in_ch = config.base_channels
        for lvl in range(config.levels):
            self.down.append(
                DownStage(in_ch, chs[lvl], config, lvl in config.attention_levels, lvl == config.levels - 1)
            )
            in_ch = chs[lvl]

        self.mid_res1 = ResBlock(chs[-1], chs[-1], config.time_dim)
        self.mid_attn = AttentionStack(chs[-1], config)
        self.mid_res2 = ResBlock(chs[-1], chs[-1], config.time_dim)

        self.up = nn.ModuleList()
        for lvl in reversed(range(config.levels)):
            below = None if lvl == config.levels - 1 else chs[lvl + 1]
            self.up.append(UpStage(chs[lvl], below, config, lvl in config.attention_levels))

        self.out_norm = nn.GroupNorm(_group_count(config.base_channels), config.base_channels)
        self.conv_out = nn.Conv2d(config.base_channels, config.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    # -- prompt plumbing ---------------------------------------------------

    def encode_prompt(self, prompt: str) -> PromptEmbedding:
        return encode_prompt(prompt, self.vocab, self.token_embed, self.config.max_tokens)

    def encode_prompts(self, prompts: list[str]) -> PromptEmbedding:
        return encode_prompt_batch(prompts, self.vocab, self.token_embed, self.config.max_tokens)

    # -- parameter partition -----------------------------------------------

    def adapter_parameter_names(self) -> set[str]:
        """Names of the condition module and temporal attention parameters."""
        return {
            name
            for name, _ in self.named_parameters()
            if name.startswith("cond_module.") or ".temporal." in name
        }

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        z_t: Tensor,
        t: int | Tensor,
        prompt: PromptEmbedding,
        z_cond: Tensor | None = None,
        affinity_maps: Tensor | None = None,
        temporal: bool = True,
        capture: list | None = None,
    ) -> Tensor:
        squeeze = z_t.ndim == 4
        z = z_t.unsqueeze(0) if squeeze else z_t
        if z.ndim != 5:
            raise ShapeError(f"expected [F, C, h, w] or [B, F, C, h, w], got {tuple(z_t.shape)}")
        b, f, c, h, w = z.shape
        if c != self.config.latent_channels:
            raise ShapeError(f"latent has {c} channels, config says {self.config.latent_channels}")

        dtype = self.conv_in.weight.dtype
        x = z.reshape(b * f, c, h, w).to(dtype)

        t_vec = torch.as_tensor(t, dtype=dtype).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(b)
        elif t_vec.numel() != b:
            raise ShapeError(f"t has {t_vec.numel()} entries for batch {b}")
        temb = self.time_embed(sinusoidal_embedding(t_vec, self.config.base_channels))
        temb = temb.repeat_interleave(f, dim=0)  # [B*F, time_dim]

        text = prompt.tokens
        if text.ndim == 2:
            text = text.unsqueeze(0).expand(b, -1, -1)
        if text.shape[0] != b:
            raise ShapeError(f"prompt batch {text.shape[0]} != z batch {b}")
        text = text.to(dtype).repeat_interleave(f, dim=0)  # [B*F, T, D]

        hid = self.conv_in(x)
        if (z_cond is None) != (affinity_maps is None):
            raise ShapeError("z_cond and affinity_maps must be given together")
        if z_cond is not None:
            zc = z_cond
            if zc.ndim == 3:
                zc = zc.unsqueeze(0).expand(b, -1, -1, -1)
            am = affinity_maps
            if am.ndim == 4:
                am = am.unsqueeze(0).expand(b, -1, -1, -1, -1)
            if am.shape[:2] != (b, f) or am.shape[2] != 1:
                raise ShapeError(f"affinity maps {tuple(am.shape)} do not match [B={b}, F={f}, 1, h, w]")
            zc = zc.unsqueeze(1).expand(b, f, c, h, w).reshape(b * f, c, h, w).to(dtype)
            am = am.reshape(b * f, 1, h, w).to(dtype)
            hid = hid + self.cond_module(torch.cat([zc, am], dim=1))

        skips = []
        cur_h, cur_w = h, w
        for lvl, stage in enumerate(self.down):
            hid = stage.res(hid, temb)
            if stage.attn is not None:
                hid = stage.attn(hid, text, b, f, temporal, capture, f"down{lvl}")
            skips.append(hid)
            if stage.down is not None:
                hid = stage.down(hid)
                cur_h, cur_w = cur_h // 2, cur_w // 2

        hid = self.mid_res1(hid, temb)
        hid = self.mid_attn(hid, text, b, f, temporal, capture, "mid")
        hid = self.mid_res2(hid, temb)

        for i, stage in enumerate(self.up):
            lvl = self.config.levels - 1 - i
            if stage.up is not None:
                cur_h, cur_w = cur_h * 2, cur_w * 2
                hid = stage.up(F_nn.interpolate(hid, size=(cur_h, cur_w), mode="nearest"))
            hid = stage.res(torch.cat([hid, skips.pop()], dim=1), temb)
            if stage.attn is not None:
                hid = stage.attn(hid, text, b, f, temporal, capture, f"up{lvl}")

        out = self.conv_out(F_nn.silu(self.out_norm(hid)))
        out = out.reshape(b, f, c, h, w)
        return out.squeeze(0) if squeeze else out


def null_prompt(model: Denoiser) -> PromptEmbedding:
    return model.encode_prompt("")


def unet_forward(
    z_t: Tensor,
    t: int,
    prompt: PromptEmbedding,
    z_cond: Tensor | None,
    affinity_maps: Tensor | None,
    model: Denoiser,
    temporal: bool = True,
) -> Tensor:
    """Checked single-clip forward pass: validates parameters and output."""
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ModelError(f"non-finite parameter {name!r}")
    out = model(z_t, t, prompt, z_cond, affinity_maps, temporal=temporal)
    if not torch.isfinite(out).all():
        raise ModelError("non-finite activations in denoiser output")
    return out


def condition_forward(
    first_conv_out: Tensor,
    z_cond: Tensor,
    affinity_maps: Tensor,
    params: nn.Conv2d,
) -> Tensor:
    """Add the encoded [condition latent (+) affinity map] to the first-conv output.

    Per frame i: out_i = first_conv_out_i + Conv(z_cond (+) affinity_i).
    Equivalent to one fused convolution over [x (+) z_cond (+) affinity] with
    the block weight matrix [W ; W_cond].
    """
    f, _, h, w = first_conv_out.shape
    if affinity_maps.shape != (f, 1, h, w):
        raise ShapeError(f"affinity maps {tuple(affinity_maps.shape)} != [{f}, 1, {h}, {w}]")
    if z_cond.shape[-2:] != (h, w):
        raise ShapeError(f"z_cond spatial {tuple(z_cond.shape[-2:])} != ({h}, {w})")
    expected_in = params.weight.shape[1]
    if z_cond.shape[0] + 1 != expected_in:
        raise ShapeError(
            f"condition module expects {expected_in} input channels, got {z_cond.shape[0] + 1}"
        )
    stacked = torch.cat([z_cond.unsqueeze(0).expand(f, -1, -1, -1), affinity_maps], dim=1)
    return first_conv_out + params(stacked)


def extract_cross_attention(
    model: Denoiser,
    inputs: dict,
    token_index: int,
) -> Tensor:
    """Per-frame heatmaps [F, h, w] of cross-attention on one prompt token.

    Averages the attention probabilities over heads and layers, upsampling
    every layer's map to the latent resolution of the input.
    """
    prompt: PromptEmbedding = inputs["prompt"]
    mask = prompt.mask.reshape(-1)
    if not (0 <= token_index < mask.numel()) or not bool(mask[token_index]):
        raise ShapeError(f"token_index {token_index} is not a non-pad token")

    capture: list = []
    z_t = inputs["z_t"]
    model(
        z_t,
        inputs["t"],
        prompt,
        inputs.get("z_cond"),
        inputs.get("affinity_maps"),
        temporal=inputs.get("temporal", True),
        capture=capture,
    )
    f = z_t.shape[0] if z_t.ndim == 4 else z_t.shape[1]
    h, w = z_t.shape[-2:]
    total = torch.zeros(f, h, w)
    for entry in capture:
        probs = entry["probs"]  # [(B F), heads, hw, T]
        lh, lw = entry["size"]
        per_frame = probs[..., token_index].mean(dim=1).reshape(-1, 1, lh, lw)
        per_frame = F_nn.interpolate(per_frame.float(), size=(h, w), mode="nearest")
        total = total + per_frame[:f, 0]
    return total / max(len(capture), 1)

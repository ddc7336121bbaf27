"""Denoiser architecture: zero-init no-ops, condition module equivalence,
temporal attention math, equivariances, and the golden regression."""

import math
import os

import numpy as np
import pytest
import torch

from stillmotion import affinity
from stillmotion.denoiser import (
    Denoiser,
    DenoiserConfig,
    TemporalAttention,
    CrossAttention,
    condition_forward,
    extract_cross_attention,
    frame_positional_encoding,
    unet_forward,
)
from stillmotion.errors import ModelError, ShapeError
from stillmotion.synth import caption_vocabulary
from stillmotion.text import Vocabulary

GOLDEN_PATH = os.path.join(os.path.dirname(__file__), "data", "golden_denoiser.npz")


def small_model(seed=0, **overrides) -> Denoiser:
    torch.manual_seed(seed)
    vocab = Vocabulary(caption_vocabulary())
    defaults = dict(
        vocab_size=len(vocab),
        frame_count=4,
        latent_channels=4,
        base_channels=8,
        levels=2,
        attention_levels=(1,),
        text_dim=8,
        max_tokens=6,
        heads=2,
    )
    defaults.update(overrides)
    return Denoiser(DenoiserConfig(**defaults), vocab)


def randomize_(model: Denoiser, seed=1) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.05)


class TestZeroInitNoOp:
    def test_insertion_is_exact_noop(self):
        model = small_model()
        gen = torch.Generator().manual_seed(2)
        z = torch.randn(4, 4, 8, 8, generator=gen)
        z_cond = torch.randn(4, 8, 8, generator=gen)
        maps = torch.rand(4, 1, 8, 8, generator=gen)
        pe = model.encode_prompt("red circle moving right slow")
        with torch.no_grad():
            base = model(z, 3, pe, temporal=False)
            full = model(z, 3, pe, z_cond, maps, temporal=True)
        assert torch.equal(base, full)
        assert float((base - full).abs().max()) == 0.0

    def test_noop_holds_for_many_inputs(self):
        model = small_model(seed=3)
        pe = model.encode_prompt("lime square growing")
        gen = torch.Generator().manual_seed(4)
        for _ in range(10):
            z = torch.randn(4, 4, 8, 8, generator=gen)
            zc = torch.randn(4, 8, 8, generator=gen)
            maps = torch.rand(4, 1, 8, 8, generator=gen)
            with torch.no_grad():
                assert torch.equal(model(z, 1, pe, temporal=False), model(z, 1, pe, zc, maps))


class TestConditionForward:
    def test_zero_params_identity(self):
        conv = torch.nn.Conv2d(5, 6, 3, padding=1)
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.zeros_(conv.bias)
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(3, 6, 4, 4, generator=gen)
        zc = torch.randn(4, 4, 4, generator=gen)
        maps = torch.rand(3, 1, 4, 4, generator=gen)
        assert torch.equal(condition_forward(x, zc, maps, conv), x)

    def test_hand_conv_on_affinity_channel(self):
        # 1x1 kernel, weight 1 on the affinity channel only -> adds the map value
        conv = torch.nn.Conv2d(3, 2, 1)
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.zeros_(conv.bias)
        with torch.no_grad():
            conv.weight[:, 2] = 1.0  # affinity channel is last
        x = torch.zeros(2, 2, 4, 4)
        zc = torch.zeros(2, 4, 4)
        maps = torch.full((2, 1, 4, 4), 0.5)
        out = condition_forward(x, zc, maps, conv)
        assert torch.allclose(out, torch.full_like(out, 0.5))

    @pytest.mark.parametrize("trial", range(5))
    def test_fused_conv_equivalence(self, trial):
        # split conv + add equals one conv over [x_in (+) z_cond (+) s] with
        # the stacked weight matrix [W ; W_cond]
        gen = torch.Generator().manual_seed(100 + trial)
        in_ch, cond_ch, out_ch, f = 3, 4, 6, 2
        first = torch.nn.Conv2d(in_ch, out_ch, 3, padding=1)
        cond = torch.nn.Conv2d(cond_ch + 1, out_ch, 3, padding=1)
        with torch.no_grad():
            for p in list(first.parameters()) + list(cond.parameters()):
                p.copy_(torch.randn(p.shape, generator=gen))
        x_in = torch.randn(f, in_ch, 5, 5, generator=gen)
        zc = torch.randn(cond_ch, 5, 5, generator=gen)
        maps = torch.rand(f, 1, 5, 5, generator=gen)

        fused = torch.nn.Conv2d(in_ch + cond_ch + 1, out_ch, 3, padding=1)
        with torch.no_grad():
            fused.weight.copy_(torch.cat([first.weight, cond.weight], dim=1))
            fused.bias.copy_(first.bias + cond.bias)
            split = condition_forward(first(x_in), zc, maps, cond)
            stacked = torch.cat([x_in, zc.unsqueeze(0).expand(f, -1, -1, -1), maps], dim=1)
            reference = fused(stacked)
        rel = float((split - reference).abs().max() / reference.abs().max())
        assert rel < 1e-5

    def test_channel_mismatch(self):
        conv = torch.nn.Conv2d(5, 6, 3, padding=1)
        with pytest.raises(ShapeError):
            condition_forward(torch.zeros(2, 6, 4, 4), torch.zeros(3, 4, 4), torch.zeros(2, 1, 4, 4), conv)


class TestTemporalAttention:
    def test_single_frame_identity_at_init(self):
        torch.manual_seed(0)
        ta = TemporalAttention(channels=4, heads=2)
        x = torch.randn(1, 4, 3, 3, generator=torch.Generator().manual_seed(1))
        out = ta(x, batch=1, frames=1)
        assert torch.equal(out, x)

    def test_identical_frames_stay_identical(self):
        # no positional encoding, trained weights: symmetry over frames
        torch.manual_seed(5)
        ta = TemporalAttention(channels=4, heads=1, positional=False)
        with torch.no_grad():
            for p in ta.parameters():
                p.copy_(torch.randn(p.shape, generator=torch.Generator().manual_seed(6)) * 0.3)
        one = torch.randn(1, 4, 2, 2, generator=torch.Generator().manual_seed(7))
        x = one.expand(5, 4, 2, 2).clone()
        out = ta(x, batch=1, frames=5)
        for i in range(1, 5):
            assert torch.allclose(out[i], out[0], atol=1e-6)

    def test_hand_computed_two_frame_attention(self):
        # identity projections, no norm, no positional encoding: the update at
        # each location is softmax(q k^T / sqrt(2)) v over the 2 frames
        ta = TemporalAttention(channels=2, heads=1, positional=False, use_norm=False)
        with torch.no_grad():
            ta.to_q.weight.copy_(torch.eye(2))
            ta.to_k.weight.copy_(torch.eye(2))
            ta.to_v.weight.copy_(torch.eye(2))
            ta.to_out.weight.copy_(torch.eye(2))
            ta.to_out.bias.zero_()
        # one spatial location, 2 frames, 2 channels
        f0 = torch.tensor([1.0, 0.0])
        f1 = torch.tensor([0.0, 2.0])
        x = torch.stack([f0, f1]).reshape(2, 2, 1, 1)
        out = ta(x, batch=1, frames=2)

        frames = [f0, f1]
        scale = 1.0 / math.sqrt(2.0)
        expected = []
        for q in frames:
            logits = torch.tensor([float(q @ k) * scale for k in frames])
            w = torch.softmax(logits, dim=0)
            attn = w[0] * frames[0] + w[1] * frames[1]
            expected.append(q + attn)  # residual + identity out-projection
        expected = torch.stack(expected).reshape(2, 2, 1, 1)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_positional_encoding_extends_to_any_length(self):
        pe4 = frame_positional_encoding(4, 8, torch.float32)
        pe9 = frame_positional_encoding(9, 8, torch.float32)
        assert pe9.shape == (9, 8)
        assert torch.equal(pe9[:4], pe4)


class TestUnetForward:
    def test_frame_permutation_equivariance(self):
        model = small_model(seed=8, temporal_positional_encoding=False)
        randomize_(model, seed=9)
        gen = torch.Generator().manual_seed(10)
        z = torch.randn(4, 4, 8, 8, generator=gen)
        zc = torch.randn(4, 8, 8, generator=gen)
        maps = torch.rand(4, 1, 8, 8, generator=gen)
        pe = model.encode_prompt("red circle moving right slow")
        perm = torch.tensor([0, 3, 1, 2])
        with torch.no_grad():
            out = model(z, 5, pe, zc, maps)
            out_perm = model(z[perm], 5, pe, zc, maps[perm])
        assert torch.allclose(out[perm], out_perm, atol=1e-5)

    def test_frame_count_polymorphism(self):
        model = small_model(seed=11)  # config frame_count=4
        randomize_(model, seed=12)
        pe = model.encode_prompt("blue square shrinking")
        for f in (1, 3, 4, 9):
            z = torch.randn(f, 4, 8, 8, generator=torch.Generator().manual_seed(f))
            zc = torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(90 + f))
            maps = torch.rand(f, 1, 8, 8, generator=torch.Generator().manual_seed(80 + f))
            with torch.no_grad():
                out = model(z, 2, pe, zc, maps)
            assert out.shape == (f, 4, 8, 8)
            assert torch.isfinite(out).all()

    def test_nan_parameter_raises_model_error(self):
        model = small_model(seed=13)
        with torch.no_grad():
            model.conv_in.weight[0, 0, 0, 0] = float("nan")
        z = torch.zeros(2, 4, 8, 8)
        pe = model.encode_prompt("red circle")
        with pytest.raises(ModelError):
            unet_forward(z, 1, pe, None, None, model)

    def test_golden_regression(self):
        model = small_model(seed=14)
        randomize_(model, seed=15)
        gen = torch.Generator().manual_seed(16)
        z = torch.randn(4, 4, 8, 8, generator=gen)
        zc = torch.randn(4, 8, 8, generator=gen)
        maps = torch.rand(4, 1, 8, 8, generator=gen)
        pe = model.encode_prompt("magenta triangle moving down fast")
        with torch.no_grad():
            out = model(z, 7, pe, zc, maps).numpy()
        if not os.path.exists(GOLDEN_PATH):
            os.makedirs(os.path.dirname(GOLDEN_PATH), exist_ok=True)
            np.savez(GOLDEN_PATH, out=out)
            pytest.skip("golden file generated on first build")
        golden = np.load(GOLDEN_PATH)["out"]
        assert np.allclose(out, golden, atol=1e-5)

    def test_batched_matches_config(self):
        model = small_model(seed=17)
        z = torch.randn(2, 4, 4, 8, 8, generator=torch.Generator().manual_seed(18))
        pe = model.encode_prompts(["red circle", "blue square"])
        with torch.no_grad():
            out = model(z, torch.tensor([1, 5]), pe)
        assert out.shape == (2, 4, 4, 8, 8)


class TestCrossAttentionCapture:
    def test_probs_sum_to_one_over_tokens(self):
        model = small_model(seed=19)
        randomize_(model, seed=20)
        z = torch.randn(4, 4, 8, 8, generator=torch.Generator().manual_seed(21))
        pe = model.encode_prompt("red circle moving up slow")
        capture = []
        with torch.no_grad():
            model(z, 3, pe, capture=capture)
        assert capture, "cross-attention layers should capture"
        for entry in capture:
            sums = entry["probs"].sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_single_token_gets_all_attention(self):
        # with one key the softmax row is exactly 1 -> heat maps constant 1
        ca = CrossAttention(channels=4, text_dim=4, heads=1)
        x = torch.randn(2, 4, 3, 3, generator=torch.Generator().manual_seed(22))
        text = torch.randn(2, 1, 4, generator=torch.Generator().manual_seed(23))
        capture = []
        ca(x, text, capture=capture, tag="t")
        probs = capture[0]["probs"]
        assert torch.equal(probs, torch.ones_like(probs))

    def test_forced_logits_match_hand_softmax(self):
        ca = CrossAttention(channels=2, text_dim=2, heads=1)
        with torch.no_grad():
            ca.to_q.weight.copy_(torch.eye(2) * math.sqrt(2.0))  # cancel 1/sqrt(d)
            ca.to_k.weight.copy_(torch.eye(2))
            ca.to_v.weight.copy_(torch.eye(2))
            # layer norm still applies to q input; neutralize by feeding
            # pre-normalized x with known post-norm value
        x = torch.zeros(1, 2, 1, 1)
        x[0, 0, 0, 0] = 1.0
        x[0, 1, 0, 0] = -1.0
        # LayerNorm of [1, -1] is [1, -1] (zero mean, unit variance)
        text = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]])
        capture = []
        ca(x, text, capture=capture, tag="t")
        probs = capture[0]["probs"][0, 0, 0]
        logits = torch.tensor([1.0, -1.0, 2.0])  # q=[1,-1] (dot) each key
        assert torch.allclose(probs, torch.softmax(logits, dim=0), atol=1e-4)

    def test_extract_cross_attention_shape_and_range(self):
        model = small_model(seed=24)
        randomize_(model, seed=25)
        z = torch.randn(4, 4, 8, 8, generator=torch.Generator().manual_seed(26))
        pe = model.encode_prompt("red circle moving up slow")
        maps = extract_cross_attention(
            model, {"z_t": z, "t": 3, "prompt": pe}, token_index=0
        )
        assert maps.shape == (4, 8, 8)
        assert (maps >= 0).all()

    def test_extract_rejects_pad_token(self):
        model = small_model(seed=27)
        pe = model.encode_prompt("red")
        with pytest.raises(ShapeError):
            extract_cross_attention(model, {"z_t": torch.zeros(2, 4, 8, 8), "t": 1, "prompt": pe}, token_index=3)

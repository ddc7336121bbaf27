"""Shared fixtures: tiny corpora and model bundles sized for fast tests."""

import os

import pytest
import torch

from stillmotion import synth
from stillmotion.affinity import corpus_stats
from stillmotion.codec import LatentCodec
from stillmotion.denoiser import Denoiser, DenoiserConfig
from stillmotion.diffusion import build_schedule
from stillmotion.synth import caption_vocabulary
from stillmotion.text import Vocabulary
from stillmotion.trainer import ClipBatchSource


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """24 stratified 16x16 clips, F=8: big enough to train against, small
    enough to encode in milliseconds."""
    root = str(tmp_path_factory.mktemp("corpus"))
    entries = synth.generate_corpus(24, root, size=16, seed=123, frame_count=8)
    return root, entries


@pytest.fixture(scope="session")
def small_stats(small_corpus):
    root, entries = small_corpus
    return corpus_stats([e.load(root) for e in entries])


def build_tiny_model(seed=0, frame_count=8, size=16, base_channels=16, **overrides):
    torch.manual_seed(seed)
    vocab = Vocabulary(caption_vocabulary())
    codec = LatentCodec()
    cfg = DenoiserConfig(
        vocab_size=len(vocab),
        frame_count=frame_count,
        latent_channels=codec.latent_channels,
        base_channels=base_channels,
        text_dim=16,
        max_tokens=6,
        heads=2,
        **overrides,
    )
    return Denoiser(cfg, vocab), codec


@pytest.fixture
def tiny_bundle():
    model, codec = build_tiny_model()
    return model, codec, build_schedule(T=100, ddim_count=5)


@pytest.fixture(scope="session")
def small_source(small_corpus, small_stats):
    root, entries = small_corpus
    codec = LatentCodec()
    return ClipBatchSource.build(entries, root, codec, small_stats)


@pytest.fixture(scope="session")
def acceptance_experiment(tmp_path_factory):
    """The full two-stage training experiment behind acceptance criteria 7-12.

    Builds a 500-clip corpus, trains the base model (~5k steps), the main
    animation adapters (~4k steps) and both ablation twins (~2k steps each),
    then runs every evaluation pass. Expect roughly 45-60 minutes on a
    2-core CPU. Set STILLMOTION_ACCEPT_CACHE to a directory to keep the
    artifacts across pytest runs (each phase is resumed from disk).
    """
    from stillmotion.pipeline import ExperimentConfig, run_full_experiment

    work = os.environ.get("STILLMOTION_ACCEPT_CACHE")
    if not work:
        work = str(tmp_path_factory.mktemp("acceptance"))
    cfg = ExperimentConfig(work_dir=work)
    return run_full_experiment(cfg)

"""Experiment pipeline: manifest building, paired evaluation plumbing."""

import json
import os

import pytest
import torch

from stillmotion.evalbench import load_condition_image, load_manifest
from stillmotion.pipeline import ExperimentConfig, build_heldout_manifest
from stillmotion.synth import SHAPE_COLORS, parse_motion_phrase
from stillmotion.utils import thread_cap, THREAD_ENV_VAR


@pytest.fixture
def exp_cfg(tmp_path):
    return ExperimentConfig(work_dir=str(tmp_path), size=32, frame_count=16, manifest_entries=8)


class TestHeldoutManifest:
    def test_entries_have_three_parseable_prompts(self, exp_cfg):
        manifest = load_manifest(build_heldout_manifest(exp_cfg))
        assert len(manifest.entries) == 8
        for entry in manifest.entries:
            assert len(entry.prompts) == 3
            for prompt in entry.prompts:
                parsed = parse_motion_phrase(prompt)
                assert parsed is not None and parsed.kind == "translate"
            # three distinct directions per image
            dirs = {parse_motion_phrase(p).direction for p in entry.prompts}
            assert len(dirs) == 3

    def test_condition_images_are_centred_with_headroom(self, exp_cfg):
        manifest = load_manifest(build_heldout_manifest(exp_cfg))
        for entry in manifest.entries:
            image = load_condition_image(entry.image)
            assert image.shape == (3, 32, 32)
            # foreground bounding box stays >= 8 px from every wall
            from stillmotion.synth import _border_background

            bg = _border_background(image)
            mask = (image - bg).abs().mean(dim=0) > 0.25
            ys, xs = torch.nonzero(mask, as_tuple=True)
            assert int(xs.min()) >= 8 and int(xs.max()) <= 23
            assert int(ys.min()) >= 8 and int(ys.max()) <= 23

    def test_prompts_name_the_image_subject(self, exp_cfg):
        manifest = load_manifest(build_heldout_manifest(exp_cfg))
        for entry in manifest.entries:
            first_word = entry.prompts[0].split()[0]
            assert first_word in SHAPE_COLORS

    def test_deterministic_and_cached(self, exp_cfg):
        path_a = build_heldout_manifest(exp_cfg)
        bytes_a = open(path_a, "rb").read()
        path_b = build_heldout_manifest(exp_cfg)
        assert path_a == path_b
        assert open(path_b, "rb").read() == bytes_a


class TestThreadCap:
    def test_env_var_parsing(self, monkeypatch):
        monkeypatch.delenv(THREAD_ENV_VAR, raising=False)
        assert thread_cap() is None
        monkeypatch.setenv(THREAD_ENV_VAR, "3")
        assert thread_cap() == 3
        monkeypatch.setenv(THREAD_ENV_VAR, "0")
        assert thread_cap() is None
        monkeypatch.setenv(THREAD_ENV_VAR, "junk")
        assert thread_cap() is None

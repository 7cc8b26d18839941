"""Shared fixtures.

Unit tests run on a miniature world (16x16, 12 frames) and a small model
trained for a few hundred steps, enough for structural and directional
properties. The acceptance suite in test_acceptance.py builds its own
full-size artifacts. Set TALKINGSHAPES_TEST_CACHE to a directory to reuse
trained models and other expensive artifacts across local runs; CI-style
fresh runs leave it unset.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest

from talkingshapes import world
from talkingshapes.model import DenoiserConfig, build_model
from talkingshapes.schedule import make_linear_schedule
from talkingshapes.training import TrainConfig, load_checkpoint, save_checkpoint, train

TINY_RES = 16
TINY_FRAMES = 12
TINY_MODEL = DenoiserConfig(base_width=16, attention_head_dim=16, max_frames=12)
TINY_TRAIN = TrainConfig(steps=400, batch_size=4, window=6, lr=3e-4, seed=5)


def cache_dir() -> Path | None:
    root = os.environ.get("TALKINGSHAPES_TEST_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def sched():
    return make_linear_schedule()


@pytest.fixture(scope="session")
def tiny_clips():
    return world.generate_dataset(6, seed=11, frames=TINY_FRAMES, res=TINY_RES)


@pytest.fixture(scope="session")
def tiny_trained(tiny_clips, sched):
    """A small denoiser trained briefly on the miniature world (EMA weights)."""
    cache = cache_dir()
    ckpt = cache / "tiny_trained.ten" if cache else None
    if ckpt is not None and ckpt.exists():
        return load_checkpoint(ckpt).ema_model
    model = build_model(TINY_MODEL, seed=5)
    result = train(model, tiny_clips, sched, TINY_TRAIN)
    if ckpt is not None:
        save_checkpoint(ckpt, result, TINY_TRAIN)
    return result.ema_model

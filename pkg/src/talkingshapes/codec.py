"""Latent codecs mapping pixel clips to diffusion latents and back.

The diffusion model operates on latents shaped [frames, channels, H, W].
At this scale the codec is an exact affine map between [0, 1] pixels and
[-1, 1] latents; the protocol exists so a learned autoencoder could be
swapped in without touching the pipeline.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from .errors import ValidationError


@runtime_checkable
class LatentCodec(Protocol):
    latent_channels: int

    def encode(self, frames: np.ndarray) -> np.ndarray: ...

    def decode(self, latents: np.ndarray) -> np.ndarray: ...


class PixelCodec:
    """Affine pixel codec: encode is 2x - 1, decode clips back into [0, 1]."""

    latent_channels = 3

    def encode(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.shape[-3] != 3:
            raise ValidationError(f"expected RGB channel axis of 3, got shape {frames.shape}")
        return (frames.astype(np.float32) * 2.0 - 1.0).astype(np.float32)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents)
        if latents.shape[-3] != self.latent_channels:
            raise ValidationError(f"expected {self.latent_channels} channels, got {latents.shape}")
        return np.clip((latents.astype(np.float32) + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)

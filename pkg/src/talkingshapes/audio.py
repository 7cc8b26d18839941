"""Waveform utilities and the envelope features the denoiser consumes.

Audio is a mono float waveform in [-1, 1]. Each video frame owns a
contiguous window of sample_rate / fps samples; the window is summarized by
D envelope statistics (mean absolute amplitude over D equal sub-windows).
The normalized per-frame envelope doubles as the ground-truth mouth aperture
of the synthetic world, so lip sync can be scored exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile

from .errors import ValidationError


def samples_per_frame(sample_rate: int, fps: int) -> int:
    if sample_rate <= 0 or fps <= 0:
        raise ValidationError(f"sample_rate and fps must be positive, got {sample_rate}, {fps}")
    if sample_rate % fps != 0:
        raise ValidationError(f"sample_rate {sample_rate} not divisible by fps {fps}")
    return sample_rate // fps


def encode_audio(window: np.ndarray, feature_dim: int = 8) -> np.ndarray:
    """Envelope features of one frame's sample window.

    Splits the window into feature_dim equal spans (integer boundaries) and
    returns the mean absolute amplitude of each, as float32.
    """
    window = np.asarray(window)
    if window.ndim != 1:
        raise ValidationError(f"audio window must be 1-d, got shape {window.shape}")
    if len(window) < feature_dim:
        raise ValidationError(
            f"window of {len(window)} samples too short for {feature_dim} features"
        )
    bounds = (np.arange(feature_dim + 1) * len(window)) // feature_dim
    mags = np.abs(window.astype(np.float64))
    feats = np.array(
        [mags[bounds[i] : bounds[i + 1]].mean() for i in range(feature_dim)],
        dtype=np.float32,
    )
    return feats


def waveform_features(
    waveform: np.ndarray, frames: int, fps: int, sample_rate: int, feature_dim: int = 8
) -> np.ndarray:
    """Per-frame envelope features, shape [frames, feature_dim]."""
    spf = samples_per_frame(sample_rate, fps)
    waveform = np.asarray(waveform)
    if waveform.ndim != 1 or len(waveform) != frames * spf:
        raise ValidationError(
            f"waveform must have {frames * spf} samples for {frames} frames, "
            f"got shape {waveform.shape}"
        )
    return np.stack(
        [encode_audio(waveform[f * spf : (f + 1) * spf], feature_dim) for f in range(frames)]
    )


def aperture_envelope(
    waveform: np.ndarray, frames: int, fps: int, sample_rate: int
) -> np.ndarray:
    """Normalized per-frame loudness driving the mouth, in [0, 1].

    Mean absolute amplitude per frame, smoothed with a (0.25, 0.5, 0.25)
    kernel under edge replication, then divided by the maximum. All-silent
    input maps to all zeros.
    """
    spf = samples_per_frame(sample_rate, fps)
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or len(waveform) != frames * spf:
        raise ValidationError(
            f"waveform must have {frames * spf} samples, got shape {waveform.shape}"
        )
    env = np.abs(waveform).reshape(frames, spf).mean(axis=1)
    padded = np.concatenate([env[:1], env, env[-1:]])
    smooth = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    peak = smooth.max()
    if peak < 1e-8:
        return np.zeros(frames)
    return smooth / peak


def load_wav(path, target_rate: int) -> np.ndarray:
    """Load a mono PCM16 or float32 WAV, resampling linearly to target_rate."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise ValidationError(f"{path}: not a readable WAV file ({exc})") from exc
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        wave = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        wave = data.astype(np.float64)
    else:
        raise ValidationError(f"{path}: unsupported sample format {data.dtype}")
    if rate != target_rate:
        n_out = int(round(len(wave) * target_rate / rate))
        t_in = np.arange(len(wave)) / rate
        t_out = np.arange(n_out) / target_rate
        wave = np.interp(t_out, t_in, wave)
    return wave.astype(np.float32)


def save_wav(path, waveform: np.ndarray, sample_rate: int) -> None:
    wavfile.write(path, sample_rate, np.asarray(waveform, dtype=np.float32))


def fit_length(waveform: np.ndarray, n_samples: int) -> np.ndarray:
    """Trim or zero-pad a waveform to exactly n_samples."""
    waveform = np.asarray(waveform, dtype=np.float32)
    if len(waveform) >= n_samples:
        return waveform[:n_samples]
    return np.concatenate([waveform, np.zeros(n_samples - len(waveform), dtype=np.float32)])
